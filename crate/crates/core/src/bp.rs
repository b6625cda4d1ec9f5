//! Log-domain belief propagation on the pairwise binary MRF.
//!
//! Two message rules share one synchronous (flooding) schedule:
//!
//! * exact: `m_{k→j} = S(J_kj, γ_k + Σ_{n∈N_k∖j} m_{n→k}) + ν_{k→j}`
//! * linear: `m_{k→j} = c_jk (γ_k + Σ_{n∈N_k∖j} m_{n→k}) + ν_{k→j}`
//!
//! Messages start at zero. The caller supplies local statistics that
//! already carry their likelihood error; message errors are drawn fresh
//! for every edge at every iteration through a [`MessageNoise`].

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::CalibratedErrorSampler;
use crate::graph::{coefficient_from_coupling, CoefficientMatrix, CouplingSet, Topology};

fn logaddexp(x: f64, y: f64) -> f64 {
    let m = x.max(y);
    m + (-(x - y).abs()).exp().ln_1p()
}

/// `S(a, b) = ln[(1 + e^{a+b}) / (e^a + e^b)]`, evaluated as
/// `logaddexp(0, a + b) − logaddexp(a, b)`.
pub fn s_transform(a: f64, b: f64) -> f64 {
    logaddexp(0.0, a + b) - logaddexp(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpMode {
    Exact,
    Linear,
}

/// Per-directed-edge parameters of a message rule.
#[derive(Debug, Clone, PartialEq)]
pub enum MessageRule {
    /// Coupling `J` of each directed edge.
    Exact(Vec<f64>),
    /// Coefficient `c_jk` of each directed edge `k → j`.
    Linear(Vec<f64>),
}

impl MessageRule {
    pub fn exact(topology: &Topology, couplings: &CouplingSet) -> Self {
        Self::Exact(
            topology
                .directed_edges()
                .iter()
                .map(|e| couplings.coupling(topology.edge_index(e.from, e.to).expect("edge")))
                .collect(),
        )
    }

    pub fn linear(topology: &Topology, c: &CoefficientMatrix) -> Self {
        Self::Linear(topology.directed_edges().iter().map(|e| c.get(e.to, e.from)).collect())
    }

    /// Linear rule with `c = tanh(J/2)` from the couplings.
    pub fn linearized(topology: &Topology, couplings: &CouplingSet) -> Self {
        match Self::exact(topology, couplings) {
            Self::Exact(j) => Self::Linear(j.into_iter().map(coefficient_from_coupling).collect()),
            Self::Linear(_) => unreachable!(),
        }
    }

    pub fn for_mode(mode: BpMode, topology: &Topology, couplings: &CouplingSet) -> Self {
        match mode {
            BpMode::Exact => Self::exact(topology, couplings),
            BpMode::Linear => Self::linearized(topology, couplings),
        }
    }

    pub fn mode(&self) -> BpMode {
        match self {
            Self::Exact(_) => BpMode::Exact,
            Self::Linear(_) => BpMode::Linear,
        }
    }

    #[inline]
    fn apply(&self, edge: usize, b: f64) -> f64 {
        match self {
            Self::Exact(j) => s_transform(j[edge], b),
            Self::Linear(c) => c[edge] * b,
        }
    }
}

/// Source of message errors, queried once per directed edge per iteration.
pub trait MessageNoise {
    fn draw(&mut self, edge: usize) -> f64;
}

/// Error-free messages.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMessageErrors;

impl MessageNoise for NoMessageErrors {
    fn draw(&mut self, _edge: usize) -> f64 {
        0.0
    }
}

/// Gaussian message errors from a calibrated sampler.
pub struct SampledMessageErrors<'a, R: Rng + ?Sized> {
    pub sampler: &'a CalibratedErrorSampler,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> MessageNoise for SampledMessageErrors<'_, R> {
    fn draw(&mut self, edge: usize) -> f64 {
        self.sampler.sample_me(edge, self.rng)
    }
}

/// How the averaged (ABP) messages are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "window")]
pub enum Averaging {
    Off,
    /// Mean of the last `L + 1` messages; all available ones during warm-up.
    Window(usize),
    /// Mean of every message since the first iteration.
    All,
}

/// Directed-edge messages after some number of iterations, plus the
/// running sums the averaged decision needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    messages: Vec<f64>,
    next: Vec<f64>,
    iteration: usize,
    averaging: Averaging,
    sum: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    last_change: f64,
}

impl MessageState {
    pub fn new(topology: &Topology, averaging: Averaging) -> Self {
        let m = topology.directed_count();
        Self {
            messages: vec![0.0; m],
            next: vec![0.0; m],
            iteration: 0,
            averaging,
            sum: vec![0.0; m],
            history: VecDeque::new(),
            last_change: f64::INFINITY,
        }
    }

    pub fn messages(&self) -> &[f64] {
        &self.messages
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn averaging(&self) -> Averaging {
        self.averaging
    }

    /// Largest `|m^(l) − m^(l−1)|` over directed edges in the last update.
    pub fn last_change(&self) -> f64 {
        self.last_change
    }

    /// Number of iterations currently inside the averaging window.
    fn window_len(&self) -> usize {
        match self.averaging {
            Averaging::Off => 1,
            Averaging::All => self.iteration,
            Averaging::Window(l) => self.iteration.min(l + 1),
        }
    }

    /// Averaged messages `m̄`; the current messages when averaging is off.
    pub fn averaged_messages(&self) -> Vec<f64> {
        match self.averaging {
            Averaging::Off => self.messages.clone(),
            _ if self.iteration == 0 => vec![0.0; self.messages.len()],
            _ => {
                let n = self.window_len() as f64;
                self.sum.iter().map(|s| s / n).collect()
            }
        }
    }

    fn commit(&mut self) {
        self.last_change = self
            .messages
            .iter()
            .zip(&self.next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut self.messages, &mut self.next);
        self.iteration += 1;
        match self.averaging {
            Averaging::Off => {}
            Averaging::All => self.sum.iter_mut().zip(&self.messages).for_each(|(s, m)| *s += m),
            Averaging::Window(l) => {
                self.history.push_back(self.messages.clone());
                if self.history.len() > l + 1 {
                    self.history.pop_front();
                }
                // Re-summing the short window keeps the average exact.
                self.sum.iter_mut().for_each(|s| *s = 0.0);
                for past in &self.history {
                    self.sum.iter_mut().zip(past).for_each(|(s, m)| *s += m);
                }
            }
        }
    }
}

/// One synchronous update of every directed message.
pub fn iterate<N: MessageNoise + ?Sized>(
    topology: &Topology,
    rule: &MessageRule,
    state: &mut MessageState,
    llrs: &[f64],
    noise: &mut N,
) {
    for (id, e) in topology.directed_edges().iter().enumerate() {
        let b = llrs[e.from] + topology.upstream(id).iter().map(|&u| state.messages[u]).sum::<f64>();
        state.next[id] = rule.apply(id, b) + noise.draw(id);
    }
    state.commit();
}

pub fn iterate_exact<N: MessageNoise + ?Sized>(
    topology: &Topology,
    state: &mut MessageState,
    llrs: &[f64],
    couplings: &CouplingSet,
    noise: &mut N,
) {
    iterate(topology, &MessageRule::exact(topology, couplings), state, llrs, noise);
}

pub fn iterate_linear<N: MessageNoise + ?Sized>(
    topology: &Topology,
    state: &mut MessageState,
    llrs: &[f64],
    c: &CoefficientMatrix,
    noise: &mut N,
) {
    iterate(topology, &MessageRule::linear(topology, c), state, llrs, noise);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionVariant {
    Plain,
    Weighted,
    Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVariables {
    pub values: Vec<f64>,
    pub variant: DecisionVariant,
    pub iteration: usize,
}

/// Weights `w_jk` on incoming messages, stored per directed edge `k → j`.
/// The self weight `w_jj` is always one.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionWeights {
    per_edge: Vec<f64>,
}

impl DecisionWeights {
    pub fn ones(topology: &Topology) -> Self {
        Self {
            per_edge: vec![1.0; topology.directed_count()],
        }
    }

    /// From per-node vectors over the closed neighborhood (self first). Each
    /// vector is divided by its self entry so that `w_jj = 1`.
    pub fn from_neighborhoods(topology: &Topology, vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.len() != topology.node_count() {
            return Err(Error::Dimension(format!(
                "{} weight vectors for {} nodes",
                vectors.len(),
                topology.node_count()
            )));
        }
        let mut per_edge = vec![0.0; topology.directed_count()];
        for (j, w) in vectors.iter().enumerate() {
            if w.len() != topology.degree(j) + 1 {
                return Err(Error::Dimension(format!(
                    "node {j}: {} weights for a neighborhood of {}",
                    w.len(),
                    topology.degree(j) + 1
                )));
            }
            if w[0] == 0.0 || !w[0].is_finite() {
                return Err(Error::NonFinite("self weight"));
            }
            for (&k, &wk) in topology.neighbors(j).iter().zip(&w[1..]) {
                per_edge[topology.directed_index(k, j).expect("neighbor edge")] = wk / w[0];
            }
        }
        Ok(Self { per_edge })
    }

    pub fn per_edge(&self) -> &[f64] {
        &self.per_edge
    }

    /// Weights of node `j` over its closed neighborhood, self first.
    pub fn neighborhood(&self, topology: &Topology, j: usize) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(
                topology
                    .neighbors(j)
                    .iter()
                    .map(|&k| self.per_edge[topology.directed_index(k, j).expect("neighbor edge")]),
            )
            .collect()
    }
}

fn combine(topology: &Topology, messages: &[f64], llrs: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    (0..topology.node_count())
        .map(|j| {
            llrs[j]
                + topology
                    .incoming(j)
                    .iter()
                    .map(|&e| weights.map_or(1.0, |w| w[e]) * messages[e])
                    .sum::<f64>()
        })
        .collect()
}

/// `λ_j = γ_j + Σ_k m_{k→j}`.
pub fn decision_variables(topology: &Topology, state: &MessageState, llrs: &[f64]) -> DecisionVariables {
    DecisionVariables {
        values: combine(topology, &state.messages, llrs, None),
        variant: DecisionVariant::Plain,
        iteration: state.iteration,
    }
}

/// `λ̂_j = γ_j + Σ_k w_jk m_{k→j}`.
pub fn weighted_decision(
    topology: &Topology,
    state: &MessageState,
    llrs: &[f64],
    weights: &DecisionWeights,
) -> Result<DecisionVariables> {
    if weights.per_edge.len() != topology.directed_count() {
        return Err(Error::Dimension(format!(
            "{} decision weights for {} directed edges",
            weights.per_edge.len(),
            topology.directed_count()
        )));
    }
    Ok(DecisionVariables {
        values: combine(topology, &state.messages, llrs, Some(&weights.per_edge)),
        variant: DecisionVariant::Weighted,
        iteration: state.iteration,
    })
}

/// `λ̄_j = γ_j + Σ_k w_jk m̄_{k→j}` with `m̄` the windowed message average.
pub fn abp_decision(
    topology: &Topology,
    state: &MessageState,
    llrs: &[f64],
    weights: Option<&DecisionWeights>,
) -> DecisionVariables {
    let averaged = state.averaged_messages();
    DecisionVariables {
        values: combine(topology, &averaged, llrs, weights.map(|w| w.per_edge.as_slice())),
        variant: DecisionVariant::Averaged,
        iteration: state.iteration,
    }
}

/// Runs error-free BP until the largest message change falls below
/// `tolerance`, returning the fixed-point decision variables.
pub fn fixed_point(
    topology: &Topology,
    rule: &MessageRule,
    llrs: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<f64>> {
    let mut state = MessageState::new(topology, Averaging::Off);
    if topology.directed_count() == 0 {
        return Ok(llrs.to_vec());
    }
    for _ in 0..max_iterations {
        iterate(topology, rule, &mut state, llrs, &mut NoMessageErrors);
        if state.last_change() < tolerance {
            return Ok(decision_variables(topology, &state, llrs).values);
        }
    }
    Err(Error::Divergent(state.last_change()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_coefficient_matrix, coupling_from_coefficient};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn s_transform_examples() {
        for b in [-5.0, 0.0, 3.0] {
            assert_eq!(s_transform(0.0, b), 0.0);
            assert_abs_diff_eq!(s_transform(b, 0.0), 0.0, epsilon = 1e-15);
        }
        let direct = (1.0 + 3f64.exp()).ln() - (1f64.exp() + 2f64.exp()).ln();
        assert_abs_diff_eq!(s_transform(1.0, 2.0), direct, epsilon = 1e-14);
        assert_abs_diff_eq!(s_transform(1.0, 2.0), 0.7354, epsilon = 1e-4);
        assert_abs_diff_eq!(s_transform(1.0, 1000.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s_transform(1.0, -1000.0), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_couplings_pass_only_noise() {
        let t = Topology::fig1();
        let couplings = CouplingSet::uniform(&t, 0.0);
        let sampler = CalibratedErrorSampler::from_variances(vec![0.0; 5], vec![1.0; 12], vec![1.0; 5]).unwrap();
        let llrs = [1.0, -2.0, 0.5, 3.0, 0.0];
        let mut state = MessageState::new(&t, Averaging::Off);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noise = SampledMessageErrors {
            sampler: &sampler,
            rng: &mut rng,
        };
        iterate_exact(&t, &mut state, &llrs, &couplings, &mut noise);
        let mut replay = ChaCha8Rng::seed_from_u64(3);
        for (id, m) in state.messages().iter().enumerate() {
            assert_eq!(*m, sampler.sample_me(id, &mut replay));
        }

        let mut state = MessageState::new(&t, Averaging::Off);
        iterate_linear(
            &t,
            &mut state,
            &llrs,
            &CoefficientMatrix::zeros(5),
            &mut NoMessageErrors,
        );
        assert!(state.messages().iter().all(|m| *m == 0.0));
    }

    #[test]
    fn single_edge_exact_message() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let couplings = CouplingSet::uniform(&t, 0.8);
        let llrs = [1.3, -0.4];
        let mut state = MessageState::new(&t, Averaging::Off);
        let e01 = t.directed_index(0, 1).unwrap();
        for _ in 0..5 {
            iterate_exact(&t, &mut state, &llrs, &couplings, &mut NoMessageErrors);
            assert_eq!(state.messages()[e01], s_transform(0.8, 1.3));
        }
    }

    #[test]
    fn two_node_linear_fixed_point() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&t, DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])).unwrap();
        let llrs = [2.0, -3.0];
        let mut state = MessageState::new(&t, Averaging::Off);
        for _ in 0..3 {
            iterate_linear(&t, &mut state, &llrs, &c, &mut NoMessageErrors);
        }
        assert_eq!(state.messages()[t.directed_index(0, 1).unwrap()], 1.0);
        assert_eq!(state.messages()[t.directed_index(1, 0).unwrap()], -1.5);

        let w = DecisionWeights::from_neighborhoods(&t, &[vec![1.0, 0.5], vec![1.0, 1.0]]).unwrap();
        let lam = weighted_decision(&t, &state, &llrs, &w).unwrap();
        assert_eq!(lam.values[0], 2.0 + 0.5 * -1.5);
    }

    #[test]
    fn exact_bp_converges_on_fig1() {
        let t = Topology::fig1();
        let couplings = CouplingSet::uniform(&t, 0.4);
        let llrs = [0.3, -1.2, 2.0, 0.1, -0.7];
        let mut state = MessageState::new(&t, Averaging::Off);
        for _ in 0..50 {
            iterate_exact(&t, &mut state, &llrs, &couplings, &mut NoMessageErrors);
        }
        assert!(state.last_change() < 1e-6);
    }

    #[test]
    fn linear_bp_contracts_monotonically() {
        let t = Topology::fig1();
        let rule = MessageRule::linearized(&t, &CouplingSet::uniform(&t, 0.4));
        let llrs = [1.1, -0.2, 0.4, 2.5, -1.0];
        let mut state = MessageState::new(&t, Averaging::Off);
        let mut previous = f64::INFINITY;
        for l in 1..=200 {
            iterate(&t, &rule, &mut state, &llrs, &mut NoMessageErrors);
            if l > 2 {
                assert!(state.last_change() <= previous + 1e-15, "iteration {l}");
            }
            previous = state.last_change();
        }
        assert!(previous < 1e-8);
    }

    #[test]
    fn decisions_without_messages() {
        let t = Topology::new(3, [(0, 1)]).unwrap();
        let llrs = [0.2, 0.4, -0.9];
        let state = MessageState::new(&t, Averaging::Off);
        assert_eq!(decision_variables(&t, &state, &llrs).values, llrs.to_vec());

        let rule = MessageRule::linearized(&t, &CouplingSet::uniform(&t, 1.0));
        let mut state = MessageState::new(&t, Averaging::Off);
        for _ in 0..4 {
            iterate(&t, &rule, &mut state, &llrs, &mut NoMessageErrors);
        }
        // Node 2 is isolated.
        assert_eq!(decision_variables(&t, &state, &llrs).values[2], -0.9);

        let ones = DecisionWeights::ones(&t);
        assert_eq!(
            weighted_decision(&t, &state, &llrs, &ones).unwrap().values,
            decision_variables(&t, &state, &llrs).values
        );
        let zeros = DecisionWeights::from_neighborhoods(&t, &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0]]).unwrap();
        assert_eq!(
            weighted_decision(&t, &state, &llrs, &zeros).unwrap().values,
            llrs.to_vec()
        );
        assert!(DecisionWeights::from_neighborhoods(&t, &[vec![1.0], vec![1.0, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn averaging_windows() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let rule = MessageRule::Linear(vec![0.5, 0.5]);
        let llrs = [1.0, 1.0];
        // Constant messages from the first iteration on: averaging is a no-op.
        let mut state = MessageState::new(&t, Averaging::Window(3));
        for _ in 0..6 {
            iterate(&t, &rule, &mut state, &llrs, &mut NoMessageErrors);
            let plain = decision_variables(&t, &state, &llrs).values;
            let avg = abp_decision(&t, &state, &llrs, None).values;
            assert_eq!(plain, avg);
        }

        // L = 0 is the current iteration.
        let sampler = CalibratedErrorSampler::from_variances(vec![0.0; 2], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = MessageState::new(&t, Averaging::Window(0));
        for _ in 0..5 {
            iterate(
                &t,
                &rule,
                &mut state,
                &llrs,
                &mut SampledMessageErrors {
                    sampler: &sampler,
                    rng: &mut rng,
                },
            );
            assert_eq!(
                abp_decision(&t, &state, &llrs, None).values,
                decision_variables(&t, &state, &llrs).values
            );
        }
    }

    #[test]
    fn window_average_matches_direct_mean() {
        let t = Topology::fig1();
        let rule = MessageRule::linearized(&t, &CouplingSet::uniform(&t, 0.4));
        let sampler = CalibratedErrorSampler::from_variances(vec![0.0; 5], vec![0.3; 12], vec![1.0; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let llrs = [0.5; 5];
        let mut state = MessageState::new(&t, Averaging::Window(2));
        let mut all = MessageState::new(&t, Averaging::All);
        let mut trail = Vec::new();
        for l in 1..=7 {
            let mut a = rng.clone();
            iterate(
                &t,
                &rule,
                &mut state,
                &llrs,
                &mut SampledMessageErrors {
                    sampler: &sampler,
                    rng: &mut a,
                },
            );
            iterate(
                &t,
                &rule,
                &mut all,
                &llrs,
                &mut SampledMessageErrors {
                    sampler: &sampler,
                    rng: &mut rng,
                },
            );
            trail.push(state.messages().to_vec());
            let window = &trail[trail.len().saturating_sub(3)..];
            let expected: Vec<f64> = (0..12)
                .map(|e| window.iter().map(|m| m[e]).sum::<f64>() / window.len() as f64)
                .collect();
            for (x, y) in state.averaged_messages().iter().zip(&expected) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
            let full: Vec<f64> = (0..12)
                .map(|e| trail.iter().map(|m| m[e]).sum::<f64>() / l as f64)
                .collect();
            for (x, y) in all.averaged_messages().iter().zip(&full) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn abp_variance_shrinks_with_window() {
        // ME only, L = 49 over 50 iterations: Var[λ̄ − λ*] ≈ tr Σ_ν / 50.
        let t = Topology::fig1();
        let rule = MessageRule::linearized(&t, &CouplingSet::uniform(&t, 0.4));
        let sampler = CalibratedErrorSampler::from_variances(vec![0.0; 5], vec![0.5; 12], vec![1.0; 5]).unwrap();
        let llrs = [0.4, -0.3, 1.0, 0.2, -0.8];
        let clean = fixed_point(&t, &rule, &llrs, 1e-12, 500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 4000;
        let mut sq = [0.0; 5];
        for _ in 0..trials {
            let mut state = MessageState::new(&t, Averaging::Window(49));
            for _ in 0..50 {
                iterate(
                    &t,
                    &rule,
                    &mut state,
                    &llrs,
                    &mut SampledMessageErrors {
                        sampler: &sampler,
                        rng: &mut rng,
                    },
                );
            }
            let lam = abp_decision(&t, &state, &llrs, None).values;
            for j in 0..5 {
                sq[j] += (lam[j] - clean[j]).powi(2);
            }
        }
        for j in 0..5 {
            let emp = sq[j] / trials as f64;
            let pred = sampler.incoming_me_variance(&t, j) / 50.0;
            assert!(emp / pred < 1.2 && pred / emp < 1.2, "node {j}: {emp} vs {pred}");
        }
    }

    #[test]
    fn coefficient_is_slope_of_s() {
        for j in [-2.0, -0.3, 0.0, 0.4, 1.7] {
            let h = 1e-6;
            let slope = (s_transform(j, h) - s_transform(j, -h)) / (2.0 * h);
            assert_abs_diff_eq!(slope, coefficient_from_coupling(j), epsilon = 1e-5);
        }
        assert_abs_diff_eq!(coupling_from_coefficient(0.5), 2.0 * 0.5f64.atanh());
    }

    #[test]
    fn linear_rule_from_matrix_uses_receiver_row() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&t, DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.7, 0.0])).unwrap();
        let rule = MessageRule::linear(&t, &c);
        // Edge 0 → 1 feeds node 1, so it uses c_10 = 0.7.
        assert_eq!(rule, MessageRule::Linear(vec![0.7, 0.2]));
        let sym = build_coefficient_matrix(&t, &CouplingSet::uniform(&t, 0.6)).unwrap();
        assert_eq!(
            MessageRule::linear(&t, &sym),
            MessageRule::linearized(&t, &CouplingSet::uniform(&t, 0.6))
        );
    }
}
