//! Analytical predictors and empirical error metrics.
//!
//! * MSE of erroneous decision variables for plain and averaging BP.
//! * The iterative bound on cumulative message-error strength.
//! * Detection and false-alarm rates in Gaussian and Gaussian-mixture form.
//! * Empirical DSNR and error SNRs in dB.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::bp::s_transform;
use crate::error::{Error, Result};
use crate::error_model::CalibratedErrorSampler;
use crate::graph::{CombiningMatrix, CouplingSet, Topology};
use crate::scenario::LocalStats;

/// Largest node count for which the MRF prior is enumerated.
pub const MAX_ENUMERATED_NODES: usize = 15;

/// Default ceiling for reported ratios in dB.
pub const DEFAULT_DB_CAP: f64 = 100.0;

/// Gaussian tail `Q(x) = P(Z > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse tail, `Q(q_inverse(p)) = p`, polished by Newton steps on `Q`.
pub fn q_inverse(p: f64) -> f64 {
    let mut x = std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    for _ in 0..2 {
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density == 0.0 {
            break;
        }
        x += (q_function(x) - p) / density;
    }
    x
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `E|ξ_j|² = a_jᵀ Σ_ε a_j + tr Σ_ν_j`.
pub fn predict_mse_bp(a_j: &DVector<f64>, sigma_eps: &DMatrix<f64>, sigma_nu: &DMatrix<f64>) -> Result<f64> {
    predict_mse_abp(a_j, sigma_eps, sigma_nu, 0)
}

/// `a_jᵀ Σ_ε a_j + tr Σ_ν_j / (L + 1)`.
pub fn predict_mse_abp(
    a_j: &DVector<f64>,
    sigma_eps: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    window: usize,
) -> Result<f64> {
    check_square(sigma_eps, a_j.len(), "LE covariance")?;
    if sigma_nu.nrows() != sigma_nu.ncols() {
        return Err(Error::Dimension("ME covariance is not square".into()));
    }
    Ok(a_j.dot(&(sigma_eps * a_j)) + sigma_nu.trace() / (window as f64 + 1.0))
}

/// Per-node predicted MSE split into its two sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePrediction {
    pub le_part: f64,
    pub me_part: f64,
    /// ABP window `L`; the ME part of the averaged prediction is divided by `L + 1`.
    pub window: usize,
}

impl MsePrediction {
    pub fn plain(&self) -> f64 {
        self.le_part + self.me_part
    }

    pub fn averaged(&self) -> f64 {
        self.le_part + self.me_part / (self.window as f64 + 1.0)
    }
}

/// MSE predictions for every node from a combining matrix and calibrated
/// error variances.
pub fn predict_network_mse(
    topology: &Topology,
    combining: &CombiningMatrix,
    sampler: &CalibratedErrorSampler,
    window: usize,
) -> Vec<MsePrediction> {
    let all: Vec<usize> = (0..topology.node_count()).collect();
    let sigma_eps = sampler.le_covariance(&all);
    (0..topology.node_count())
        .map(|j| {
            let a = combining.row(j);
            MsePrediction {
                le_part: a.dot(&(&sigma_eps * &a)),
                me_part: sampler.incoming_me_variance(topology, j),
                window,
            }
        })
        .collect()
}

/// Exact input-output map of `l` plain linear-BP iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResponse {
    /// `λ^(l) = A^(l) γ` in the absence of message errors.
    pub combining: CombiningMatrix,
    /// Variance of the message-error part of `λ_j^(l)`, including errors
    /// that propagated from upstream edges.
    pub me_variance: Vec<f64>,
}

/// Propagates the local statistics and per-edge message-error variances
/// through `iterations` linear-BP steps with per-edge coefficients and
/// decision weights (both indexed by directed edge).
pub fn linear_response(
    topology: &Topology,
    coefficients: &[f64],
    decision_weights: &[f64],
    me_variance: &[f64],
    iterations: usize,
) -> Result<LinearResponse> {
    let d = topology.directed_count();
    let n = topology.node_count();
    for (len, what) in [
        (coefficients.len(), "coefficients"),
        (decision_weights.len(), "decision weights"),
        (me_variance.len(), "ME variances"),
    ] {
        if len != d {
            return Err(Error::Dimension(format!("{len} {what} for {d} directed edges")));
        }
    }
    let mut step = DMatrix::zeros(d, d);
    let mut inject = DMatrix::zeros(d, n);
    for (id, e) in topology.directed_edges().iter().enumerate() {
        inject[(id, e.from)] = coefficients[id];
        for &u in topology.upstream(id) {
            step[(id, u)] = coefficients[id];
        }
    }
    let noise = DMatrix::from_diagonal(&DVector::from_column_slice(me_variance));
    let mut gain = DMatrix::<f64>::zeros(d, n);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for _ in 0..iterations {
        gain = &step * &gain + &inject;
        cov = &step * &cov * step.transpose() + &noise;
    }
    let mut readout = DMatrix::zeros(n, d);
    for j in 0..n {
        for &e in topology.incoming(j) {
            readout[(j, e)] = decision_weights[e];
        }
    }
    let combining = DMatrix::identity(n, n) + &readout * gain;
    let lambda_cov = &readout * cov * readout.transpose();
    Ok(LinearResponse {
        combining: CombiningMatrix::from_weights(combining),
        me_variance: lambda_cov.diagonal().iter().copied().collect(),
    })
}

/// Per-directed-edge inputs of the error-strength bound.
#[derive(Debug, Clone, PartialEq)]
pub struct IhlerBoundParams {
    /// `d(ψ)²` of the pairwise potential carried by each directed edge.
    pub dynamic_range_sq: Vec<f64>,
    /// `(ln u)²` of each directed edge.
    pub log_u_sq: Vec<f64>,
}

impl IhlerBoundParams {
    /// `d(ψ)² = e^{|J|}` for `ψ = e^{J x_k x_j}` over `{0, 1}²`, with the
    /// message-error magnitude set per edge.
    pub fn from_couplings(topology: &Topology, couplings: &CouplingSet, log_u_sq: Vec<f64>) -> Result<Self> {
        if log_u_sq.len() != topology.directed_count() {
            return Err(Error::Dimension(format!(
                "{} error magnitudes for {} directed edges",
                log_u_sq.len(),
                topology.directed_count()
            )));
        }
        let dynamic_range_sq = topology
            .directed_edges()
            .iter()
            .map(|e| {
                couplings
                    .coupling(topology.edge_index(e.from, e.to).expect("edge"))
                    .abs()
                    .exp()
            })
            .collect();
        Ok(Self {
            dynamic_range_sq,
            log_u_sq,
        })
    }
}

/// Bound on `E|λ̃_j^(l) − λ_j^*|²` for every node after `iterations ≥ 1`.
pub fn ihler_bound(topology: &Topology, params: &IhlerBoundParams, iterations: usize) -> Vec<f64> {
    ihler_bound_trajectory(topology, params, iterations)
        .pop()
        .unwrap_or_else(|| vec![0.0; topology.node_count()])
}

/// Bounds for iterations `1..=iterations`.
///
/// `σ^(1) = ln d²`, then
/// `σ_kj^(l+1)² = ln²[(d²ω + 1)/(d² + ω)] + (ln u)²` with
/// `ln ω = √(Σ_{n∈N_k∖j} σ_nk^(l)²)`. The log ratio equals `S(ln d², ln ω)`,
/// which keeps it finite for large `ω`.
pub fn ihler_bound_trajectory(topology: &Topology, params: &IhlerBoundParams, iterations: usize) -> Vec<Vec<f64>> {
    let mut sigma_sq: Vec<f64> = params.dynamic_range_sq.iter().map(|d| d.ln().powi(2)).collect();
    let mut out = Vec::with_capacity(iterations);
    for l in 1..=iterations {
        if l > 1 {
            sigma_sq = (0..topology.directed_count())
                .map(|id| {
                    let log_omega = topology.upstream(id).iter().map(|&u| sigma_sq[u]).sum::<f64>().sqrt();
                    s_transform(params.dynamic_range_sq[id].ln(), log_omega).powi(2) + params.log_u_sq[id]
                })
                .collect();
        }
        out.push(
            (0..topology.node_count())
                .map(|j| topology.incoming(j).iter().map(|&e| sigma_sq[e]).sum())
                .collect(),
        );
    }
    out
}

/// `10·log₁₀(signal / error)`, capped when the error power vanishes.
pub fn ratio_db(signal_power: f64, error_power: f64, cap: f64) -> (f64, bool) {
    if error_power <= 0.0 {
        return (cap, true);
    }
    let db = 10.0 * (signal_power / error_power).log10();
    if db > cap {
        (cap, true)
    } else {
        (db, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsnrReport {
    pub per_node_db: Vec<f64>,
    /// Mean of the per-node linear ratios, in dB.
    pub average_db: f64,
    pub capped: Vec<bool>,
    pub samples: usize,
}

/// Running second moments of paired clean and erroneous samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DsnrAccumulator {
    signal: Vec<f64>,
    error: Vec<f64>,
    error_sq: Vec<f64>,
    samples: usize,
}

impl DsnrAccumulator {
    pub fn new(nodes: usize) -> Self {
        Self {
            signal: vec![0.0; nodes],
            error: vec![0.0; nodes],
            error_sq: vec![0.0; nodes],
            samples: 0,
        }
    }

    pub fn push(&mut self, clean: &[f64], dirty: &[f64]) {
        for (j, (c, d)) in clean.iter().zip(dirty).enumerate() {
            let e2 = (d - c) * (d - c);
            self.signal[j] += c * c;
            self.error[j] += e2;
            self.error_sq[j] += e2 * e2;
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for j in 0..self.signal.len() {
            self.signal[j] += other.signal[j];
            self.error[j] += other.error[j];
            self.error_sq[j] += other.error_sq[j];
        }
        self.samples += other.samples;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn signal_power(&self) -> Vec<f64> {
        self.signal.iter().map(|s| s / self.samples as f64).collect()
    }

    pub fn error_power(&self) -> Vec<f64> {
        self.error.iter().map(|s| s / self.samples as f64).collect()
    }

    /// Standard error of each per-node error power.
    pub fn error_power_se(&self) -> Vec<f64> {
        let n = self.samples as f64;
        self.error
            .iter()
            .zip(&self.error_sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0) / n).sqrt())
            .collect()
    }

    pub fn report(&self, cap: f64) -> DsnrReport {
        dsnr_from_powers(&self.signal_power(), &self.error_power(), self.samples, cap)
    }
}

/// DSNR report from per-node powers.
pub fn dsnr_from_powers(signal: &[f64], error: &[f64], samples: usize, cap: f64) -> DsnrReport {
    let (per_node_db, capped): (Vec<f64>, Vec<bool>) =
        signal.iter().zip(error).map(|(s, e)| ratio_db(*s, *e, cap)).unzip();
    let mean_linear = per_node_db.iter().map(|db| 10f64.powf(db / 10.0)).sum::<f64>() / per_node_db.len().max(1) as f64;
    DsnrReport {
        average_db: (10.0 * mean_linear.log10()).min(cap),
        per_node_db,
        capped,
        samples,
    }
}

/// `ρ_D = E|λ|² / E|λ̃ − λ|²` per node from paired samples.
pub fn empirical_dsnr(clean: &[Vec<f64>], dirty: &[Vec<f64>], cap: f64) -> Result<DsnrReport> {
    if clean.len() != dirty.len() {
        return Err(Error::Dimension(format!(
            "{} clean vs {} erroneous samples",
            clean.len(),
            dirty.len()
        )));
    }
    if clean.is_empty() {
        return Err(Error::Empty("DSNR samples"));
    }
    let mut acc = DsnrAccumulator::new(clean[0].len());
    for (c, d) in clean.iter().zip(dirty) {
        if c.len() != d.len() {
            return Err(Error::Dimension("ragged DSNR samples".into()));
        }
        acc.push(c, d);
    }
    Ok(acc.report(cap))
}

/// Mean and variance of `λ̂ = Σ w_i c_i (γ_i + ε_i) + Σ w_k ν_k` under one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Conditional moments of the linear statistic with `v = w ∘ c` under
/// both labels.
pub fn linear_statistic_moments(
    c: &[f64],
    w: &[f64],
    stats: &LocalStats,
    sigma_eps: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
) -> Result<[GaussianMoments; 2]> {
    let m = stats.dim();
    if c.len() != m || w.len() != m {
        return Err(Error::Dimension(format!(
            "weights of length {} and {} for a neighborhood of {m}",
            c.len(),
            w.len()
        )));
    }
    check_square(sigma_eps, m, "LE covariance")?;
    check_square(sigma_nu, m, "ME covariance")?;
    let w = DVector::from_column_slice(w);
    let v = w.component_mul(&DVector::from_column_slice(c));
    let me = w.dot(&(sigma_nu * &w));
    let moments = |label| {
        let (mean, cov) = stats.moments(label);
        GaussianMoments {
            mean: v.dot(mean),
            variance: v.dot(&((cov + sigma_eps) * &v)) + me,
        }
    };
    Ok([moments(false), moments(true)])
}

/// `(P_f, P_d)` of `λ̂ > τ` when `λ̂` is Gaussian under each label.
pub fn closed_form_rates(
    tau: f64,
    c: &[f64],
    w: &[f64],
    stats: &LocalStats,
    sigma_eps: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let [h0, h1] = linear_statistic_moments(c, w, stats, sigma_eps, sigma_nu)?;
    Ok((gaussian_tail(tau, h0)?, gaussian_tail(tau, h1)?))
}

fn gaussian_tail(tau: f64, m: GaussianMoments) -> Result<f64> {
    if m.variance > 0.0 {
        Ok(q_function((tau - m.mean) / m.variance.sqrt()))
    } else if m.variance == 0.0 {
        Ok(if m.mean > tau { 1.0 } else { 0.0 })
    } else {
        Err(Error::NonPositiveVariance(m.variance))
    }
}

/// One joint configuration of the network with its probability and the
/// exact per-node moments of the local statistics under it. Local
/// statistics are independent across nodes given the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub prob: f64,
    pub states: Vec<bool>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Components from the MRF prior `p(x) ∝ exp(Σ θ_n x_n + Σ J_kj x_k x_j)`,
/// with `node_moments[n][b] = (mean, variance)` of `γ_n` given `x_n = b`.
pub fn mrf_mixture(
    topology: &Topology,
    couplings: &CouplingSet,
    node_moments: &[[(f64, f64); 2]],
) -> Result<Vec<MixtureComponent>> {
    let n = topology.node_count();
    if n > MAX_ENUMERATED_NODES {
        return Err(Error::EnumerationTooLarge(n, MAX_ENUMERATED_NODES));
    }
    if node_moments.len() != n {
        return Err(Error::Dimension(format!(
            "{} moment pairs for {n} nodes",
            node_moments.len()
        )));
    }
    let log_weights: Vec<f64> = (0..1u32 << n)
        .map(|mask| {
            let on = |i: usize| mask >> i & 1 == 1;
            let field: f64 = (0..n).filter(|&i| on(i)).map(|i| couplings.theta()[i]).sum();
            let pair: f64 = topology
                .edges()
                .iter()
                .enumerate()
                .filter(|(_, (a, b))| on(*a) && on(*b))
                .map(|(e, _)| couplings.coupling(e))
                .sum();
            field + pair
        })
        .collect();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    Ok(log_weights
        .iter()
        .enumerate()
        .map(|(mask, w)| {
            let states: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let (means, variances) = states.iter().zip(node_moments).map(|(&b, m)| m[b as usize]).unzip();
            MixtureComponent {
                prob: (w - max).exp() / z,
                states,
                means,
                variances,
            }
        })
        .collect())
}

fn mixture_tail(
    tau: f64,
    j: usize,
    label: bool,
    a_j: &[f64],
    extra_variance: f64,
    components: &[MixtureComponent],
) -> Result<f64> {
    let mut mass = 0.0;
    let mut tail = 0.0;
    for comp in components.iter().filter(|c| c.states[j] == label) {
        let mean: f64 = a_j.iter().zip(&comp.means).map(|(a, m)| a * m).sum();
        let var: f64 = a_j.iter().zip(&comp.variances).map(|(a, v)| a * a * v).sum::<f64>() + extra_variance;
        mass += comp.prob;
        tail += comp.prob * gaussian_tail(tau, GaussianMoments { mean, variance: var })?;
    }
    if mass <= 0.0 {
        return Err(Error::InsufficientSamples {
            label: label as u8,
            got: 0,
            need: 1,
        });
    }
    Ok(tail / mass)
}

/// `(P_f, P_d)` of `λ_j = Σ_i a_ji γ_i + ξ_j > τ` under a Gaussian mixture
/// over network configurations, with `ξ_j` zero-mean Gaussian of variance
/// `extra_variance` (likelihood and message errors).
pub fn mixture_rates(
    tau: f64,
    j: usize,
    a_j: &[f64],
    extra_variance: f64,
    components: &[MixtureComponent],
) -> Result<(f64, f64)> {
    if let Some(c) = components
        .iter()
        .find(|c| c.means.len() != a_j.len() || c.states.len() != a_j.len())
    {
        return Err(Error::Dimension(format!(
            "mixture component over {} nodes vs {} weights",
            c.means.len(),
            a_j.len()
        )));
    }
    Ok((
        mixture_tail(tau, j, false, a_j, extra_variance, components)?,
        mixture_tail(tau, j, true, a_j, extra_variance, components)?,
    ))
}

/// Threshold at which the mixture false-alarm rate equals `alpha`.
pub fn mixture_threshold(
    alpha: f64,
    j: usize,
    a_j: &[f64],
    extra_variance: f64,
    components: &[MixtureComponent],
) -> Result<f64> {
    let pf = |tau| mixture_tail(tau, j, false, a_j, extra_variance, components);
    let (mut lo, mut hi) = (-1.0, 1.0);
    while pf(lo)? < alpha {
        lo *= 2.0;
    }
    while pf(hi)? > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pf(mid)? > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn q_round_trip() {
        assert_abs_diff_eq!(q_function(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(q_inverse(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q_function(1.0), 0.158_655_253_931_457, epsilon = 1e-14);
        for p in [1e-6, 0.01, 0.1, 0.3, 0.9] {
            assert_abs_diff_eq!(q_function(q_inverse(p)), p, epsilon = 1e-15);
        }
    }

    #[test]
    fn mse_examples() {
        let a = DVector::from_vec(vec![1.0, 0.5]);
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(predict_mse_bp(&a, &zero, &zero).unwrap(), 0.0);
        let eps = DMatrix::identity(2, 2) * 0.04;
        let nu = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.01]));
        assert_abs_diff_eq!(predict_mse_bp(&a, &eps, &nu).unwrap(), 0.06, epsilon = 1e-15);
        assert_eq!(
            predict_mse_abp(&a, &eps, &nu, 0).unwrap(),
            predict_mse_bp(&a, &eps, &nu).unwrap()
        );

        // LE part 0.05 and tr Σ_ν 0.01 with L = 9.
        let a = DVector::from_vec(vec![1.0]);
        let eps = DMatrix::from_element(1, 1, 0.05);
        let nu = DMatrix::from_element(1, 1, 0.01);
        assert_abs_diff_eq!(predict_mse_abp(&a, &eps, &nu, 9).unwrap(), 0.051, epsilon = 1e-15);
        assert_abs_diff_eq!(
            predict_mse_abp(&a, &eps, &nu, 1_000_000_000).unwrap(),
            0.05,
            epsilon = 1e-9
        );
        assert!(predict_mse_bp(&a, &DMatrix::zeros(2, 2), &nu).is_err());
    }

    #[test]
    fn ihler_examples() {
        let t = Topology::fig1();
        let flat = IhlerBoundParams::from_couplings(&t, &CouplingSet::uniform(&t, 0.0), vec![0.0; 12]).unwrap();
        for bound in ihler_bound_trajectory(&t, &flat, 10) {
            assert!(bound.iter().all(|b| *b == 0.0));
        }

        let leaf = Topology::new(2, [(0, 1)]).unwrap();
        let params = IhlerBoundParams::from_couplings(&leaf, &CouplingSet::uniform(&leaf, 0.7), vec![0.01; 2]).unwrap();
        assert_abs_diff_eq!(ihler_bound(&leaf, &params, 2)[1], 0.01, epsilon = 1e-15);

        let params = IhlerBoundParams::from_couplings(&leaf, &CouplingSet::uniform(&leaf, 1.0), vec![0.3; 2]).unwrap();
        assert_abs_diff_eq!(params.dynamic_range_sq[0], std::f64::consts::E);
        assert_abs_diff_eq!(ihler_bound(&leaf, &params, 1)[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ihler_recursion_by_hand() {
        // Chain 0 - 1 - 2; edge 1 → 2 has upstream 0 → 1.
        let t = Topology::new(3, [(0, 1), (1, 2)]).unwrap();
        let params = IhlerBoundParams::from_couplings(&t, &CouplingSet::uniform(&t, 1.0), vec![0.04; 4]).unwrap();
        let d2 = std::f64::consts::E;
        let omega = 1f64.exp();
        let sigma12_sq = ((d2 * omega + 1.0) / (d2 + omega)).ln().powi(2) + 0.04;
        let b = ihler_bound(&t, &params, 2);
        assert_abs_diff_eq!(b[2], sigma12_sq, epsilon = 1e-14);
        assert_abs_diff_eq!(b[0], sigma12_sq, epsilon = 1e-14);
        // Both messages into the middle node come from leaves, so ω = 1.
        assert_abs_diff_eq!(b[1], 0.08, epsilon = 1e-14);
    }

    #[test]
    fn dsnr_examples() {
        let clean: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let r = empirical_dsnr(&clean, &clean, DEFAULT_DB_CAP).unwrap();
        assert!(r.capped.iter().all(|c| *c));
        assert_eq!(r.average_db, DEFAULT_DB_CAP);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clean = Vec::new();
        let mut dirty = Vec::new();
        for _ in 0..100_000 {
            let l: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            clean.push(vec![l]);
            dirty.push(vec![l + e]);
        }
        let r = empirical_dsnr(&clean, &dirty, DEFAULT_DB_CAP).unwrap();
        assert!(r.per_node_db[0].abs() < 0.2);
        assert!(empirical_dsnr(&clean[..2], &dirty[..3], 100.0).is_err());
    }

    #[test]
    fn dsnr_is_scale_invariant() {
        let clean: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect();
        let dirty: Vec<Vec<f64>> = clean
            .iter()
            .enumerate()
            .map(|(i, c)| vec![c[0] + 0.1 * i as f64 / 50.0, c[1] - 0.05])
            .collect();
        let a = empirical_dsnr(&clean, &dirty, 100.0).unwrap();
        let scale = |v: &Vec<Vec<f64>>| {
            v.iter()
                .map(|r| r.iter().map(|x| x * 8.0).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let b = empirical_dsnr(&scale(&clean), &scale(&dirty), 100.0).unwrap();
        for (x, y) in a.per_node_db.iter().zip(&b.per_node_db) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    fn toy_stats() -> LocalStats {
        LocalStats {
            mean0: DVector::from_vec(vec![0.0, 0.0]),
            mean1: DVector::from_vec(vec![1.0, 2.0]),
            cov0: DMatrix::identity(2, 2),
            cov1: DMatrix::identity(2, 2) * 2.0,
            count0: 10,
            count1: 10,
        }
    }

    #[test]
    fn gaussian_rates() {
        let stats = toy_stats();
        let zero = DMatrix::zeros(2, 2);
        let (pf, _) = closed_form_rates(0.0, &[1.0, 1.0], &[1.0, 1.0], &stats, &zero, &zero).unwrap();
        assert_abs_diff_eq!(pf, 0.5, epsilon = 1e-15);

        // A single self term collapses to the one-detector rate Q((τ − μ_b)/σ_b).
        let (pf, pd) = closed_form_rates(1.5, &[1.0, 0.0], &[1.0, 0.0], &stats, &zero, &zero).unwrap();
        assert_abs_diff_eq!(pf, q_function(1.5), epsilon = 1e-15);
        assert_abs_diff_eq!(pd, q_function(0.5 / 2f64.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn mixture_matches_brute_force_integration() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let couplings = CouplingSet::from_edge_values(&t, vec![0.8], vec![-0.2, 0.1]).unwrap();
        let moments = [[(0.0, 1.0), (1.5, 1.3)], [(0.2, 0.8), (2.0, 1.1)]];
        let comps = mrf_mixture(&t, &couplings, &moments).unwrap();
        assert_abs_diff_eq!(comps.iter().map(|c| c.prob).sum::<f64>(), 1.0, epsilon = 1e-12);
        let a = [1.0, 0.4];
        let extra = 0.05;
        let tau = 0.9;
        let (pf, pd) = mixture_rates(tau, 0, &a, extra, &comps).unwrap();

        // Midpoint integration of the conditional density of λ_0.
        let density = |x: f64, label: bool| {
            let mut num = 0.0;
            let mut den = 0.0;
            for c in comps.iter().filter(|c| c.states[0] == label) {
                let m = a[0] * c.means[0] + a[1] * c.means[1];
                let v = a[0] * a[0] * c.variances[0] + a[1] * a[1] * c.variances[1] + extra;
                num += c.prob * (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                den += c.prob;
            }
            num / den
        };
        let integrate = |label| {
            let h = 1e-3;
            (0..20_000)
                .map(|i| density(tau + (i as f64 + 0.5) * h, label) * h)
                .sum::<f64>()
        };
        assert_abs_diff_eq!(pf, integrate(false), epsilon = 1e-6);
        assert_abs_diff_eq!(pd, integrate(true), epsilon = 1e-6);

        let tau = mixture_threshold(0.1, 0, &a, extra, &comps).unwrap();
        assert_abs_diff_eq!(
            mixture_rates(tau, 0, &a, extra, &comps).unwrap().0,
            0.1,
            epsilon = 1e-10
        );
    }

    #[test]
    fn mixture_enumeration_limit() {
        let t = Topology::new(16, (0..15).map(|i| (i, i + 1))).unwrap();
        let err = mrf_mixture(&t, &CouplingSet::uniform(&t, 0.1), &[[(0.0, 1.0); 2]; 16]).unwrap_err();
        assert_eq!(err, Error::EnumerationTooLarge(16, 15));
    }

    #[test]
    fn linear_response_matches_fixed_point_and_noise_recursion() {
        use crate::graph::{build_coefficient_matrix, fixed_point_combining_matrix};
        let t = Topology::fig1();
        let cs = CouplingSet::uniform(&t, 0.4);
        let c = build_coefficient_matrix(&t, &cs).unwrap();
        let coeff: Vec<f64> = t.directed_edges().iter().map(|e| c.get(e.to, e.from)).collect();
        let ones = vec![1.0; t.directed_count()];
        let r = linear_response(&t, &coeff, &ones, &vec![0.0; t.directed_count()], 200).unwrap();
        let fp = fixed_point_combining_matrix(&t, &c).unwrap();
        assert!((r.combining.weights() - fp.weights()).amax() < 1e-12);
        assert!(r.me_variance.iter().all(|v| *v == 0.0));

        // 0 - 1 - 2: λ_0 collects ν_{1→0} plus c·ν_{2→1} from the previous step.
        let chain = Topology::new(3, [(0, 1), (1, 2)]).unwrap();
        let cc = 0.3;
        let r = linear_response(&chain, &[cc; 4], &[1.0; 4], &[0.5; 4], 1).unwrap();
        assert_abs_diff_eq!(r.me_variance[0], 0.5, epsilon = 1e-15);
        let r = linear_response(&chain, &[cc; 4], &[1.0; 4], &[0.5; 4], 5).unwrap();
        assert_abs_diff_eq!(r.me_variance[0], 0.5 * (1.0 + cc * cc), epsilon = 1e-15);
        assert_abs_diff_eq!(r.me_variance[1], 1.0, epsilon = 1e-15);
        assert!(linear_response(&chain, &[cc; 3], &[1.0; 4], &[0.5; 4], 5).is_err());
    }
}
