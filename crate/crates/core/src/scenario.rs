//! Primary-transmitter activity, per-node observations and local statistics.
//!
//! A scenario fixes a set of transmitters, the nodes each one reaches and
//! the received SNR on every such link. Signatures are drawn once from a
//! dedicated seed and stay constant across slots. A node covered by several
//! active transmitters receives the sum of their signatures.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::MixtureComponent;
use crate::error::{Error, Result};

const MAX_TRANSMITTERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticMode {
    /// `γ = sᵀy − ½‖s‖²`, the exact LLR for a known signature in unit noise.
    MatchedFilter,
    /// `γ = ‖y‖² / K`.
    Energy,
}

/// One transmitter-to-node link, with zero-based node index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub node: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitterConfig {
    pub coverage: Vec<Coverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub node_count: usize,
    pub samples_per_slot: usize,
    pub noise_variance: f64,
    pub mode: StatisticMode,
    pub p_on: f64,
    pub rho_tx: f64,
    pub window_len: usize,
    pub transmitters: Vec<TransmitterConfig>,
    pub signature_seed: u64,
}

impl ScenarioConfig {
    /// Five-node reference network: transmitter A reaches nodes 1, 2, 3 and
    /// transmitter B reaches nodes 3, 4, 5 (one-based), at −5 dB on the outer
    /// nodes, −8 dB on nodes 2 and 4 and −10 dB per transmitter on node 3.
    pub fn fig1() -> Self {
        let link = |node, snr_db| Coverage { node, snr_db };
        Self {
            node_count: 5,
            samples_per_slot: 100,
            noise_variance: 1.0,
            mode: StatisticMode::Energy,
            p_on: 0.5,
            rho_tx: 0.3,
            window_len: 2000,
            transmitters: vec![
                TransmitterConfig {
                    coverage: vec![link(0, -5.0), link(1, -8.0), link(2, -10.0)],
                },
                TransmitterConfig {
                    coverage: vec![link(2, -10.0), link(3, -8.0), link(4, -5.0)],
                },
            ],
            signature_seed: 1,
        }
    }
}

/// Binary activity of every transmitter and the node-level hypotheses it
/// induces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryState {
    tx_mask: u32,
    x: Vec<bool>,
}

impl PrimaryState {
    pub fn x(&self) -> &[bool] {
        &self.x
    }

    pub fn tx_mask(&self) -> u32 {
        self.tx_mask
    }

    pub fn tx_state(&self, count: usize) -> Vec<bool> {
        (0..count).map(|t| self.tx_mask >> t & 1 == 1).collect()
    }
}

/// A validated scenario with its signatures and transmitter joint pmf.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    /// `signatures[t][j]`, present when transmitter `t` reaches node `j`.
    signatures: Vec<Vec<Option<Vec<f64>>>>,
    /// Per node, the sum of all signatures it can receive.
    templates: Vec<Vec<f64>>,
    node_masks: Vec<u32>,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        validate(&config)?;
        let n = config.node_count;
        let k = config.samples_per_slot;
        let mut rng = ChaCha8Rng::seed_from_u64(config.signature_seed);
        let mut signatures = vec![vec![None; n]; config.transmitters.len()];
        let mut node_masks = vec![0u32; n];
        for (t, tx) in config.transmitters.iter().enumerate() {
            for link in &tx.coverage {
                let power = k as f64 * config.noise_variance * 10f64.powf(link.snr_db / 10.0);
                let mut s: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if norm > 0.0 { power.sqrt() / norm } else { 0.0 };
                s.iter_mut().for_each(|v| *v *= scale);
                signatures[t][link.node] = Some(s);
                node_masks[link.node] |= 1 << t;
            }
        }
        let templates = (0..n)
            .map(|j| {
                let mut sum = vec![0.0; k];
                for tx in &signatures {
                    if let Some(s) = &tx[j] {
                        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                    }
                }
                sum
            })
            .collect();
        let pmf = transmitter_pmf(config.transmitters.len(), config.p_on, config.rho_tx)?;
        let cdf = pmf
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config,
            signatures,
            templates,
            node_masks,
            pmf,
            cdf,
        })
    }

    pub fn fig1() -> Self {
        Self::new(ScenarioConfig::fig1()).expect("preset scenario is valid")
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.config.node_count
    }

    pub fn transmitter_count(&self) -> usize {
        self.config.transmitters.len()
    }

    /// Same signatures and activity model with a different noise variance.
    pub fn with_noise_variance(&self, noise_variance: f64) -> Self {
        let mut out = self.clone();
        out.config.noise_variance = noise_variance;
        out
    }

    pub fn signature(&self, tx: usize, node: usize) -> Option<&[f64]> {
        self.signatures[tx][node].as_deref()
    }

    /// Sum of the signatures a node can receive, used by the matched filter.
    pub fn template(&self, node: usize) -> &[f64] {
        &self.templates[node]
    }

    /// Joint pmf over transmitter configurations, indexed by bit mask.
    pub fn transmitter_pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn state_from_mask(&self, tx_mask: u32) -> PrimaryState {
        let x = self.node_masks.iter().map(|m| m & tx_mask != 0).collect();
        PrimaryState { tx_mask, x }
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> PrimaryState {
        let u: f64 = rng.random();
        let mask = self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1);
        self.state_from_mask(mask as u32)
    }

    pub fn sample_primary_states<R: Rng + ?Sized>(&self, slots: usize, rng: &mut R) -> Vec<PrimaryState> {
        (0..slots).map(|_| self.sample_state(rng)).collect()
    }

    /// Noise-free received signal at node `j`.
    pub fn received_signal(&self, state: &PrimaryState, j: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.config.samples_per_slot];
        for (t, tx) in self.signatures.iter().enumerate() {
            if state.tx_mask >> t & 1 == 1 {
                if let Some(s) = &tx[j] {
                    r.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
        }
        r
    }

    /// `y_j = r_j + n_j` for every node, noise drawn node by node.
    pub fn generate_observations<R: Rng + ?Sized>(&self, state: &PrimaryState, rng: &mut R) -> Vec<Vec<f64>> {
        let sd = self.config.noise_variance.sqrt();
        (0..self.node_count())
            .map(|j| {
                let mut y = self.received_signal(state, j);
                for v in &mut y {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sd * z;
                }
                y
            })
            .collect()
    }

    pub fn local_statistic(&self, j: usize, y: &[f64]) -> Result<f64> {
        match self.config.mode {
            StatisticMode::MatchedFilter => local_llr(y, &self.templates[j]),
            StatisticMode::Energy => energy_statistic(y),
        }
    }

    /// Local statistics for one slot; consumes the same draws as
    /// [`Self::generate_observations`].
    pub fn sample_statistics<R: Rng + ?Sized>(&self, state: &PrimaryState, rng: &mut R) -> Vec<f64> {
        self.generate_observations(state, rng)
            .iter()
            .enumerate()
            .map(|(j, y)| self.local_statistic(j, y).expect("lengths match by construction"))
            .collect()
    }

    /// A full slot: activity, then observations reduced to local statistics.
    pub fn sample_slot<R: Rng + ?Sized>(&self, rng: &mut R) -> (PrimaryState, Vec<f64>) {
        let state = self.sample_state(rng);
        let gamma = self.sample_statistics(&state, rng);
        (state, gamma)
    }

    /// Exact mean and variance of node `j`'s statistic given the
    /// transmitter configuration.
    pub fn conditional_moments(&self, tx_mask: u32, j: usize) -> (f64, f64) {
        let state = self.state_from_mask(tx_mask);
        let r = self.received_signal(&state, j);
        let noise = self.config.noise_variance;
        match self.config.mode {
            StatisticMode::MatchedFilter => {
                let s = &self.templates[j];
                let s_sq: f64 = s.iter().map(|v| v * v).sum();
                let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
                (sr - 0.5 * s_sq, noise * s_sq)
            }
            StatisticMode::Energy => {
                let k = self.config.samples_per_slot as f64;
                let r_sq: f64 = r.iter().map(|v| v * v).sum();
                (
                    noise + r_sq / k,
                    (2.0 * k * noise * noise + 4.0 * noise * r_sq) / (k * k),
                )
            }
        }
    }

    /// Every transmitter configuration with its probability, node states and
    /// exact per-node statistic moments.
    pub fn mixture_components(&self) -> Vec<MixtureComponent> {
        let n = self.node_count();
        self.pmf
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(mask, &prob)| {
                let state = self.state_from_mask(mask as u32);
                let (means, variances) = (0..n).map(|j| self.conditional_moments(mask as u32, j)).unzip();
                MixtureComponent {
                    prob,
                    states: state.x,
                    means,
                    variances,
                }
            })
            .collect()
    }
}

fn validate(config: &ScenarioConfig) -> Result<()> {
    if config.node_count == 0 {
        return Err(Error::EmptyGraph);
    }
    if config.samples_per_slot == 0 {
        return Err(Error::Config("samples_per_slot must be at least 1".into()));
    }
    if !(config.noise_variance >= 0.0 && config.noise_variance.is_finite()) {
        return Err(Error::Config("noise_variance must be finite and nonnegative".into()));
    }
    if !(config.p_on > 0.0 && config.p_on < 1.0) {
        return Err(Error::Config(format!("p_on must lie in (0, 1), got {}", config.p_on)));
    }
    if config.transmitters.is_empty() || config.transmitters.len() > MAX_TRANSMITTERS {
        return Err(Error::Config(format!(
            "between 1 and {MAX_TRANSMITTERS} transmitters are supported, got {}",
            config.transmitters.len()
        )));
    }
    for tx in &config.transmitters {
        for link in &tx.coverage {
            if link.node >= config.node_count {
                return Err(Error::NodeOutOfRange {
                    node: link.node,
                    node_count: config.node_count,
                });
            }
            if !link.snr_db.is_finite() {
                return Err(Error::NonFinite("link SNR"));
            }
        }
    }
    Ok(())
}

/// Joint pmf over `count` transmitters with common marginal `p` and
/// pairwise correlation `rho`, indexed by activity bit mask.
///
/// Two transmitters use the explicit 2×2 table, which admits negative
/// correlation. Other counts use a common-shock mixture: with probability
/// `rho` all transmitters copy one Bernoulli(p) draw, otherwise they are
/// independent.
pub fn transmitter_pmf(count: usize, p: f64, rho: f64) -> Result<Vec<f64>> {
    let infeasible = Error::InfeasibleCorrelation { p_on: p, rho };
    if !(-1.0..=1.0).contains(&rho) {
        return Err(infeasible);
    }
    if count == 2 {
        let p11 = p * p + rho * p * (1.0 - p);
        let p10 = p - p11;
        let p00 = 1.0 - 2.0 * p + p11;
        if [p11, p10, p00].iter().any(|v| *v < -1e-12) {
            return Err(infeasible);
        }
        return Ok(vec![p00.max(0.0), p10.max(0.0), p10.max(0.0), p11.max(0.0)]);
    }
    if count > 1 && rho < 0.0 {
        return Err(infeasible);
    }
    let rho = if count > 1 { rho } else { 0.0 };
    let all = (1usize << count) - 1;
    Ok((0..=all)
        .map(|mask| {
            let on = mask.count_ones() as i32;
            let independent = p.powi(on) * (1.0 - p).powi(count as i32 - on);
            let shock = if mask == all {
                p
            } else if mask == 0 {
                1.0 - p
            } else {
                0.0
            };
            rho * shock + (1.0 - rho) * independent
        })
        .collect())
}

/// Matched-filter LLR `sᵀy − ½‖s‖²`.
pub fn local_llr(y: &[f64], s: &[f64]) -> Result<f64> {
    if y.len() != s.len() {
        return Err(Error::Dimension(format!(
            "observation of length {} vs signature of length {}",
            y.len(),
            s.len()
        )));
    }
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    Ok(sy - 0.5 * ss)
}

/// Average received power `‖y‖² / K`.
pub fn energy_statistic(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("observation"));
    }
    Ok(y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64)
}

/// Conditional first and second moments of a neighborhood statistic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    pub mean0: DVector<f64>,
    pub mean1: DVector<f64>,
    pub cov0: DMatrix<f64>,
    pub cov1: DMatrix<f64>,
    pub count0: usize,
    pub count1: usize,
}

impl LocalStats {
    /// `δ = μ₁ − μ₀`.
    pub fn delta(&self) -> DVector<f64> {
        &self.mean1 - &self.mean0
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    /// Moments under one label.
    pub fn moments(&self, label: bool) -> (&DVector<f64>, &DMatrix<f64>) {
        if label {
            (&self.mean1, &self.cov1)
        } else {
            (&self.mean0, &self.cov0)
        }
    }
}

/// Sample means and unbiased covariances of the rows of `stat_window`,
/// split by `labels`.
pub fn estimate_conditional_stats(stat_window: &[Vec<f64>], labels: &[bool]) -> Result<LocalStats> {
    if stat_window.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} statistic rows vs {} labels",
            stat_window.len(),
            labels.len()
        )));
    }
    let dim = stat_window.first().map_or(0, Vec::len);
    if stat_window.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension("ragged statistic window".into()));
    }
    let split = |label: bool| -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
        let rows: Vec<&Vec<f64>> = stat_window
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == label)
            .map(|(r, _)| r)
            .collect();
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples {
                label: label as u8,
                got: rows.len(),
                need: 2,
            });
        }
        let (mean, cov) = sample_moments(rows.iter().map(|r| r.as_slice()), dim);
        Ok((mean, cov, rows.len()))
    };
    let (mean0, cov0, count0) = split(false)?;
    let (mean1, cov1, count1) = split(true)?;
    Ok(LocalStats {
        mean0,
        mean1,
        cov0,
        cov1,
        count0,
        count1,
    })
}

/// Mean and unbiased covariance of at least two rows.
pub fn sample_moments<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(dim);
    let mut count = 0usize;
    for r in rows.clone() {
        mean += DVector::from_column_slice(r);
        count += 1;
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        let d = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (count as f64 - 1.0).max(1.0);
    (mean, cov)
}
