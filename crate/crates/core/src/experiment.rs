//! Monte Carlo recipes: DSNR versus iteration count and ROC under faulty
//! nodes.
//!
//! Trials run in fixed chunks on the rayon pool and are reduced in chunk
//! order. Every trial draws from streams keyed by `(seed, trial, purpose)`,
//! so tables are bit-identical for any worker count, and all variants of a
//! trial see the same signal, likelihood errors and message-error sequence.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{build_averaged_window, run_offline_adaptation, upper_quantile, AdaptationConfig, AdaptationOutput};
use crate::analysis::{
    dsnr_from_powers, ihler_bound_trajectory, linear_response, predict_network_mse, ratio_db, DsnrAccumulator,
    IhlerBoundParams, DEFAULT_DB_CAP,
};
use crate::bp::{
    abp_decision, decision_variables, iterate, weighted_decision, Averaging, BpMode, DecisionWeights, MessageNoise,
    MessageRule, MessageState, NoMessageErrors, SampledMessageErrors,
};
use crate::error::{Error, Result};
use crate::error_model::{CalibratedErrorSampler, ErrorConfig};
use crate::fusion::{two_stage_design, FusionWeights, NodeInputs};
use crate::graph::{build_coefficient_matrix, combining_matrix, fixed_point_combining_matrix, CouplingSet, Topology};
use crate::metrics::{MetricsTable, RecordContext};
use crate::rng::{stream, Substream};
use crate::scenario::{estimate_conditional_stats, Coverage, Scenario, ScenarioConfig, TransmitterConfig};

/// Trials per work unit. Fixed so that the reduction order never depends on
/// the thread count.
const CHUNK: usize = 250;

pub const DSNR_VARIANTS: [&str; 4] = ["le_only", "me_only", "both", "both_abp"];
pub const ROC_VARIANTS: [&str; 6] = [
    "bp_clean",
    "bp_faulty",
    "linear_clean",
    "linear_faulty",
    "optimized_known",
    "blind_adapted",
];

/// Network model, primary-user scenario and error strengths.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: Topology,
    pub couplings: CouplingSet,
    pub scenario: Scenario,
    pub errors: ErrorConfig,
}

/// Coupling used by the presets on every edge.
pub const PRESET_COUPLING: f64 = 0.4;

impl Setup {
    pub fn new(topology: Topology, couplings: CouplingSet, scenario: Scenario, errors: ErrorConfig) -> Result<Self> {
        if scenario.node_count() != topology.node_count() {
            return Err(Error::Dimension(format!(
                "scenario has {} nodes, topology {}",
                scenario.node_count(),
                topology.node_count()
            )));
        }
        if couplings.couplings().len() != topology.edges().len() {
            return Err(Error::Dimension("one coupling per edge required".into()));
        }
        CalibratedErrorSampler::calibrate(&topology, &vec![1.0; topology.node_count()], &errors)?;
        Ok(Self {
            topology,
            couplings,
            scenario,
            errors,
        })
    }

    /// Reference network with LE and ME at 10 dB everywhere.
    pub fn fig1() -> Self {
        let topology = Topology::fig1();
        let errors = ErrorConfig::uniform(&topology, 10.0, 10.0);
        Self::fig1_with(topology, errors)
    }

    /// Reference network where nodes 1 and 4 (one-based) have LE at 10 dB
    /// and ME at 20 dB on every message they send.
    pub fn fig1_faulty() -> Self {
        let topology = Topology::fig1();
        let errors = ErrorConfig::faulty_nodes(&topology, &[0, 3], 10.0, 20.0).expect("preset nodes exist");
        Self::fig1_with(topology, errors)
    }

    fn fig1_with(topology: Topology, errors: ErrorConfig) -> Self {
        let couplings = CouplingSet::uniform(&topology, PRESET_COUPLING);
        Self {
            topology,
            couplings,
            scenario: Scenario::fig1(),
            errors,
        }
    }

    /// Random connected graph with couplings drawn from `coupling_range`,
    /// two transmitters each covering a random subset of nodes at −10 to
    /// −5 dB, and uniform error SNRs.
    pub fn random<R: Rng + ?Sized>(
        node_count: usize,
        extra_edge_prob: f64,
        coupling_range: (f64, f64),
        le_snr_db: f64,
        me_snr_db: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let topology = Topology::random_connected(node_count, extra_edge_prob, rng)?;
        let couplings = CouplingSet::from_edge_values(
            &topology,
            (0..topology.edges().len())
                .map(|_| rng.random_range(coupling_range.0..=coupling_range.1))
                .collect(),
            vec![0.0; node_count],
        )?;
        let mut transmitters = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut coverage = Vec::new();
            for node in 0..node_count {
                if rng.random_bool(0.6) {
                    coverage.push(Coverage {
                        node,
                        snr_db: rng.random_range(-10.0..=-5.0),
                    });
                }
            }
            transmitters.push(TransmitterConfig { coverage });
        }
        let scenario = Scenario::new(ScenarioConfig {
            node_count,
            transmitters,
            signature_seed: rng.random(),
            ..ScenarioConfig::fig1()
        })?;
        let errors = ErrorConfig::uniform(&topology, le_snr_db, me_snr_db);
        Self::new(topology, couplings, scenario, errors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    DsnrVsIterations,
    RocFaultyNodes,
    /// Any explicit selection of DSNR and ROC variants.
    Custom,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::DsnrVsIterations => "dsnr_vs_iterations",
            Recipe::RocFaultyNodes => "roc_faulty_nodes",
            Recipe::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Message rule of the DSNR recipe; the ROC recipe always runs both.
    pub mode: BpMode,
    /// Iterations before the ROC decision.
    pub iterations: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: BpMode::Linear,
            iterations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub recipe: Recipe,
    pub trials: usize,
    pub seed: u64,
    pub engine: EngineConfig,
    /// Strictly increasing iteration counts at which DSNR is reported.
    pub iteration_grid: Vec<usize>,
    /// False-alarm targets of the ROC sweep.
    pub alpha_grid: Vec<f64>,
    /// Error-free slots used to fix reference powers and known statistics.
    pub calibration_slots: usize,
    pub adaptation: AdaptationConfig,
    /// Slots `T` in the blind-adaptation window.
    pub adaptation_window: usize,
    /// Variants to run; empty selects every variant of the recipe.
    pub variants: Vec<String>,
    pub db_cap: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            recipe: Recipe::DsnrVsIterations,
            trials: 20_000,
            seed: 1,
            engine: EngineConfig::default(),
            iteration_grid: (1..=50).collect(),
            alpha_grid: vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            calibration_slots: 20_000,
            adaptation: AdaptationConfig::default(),
            adaptation_window: 2500,
            variants: Vec::new(),
            db_cap: DEFAULT_DB_CAP,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return fail("trial count must be at least 1".into());
        }
        if self.calibration_slots < 2 {
            return fail("calibration needs at least 2 slots".into());
        }
        if self.engine.iterations == 0 {
            return fail("engine iterations must be at least 1".into());
        }
        if self.iteration_grid.is_empty() || self.iteration_grid[0] == 0 {
            return fail("iteration grid must be nonempty and start at 1 or later".into());
        }
        if self.iteration_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("iteration grid must be strictly increasing".into());
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return fail("alpha grid must be nonempty with entries in (0, 1)".into());
        }
        if !(self.db_cap > 0.0) {
            return fail("dB cap must be positive".into());
        }
        for v in &self.variants {
            if !DSNR_VARIANTS.contains(&v.as_str()) && !ROC_VARIANTS.contains(&v.as_str()) {
                return fail(format!("unknown variant {v:?}"));
            }
        }
        if self.recipe == Recipe::Custom && self.variants.is_empty() {
            return fail("the custom recipe needs an explicit variant list".into());
        }
        Ok(())
    }

    fn selected(&self, all: &[&'static str]) -> Vec<&'static str> {
        all.iter()
            .copied()
            .filter(|v| self.variants.is_empty() || self.variants.iter().any(|s| s == v))
            .collect()
    }

    fn context(&self) -> RecordContext {
        RecordContext {
            experiment: self.name.clone(),
            recipe: self.recipe.name().into(),
            trials: self.trials,
            seed: self.seed,
        }
    }
}

/// Error-free slots with their true hypotheses, and the per-node power
/// `E[γ_j²]` that error SNRs refer to.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub labels: Vec<Vec<bool>>,
    pub statistics: Vec<Vec<f64>>,
    pub powers: Vec<f64>,
}

pub fn calibrate(setup: &Setup, spec: &ExperimentSpec) -> Calibration {
    let mut rng = stream(spec.seed, 0, Substream::Calibration);
    let (labels, statistics): (Vec<_>, Vec<_>) = (0..spec.calibration_slots)
        .map(|_| {
            let (state, gamma) = setup.scenario.sample_slot(&mut rng);
            (state.x().to_vec(), gamma)
        })
        .unzip();
    let n = setup.topology.node_count();
    let powers = (0..n)
        .map(|j| statistics.iter().map(|g| g[j] * g[j]).sum::<f64>() / statistics.len() as f64)
        .collect();
    Calibration {
        labels,
        statistics,
        powers,
    }
}

fn chunked<T, F>(trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(trials)))
        .collect()
}

/// Adds the square of every draw to a per-edge sum.
struct Recording<'a, N> {
    inner: N,
    sums: &'a mut [f64],
}

impl<N: MessageNoise> MessageNoise for Recording<'_, N> {
    fn draw(&mut self, edge: usize) -> f64 {
        let v = self.inner.draw(edge);
        self.sums[edge] += v * v;
        v
    }
}

/// Decision variables at each grid iteration.
fn trajectory<N: MessageNoise + ?Sized>(
    topology: &Topology,
    rule: &MessageRule,
    llrs: &[f64],
    averaged: bool,
    noise: &mut N,
    grid: &[usize],
) -> Vec<Vec<f64>> {
    let mut state = MessageState::new(topology, if averaged { Averaging::All } else { Averaging::Off });
    let mut out = Vec::with_capacity(grid.len());
    for &l in grid {
        while state.iteration() < l {
            iterate(topology, rule, &mut state, llrs, noise);
        }
        out.push(if averaged {
            abp_decision(topology, &state, llrs, None).values
        } else {
            decision_variables(topology, &state, llrs).values
        });
    }
    out
}

struct DsnrChunk {
    acc: Vec<Vec<DsnrAccumulator>>,
    le_sq: Vec<f64>,
    me_sq: Vec<f64>,
    me_draws: usize,
}

impl DsnrChunk {
    fn new(variants: usize, grid: usize, nodes: usize, edges: usize) -> Self {
        Self {
            acc: vec![vec![DsnrAccumulator::new(nodes); grid]; variants],
            le_sq: vec![0.0; nodes],
            me_sq: vec![0.0; edges],
            me_draws: 0,
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.acc.iter_mut().flatten().zip(other.acc.iter().flatten()) {
            a.merge(b);
        }
        for (a, b) in self.le_sq.iter_mut().zip(&other.le_sq) {
            *a += b;
        }
        for (a, b) in self.me_sq.iter_mut().zip(&other.me_sq) {
            *a += b;
        }
        self.me_draws += other.me_draws;
    }
}

/// Mean of linear ratios converted to dB.
fn mean_db(ratios_db: &[f64], cap: f64) -> f64 {
    let mean = ratios_db.iter().map(|d| 10f64.powf(d / 10.0)).sum::<f64>() / ratios_db.len().max(1) as f64;
    (10.0 * mean.log10()).min(cap)
}

/// DSNR of plain BP with LE only, ME only and both, and of ABP with both,
/// against paired error-free runs, together with the analytical predictions
/// and the error-strength bound.
pub fn run_experiment_dsnr(setup: &Setup, spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    let variants = spec.selected(&DSNR_VARIANTS);
    let topo = &setup.topology;
    let (n, d) = (topo.node_count(), topo.directed_count());
    let calibration = calibrate(setup, spec);
    let sampler = CalibratedErrorSampler::calibrate(topo, &calibration.powers, &setup.errors)?;
    let rule = MessageRule::for_mode(spec.engine.mode, topo, &setup.couplings);
    let grid = &spec.iteration_grid;
    let max_l = *grid.last().expect("validated");

    let chunks = chunked(spec.trials, |range| {
        let mut chunk = DsnrChunk::new(variants.len(), grid.len(), n, d);
        for t in range {
            let t = t as u64;
            let (_, gamma) = setup.scenario.sample_slot(&mut stream(spec.seed, t, Substream::Signal));
            let eps = sampler.sample_le_vector(&mut stream(spec.seed, t, Substream::Likelihood));
            let noisy: Vec<f64> = gamma.iter().zip(&eps).map(|(g, e)| g + e).collect();
            for (s, e) in chunk.le_sq.iter_mut().zip(&eps) {
                *s += e * e;
            }
            let clean = trajectory(topo, &rule, &gamma, false, &mut NoMessageErrors, grid);
            // Averaged runs are paired with the error-free averaged run.
            let clean_averaged = variants
                .contains(&"both_abp")
                .then(|| trajectory(topo, &rule, &gamma, true, &mut NoMessageErrors, grid));
            for (vi, &variant) in variants.iter().enumerate() {
                let (le, me, averaged) = match variant {
                    "le_only" => (true, false, false),
                    "me_only" => (false, true, false),
                    "both" => (true, true, false),
                    _ => (true, true, true),
                };
                let llrs = if le { &noisy } else { &gamma };
                let dirty = if me {
                    let mut rng = stream(spec.seed, t, Substream::Message);
                    let inner = SampledMessageErrors {
                        sampler: &sampler,
                        rng: &mut rng,
                    };
                    if variant == "both" {
                        chunk.me_draws += max_l;
                        let mut noise = Recording {
                            inner,
                            sums: &mut chunk.me_sq,
                        };
                        trajectory(topo, &rule, llrs, averaged, &mut noise, grid)
                    } else {
                        let mut noise = inner;
                        trajectory(topo, &rule, llrs, averaged, &mut noise, grid)
                    }
                } else {
                    trajectory(topo, &rule, llrs, averaged, &mut NoMessageErrors, grid)
                };
                let reference = if averaged {
                    clean_averaged.as_ref().expect("computed for ABP")
                } else {
                    &clean
                };
                for (g, (c, x)) in reference.iter().zip(&dirty).enumerate() {
                    chunk.acc[vi][g].push(c, x);
                }
            }
        }
        Ok(chunk)
    })?;
    let mut total = DsnrChunk::new(variants.len(), grid.len(), n, d);
    for c in &chunks {
        total.merge(c);
    }

    let ctx = spec.context();
    let cap = spec.db_cap;
    let mut table = MetricsTable::new();

    // Achieved error SNRs.
    let trials = spec.trials as f64;
    let le_db: Vec<f64> = (0..n)
        .map(|j| ratio_db(calibration.powers[j], total.le_sq[j] / trials, cap).0)
        .collect();
    for j in 0..n {
        table.push(ctx.record("calibration", Some(j), 0.0, "reference_power", calibration.powers[j]))?;
        table.push(ctx.record("calibration", Some(j), 0.0, "le_snr_db", le_db[j]))?;
    }
    table.push(ctx.record("calibration", None, 0.0, "le_snr_db", mean_db(&le_db, cap)))?;
    if total.me_draws > 0 {
        let edge_db: Vec<f64> = topo
            .directed_edges()
            .iter()
            .enumerate()
            .map(|(e, de)| ratio_db(calibration.powers[de.from], total.me_sq[e] / total.me_draws as f64, cap).0)
            .collect();
        let node_db: Vec<f64> = (0..n)
            .map(|j| {
                let inc: Vec<f64> = topo.incoming(j).iter().map(|&e| edge_db[e]).collect();
                mean_db(&inc, cap)
            })
            .collect();
        for (j, v) in node_db.iter().enumerate() {
            table.push(ctx.record("calibration", Some(j), 0.0, "me_snr_db", *v))?;
        }
        table.push(ctx.record("calibration", None, 0.0, "me_snr_db", mean_db(&edge_db, cap)))?;
    }

    // Predictions from both combining matrices of the linearized rule.
    let coeff = build_coefficient_matrix(topo, &setup.couplings)?;
    let truncated = combining_matrix(&coeff).ok();
    let exact = fixed_point_combining_matrix(topo, &coeff).ok();
    let predict = |a: &crate::graph::CombiningMatrix, variant: &str, l: usize| -> Vec<f64> {
        predict_network_mse(topo, a, &sampler, l.saturating_sub(1))
            .iter()
            .map(|p| match variant {
                "le_only" => p.le_part,
                "me_only" => p.me_part,
                "both" => p.plain(),
                _ => p.averaged(),
            })
            .collect()
    };
    let ihler = ihler_bound_trajectory(
        topo,
        &IhlerBoundParams::from_couplings(topo, &setup.couplings, sampler.me_variance().to_vec())?,
        max_l,
    );

    for (g, &l) in grid.iter().enumerate() {
        let x = l as f64;
        let mut avg_db = std::collections::HashMap::new();
        for (vi, &variant) in variants.iter().enumerate() {
            let acc = &total.acc[vi][g];
            let report = acc.report(cap);
            let signal = acc.signal_power();
            let error = acc.error_power();
            let error_se = acc.error_power_se();
            for j in 0..n {
                table.push(ctx.record(variant, Some(j), x, "dsnr_db", report.per_node_db[j]))?;
                table.push(ctx.record(variant, Some(j), x, "mse", error[j]))?;
                table.push(ctx.record(variant, Some(j), x, "mse_se", error_se[j]))?;
            }
            table.push(ctx.record(variant, None, x, "dsnr_db", report.average_db))?;
            table.push(ctx.record(variant, None, x, "mse", error.iter().sum::<f64>() / n as f64))?;
            let capped = report.capped.iter().filter(|c| **c).count();
            if capped > 0 {
                table.push(ctx.record(variant, None, x, "capped_nodes", capped as f64))?;
            }
            avg_db.insert(variant, report.average_db);

            for (metric, a) in [("predicted", &truncated), ("predicted_fixed_point", &exact)] {
                let Some(a) = a else { continue };
                let mse = predict(a, variant, l);
                let pred = dsnr_from_powers(&signal, &mse, acc.samples(), cap);
                for j in 0..n {
                    table.push(ctx.record(variant, Some(j), x, &format!("{metric}_dsnr_db"), pred.per_node_db[j]))?;
                    table.push(ctx.record(variant, Some(j), x, &format!("{metric}_mse"), mse[j]))?;
                }
                table.push(ctx.record(variant, None, x, &format!("{metric}_dsnr_db"), pred.average_db))?;
                table.push(ctx.record(
                    variant,
                    None,
                    x,
                    &format!("{metric}_mse"),
                    mse.iter().sum::<f64>() / n as f64,
                ))?;
            }
            if variant == "me_only" {
                let bound = &ihler[l - 1];
                for (j, b) in bound.iter().enumerate() {
                    table.push(ctx.record(variant, Some(j), x, "ihler_bound", *b))?;
                }
                table.push(ctx.record(variant, None, x, "ihler_bound", bound.iter().sum::<f64>() / n as f64))?;
            }
        }
        if let (Some(le), Some(me)) = (avg_db.get("le_only"), avg_db.get("me_only")) {
            table.push(ctx.record("gap", None, x, "dsnr_gap_db", le - me))?;
        }
    }
    let mean_degree = 2.0 * topo.edges().len() as f64 / n as f64;
    table.push(ctx.record("gap", None, 0.0, "linear_gap_prediction_db", 10.0 * mean_degree.log10()))?;
    Ok(table)
}

/// Two-stage design from statistics estimated on error-free calibration
/// slots with the true hypotheses, and the calibrated error covariances.
pub fn known_statistics_design(
    setup: &Setup,
    calibration: &Calibration,
    sampler: &CalibratedErrorSampler,
    alpha: f64,
) -> Result<FusionWeights> {
    let topo = &setup.topology;
    let inputs = (0..topo.node_count())
        .map(|j| {
            let hood = topo.closed_neighborhood(j);
            let rows: Vec<Vec<f64>> = calibration
                .statistics
                .iter()
                .map(|g| hood.iter().map(|&i| g[i]).collect())
                .collect();
            let labels: Vec<bool> = calibration.labels.iter().map(|x| x[j]).collect();
            Ok(NodeInputs {
                stats: estimate_conditional_stats(&rows, &labels)?,
                sigma_eps: sampler.le_covariance(&hood),
                sigma_nu: sampler.me_covariance(topo, j),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    two_stage_design(topo, &inputs, alpha)
}

/// Blind adaptation result together with the true hypotheses of its window.
#[derive(Debug, Clone)]
pub struct BlindRun {
    pub output: AdaptationOutput,
    pub truth: Vec<Vec<bool>>,
}

/// Draws a window of erroneous local statistics, builds its link-averaged
/// views and runs the offline learning loop on it.
pub fn blind_adaptation(setup: &Setup, spec: &ExperimentSpec, sampler: &CalibratedErrorSampler) -> Result<BlindRun> {
    let topo = &setup.topology;
    let mut rng = stream(spec.seed, 0, Substream::Auxiliary);
    let (truth, window): (Vec<Vec<bool>>, Vec<Vec<f64>>) = (0..spec.adaptation_window)
        .map(|_| {
            let (state, gamma) = setup.scenario.sample_slot(&mut rng);
            let eps = sampler.sample_le_vector(&mut rng);
            (state.x().to_vec(), gamma.iter().zip(&eps).map(|(g, e)| g + e).collect())
        })
        .unzip();
    let averaged = build_averaged_window(
        topo,
        &window,
        sampler,
        spec.adaptation.link_copies,
        &mut stream(spec.seed, 0, Substream::LinkCopies),
    )?;
    let output = run_offline_adaptation(topo, &setup.couplings, &window, &averaged, &spec.adaptation)?;
    Ok(BlindRun { output, truth })
}

enum RocEngine {
    Plain {
        rule: MessageRule,
        errors: bool,
    },
    Fused {
        rule: MessageRule,
        weights: DecisionWeights,
    },
}

/// ROC points of plain exact and linear BP with and without errors, and of
/// the two-stage fusion with known and with blindly adapted statistics.
/// Thresholds are swept per node as empirical `(1 − α)` quantiles of the
/// decision variable among slots where the node's hypothesis is 0.
pub fn run_experiment_roc(setup: &Setup, spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    let variants = spec.selected(&ROC_VARIANTS);
    let topo = &setup.topology;
    let n = topo.node_count();
    let calibration = calibrate(setup, spec);
    let sampler = CalibratedErrorSampler::calibrate(topo, &calibration.powers, &setup.errors)?;
    let ctx = spec.context();
    let mut table = MetricsTable::new();

    let mut engines = Vec::with_capacity(variants.len());
    for &v in &variants {
        engines.push(match v {
            "bp_clean" | "bp_faulty" => RocEngine::Plain {
                rule: MessageRule::exact(topo, &setup.couplings),
                errors: v == "bp_faulty",
            },
            "linear_clean" | "linear_faulty" => RocEngine::Plain {
                rule: MessageRule::linearized(topo, &setup.couplings),
                errors: v == "linear_faulty",
            },
            "optimized_known" => {
                let w = known_statistics_design(setup, &calibration, &sampler, spec.adaptation.alpha)?;
                RocEngine::Fused {
                    rule: w.message_rule(topo)?,
                    weights: w.decision_weights(topo)?,
                }
            }
            _ => {
                let run = blind_adaptation(setup, spec, &sampler)?;
                let agree = run
                    .output
                    .labels
                    .iter()
                    .flatten()
                    .zip(run.truth.iter().flatten())
                    .filter(|(a, b)| a == b)
                    .count();
                table.push(ctx.record(
                    v,
                    None,
                    0.0,
                    "window_label_accuracy",
                    agree as f64 / (n * spec.adaptation_window).max(1) as f64,
                ))?;
                let w = &run.output.weights;
                RocEngine::Fused {
                    rule: w.message_rule(topo)?,
                    weights: w.decision_weights(topo)?,
                }
            }
        });
    }

    let iterations = spec.engine.iterations;
    // Per chunk: true hypotheses and, per variant, decision variables, each
    // flattened trial-major.
    let chunks = chunked(spec.trials, |range| {
        let mut labels = Vec::with_capacity(range.len() * n);
        let mut values = vec![Vec::with_capacity(range.len() * n); engines.len()];
        for t in range {
            let t = t as u64;
            let (state, gamma) = setup.scenario.sample_slot(&mut stream(spec.seed, t, Substream::Signal));
            let eps = sampler.sample_le_vector(&mut stream(spec.seed, t, Substream::Likelihood));
            let noisy: Vec<f64> = gamma.iter().zip(&eps).map(|(g, e)| g + e).collect();
            labels.extend_from_slice(state.x());
            for (engine, out) in engines.iter().zip(values.iter_mut()) {
                let (rule, errors, weights) = match engine {
                    RocEngine::Plain { rule, errors } => (rule, *errors, None),
                    RocEngine::Fused { rule, weights } => (rule, true, Some(weights)),
                };
                let llrs = if errors { &noisy } else { &gamma };
                let mut state = MessageState::new(topo, Averaging::Off);
                let mut rng = stream(spec.seed, t, Substream::Message);
                let mut noise = SampledMessageErrors {
                    sampler: &sampler,
                    rng: &mut rng,
                };
                for _ in 0..iterations {
                    if errors {
                        iterate(topo, rule, &mut state, llrs, &mut noise);
                    } else {
                        iterate(topo, rule, &mut state, llrs, &mut NoMessageErrors);
                    }
                }
                let lambda = match weights {
                    Some(w) => weighted_decision(topo, &state, llrs, w)?.values,
                    None => decision_variables(topo, &state, llrs).values,
                };
                out.extend(lambda);
            }
        }
        Ok((labels, values))
    })?;

    let mut labels = Vec::with_capacity(spec.trials * n);
    let mut values = vec![Vec::with_capacity(spec.trials * n); engines.len()];
    for (l, v) in chunks {
        labels.extend(l);
        for (dst, src) in values.iter_mut().zip(v) {
            dst.extend(src);
        }
    }

    for (vi, &variant) in variants.iter().enumerate() {
        let per_node: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .map(|j| {
                let (mut h0, mut h1) = (Vec::new(), Vec::new());
                for t in 0..spec.trials {
                    let v = values[vi][t * n + j];
                    if labels[t * n + j] {
                        h1.push(v);
                    } else {
                        h0.push(v);
                    }
                }
                h0.sort_by(f64::total_cmp);
                h1.sort_by(f64::total_cmp);
                (h0, h1)
            })
            .collect();
        for &alpha in &spec.alpha_grid {
            let (mut pf_sum, mut pd_sum, mut counted) = (0.0, 0.0, 0);
            for (j, (h0, h1)) in per_node.iter().enumerate() {
                if h0.is_empty() || h1.is_empty() {
                    continue;
                }
                let tau = upper_quantile(&mut h0.clone(), alpha);
                let above = |s: &[f64]| (s.len() - s.partition_point(|v| *v <= tau)) as f64 / s.len() as f64;
                let (pf, pd) = (above(h0), above(h1));
                table.push(ctx.record(variant, Some(j), alpha, "pf", pf))?;
                table.push(ctx.record(variant, Some(j), alpha, "pd", pd))?;
                table.push(ctx.record(variant, Some(j), alpha, "threshold", tau))?;
                pf_sum += pf;
                pd_sum += pd;
                counted += 1;
            }
            if counted > 0 {
                table.push(ctx.record(variant, None, alpha, "pf", pf_sum / counted as f64))?;
                table.push(ctx.record(variant, None, alpha, "pd", pd_sum / counted as f64))?;
            }
        }
    }
    Ok(table)
}

/// Analytical tables only: predicted MSE and DSNR of every DSNR variant of
/// linear BP over the iteration grid, the error-strength bound, and the
/// entries of both combining matrices. Monte Carlo is used only for the
/// error-free calibration slots that fix reference and signal powers.
pub fn run_prediction(setup: &Setup, spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    let variants = spec.selected(&DSNR_VARIANTS);
    let topo = &setup.topology;
    let n = topo.node_count();
    let calibration = calibrate(setup, spec);
    let sampler = CalibratedErrorSampler::calibrate(topo, &calibration.powers, &setup.errors)?;
    let coeff = build_coefficient_matrix(topo, &setup.couplings)?;
    let truncated = combining_matrix(&coeff).ok();
    let exact = fixed_point_combining_matrix(topo, &coeff).ok();
    let ctx = spec.context();
    let cap = spec.db_cap;
    let mut table = MetricsTable::new();

    for (name, a) in [("a_truncated", &truncated), ("a_fixed_point", &exact)] {
        let Some(a) = a else { continue };
        for j in 0..n {
            for i in 0..n {
                table.push(ctx.record("combining", Some(j), (i + 1) as f64, name, a.get(j, i)))?;
            }
        }
    }

    let slots = calibration.statistics.len() as f64;
    let second_moment = nalgebra::DMatrix::from_fn(n, n, |i, k| {
        calibration.statistics.iter().map(|g| g[i] * g[k]).sum::<f64>() / slots
    });
    let edge_coeff: Vec<f64> = topo.directed_edges().iter().map(|e| coeff.get(e.to, e.from)).collect();
    let ones = vec![1.0; topo.directed_count()];
    let quiet = vec![0.0; topo.directed_count()];
    let max_l = *spec.iteration_grid.last().expect("validated");
    let ihler = ihler_bound_trajectory(
        topo,
        &IhlerBoundParams::from_couplings(topo, &setup.couplings, sampler.me_variance().to_vec())?,
        max_l,
    );

    for &l in &spec.iteration_grid {
        let x = l as f64;
        let gains = linear_response(topo, &edge_coeff, &ones, &quiet, l)?.combining;
        let signal: Vec<f64> = (0..n)
            .map(|j| {
                let g = gains.row(j);
                g.dot(&(&second_moment * &g))
            })
            .collect();
        for &variant in &variants {
            for (metric, a) in [("predicted", &truncated), ("predicted_fixed_point", &exact)] {
                let Some(a) = a else { continue };
                let mse: Vec<f64> = predict_network_mse(topo, a, &sampler, l - 1)
                    .iter()
                    .map(|p| match variant {
                        "le_only" => p.le_part,
                        "me_only" => p.me_part,
                        "both" => p.plain(),
                        _ => p.averaged(),
                    })
                    .collect();
                let report = dsnr_from_powers(&signal, &mse, 0, cap);
                for j in 0..n {
                    table.push(ctx.record(variant, Some(j), x, &format!("{metric}_dsnr_db"), report.per_node_db[j]))?;
                    table.push(ctx.record(variant, Some(j), x, &format!("{metric}_mse"), mse[j]))?;
                }
                table.push(ctx.record(variant, None, x, &format!("{metric}_dsnr_db"), report.average_db))?;
                table.push(ctx.record(
                    variant,
                    None,
                    x,
                    &format!("{metric}_mse"),
                    mse.iter().sum::<f64>() / n as f64,
                ))?;
            }
            if variant == "me_only" {
                let bound = &ihler[l - 1];
                for (j, b) in bound.iter().enumerate() {
                    table.push(ctx.record(variant, Some(j), x, "ihler_bound", *b))?;
                }
                table.push(ctx.record(variant, None, x, "ihler_bound", bound.iter().sum::<f64>() / n as f64))?;
            }
        }
    }
    let mean_degree = 2.0 * topo.edges().len() as f64 / n as f64;
    table.push(ctx.record("gap", None, 0.0, "linear_gap_prediction_db", 10.0 * mean_degree.log10()))?;
    Ok(table)
}

/// Runs the recipe named in the spec.
pub fn run_experiment(setup: &Setup, spec: &ExperimentSpec) -> Result<MetricsTable> {
    spec.validate()?;
    match spec.recipe {
        Recipe::DsnrVsIterations => run_experiment_dsnr(setup, spec),
        Recipe::RocFaultyNodes => run_experiment_roc(setup, spec),
        Recipe::Custom => {
            let mut table = MetricsTable::new();
            if !spec.selected(&DSNR_VARIANTS).is_empty() {
                table.extend(run_experiment_dsnr(setup, spec)?)?;
            }
            if !spec.selected(&ROC_VARIANTS).is_empty() {
                table.extend(run_experiment_roc(setup, spec)?)?;
            }
            Ok(table)
        }
    }
}
