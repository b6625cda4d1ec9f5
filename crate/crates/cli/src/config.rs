//! Experiment configuration files.
//!
//! One TOML file describes one reproducible experiment in six sections:
//! `[topology]`, `[couplings]`, `[scenario]`, `[errors]`, `[engine]` and
//! `[experiment]`. Every section is optional and falls back to the
//! five-node reference network. Node numbers in files are one-based.

use std::path::{Path, PathBuf};

use noisybp::experiment::PRESET_COUPLING;
use noisybp::graph::estimate_couplings;
use noisybp::rng::{stream, Substream};
use noisybp::scenario::{Coverage, TransmitterConfig};
use noisybp::{
    AdaptationConfig, BpMode, CouplingSet, EngineConfig, ErrorConfig, ExperimentSpec, Recipe, Scenario, ScenarioConfig,
    Setup, StatisticMode, Topology,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub couplings: CouplingSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub errors: ErrorSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Either a named preset or an explicit edge list.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub preset: Option<String>,
    pub nodes: Option<usize>,
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeCoupling {
    pub nodes: [usize; 2],
    pub j: f64,
}

/// Couplings: a uniform value, an explicit per-edge list, or a plug-in
/// estimate from simulated node states.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub uniform: Option<f64>,
    pub edges: Option<Vec<EdgeCoupling>>,
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub estimate: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageEntry {
    pub node: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterEntry {
    pub coverage: Vec<CoverageEntry>,
}

/// Overrides on top of the reference scenario.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub preset: Option<String>,
    pub samples_per_slot: Option<usize>,
    pub noise_variance: Option<f64>,
    pub mode: Option<StatisticMode>,
    pub p_on: Option<f64>,
    pub rho_tx: Option<f64>,
    pub window_len: Option<usize>,
    pub signature_seed: Option<u64>,
    pub transmitters: Option<Vec<TransmitterEntry>>,
}

/// A single value for every node or one value per node.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    All(f64),
    Each(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSnr {
    pub from: usize,
    pub to: usize,
    pub snr_db: f64,
}

/// Error SNRs in dB, `inf` disables an error. `me_snr_db` per node applies
/// to every message that node sends. With `faulty_nodes`, only the listed
/// nodes get errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSection {
    pub le_snr_db: Option<PerNode>,
    pub me_snr_db: Option<PerNode>,
    pub faulty_nodes: Option<Vec<usize>>,
    #[serde(default)]
    pub me_edges: Vec<EdgeSnr>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub mode: Option<BpMode>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSection {
    pub kappa_max: Option<usize>,
    pub eta: Option<f64>,
    pub link_copies: Option<usize>,
    pub abp_iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub initial_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: Option<String>,
    pub recipe: Option<Recipe>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub iteration_grid: Option<Vec<usize>>,
    /// Shorthand for `iteration_grid = [1, 2, ..., max_iterations]`.
    pub max_iterations: Option<usize>,
    pub alpha_grid: Option<Vec<f64>>,
    pub calibration_slots: Option<usize>,
    pub adaptation_window: Option<usize>,
    pub variants: Option<Vec<String>>,
    pub db_cap: Option<f64>,
    /// Output directory for tables and charts.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub adaptation: AdaptationSection,
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub setup: Setup,
    pub spec: ExperimentSpec,
    pub out: Option<PathBuf>,
    pub plot: bool,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn zero_based(node: usize, n: usize, field: &str) -> Result<usize, CliError> {
    if node == 0 || node > n {
        return Err(config_err(format!("{field}: node {node} is outside 1..={n}")));
    }
    Ok(node - 1)
}

/// Parses a configuration file. Syntax and schema errors carry the line
/// and column reported by the TOML parser.
pub fn parse(text: &str, origin: &str) -> Result<ConfigFile, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

pub fn load_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

/// Reads and resolves an experiment file.
pub fn load_spec(path: &Path) -> Result<Experiment, CliError> {
    load_file(path)?.resolve()
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<Experiment, CliError> {
        let topology = self.topology.resolve()?;
        let scenario = self.scenario.resolve(topology.node_count())?;
        let spec = self.experiment.resolve(&self.engine)?;
        let couplings = self.couplings.resolve(&topology, &scenario, spec.seed)?;
        let errors = self.errors.resolve(&topology, self.experiment.recipe)?;
        let setup = Setup::new(topology, couplings, scenario, errors).map_err(|e| config_err(e.to_string()))?;
        Ok(Experiment {
            setup,
            spec,
            out: self.experiment.out.clone(),
            plot: self.experiment.plot,
        })
    }
}

impl TopologySection {
    fn resolve(&self) -> Result<Topology, CliError> {
        match (&self.preset, &self.edges) {
            (Some(_), Some(_)) => Err(config_err("topology: give either preset or edges, not both")),
            (Some(p), None) if p == "fig1" => Ok(Topology::fig1()),
            (Some(p), None) => Err(config_err(format!("topology.preset: unknown preset {p:?}"))),
            (None, None) => Ok(Topology::fig1()),
            (None, Some(edges)) => {
                let n = self
                    .nodes
                    .ok_or_else(|| config_err("topology.nodes is required with an explicit edge list"))?;
                let edges = edges
                    .iter()
                    .map(|[a, b]| {
                        Ok((
                            zero_based(*a, n, "topology.edges")?,
                            zero_based(*b, n, "topology.edges")?,
                        ))
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Topology::new(n, edges).map_err(|e| config_err(format!("topology: {e}")))
            }
        }
    }
}

impl CouplingSection {
    fn resolve(&self, topology: &Topology, scenario: &Scenario, seed: u64) -> Result<CouplingSet, CliError> {
        let n = topology.node_count();
        let given = [self.uniform.is_some(), self.edges.is_some(), self.estimate]
            .iter()
            .filter(|b| **b)
            .count();
        if given > 1 {
            return Err(config_err("couplings: choose one of uniform, edges or estimate"));
        }
        let theta = match &self.theta {
            Some(t) if t.len() != n => {
                return Err(config_err(format!(
                    "couplings.theta: {} entries for {n} nodes",
                    t.len()
                )))
            }
            Some(t) => t.clone(),
            None => vec![0.0; n],
        };
        let wrap = |e: noisybp::Error| config_err(format!("couplings: {e}"));
        if self.estimate {
            let mut rng = stream(seed, 1, Substream::Auxiliary);
            let window: Vec<Vec<bool>> = scenario
                .sample_primary_states(scenario.config().window_len, &mut rng)
                .iter()
                .map(|s| s.x().to_vec())
                .collect();
            return estimate_couplings(topology, &window).map_err(wrap);
        }
        if let Some(edges) = &self.edges {
            let pairs = edges
                .iter()
                .map(|e| {
                    let a = zero_based(e.nodes[0], n, "couplings.edges")?;
                    let b = zero_based(e.nodes[1], n, "couplings.edges")?;
                    Ok(((a, b), e.j))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            return CouplingSet::new(topology, pairs, theta).map_err(wrap);
        }
        let j = self.uniform.unwrap_or(PRESET_COUPLING);
        CouplingSet::from_edge_values(topology, vec![j; topology.edges().len()], theta).map_err(wrap)
    }
}

impl ScenarioSection {
    fn resolve(&self, node_count: usize) -> Result<Scenario, CliError> {
        if let Some(p) = &self.preset {
            if p != "fig1" {
                return Err(config_err(format!("scenario.preset: unknown preset {p:?}")));
            }
        }
        let mut cfg = ScenarioConfig::fig1();
        cfg.node_count = node_count;
        if let Some(v) = self.samples_per_slot {
            cfg.samples_per_slot = v;
        }
        if let Some(v) = self.noise_variance {
            cfg.noise_variance = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.p_on {
            cfg.p_on = v;
        }
        if let Some(v) = self.rho_tx {
            cfg.rho_tx = v;
        }
        if let Some(v) = self.window_len {
            cfg.window_len = v;
        }
        if let Some(v) = self.signature_seed {
            cfg.signature_seed = v;
        }
        match &self.transmitters {
            Some(txs) => {
                cfg.transmitters = txs
                    .iter()
                    .map(|t| {
                        let coverage = t
                            .coverage
                            .iter()
                            .map(|c| {
                                Ok(Coverage {
                                    node: zero_based(c.node, node_count, "scenario.transmitters.coverage")?,
                                    snr_db: c.snr_db,
                                })
                            })
                            .collect::<Result<Vec<_>, CliError>>()?;
                        Ok(TransmitterConfig { coverage })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
            }
            None if node_count != 5 => {
                return Err(config_err(
                    "scenario.transmitters is required unless the network has the five reference nodes",
                ))
            }
            None => {}
        }
        Scenario::new(cfg).map_err(|e| config_err(format!("scenario: {e}")))
    }
}

impl PerNode {
    fn expand(&self, n: usize, field: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerNode::All(v) => Ok(vec![*v; n]),
            PerNode::Each(v) if v.len() == n => Ok(v.clone()),
            PerNode::Each(v) => Err(config_err(format!("{field}: {} entries for {n} nodes", v.len()))),
        }
    }
}

impl ErrorSection {
    fn resolve(&self, topology: &Topology, recipe: Option<Recipe>) -> Result<ErrorConfig, CliError> {
        let n = topology.node_count();
        // The ROC recipe defaults to the faulty-node preset on the reference network.
        let faulty = match &self.faulty_nodes {
            Some(f) => Some(f.clone()),
            None if recipe == Some(Recipe::RocFaultyNodes) && self.le_snr_db.is_none() && self.me_snr_db.is_none() => {
                Some(vec![1, 4])
            }
            None => None,
        };
        let (le_default, me_default) = if faulty.is_some() { (10.0, 20.0) } else { (10.0, 10.0) };
        let le = self
            .le_snr_db
            .as_ref()
            .map_or(Ok(vec![le_default; n]), |v| v.expand(n, "errors.le_snr_db"))?;
        let me_node = self
            .me_snr_db
            .as_ref()
            .map_or(Ok(vec![me_default; n]), |v| v.expand(n, "errors.me_snr_db"))?;
        let mut cfg = ErrorConfig::error_free(topology);
        let active: Vec<usize> = match faulty {
            Some(list) => list
                .iter()
                .map(|&j| zero_based(j, n, "errors.faulty_nodes"))
                .collect::<Result<_, _>>()?,
            None => (0..n).collect(),
        };
        for &j in &active {
            cfg.le_snr_db[j] = le[j];
        }
        for (id, e) in topology.directed_edges().iter().enumerate() {
            if active.contains(&e.from) {
                cfg.me_snr_db[id] = me_node[e.from];
            }
        }
        for edge in &self.me_edges {
            let from = zero_based(edge.from, n, "errors.me_edges")?;
            let to = zero_based(edge.to, n, "errors.me_edges")?;
            let id = topology
                .directed_index(from, to)
                .ok_or_else(|| config_err(format!("errors.me_edges: {} -> {} is not an edge", edge.from, edge.to)))?;
            cfg.me_snr_db[id] = edge.snr_db;
        }
        if cfg
            .le_snr_db
            .iter()
            .chain(&cfg.me_snr_db)
            .any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(config_err("errors: SNRs must be finite or inf"));
        }
        Ok(cfg)
    }
}

impl ExperimentSection {
    fn resolve(&self, engine: &EngineSection) -> Result<ExperimentSpec, CliError> {
        let mut spec = ExperimentSpec::default();
        if let Some(v) = &self.name {
            spec.name = v.clone();
        }
        if let Some(v) = self.recipe {
            spec.recipe = v;
        }
        if let Some(v) = self.trials {
            spec.trials = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        match (&self.iteration_grid, self.max_iterations) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "experiment: give iteration_grid or max_iterations, not both",
                ))
            }
            (Some(g), None) => spec.iteration_grid = g.clone(),
            (None, Some(m)) => spec.iteration_grid = (1..=m).collect(),
            (None, None) => {}
        }
        if let Some(v) = &self.alpha_grid {
            spec.alpha_grid = v.clone();
        }
        if let Some(v) = self.calibration_slots {
            spec.calibration_slots = v;
        }
        if let Some(v) = self.adaptation_window {
            spec.adaptation_window = v;
        }
        if let Some(v) = &self.variants {
            spec.variants = v.clone();
        }
        if let Some(v) = self.db_cap {
            spec.db_cap = v;
        }
        let defaults = EngineConfig::default();
        spec.engine = EngineConfig {
            mode: engine.mode.unwrap_or(defaults.mode),
            iterations: engine.iterations.unwrap_or(defaults.iterations),
        };
        let a = &self.adaptation;
        let base = AdaptationConfig::default();
        spec.adaptation = AdaptationConfig {
            kappa_max: a.kappa_max.unwrap_or(base.kappa_max),
            eta: a.eta.unwrap_or(base.eta),
            link_copies: a.link_copies.unwrap_or(base.link_copies),
            abp_iterations: a.abp_iterations.unwrap_or(base.abp_iterations),
            alpha: a.alpha.unwrap_or(base.alpha),
            initial_thresholds: a.initial_thresholds.clone(),
        };
        spec.validate().map_err(|e| config_err(format!("experiment: {e}")))?;
        Ok(spec)
    }
}
