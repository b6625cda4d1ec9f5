//! The `run`, `adapt`, `predict` and `validate` commands.

use std::io::Write;
use std::path::{Path, PathBuf};

use noisybp::experiment::{blind_adaptation, calibrate, run_prediction};
use noisybp::{build_coefficient_matrix, check_convergence, run_experiment, CalibratedErrorSampler, MetricsTable};
use serde::{Deserialize, Serialize};

use crate::chart::{render_chart, ChartConfig};
use crate::config::Experiment;
use crate::io::{emit_csv, emit_json, write_csv};
use crate::CliError;

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub plot: bool,
}

impl Overrides {
    pub fn apply(&self, exp: &mut Experiment) -> Result<(), CliError> {
        if let Some(t) = self.trials {
            exp.spec.trials = t;
        }
        if let Some(s) = self.seed {
            exp.spec.seed = s;
        }
        if let Some(o) = &self.out {
            exp.out = Some(o.clone());
        }
        exp.plot |= self.plot;
        exp.spec
            .validate()
            .map_err(|e| CliError::Config(format!("experiment: {e}")))
    }
}

/// Paths written by one command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Written {
    pub files: Vec<PathBuf>,
}

/// Writes `<stem>.csv`, `<stem>.json` and, with `plot`, one SVG per default
/// chart into `dir`; without a directory the CSV goes to `stdout`.
pub fn emit_table(
    table: &MetricsTable,
    dir: Option<&Path>,
    stem: &str,
    plot: bool,
    stdout: &mut dyn Write,
) -> Result<Written, CliError> {
    let mut written = Written::default();
    let Some(dir) = dir else {
        if plot {
            return Err(CliError::Config("--plot needs an output directory".into()));
        }
        write_csv(table, stdout)?;
        return Ok(written);
    };
    let csv = dir.join(format!("{stem}.csv"));
    emit_csv(table, &csv)?;
    let json = dir.join(format!("{stem}.json"));
    emit_json(table, &json)?;
    written.files.extend([csv, json]);
    if plot {
        for (suffix, config) in ChartConfig::defaults(table) {
            let path = dir.join(format!("{stem}_{suffix}.svg"));
            std::fs::write(&path, render_chart(table, &config)?).map_err(|e| CliError::io(&path, e))?;
            written.files.push(path);
        }
    }
    Ok(written)
}

pub fn run(exp: &Experiment, stdout: &mut dyn Write) -> Result<Written, CliError> {
    let table = run_experiment(&exp.setup, &exp.spec)?;
    emit_table(&table, exp.out.as_deref(), &exp.spec.name, exp.plot, stdout)
}

pub fn predict(exp: &Experiment, stdout: &mut dyn Write) -> Result<Written, CliError> {
    let table = run_prediction(&exp.setup, &exp.spec)?;
    emit_table(
        &table,
        exp.out.as_deref(),
        &format!("{}_predict", exp.spec.name),
        exp.plot,
        stdout,
    )
}

/// Fusion parameters of one node with one-based node numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeWeights {
    pub node: usize,
    pub neighborhood: Vec<usize>,
    pub c: Vec<f64>,
    pub w: Vec<f64>,
    pub message_coefficients: Vec<f64>,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Share of window slots whose final label matches the true hypothesis.
    pub label_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeVariance {
    pub from: usize,
    pub to: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub kappa: usize,
    pub node: usize,
    pub threshold: f64,
    pub label_flips: usize,
    pub coefficients: Vec<f64>,
}

/// Output of the `adapt` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub experiment: String,
    pub seed: u64,
    pub window_slots: usize,
    pub link_copies: usize,
    pub nodes: Vec<NodeWeights>,
    pub estimated_me_variance: Vec<EdgeVariance>,
    pub iterations: Vec<IterationRecord>,
}

pub fn adapt(exp: &Experiment) -> Result<WeightsFile, CliError> {
    let topo = &exp.setup.topology;
    let calibration = calibrate(&exp.setup, &exp.spec);
    let sampler = CalibratedErrorSampler::calibrate(topo, &calibration.powers, &exp.setup.errors)?;
    let run = blind_adaptation(&exp.setup, &exp.spec, &sampler)?;
    let slots = run.truth.len().max(1) as f64;
    let one = |v: &[usize]| v.iter().map(|j| j + 1).collect::<Vec<_>>();
    let nodes = run
        .output
        .weights
        .nodes
        .iter()
        .map(|n| NodeWeights {
            node: n.node + 1,
            neighborhood: one(&n.neighborhood),
            c: n.c.clone(),
            w: n.w.clone(),
            message_coefficients: n.message_coefficients.clone(),
            threshold: n.threshold,
            flags: n.flags.clone(),
            label_accuracy: run
                .truth
                .iter()
                .zip(&run.output.labels)
                .filter(|(t, l)| t[n.node] == l[n.node])
                .count() as f64
                / slots,
        })
        .collect();
    let estimated_me_variance = topo
        .directed_edges()
        .iter()
        .zip(&run.output.me_variance)
        .map(|(e, v)| EdgeVariance {
            from: e.from + 1,
            to: e.to + 1,
            variance: *v,
        })
        .collect();
    let iterations = run
        .output
        .diagnostics
        .iter()
        .map(|d| IterationRecord {
            kappa: d.kappa + 1,
            node: d.node + 1,
            threshold: d.threshold,
            label_flips: d.label_flips,
            coefficients: d.coefficients.clone(),
        })
        .collect();
    Ok(WeightsFile {
        experiment: exp.spec.name.clone(),
        seed: exp.spec.seed,
        window_slots: exp.spec.adaptation_window,
        link_copies: exp.spec.adaptation.link_copies,
        nodes,
        estimated_me_variance,
        iterations,
    })
}

pub fn write_weights(weights: &WeightsFile, out: &mut dyn Write) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, weights).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Human-readable summary of a resolved configuration.
pub fn validate(exp: &Experiment) -> Result<String, CliError> {
    let s = &exp.setup;
    let topo = &s.topology;
    let coeff = build_coefficient_matrix(topo, &s.couplings)?;
    let verdict = check_convergence(&coeff, topo);
    let finite = |v: &[f64]| v.iter().filter(|x| x.is_finite()).count();
    let mut report = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(report, "experiment {} ({})", exp.spec.name, exp.spec.recipe.name());
    let _ = writeln!(
        report,
        "network: {} nodes, {} edges, max degree {}",
        topo.node_count(),
        topo.edges().len(),
        topo.max_degree()
    );
    let _ = writeln!(
        report,
        "linear BP: spectral radius {:.4} ({}), contraction bound {}",
        verdict.spectral_radius,
        if verdict.spectral_ok { "converges" } else { "diverges" },
        if verdict.contraction_ok { "met" } else { "not met" }
    );
    let _ = writeln!(
        report,
        "errors: likelihood errors on {} of {} nodes, message errors on {} of {} links",
        finite(&s.errors.le_snr_db),
        topo.node_count(),
        finite(&s.errors.me_snr_db),
        topo.directed_count()
    );
    let _ = writeln!(report, "trials {}, seed {}", exp.spec.trials, exp.spec.seed);
    Ok(report)
}
