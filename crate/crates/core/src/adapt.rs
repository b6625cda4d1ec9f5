//! Blind offline adaptation of the fusion weights.
//!
//! Nodes never see the true hypotheses. They label a window of past slots
//! with their own detector, estimate neighborhood statistics from those
//! labels, re-optimize, and relabel with averaging BP. Averaging makes the
//! labels insensitive to message errors, so the loop mostly learns to
//! suppress likelihood errors. Message-error variances are estimated at the
//! end from the spread between a single received copy and the average of
//! `L` copies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::q_inverse;
use crate::bp::{abp_decision, iterate, Averaging, DecisionWeights, MessageRule, MessageState, NoMessageErrors};
use crate::error::{Error, Result};
use crate::error_model::CalibratedErrorSampler;
use crate::fusion::{complete_design, convergence_scale, eta_test, self_ratio, stage_one, FusionWeights, NodeInputs};
use crate::graph::{coefficient_from_coupling, CouplingSet, Topology};
use crate::scenario::{estimate_conditional_stats, LocalStats};

/// Minimum rows per label for a node to adapt; below it the node keeps its
/// BP coefficients.
pub const MIN_ROWS_PER_LABEL: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub kappa_max: usize,
    pub eta: f64,
    /// Link copies `L` per received statistic.
    pub link_copies: usize,
    pub abp_iterations: usize,
    /// False-alarm target of the per-iteration and final thresholds.
    pub alpha: f64,
    /// Initial thresholds; per-node window medians when absent.
    #[serde(default)]
    pub initial_thresholds: Option<Vec<f64>>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            kappa_max: 5,
            eta: 2.0,
            link_copies: 10,
            abp_iterations: 30,
            alpha: 0.1,
            initial_thresholds: None,
        }
    }
}

/// `x̂[t][j] = 1{γ̃_j(t) > τ_j}`.
pub fn initialize_outcomes(llr_window: &[Vec<f64>], thresholds: &[f64]) -> Result<Vec<Vec<bool>>> {
    llr_window
        .iter()
        .map(|row| {
            if row.len() != thresholds.len() {
                return Err(Error::Dimension(format!(
                    "window row of length {} vs {} thresholds",
                    row.len(),
                    thresholds.len()
                )));
            }
            Ok(row.iter().zip(thresholds).map(|(g, t)| g > t).collect())
        })
        .collect()
}

/// Per-node median of the window.
pub fn median_thresholds(llr_window: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = llr_window.first().ok_or(Error::Empty("statistic window"))?.len();
    Ok((0..n)
        .map(|j| {
            let mut col: Vec<f64> = llr_window.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                0.5 * (col[m / 2 - 1] + col[m / 2])
            }
        })
        .collect())
}

/// Link-level views of a statistic window, one column per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedWindow {
    /// `γ̄_{k→j}(t)`: the sender's statistic plus the mean of `L` link errors.
    pub averaged: Vec<Vec<f64>>,
    /// The sender's statistic plus the first of those `L` errors.
    pub raw: Vec<Vec<f64>>,
    pub copies: usize,
}

/// Draws `L` link errors per directed edge and slot from the calibrated ME
/// variances.
pub fn build_averaged_window<R: Rng + ?Sized>(
    topology: &Topology,
    llr_window: &[Vec<f64>],
    sampler: &CalibratedErrorSampler,
    copies: usize,
    rng: &mut R,
) -> Result<AveragedWindow> {
    if copies == 0 {
        return Err(Error::Config("link copy count must be at least 1".into()));
    }
    let mut averaged = Vec::with_capacity(llr_window.len());
    let mut raw = Vec::with_capacity(llr_window.len());
    for row in llr_window {
        if row.len() != topology.node_count() {
            return Err(Error::Dimension(format!("window row of length {}", row.len())));
        }
        let mut avg_row = Vec::with_capacity(topology.directed_count());
        let mut raw_row = Vec::with_capacity(topology.directed_count());
        for (id, e) in topology.directed_edges().iter().enumerate() {
            let draws: Vec<f64> = (0..copies).map(|_| sampler.sample_me(id, rng)).collect();
            let mean = draws.iter().sum::<f64>() / copies as f64;
            avg_row.push(row[e.from] + mean);
            raw_row.push(row[e.from] + draws[0]);
        }
        averaged.push(avg_row);
        raw.push(raw_row);
    }
    Ok(AveragedWindow { averaged, raw, copies })
}

/// `Var[γ̃ + ν] − Var[γ̄]`, clamped at zero. The flag marks a clamp.
pub fn estimate_me_variance(raw: &[f64], averaged: &[f64]) -> Result<(f64, bool)> {
    const MIN_SAMPLES: usize = 100;
    if raw.len() != averaged.len() {
        return Err(Error::Dimension(format!(
            "{} raw vs {} averaged samples",
            raw.len(),
            averaged.len()
        )));
    }
    if raw.len() < MIN_SAMPLES {
        return Err(Error::WindowTooShort {
            got: raw.len(),
            need: MIN_SAMPLES,
        });
    }
    let diff = sample_variance(raw) - sample_variance(averaged);
    Ok(if diff < 0.0 { (0.0, true) } else { (diff, false) })
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Rows `[γ̃_j, γ̄_{k→j} for k ∈ N_j]` of node `j`'s neighborhood view.
pub fn neighborhood_window(
    topology: &Topology,
    j: usize,
    llr_window: &[Vec<f64>],
    averaged: &AveragedWindow,
) -> Vec<Vec<f64>> {
    let edges: Vec<usize> = topology
        .neighbors(j)
        .iter()
        .map(|&k| topology.directed_index(k, j).expect("neighbor edge"))
        .collect();
    llr_window
        .iter()
        .zip(&averaged.averaged)
        .map(|(g, a)| std::iter::once(g[j]).chain(edges.iter().map(|&e| a[e])).collect())
        .collect()
}

/// Per-iteration record for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaDiagnostic {
    pub kappa: usize,
    pub node: usize,
    pub coefficients: Vec<f64>,
    pub threshold: f64,
    pub label_flips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationOutput {
    pub weights: FusionWeights,
    pub diagnostics: Vec<KappaDiagnostic>,
    /// Final label window `x̂^(κ_max)`.
    pub labels: Vec<Vec<bool>>,
    /// Estimated `Var[ν]` per directed edge.
    pub me_variance: Vec<f64>,
}

/// BP coefficient vector of node `j` over its closed neighborhood, self one.
fn bp_ratio(topology: &Topology, couplings: &CouplingSet, j: usize) -> Vec<f64> {
    std::iter::once(1.0)
        .chain(
            topology
                .neighbors(j)
                .iter()
                .map(|&k| coefficient_from_coupling(couplings.between(topology, j, k).expect("edge"))),
        )
        .collect()
}

fn label_column(labels: &[Vec<bool>], j: usize) -> Vec<bool> {
    labels.iter().map(|r| r[j]).collect()
}

fn enough_labels(column: &[bool]) -> bool {
    let ones = column.iter().filter(|b| **b).count();
    ones >= MIN_ROWS_PER_LABEL && column.len() - ones >= MIN_ROWS_PER_LABEL
}

struct StageOne {
    ratios: Vec<Vec<f64>>,
    stats: Vec<Option<LocalStats>>,
    flags: Vec<Vec<String>>,
}

/// Lines 4 to 6: neighborhood statistics from the labels, stage one with
/// the averaged views, then the η-test against the BP coefficients, all in
/// the self-normalized scale.
fn stage_one_pass(
    topology: &Topology,
    couplings: &CouplingSet,
    llr_window: &[Vec<f64>],
    averaged: &AveragedWindow,
    labels: &[Vec<bool>],
    eta: f64,
) -> Result<StageOne> {
    let per_node = (0..topology.node_count())
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, Option<LocalStats>, Vec<String>)> {
            let bp = bp_ratio(topology, couplings, j);
            let column = label_column(labels, j);
            if !enough_labels(&column) {
                return Ok((bp, None, vec!["insufficient_labels".into()]));
            }
            let rows = neighborhood_window(topology, j, llr_window, averaged);
            let stats = estimate_conditional_stats(&rows, &column)?;
            let m = stats.dim();
            let Some(ratio) = stage_one(&stats, &DMatrix::zeros(m, m))
                .ok()
                .and_then(|c| self_ratio(&c))
            else {
                return Ok((bp, Some(stats), vec!["stage_one_fallback".into()]));
            };
            let tested = eta_test(&ratio, &bp, eta)?;
            let mut flags = Vec::new();
            if tested.zero_offline.iter().any(|z| *z) {
                flags.push("zero_offline_coefficient".into());
            }
            Ok((tested.values, Some(stats), flags))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = StageOne {
        ratios: Vec::new(),
        stats: Vec::new(),
        flags: Vec::new(),
    };
    for (r, s, f) in per_node {
        out.ratios.push(r);
        out.stats.push(s);
        out.flags.push(f);
    }
    Ok(out)
}

/// Linear rule and ABP decision weights for self-normalized coefficient
/// vectors: messages use the contraction-scaled coefficients, decisions
/// divide the scale back out.
fn abp_parameters(topology: &Topology, ratios: &[Vec<f64>]) -> Result<(MessageRule, DecisionWeights)> {
    let bound = topology.contraction_bound();
    let mut coeff = vec![0.0; topology.directed_count()];
    let mut weights = Vec::with_capacity(topology.node_count());
    for (j, r) in ratios.iter().enumerate() {
        let s = convergence_scale(r, bound);
        for (&k, &v) in topology.neighbors(j).iter().zip(&r[1..]) {
            coeff[topology.directed_index(k, j).expect("neighbor edge")] = s * v;
        }
        weights.push(
            std::iter::once(1.0)
                .chain(std::iter::repeat_n(1.0 / s, r.len() - 1))
                .collect(),
        );
    }
    Ok((
        MessageRule::Linear(coeff),
        DecisionWeights::from_neighborhoods(topology, &weights)?,
    ))
}

/// Error-free linear ABP decisions for every slot of the window.
pub fn abp_window_decisions(
    topology: &Topology,
    rule: &MessageRule,
    weights: &DecisionWeights,
    llr_window: &[Vec<f64>],
    iterations: usize,
) -> Vec<Vec<f64>> {
    llr_window
        .par_iter()
        .map(|g| {
            let mut state = MessageState::new(topology, Averaging::All);
            for _ in 0..iterations {
                iterate(topology, rule, &mut state, g, &mut NoMessageErrors);
            }
            abp_decision(topology, &state, g, Some(weights)).values
        })
        .collect()
}

/// `Q⁻¹(α)·sd + mean` of the decisions among slots labeled 0, per node.
fn label_conditional_thresholds(decisions: &[Vec<f64>], labels: &[Vec<bool>], alpha: f64) -> Vec<f64> {
    let n = decisions.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let zeros: Vec<f64> = decisions
                .iter()
                .zip(labels)
                .filter(|(_, l)| !l[j])
                .map(|(d, _)| d[j])
                .collect();
            if zeros.len() < 2 {
                return f64::INFINITY;
            }
            let mean = zeros.iter().sum::<f64>() / zeros.len() as f64;
            q_inverse(alpha) * sample_variance(&zeros).sqrt() + mean
        })
        .collect()
}

/// Empirical `(1 − α)` quantile per node among slots labeled 0.
pub fn empirical_thresholds(decisions: &[Vec<f64>], labels: &[Vec<bool>], alpha: f64) -> Vec<f64> {
    let n = decisions.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let mut zeros: Vec<f64> = decisions
                .iter()
                .zip(labels)
                .filter(|(_, l)| !l[j])
                .map(|(d, _)| d[j])
                .collect();
            upper_quantile(&mut zeros, alpha)
        })
        .collect()
}

/// Value exceeded by a fraction `alpha` of the samples.
pub fn upper_quantile(samples: &mut [f64], alpha: f64) -> f64 {
    if samples.is_empty() {
        return f64::INFINITY;
    }
    samples.sort_by(f64::total_cmp);
    let idx = ((1.0 - alpha) * samples.len() as f64).ceil() as usize;
    samples[idx.clamp(1, samples.len()) - 1]
}

/// Final pass (lines 11 to 14) from a fixed label window: stage one with the
/// η-test, estimated message-error variances, stage two and thresholds.
pub fn adapt_with_labels(
    topology: &Topology,
    couplings: &CouplingSet,
    llr_window: &[Vec<f64>],
    averaged: &AveragedWindow,
    labels: &[Vec<bool>],
    config: &AdaptationConfig,
) -> Result<(FusionWeights, Vec<f64>)> {
    let pass = stage_one_pass(topology, couplings, llr_window, averaged, labels, config.eta)?;
    let mut me_variance = vec![0.0; topology.directed_count()];
    let mut clamped = vec![false; topology.directed_count()];
    for e in 0..topology.directed_count() {
        let raw: Vec<f64> = averaged.raw.iter().map(|r| r[e]).collect();
        let avg: Vec<f64> = averaged.averaged.iter().map(|r| r[e]).collect();
        (me_variance[e], clamped[e]) = estimate_me_variance(&raw, &avg)?;
    }
    let inputs: Vec<NodeInputs> = (0..topology.node_count())
        .map(|j| {
            let m = topology.degree(j) + 1;
            let stats = pass.stats[j].clone().unwrap_or_else(|| unit_stats(m));
            let nu = std::iter::once(0.0).chain(
                topology
                    .neighbors(j)
                    .iter()
                    .map(|&k| me_variance[topology.directed_index(k, j).expect("neighbor edge")]),
            );
            NodeInputs {
                stats,
                sigma_eps: DMatrix::zeros(m, m),
                sigma_nu: DMatrix::from_diagonal(&DVector::from_iterator(m, nu)),
            }
        })
        .collect();
    let mut weights = complete_design(topology, &pass.ratios, &inputs, config.alpha)?;
    for (node, flags) in weights.nodes.iter_mut().zip(pass.flags) {
        node.flags.extend(flags);
        if topology.incoming(node.node).iter().any(|&e| clamped[e]) {
            node.flags.push("me_variance_clamped".into());
        }
    }

    // The Gaussian-form thresholds rest on estimated statistics; replace them
    // with empirical quantiles of the deployed detector on the window.
    let rule = weights.message_rule(topology)?;
    let decision = weights.decision_weights(topology)?;
    let decisions: Vec<Vec<f64>> = llr_window
        .par_iter()
        .map(|g| {
            let mut state = MessageState::new(topology, Averaging::Off);
            for _ in 0..config.abp_iterations {
                iterate(topology, &rule, &mut state, g, &mut NoMessageErrors);
            }
            crate::bp::weighted_decision(topology, &state, g, &decision)
                .expect("weights match topology")
                .values
        })
        .collect();
    for (node, tau) in weights
        .nodes
        .iter_mut()
        .zip(empirical_thresholds(&decisions, labels, config.alpha))
    {
        if tau.is_finite() {
            node.threshold = tau;
        }
    }
    Ok((weights, me_variance))
}

fn unit_stats(m: usize) -> LocalStats {
    LocalStats {
        mean0: DVector::zeros(m),
        mean1: DVector::from_element(m, 1.0),
        cov0: DMatrix::identity(m, m),
        cov1: DMatrix::identity(m, m),
        count0: 0,
        count1: 0,
    }
}

/// The full learning loop over `κ = 0, …, κ_max − 1`, then the final pass
/// on `x̂^(κ_max)`.
pub fn run_offline_adaptation(
    topology: &Topology,
    couplings: &CouplingSet,
    llr_window: &[Vec<f64>],
    averaged: &AveragedWindow,
    config: &AdaptationConfig,
) -> Result<AdaptationOutput> {
    if config.link_copies == 0 || config.abp_iterations == 0 {
        return Err(Error::Config(
            "link copies and ABP iterations must be at least 1".into(),
        ));
    }
    if averaged.averaged.len() != llr_window.len() {
        return Err(Error::Dimension(
            "averaged window length differs from the statistic window".into(),
        ));
    }
    let tau0 = match &config.initial_thresholds {
        Some(t) => t.clone(),
        None => median_thresholds(llr_window)?,
    };
    let mut labels = initialize_outcomes(llr_window, &tau0)?;
    let mut diagnostics = Vec::new();
    for kappa in 0..config.kappa_max {
        let pass = stage_one_pass(topology, couplings, llr_window, averaged, &labels, config.eta)?;
        let (rule, weights) = abp_parameters(topology, &pass.ratios)?;
        let decisions = abp_window_decisions(topology, &rule, &weights, llr_window, config.abp_iterations);
        let thresholds = label_conditional_thresholds(&decisions, &labels, config.alpha);
        let next = initialize_outcomes(&decisions, &thresholds)?;
        for j in 0..topology.node_count() {
            diagnostics.push(KappaDiagnostic {
                kappa,
                node: j,
                coefficients: pass.ratios[j].clone(),
                threshold: thresholds[j],
                label_flips: labels.iter().zip(&next).filter(|(a, b)| a[j] != b[j]).count(),
            });
        }
        labels = next;
    }
    let (weights, me_variance) = adapt_with_labels(topology, couplings, llr_window, averaged, &labels, config)?;
    Ok(AdaptationOutput {
        weights,
        diagnostics,
        labels,
        me_variance,
    })
}
