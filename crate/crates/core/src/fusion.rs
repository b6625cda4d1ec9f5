//! Deflection-optimal linear fusion and its two-stage application to
//! linear BP.
//!
//! Stage one picks per-node coefficients `c_j` over the closed neighborhood
//! to suppress likelihood errors. They are turned into message coefficients
//! by dividing by the self entry and shrinking, if needed, until the
//! contraction bound holds. Stage two then picks decision weights `w_j` on
//! the received messages to suppress message errors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::analysis::{linear_statistic_moments, q_inverse};
use crate::bp::{DecisionWeights, MessageRule};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::scenario::LocalStats;

/// Safety factor applied inside the contraction normalization.
pub const CONTRACTION_MARGIN: f64 = 0.99;

const MAX_CONDITION: f64 = 1e12;
const RIDGE: f64 = 1e-9;

/// `(wᵀδ)² / (wᵀΣw)`.
pub fn deflection(w: &DVector<f64>, delta: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    w.dot(delta).powi(2) / w.dot(&(sigma * w))
}

fn regularized(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 && max / min <= MAX_CONDITION {
        return sym;
    }
    let scale = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    // Lift the spectrum into the positive range before adding the ridge.
    let lift = if min <= 0.0 { -min } else { 0.0 };
    sym + DMatrix::identity(n, n) * (lift + RIDGE * scale)
}

/// Unit-norm maximizer `Σ⁻¹δ / ‖Σ⁻¹δ‖` of the deflection, signed so that
/// `wᵀδ ≥ 0`.
pub fn maximize_deflection(delta: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = delta.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!(
            "covariance {}x{} for a vector of length {n}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if delta.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("deflection inputs"));
    }
    if delta.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroDiscriminant);
    }
    let sigma = regularized(sigma);
    let direction = match sigma.clone().cholesky() {
        Some(ch) => ch.solve(delta),
        None => sigma.lu().solve(delta).ok_or(Error::ZeroDiscriminant)?,
    };
    let norm = direction.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroDiscriminant);
    }
    let w = direction / norm;
    Ok(if w.dot(delta) < 0.0 { -w } else { w })
}

/// `argmax (cᵀδ)² / cᵀ(Σ_{γ|0} + Σ_ε)c` over unit `c`.
pub fn stage_one(stats: &LocalStats, sigma_eps: &DMatrix<f64>) -> Result<DVector<f64>> {
    maximize_deflection(&stats.delta(), &(&stats.cov0 + sigma_eps))
}

/// `argmax (wᵀδ̂)² / wᵀ(Σ_{χ|0} + Σ_ν)w` with `δ̂ = c ∘ δ` and
/// `Σ_{χ|0} = ccᵀ ∘ (Σ_{γ|0} + Σ_ε)`.
pub fn stage_two(
    c: &DVector<f64>,
    stats: &LocalStats,
    sigma_eps: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if c.len() != stats.dim() {
        return Err(Error::Dimension(format!(
            "stage-one vector of length {} for a neighborhood of {}",
            c.len(),
            stats.dim()
        )));
    }
    let delta_hat = c.component_mul(&stats.delta());
    let chi = (c * c.transpose()).component_mul(&(&stats.cov0 + sigma_eps));
    maximize_deflection(&delta_hat, &(chi + sigma_nu))
}

/// `τ = Q⁻¹(α)·√var0 + mean0`, so that the Gaussian false-alarm rate is `α`.
pub fn threshold_for_alpha(alpha: f64, mean0: f64, var0: f64) -> Result<f64> {
    if !(var0 > 0.0) {
        return Err(Error::NonPositiveVariance(var0));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "false-alarm target must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(q_inverse(alpha) * var0.sqrt() + mean0)
}

/// Factor that brings every off-self entry of a closed-neighborhood vector
/// under `CONTRACTION_MARGIN · bound`; one when it already complies.
pub fn convergence_scale(vector: &[f64], bound: Option<f64>) -> f64 {
    let Some(bound) = bound else { return 1.0 };
    let max = vector.iter().skip(1).fold(0.0f64, |m, v| m.max(v.abs()));
    if max < bound {
        1.0
    } else {
        CONTRACTION_MARGIN * bound / max
    }
}

/// Rescales each closed-neighborhood vector (self first) whose off-self
/// entries violate the contraction bound of the topology.
pub fn normalize_for_convergence(vectors: &[Vec<f64>], topology: &Topology) -> Vec<Vec<f64>> {
    let bound = topology.contraction_bound();
    vectors
        .iter()
        .map(|v| {
            let s = convergence_scale(v, bound);
            v.iter().map(|x| x * s).collect()
        })
        .collect()
}

/// Result of the entrywise η-test.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaOutcome {
    pub values: Vec<f64>,
    /// Entries taken from the BP coefficients.
    pub from_bp: Vec<bool>,
    /// Entries whose offline coefficient was exactly zero.
    pub zero_offline: Vec<bool>,
}

/// Takes `c_bp(n)` where `c_bp(n) / c_offline(n) ≥ η`, else `c_offline(n)`.
/// A zero offline entry counts as an infinite ratio.
pub fn eta_test(c_offline: &[f64], c_bp: &[f64], eta: f64) -> Result<EtaOutcome> {
    if c_offline.len() != c_bp.len() {
        return Err(Error::Dimension(format!(
            "offline vector of length {} vs BP vector of length {}",
            c_offline.len(),
            c_bp.len()
        )));
    }
    let mut out = EtaOutcome {
        values: Vec::with_capacity(c_bp.len()),
        from_bp: Vec::with_capacity(c_bp.len()),
        zero_offline: Vec::with_capacity(c_bp.len()),
    };
    for (&off, &bp) in c_offline.iter().zip(c_bp) {
        let zero = off == 0.0;
        let take_bp = zero || bp / off >= eta;
        out.values.push(if take_bp { bp } else { off });
        out.from_bp.push(take_bp);
        out.zero_offline.push(zero);
    }
    Ok(out)
}

/// Fusion parameters of one node; vectors run over the closed
/// neighborhood with the node itself first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFusion {
    pub node: usize,
    pub neighborhood: Vec<usize>,
    /// Unit-norm stage-one coefficients.
    pub c: Vec<f64>,
    /// Unit-norm stage-two weights.
    pub w: Vec<f64>,
    /// Coefficients applied to the linear messages, self entry one.
    pub message_coefficients: Vec<f64>,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub nodes: Vec<NodeFusion>,
}

impl FusionWeights {
    fn check(&self, topology: &Topology) -> Result<()> {
        if self.nodes.len() != topology.node_count() {
            return Err(Error::Dimension(format!(
                "fusion weights for {} nodes on a {}-node topology",
                self.nodes.len(),
                topology.node_count()
            )));
        }
        for (j, node) in self.nodes.iter().enumerate() {
            let expected = topology.closed_neighborhood(j);
            if node.node != j
                || node.neighborhood != expected
                || node.message_coefficients.len() != expected.len()
                || node.w.len() != expected.len()
            {
                return Err(Error::Dimension(format!(
                    "fusion weights of node {j} do not match its neighborhood"
                )));
            }
        }
        Ok(())
    }

    /// Linear rule whose coefficient on `k → j` is node `j`'s message
    /// coefficient for `k`.
    pub fn message_rule(&self, topology: &Topology) -> Result<MessageRule> {
        self.check(topology)?;
        let mut coeff = vec![0.0; topology.directed_count()];
        for node in &self.nodes {
            for (&k, &c) in node.neighborhood.iter().zip(&node.message_coefficients).skip(1) {
                coeff[topology.directed_index(k, node.node).expect("neighbor edge")] = c;
            }
        }
        Ok(MessageRule::Linear(coeff))
    }

    /// Decision weights `w_jk / w_jj`.
    pub fn decision_weights(&self, topology: &Topology) -> Result<DecisionWeights> {
        self.check(topology)?;
        DecisionWeights::from_neighborhoods(topology, &self.nodes.iter().map(|n| n.w.clone()).collect::<Vec<_>>())
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.threshold).collect()
    }
}

/// Inputs describing one node's neighborhood statistics and error
/// covariances, all over the closed neighborhood.
#[derive(Debug, Clone)]
pub struct NodeInputs {
    pub stats: LocalStats,
    pub sigma_eps: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
}

/// Stage-one coefficients divided by their self entry. Returns `None` when
/// the self entry is not positive, which leaves the ratio undefined.
pub fn self_ratio(c: &DVector<f64>) -> Option<Vec<f64>> {
    let self_entry = c[0];
    (self_entry > 1e-12 * c.norm()).then(|| c.iter().map(|v| v / self_entry).collect())
}

/// Completes the two-stage design from stage-one ratio vectors (self entry
/// one): contraction scaling, stage two and a Gaussian-form threshold at
/// false-alarm rate `alpha`.
pub fn complete_design(
    topology: &Topology,
    ratios: &[Vec<f64>],
    inputs: &[NodeInputs],
    alpha: f64,
) -> Result<FusionWeights> {
    let bound = topology.contraction_bound();
    let mut nodes = Vec::with_capacity(topology.node_count());
    for j in 0..topology.node_count() {
        let ratio = &ratios[j];
        let input = &inputs[j];
        let scale = convergence_scale(ratio, bound);
        let mut applied: Vec<f64> = ratio.iter().map(|v| v * scale).collect();
        applied[0] = 1.0;
        let applied_vec = DVector::from_column_slice(&applied);
        let mut flags = Vec::new();
        let w = match stage_two(&applied_vec, &input.stats, &input.sigma_eps, &input.sigma_nu) {
            Ok(w) if w[0] > 0.0 => w,
            Ok(_) | Err(Error::ZeroDiscriminant) => {
                flags.push("stage_two_fallback".to_string());
                let mut ones = DVector::from_element(applied.len(), 1.0);
                ones /= ones.norm();
                ones
            }
            Err(e) => return Err(e),
        };
        let w_rel: Vec<f64> = w.iter().map(|v| v / w[0]).collect();
        let [h0, _] = linear_statistic_moments(&applied, &w_rel, &input.stats, &input.sigma_eps, &input.sigma_nu)?;
        let threshold = threshold_for_alpha(alpha, h0.mean, h0.variance)?;
        let ratio_vec = DVector::from_column_slice(ratio);
        nodes.push(NodeFusion {
            node: j,
            neighborhood: topology.closed_neighborhood(j),
            c: (&ratio_vec / ratio_vec.norm()).iter().copied().collect(),
            w: w.iter().copied().collect(),
            message_coefficients: applied,
            threshold,
            flags,
        });
    }
    Ok(FusionWeights { nodes })
}

/// Full two-stage design from known neighborhood statistics.
pub fn two_stage_design(topology: &Topology, inputs: &[NodeInputs], alpha: f64) -> Result<FusionWeights> {
    if inputs.len() != topology.node_count() {
        return Err(Error::Dimension(format!(
            "{} neighborhood inputs for {} nodes",
            inputs.len(),
            topology.node_count()
        )));
    }
    let ratios = inputs
        .iter()
        .enumerate()
        .map(|(j, input)| {
            let c = stage_one(&input.stats, &input.sigma_eps)?;
            self_ratio(&c)
                .ok_or_else(|| Error::Config(format!("stage-one self coefficient of node {j} is not positive")))
        })
        .collect::<Result<Vec<_>>>()?;
    complete_design(topology, &ratios, inputs, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::closed_form_rates;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn diag(x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&v(x))
    }

    fn stats(delta: &[f64], cov0: DMatrix<f64>) -> LocalStats {
        let n = delta.len();
        LocalStats {
            mean0: DVector::zeros(n),
            mean1: v(delta),
            cov1: cov0.clone(),
            cov0,
            count0: 100,
            count1: 100,
        }
    }

    #[test]
    fn deflection_examples() {
        let w = maximize_deflection(&v(&[3.0, 4.0]), &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(w[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(
            deflection(&w, &v(&[3.0, 4.0]), &DMatrix::identity(2, 2)),
            25.0,
            epsilon = 1e-10
        );

        let sigma = diag(&[1.0, 4.0]);
        let delta = v(&[1.0, 1.0]);
        let w = maximize_deflection(&delta, &sigma).unwrap();
        assert_abs_diff_eq!(w[0], 0.9701, epsilon = 1e-4);
        assert_abs_diff_eq!(w[1], 0.2425, epsilon = 1e-4);
        // Grid search over the unit circle never beats the closed form.
        let best = deflection(&w, &delta, &sigma);
        for i in 0..3600 {
            let t = i as f64 * std::f64::consts::PI / 1800.0;
            assert!(deflection(&v(&[t.cos(), t.sin()]), &delta, &sigma) <= best + 1e-12);
        }

        assert_eq!(
            maximize_deflection(&v(&[0.0, 0.0]), &sigma),
            Err(Error::ZeroDiscriminant)
        );
    }

    #[test]
    fn deflection_sign_and_scale() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let a = maximize_deflection(&v(&[-1.0, 2.0]), &sigma).unwrap();
        let b = maximize_deflection(&v(&[-7.0, 14.0]), &sigma).unwrap();
        assert!((&a - &b).amax() < 1e-14);
        assert!(a.dot(&v(&[-1.0, 2.0])) >= 0.0);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let w = maximize_deflection(&v(&[1.0, 0.5]), &sigma).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(w.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stage_one_examples() {
        let st = stats(&[1.0, 2.0, 0.5], DMatrix::identity(3, 3));
        let c = stage_one(&st, &DMatrix::zeros(3, 3)).unwrap();
        let d = st.delta();
        assert!((c - &d / d.norm()).amax() < 1e-12);

        let st = stats(&[1.0, 1.0], DMatrix::identity(2, 2));
        let c = stage_one(&st, &diag(&[0.0, 100.0])).unwrap();
        assert_abs_diff_eq!(c[1] / c[0], 1.0 / 101.0, epsilon = 1e-12);

        // Permuting the neighborhood permutes the solution.
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.2, 0.1, 0.2, 1.0]);
        let st = stats(&[1.0, 0.4, 0.8], cov.clone());
        let c = stage_one(&st, &diag(&[0.1, 0.2, 0.3])).unwrap();
        let perm = [2, 0, 1];
        let p = DMatrix::from_fn(3, 3, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let st_p = stats(&[0.8, 1.0, 0.4], &p * cov * p.transpose());
        let c_p = stage_one(&st_p, &diag(&[0.3, 0.1, 0.2])).unwrap();
        assert!((c_p - &p * c).amax() < 1e-12);
    }

    #[test]
    fn stage_two_examples() {
        let st = stats(&[1.0, 0.7], DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]));
        let zero = DMatrix::zeros(2, 2);
        let c = stage_one(&st, &zero).unwrap();
        let w = stage_two(&c, &st, &zero, &zero).unwrap();
        // With no errors w ∘ c recovers the stage-one direction.
        let v_dir = w.component_mul(&c);
        assert!((&v_dir / v_dir.norm() - &c).amax() < 1e-9);

        let w_big = stage_two(&c, &st, &zero, &diag(&[0.0, 1e4])).unwrap();
        assert!(w_big[1].abs() < 1e-3);

        let e0 = v(&[1.0, 0.0]);
        let w = stage_two(&e0, &st, &zero, &diag(&[0.0, 0.5])).unwrap();
        assert!((w - &e0).amax() < 1e-12);
    }

    #[test]
    fn error_suppression_is_monotone() {
        let st = stats(&[1.0, 0.8], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.2]));
        let mut last_c = f64::INFINITY;
        let mut last_w = f64::INFINITY;
        for k in 0..30 {
            let var = 0.2 * k as f64;
            let c = stage_one(&st, &diag(&[0.0, var])).unwrap();
            assert!(c[1].abs() <= last_c + 1e-12);
            last_c = c[1].abs();
            let w = stage_two(&v(&[0.9, 0.4]), &st, &DMatrix::zeros(2, 2), &diag(&[0.0, var])).unwrap();
            assert!(w[1].abs() <= last_w + 1e-12);
            last_w = w[1].abs();
        }
    }

    #[test]
    fn threshold_examples() {
        assert_abs_diff_eq!(threshold_for_alpha(0.5, 3.0, 2.0).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            threshold_for_alpha(0.158_655_253_931_457, 1.0, 4.0).unwrap(),
            3.0,
            epsilon = 1e-9
        );
        assert_eq!(threshold_for_alpha(0.1, 0.0, 0.0), Err(Error::NonPositiveVariance(0.0)));

        let st = stats(&[1.0, 0.5], DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]));
        let (c, w) = ([1.0, 0.3], [1.0, 0.8]);
        let eps = diag(&[0.1, 0.2]);
        let nu = diag(&[0.0, 0.3]);
        let [h0, _] = linear_statistic_moments(&c, &w, &st, &eps, &nu).unwrap();
        for alpha in [0.01, 0.1, 0.37] {
            let tau = threshold_for_alpha(alpha, h0.mean, h0.variance).unwrap();
            let (pf, _) = closed_form_rates(tau, &c, &w, &st, &eps, &nu).unwrap();
            assert_abs_diff_eq!(pf, alpha, epsilon = 1e-10);
        }
    }

    #[test]
    fn normalization_examples() {
        let t = Topology::fig1();
        let bound = t.contraction_bound();
        assert_eq!(convergence_scale(&[1.0, 0.2, 0.1], bound), 1.0);
        let two_bound = Some(0.5);
        let s = convergence_scale(&[0.9, 0.9], two_bound);
        assert_abs_diff_eq!(s, 0.55, epsilon = 1e-15);
        let out = normalize_for_convergence(
            &[vec![1.0, 0.9, 0.1], vec![1.0, 0.2, 0.2]],
            &Topology::new(3, [(0, 1), (1, 2)]).unwrap(),
        );
        // Max degree 2 gives a bound of 1, which both vectors already meet.
        assert_eq!(out[0], vec![1.0, 0.9, 0.1]);
        assert_eq!(out[1], vec![1.0, 0.2, 0.2]);
        let out = normalize_for_convergence(&[vec![0.9, 0.9, 0.0]], &Topology::fig1());
        assert_abs_diff_eq!(out[0][1], 0.99 / 3.0, epsilon = 1e-12);

        let st = stats(&[1.0, 0.5], DMatrix::identity(2, 2));
        let c = v(&[0.9, 0.9]);
        let sigma = &st.cov0;
        assert_abs_diff_eq!(
            deflection(&c, &st.delta(), sigma),
            deflection(&(c.clone() * 0.55), &st.delta(), sigma),
            epsilon = 1e-12
        );
    }

    #[test]
    fn eta_examples() {
        let out = eta_test(&[0.01, 0.4], &[0.3, 0.3], 2.0).unwrap();
        assert_eq!(out.values, vec![0.3, 0.4]);
        let out = eta_test(&[0.2, 0.5], &[0.3, 0.9], f64::INFINITY).unwrap();
        assert_eq!(out.values, vec![0.2, 0.5]);
        let out = eta_test(&[0.3, 0.7], &[0.3, 0.7], 1.0).unwrap();
        assert_eq!(out.values, vec![0.3, 0.7]);
        assert!(out.from_bp.iter().all(|b| *b));
        let out = eta_test(&[0.0, 0.7], &[0.3, 0.7], 2.0).unwrap();
        assert_eq!(out.values[0], 0.3);
        assert!(out.zero_offline[0]);
        assert!(eta_test(&[0.1], &[0.1, 0.2], 2.0).is_err());
    }

    #[test]
    fn design_respects_contraction_and_serializes() {
        let t = Topology::fig1();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<NodeInputs> = (0..5)
            .map(|j| {
                let m = t.degree(j) + 1;
                let delta: Vec<f64> = (0..m)
                    .map(|i| if i == 0 { 2.0 } else { rng.random_range(0.5..3.0) })
                    .collect();
                NodeInputs {
                    stats: stats(&delta, DMatrix::identity(m, m)),
                    sigma_eps: DMatrix::identity(m, m) * 0.1,
                    sigma_nu: DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| if i == 0 { 0.0 } else { 0.05 })),
                }
            })
            .collect();
        let fw = two_stage_design(&t, &inputs, 0.1).unwrap();
        let bound = t.contraction_bound().unwrap();
        for node in &fw.nodes {
            assert_eq!(node.message_coefficients[0], 1.0);
            assert!(node.message_coefficients[1..].iter().all(|c| c.abs() < bound));
            assert_abs_diff_eq!(DVector::from_column_slice(&node.c).norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(DVector::from_column_slice(&node.w).norm(), 1.0, epsilon = 1e-12);
        }
        let rule = fw.message_rule(&t).unwrap();
        assert!(matches!(rule, MessageRule::Linear(_)));
        fw.decision_weights(&t).unwrap();

        let json = serde_json::to_string(&fw).unwrap();
        let back: FusionWeights = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fw);
    }
}
