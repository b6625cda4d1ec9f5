//! Sensing-network graph, pairwise MRF parameters and the linearized
//! message-passing matrices derived from them.
//!
//! Nodes are indexed from zero internally. Scenario files and reports use
//! one-based labels, which is the only place the offset appears.
//!
//! Every undirected edge `e = (i, j)` with `i < j` owns two directed edges:
//! `2e` is `i → j` and `2e + 1` is `j → i`. Messages, message errors and
//! decision weights are all stored per directed edge in that order.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// A directed edge `from → to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectedEdge {
    pub from: usize,
    pub to: usize,
}

/// Undirected sensing graph with precomputed message-passing adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    directed: Vec<DirectedEdge>,
    incoming: Vec<Vec<usize>>,
    upstream: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology from zero-based node pairs.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut seen = BTreeSet::new();
        for (a, b) in edges {
            for node in [a, b] {
                if node >= node_count {
                    return Err(Error::NodeOutOfRange { node, node_count });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::DuplicateEdge(key.0, key.1));
            }
        }
        let edges: Vec<(usize, usize)> = seen.into_iter().collect();

        let mut neighbors = vec![Vec::new(); node_count];
        let mut directed = Vec::with_capacity(2 * edges.len());
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
            directed.push(DirectedEdge { from: i, to: j });
            directed.push(DirectedEdge { from: j, to: i });
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let mut incoming = vec![Vec::new(); node_count];
        for (id, e) in directed.iter().enumerate() {
            incoming[e.to].push(id);
        }
        let upstream = directed
            .iter()
            .map(|e| {
                incoming[e.from]
                    .iter()
                    .copied()
                    .filter(|&id| directed[id].from != e.to)
                    .collect()
            })
            .collect();

        Ok(Self {
            node_count,
            edges,
            neighbors,
            directed,
            incoming,
            upstream,
        })
    }

    /// The five-node network of the reference spectrum-sensing scenario:
    /// two triangles `1-2-3` and `3-4-5` sharing node 3 (one-based labels).
    pub fn fig1() -> Self {
        Self::new(5, [(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)]).expect("preset topology is valid")
    }

    /// Random connected graph: a random spanning tree plus extra edges kept
    /// independently with probability `extra_edge_prob`.
    pub fn random_connected<R: Rng + ?Sized>(node_count: usize, extra_edge_prob: f64, rng: &mut R) -> Result<Self> {
        let mut edges = BTreeSet::new();
        for n in 1..node_count {
            let parent = rng.random_range(0..n);
            edges.insert((parent, n));
        }
        for i in 0..node_count {
            for j in (i + 1)..node_count {
                if !edges.contains(&(i, j)) && rng.random_bool(extra_edge_prob) {
                    edges.insert((i, j));
                }
            }
        }
        Self::new(node_count, edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Undirected edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        self.edges.binary_search(&(a.min(b), a.max(b))).ok()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edge_index(a, b).is_some()
    }

    /// Sorted neighbor list `N_j`.
    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[j]
    }

    pub fn degree(&self, j: usize) -> usize {
        self.neighbors[j].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Closed neighborhood `M_j = {j} ∪ N_j`, with `j` first and the
    /// neighbors following in ascending order. Every per-neighborhood vector
    /// in the crate uses this ordering.
    pub fn closed_neighborhood(&self, j: usize) -> Vec<usize> {
        std::iter::once(j).chain(self.neighbors[j].iter().copied()).collect()
    }

    pub fn directed_edges(&self) -> &[DirectedEdge] {
        &self.directed
    }

    pub fn directed_count(&self) -> usize {
        self.directed.len()
    }

    pub fn directed_index(&self, from: usize, to: usize) -> Option<usize> {
        let e = self.edge_index(from, to)?;
        Some(if from < to { 2 * e } else { 2 * e + 1 })
    }

    /// Directed edges `k → j` arriving at `j`.
    pub fn incoming(&self, j: usize) -> &[usize] {
        &self.incoming[j]
    }

    /// For directed edge `k → j`, the edges `n → k` with `n ≠ j`.
    pub fn upstream(&self, edge: usize) -> &[usize] {
        &self.upstream[edge]
    }

    /// Per-coefficient contraction bound `1 / (max degree − 1)`; `None` when
    /// the maximum degree is at most one and the iteration always converges.
    pub fn contraction_bound(&self) -> Option<f64> {
        let d = self.max_degree();
        (d > 1).then(|| 1.0 / (d as f64 - 1.0))
    }

    /// Relabels nodes: old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.node_count)?;
        Self::new(self.node_count, self.edges.iter().map(|&(i, j)| (perm[i], perm[j])))
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Dimension(format!(
            "permutation of length {} for {n} nodes",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Dimension("not a permutation".into()));
        }
    }
    Ok(())
}

/// Pairwise couplings `J` (one per undirected edge) and node offsets `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSet {
    couplings: Vec<f64>,
    theta: Vec<f64>,
}

impl CouplingSet {
    /// Couplings keyed by zero-based node pairs. Every topology edge must be
    /// covered; pairs that are not edges are rejected.
    pub fn new(
        topology: &Topology,
        couplings: impl IntoIterator<Item = ((usize, usize), f64)>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let mut values = vec![None; topology.edges().len()];
        for ((a, b), value) in couplings {
            let e = topology.edge_index(a, b).ok_or(Error::UnknownEdge(a, b))?;
            if !value.is_finite() {
                return Err(Error::NonFinite("coupling"));
            }
            values[e] = Some(value);
        }
        let couplings = values
            .into_iter()
            .zip(topology.edges())
            .map(|(v, &(i, j))| v.ok_or(Error::MissingCoupling(i, j)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_edge_values(topology, couplings, theta)
    }

    /// Couplings given in topology edge order.
    pub fn from_edge_values(topology: &Topology, couplings: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if couplings.len() != topology.edges().len() {
            return Err(Error::Dimension(format!(
                "{} couplings for {} edges",
                couplings.len(),
                topology.edges().len()
            )));
        }
        if theta.len() != topology.node_count() {
            return Err(Error::Dimension(format!(
                "{} offsets for {} nodes",
                theta.len(),
                topology.node_count()
            )));
        }
        if couplings.iter().chain(&theta).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling set"));
        }
        Ok(Self { couplings, theta })
    }

    /// The same coupling on every edge and `θ = 0`.
    pub fn uniform(topology: &Topology, coupling: f64) -> Self {
        Self {
            couplings: vec![coupling; topology.edges().len()],
            theta: vec![0.0; topology.node_count()],
        }
    }

    /// Coupling of undirected edge `e` (topology edge order).
    pub fn coupling(&self, e: usize) -> f64 {
        self.couplings[e]
    }

    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn between(&self, topology: &Topology, a: usize, b: usize) -> Option<f64> {
        topology.edge_index(a, b).map(|e| self.couplings[e])
    }
}

/// Slope of the log-domain message map at the origin,
/// `(e^{2J} − 1) / (1 + e^J)²`, which simplifies to `tanh(J / 2)`.
///
/// Evaluated in the overflow-free form `(1 − e^{−|J|}) / (1 + e^{−|J|})`.
pub fn coefficient_from_coupling(coupling: f64) -> f64 {
    let t = (-coupling.abs()).exp();
    ((1.0 - t) / (1.0 + t)).copysign(coupling)
}

/// Inverse of [`coefficient_from_coupling`] for `|c| < 1`.
pub fn coupling_from_coefficient(c: f64) -> f64 {
    2.0 * c.atanh()
}

/// Linear message coefficients: entry `(j, k)` holds `c_jk`, the weight node
/// `k`'s outgoing message to `j` applies. Zero off the edge set and on the
/// diagonal. Not necessarily symmetric once fusion coefficients are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    c: DMatrix<f64>,
}

impl CoefficientMatrix {
    /// Wraps a dense matrix, checking that it respects the graph sparsity.
    pub fn new(topology: &Topology, c: DMatrix<f64>) -> Result<Self> {
        let n = topology.node_count();
        if c.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!(
                "coefficient matrix {}x{} for {n} nodes",
                c.nrows(),
                c.ncols()
            )));
        }
        for j in 0..n {
            for k in 0..n {
                let v = c[(j, k)];
                if !v.is_finite() {
                    return Err(Error::NonFinite("coefficient matrix"));
                }
                if v != 0.0 && !topology.has_edge(j, k) {
                    return Err(Error::UnknownEdge(j, k));
                }
            }
        }
        Ok(Self { c })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            c: DMatrix::zeros(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.c[(j, k)]
    }

    pub fn node_count(&self) -> usize {
        self.c.nrows()
    }

    /// `P C Pᵀ` for the relabeling `i ↦ perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.c.nrows();
        let mut c = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                c[(perm[j], perm[k])] = self.c[(j, k)];
            }
        }
        Self { c }
    }
}

pub fn build_coefficient_matrix(topology: &Topology, couplings: &CouplingSet) -> Result<CoefficientMatrix> {
    if couplings.couplings().len() != topology.edges().len() {
        let missing = topology.edges()[couplings.couplings().len().min(topology.edges().len())];
        return Err(Error::MissingCoupling(missing.0, missing.1));
    }
    let n = topology.node_count();
    let mut c = DMatrix::zeros(n, n);
    for (e, &(i, j)) in topology.edges().iter().enumerate() {
        let v = coefficient_from_coupling(couplings.coupling(e));
        c[(i, j)] = v;
        c[(j, i)] = v;
    }
    Ok(CoefficientMatrix { c })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceVerdict {
    /// Every `|c_jk|` is below `1 / (max degree − 1)`.
    pub contraction_ok: bool,
    pub spectral_radius: f64,
    pub spectral_ok: bool,
}

pub fn check_convergence(c: &CoefficientMatrix, topology: &Topology) -> ConvergenceVerdict {
    let contraction_ok = match topology.contraction_bound() {
        None => true,
        Some(bound) => c.matrix().iter().all(|v| v.abs() < bound),
    };
    let spectral_radius = spectral_radius(c.matrix());
    ConvergenceVerdict {
        contraction_ok,
        spectral_radius,
        spectral_ok: spectral_radius < 1.0,
    }
}

/// Largest singular value of `C` by power iteration on `CᵀC`; equal to the
/// spectral radius for symmetric `C` and an upper bound on it otherwise.
pub fn spectral_radius(c: &DMatrix<f64>) -> f64 {
    let n = c.nrows();
    if n == 0 || c.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let gram = c.transpose() * c;
    // Deterministic start with a small tilt so it is not orthogonal to the
    // leading eigenvector of a structured matrix.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * (i as f64 + 1.0).sqrt());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..200 {
        let w = &gram * &v;
        let rayleigh = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let converged = (rayleigh - estimate).abs() <= 1e-9 * rayleigh.abs().max(f64::MIN_POSITIVE);
        estimate = rayleigh;
        if converged {
            break;
        }
    }
    estimate.max(0.0).sqrt()
}

/// Combining matrix of the linearized decision variables. Entry `(j, i)` is
/// `a_ji`, the weight of `γ_i` in `λ_j`, so `λ = Aᵀγ` is [`Self::apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct CombiningMatrix {
    weights: DMatrix<f64>,
}

impl CombiningMatrix {
    pub fn from_weights(weights: DMatrix<f64>) -> Self {
        Self { weights }
    }

    /// `a_j`, the combining weights of node `j`.
    pub fn row(&self, j: usize) -> DVector<f64> {
        self.weights.row(j).transpose()
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.weights[(j, i)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn apply(&self, llrs: &[f64]) -> Vec<f64> {
        (&self.weights * DVector::from_column_slice(llrs))
            .iter()
            .copied()
            .collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.weights.nrows();
        let mut w = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                w[(perm[j], perm[i])] = self.weights[(j, i)];
            }
        }
        Self { weights: w }
    }
}

/// `A = I + S − diag(S)` with `S = Σ_{n≥1} Cⁿ = (I − C)⁻¹ C`.
pub fn combining_matrix(c: &CoefficientMatrix) -> Result<CombiningMatrix> {
    let n = c.node_count();
    let radius = spectral_radius(c.matrix());
    if radius >= 1.0 {
        return Err(Error::Divergent(radius));
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let lu = (&identity - c.matrix()).lu();
    let sum = lu.solve(c.matrix()).ok_or(Error::Divergent(radius))?;
    Ok(CombiningMatrix {
        weights: with_unit_diagonal(sum),
    })
}

/// Truncated power series for the same matrix as [`combining_matrix`]:
/// stops once `‖Cⁿ‖_∞ < 1e-12` or after 500 terms.
pub fn combining_matrix_series(c: &CoefficientMatrix) -> Result<CombiningMatrix> {
    let radius = spectral_radius(c.matrix());
    if radius >= 1.0 {
        return Err(Error::Divergent(radius));
    }
    let mut power = c.matrix().clone();
    let mut sum = power.clone();
    for _ in 1..500 {
        if row_sum_norm(&power) < 1e-12 {
            break;
        }
        power = &power * c.matrix();
        sum += &power;
    }
    Ok(CombiningMatrix {
        weights: with_unit_diagonal(sum),
    })
}

fn with_unit_diagonal(mut sum: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..sum.nrows() {
        sum[(i, i)] = 1.0;
    }
    sum
}

pub(crate) fn row_sum_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exact map from local LLRs to the fixed point of the error-free linear
/// message iteration, solved in directed-edge space:
/// `m = (I − D B)⁻¹ D P γ` and `λ = γ + Q m`.
///
/// Unlike [`combining_matrix`] it sums only non-backtracking walks, which
/// is what the message recursion actually propagates.
pub fn fixed_point_combining_matrix(topology: &Topology, c: &CoefficientMatrix) -> Result<CombiningMatrix> {
    let n = topology.node_count();
    let m = topology.directed_count();
    let mut db = DMatrix::<f64>::zeros(m, m);
    let mut dp = DMatrix::<f64>::zeros(m, n);
    for (id, e) in topology.directed_edges().iter().enumerate() {
        let coeff = c.get(e.to, e.from);
        dp[(id, e.from)] = coeff;
        for &up in topology.upstream(id) {
            db[(id, up)] = coeff;
        }
    }
    let radius = spectral_radius_general(&db);
    if radius >= 1.0 {
        return Err(Error::Divergent(radius));
    }
    let system = DMatrix::<f64>::identity(m, m) - db;
    let messages = system.lu().solve(&dp).ok_or(Error::Divergent(radius))?;
    let mut weights = DMatrix::<f64>::identity(n, n);
    for (id, e) in topology.directed_edges().iter().enumerate() {
        for i in 0..n {
            weights[(e.to, i)] += messages[(id, i)];
        }
    }
    Ok(CombiningMatrix { weights })
}

/// Spectral radius of a general square matrix from its complex eigenvalues.
///
/// The Schur iteration is capped; unconverged matrices (which occur for some
/// edge-space matrices) fall back to [`spectral_radius_gelfand`].
pub(crate) fn spectral_radius_general(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    match m.clone().try_schur(f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => spectral_radius_gelfand(m),
    }
}

/// `lim ‖M^(2^k)‖^(1/2^k)` by repeated squaring, renormalizing each step.
pub(crate) fn spectral_radius_gelfand(m: &DMatrix<f64>) -> f64 {
    let mut power = m.clone();
    let mut log_scale = 0.0;
    let mut exponent = 1.0;
    for _ in 0..48 {
        let norm = row_sum_norm(&power);
        if norm == 0.0 {
            return 0.0;
        }
        power /= norm;
        log_scale += norm.ln() / exponent;
        power = &power * &power;
        exponent *= 2.0;
    }
    log_scale.exp()
}

/// Plug-in Ising estimate from a `T × N` window of binary node states.
///
/// With additive smoothing of 0.5 per cell, `J_kj` is the log odds ratio of
/// the smoothed 2×2 table of `(x_k, x_j)` and `θ_k` the smoothed log odds of
/// `x_k`. For the `{0, 1}` exponential model the log odds ratio of a pair
/// identifies the pairwise coupling.
pub fn estimate_couplings(topology: &Topology, window: &[Vec<bool>]) -> Result<CouplingSet> {
    const MIN_ROWS: usize = 100;
    const SMOOTHING: f64 = 0.5;
    if window.len() < MIN_ROWS {
        return Err(Error::WindowTooShort {
            got: window.len(),
            need: MIN_ROWS,
        });
    }
    let n = topology.node_count();
    if let Some(row) = window.iter().find(|r| r.len() != n) {
        return Err(Error::Dimension(format!(
            "window row of length {} for {n} nodes",
            row.len()
        )));
    }
    let theta = (0..n)
        .map(|k| {
            let ones = window.iter().filter(|r| r[k]).count() as f64;
            let zeros = window.len() as f64 - ones;
            ((ones + SMOOTHING) / (zeros + SMOOTHING)).ln()
        })
        .collect();
    let mut couplings = Vec::with_capacity(topology.edges().len());
    for &(i, j) in topology.edges() {
        let mut counts = [[SMOOTHING; 2]; 2];
        for r in window {
            counts[r[i] as usize][r[j] as usize] += 1.0;
        }
        let value = (counts[1][1] * counts[0][0] / (counts[1][0] * counts[0][1])).ln();
        if !value.is_finite() {
            return Err(Error::DegenerateFrequency(i, j));
        }
        couplings.push(value);
    }
    CouplingSet::from_edge_values(topology, couplings, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> Topology {
        Topology::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn fixed_point_matrix_terminates_when_schur_stalls() {
        // The unbounded Schur iteration never converged on this triangle.
        let t = Topology::new(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let js = vec![0.06621094713891945, -0.5808875770465342, 0.21341943246529943];
        let cs = CouplingSet::from_edge_values(&t, js, vec![0.0; 3]).unwrap();
        let c = build_coefficient_matrix(&t, &cs).unwrap();
        let a = fixed_point_combining_matrix(&t, &c).unwrap();
        assert!(a.weights().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn gelfand_radius_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..8 {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let exact = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert_abs_diff_eq!(spectral_radius_gelfand(&m), exact, epsilon = 1e-6 * exact.max(1.0));
        }
        assert_eq!(spectral_radius_gelfand(&DMatrix::zeros(3, 3)), 0.0);
        // Nilpotent: every power beyond the second vanishes.
        let nil = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(spectral_radius_gelfand(&nil), 0.0);
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert_eq!(Topology::new(0, []), Err(Error::EmptyGraph));
        assert_eq!(Topology::new(2, [(1, 1)]), Err(Error::SelfLoop(1)));
        assert_eq!(Topology::new(3, [(0, 1), (1, 0)]), Err(Error::DuplicateEdge(0, 1)));
        assert_eq!(
            Topology::new(2, [(0, 2)]),
            Err(Error::NodeOutOfRange { node: 2, node_count: 2 })
        );
    }

    #[test]
    fn fig1_degrees() {
        let t = Topology::fig1();
        let degrees: Vec<_> = (0..5).map(|j| t.degree(j)).collect();
        assert_eq!(degrees, vec![2, 2, 4, 2, 2]);
        assert_eq!(t.max_degree(), 4);
        assert_abs_diff_eq!(t.contraction_bound().unwrap(), 1.0 / 3.0);
        let mean = degrees.iter().sum::<usize>() as f64 / 5.0;
        assert_abs_diff_eq!(mean, 2.4);
    }

    #[test]
    fn directed_adjacency() {
        let t = chain3();
        let e01 = t.directed_index(0, 1).unwrap();
        let e12 = t.directed_index(1, 2).unwrap();
        let e21 = t.directed_index(2, 1).unwrap();
        assert_eq!(t.directed_edges()[e01], DirectedEdge { from: 0, to: 1 });
        assert_eq!(t.upstream(e12), &[e01]);
        assert!(t.upstream(e01).is_empty());
        assert_eq!(t.incoming(1).len(), 2);
        assert!(t.incoming(1).contains(&e21));
        assert_eq!(t.closed_neighborhood(1), vec![1, 0, 2]);
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(coefficient_from_coupling(0.0), 0.0);
        assert_abs_diff_eq!(coefficient_from_coupling(2.0), 0.761_594_155_955_764_9, epsilon = 1e-12);
        assert!(coefficient_from_coupling(800.0) <= 1.0);
        assert_abs_diff_eq!(coefficient_from_coupling(40.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            coupling_from_coefficient(coefficient_from_coupling(0.7)),
            0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn coefficient_matrix_examples() {
        let two = Topology::new(2, [(0, 1)]).unwrap();
        let c = build_coefficient_matrix(&two, &CouplingSet::uniform(&two, 0.0)).unwrap();
        assert!(c.matrix().iter().all(|v| *v == 0.0));

        let edgeless = Topology::new(3, []).unwrap();
        let c = build_coefficient_matrix(&edgeless, &CouplingSet::uniform(&edgeless, 1.0)).unwrap();
        assert!(c.matrix().iter().all(|v| *v == 0.0));
        let a = combining_matrix(&c).unwrap();
        assert_eq!(a.weights(), &DMatrix::identity(3, 3));

        let t = chain3();
        let c = build_coefficient_matrix(&t, &CouplingSet::uniform(&t, 1.0)).unwrap();
        let expected = 0.462_117_157_260_009_8;
        for (j, k) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_abs_diff_eq!(c.get(j, k), expected, epsilon = 1e-12);
        }
        assert_eq!(c.get(0, 2), 0.0);
        assert_eq!(c.get(1, 1), 0.0);
    }

    #[test]
    fn missing_coupling_is_reported() {
        let t = chain3();
        let err = CouplingSet::new(&t, [((0, 1), 0.3)], vec![0.0; 3]).unwrap_err();
        assert_eq!(err, Error::MissingCoupling(1, 2));
        let err = CouplingSet::new(&t, [((0, 2), 0.3)], vec![0.0; 3]).unwrap_err();
        assert_eq!(err, Error::UnknownEdge(0, 2));
    }

    #[test]
    fn convergence_verdicts() {
        let t = Topology::fig1();
        let zero = CoefficientMatrix::zeros(5);
        let v = check_convergence(&zero, &t);
        assert!(v.contraction_ok && v.spectral_ok);
        assert_eq!(v.spectral_radius, 0.0);

        // Max degree 4 puts the contraction bound at 1/3.
        let uniform = |c: f64| {
            let j = coupling_from_coefficient(c);
            build_coefficient_matrix(&t, &CouplingSet::uniform(&t, j)).unwrap()
        };
        assert!(!check_convergence(&uniform(0.49), &t).contraction_ok);
        assert!(check_convergence(&uniform(0.33), &t).contraction_ok);

        let two = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&two, DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 0.9, 0.0])).unwrap();
        let v = check_convergence(&c, &two);
        assert!(v.contraction_ok);
        assert_abs_diff_eq!(v.spectral_radius, 0.9, epsilon = 1e-9);
        assert!(v.spectral_ok);
    }

    #[test]
    fn spectral_radius_of_bowtie() {
        // Adjacency spectral radius of two triangles sharing a vertex is (1 + √17) / 2.
        let t = Topology::fig1();
        let c = build_coefficient_matrix(&t, &CouplingSet::uniform(&t, coupling_from_coefficient(0.2))).unwrap();
        assert_abs_diff_eq!(
            spectral_radius(c.matrix()),
            0.2 * (1.0 + 17f64.sqrt()) / 2.0,
            epsilon = 1e-7
        );
    }

    fn brute_series(c: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = c.nrows();
        let mut sum = DMatrix::zeros(n, n);
        let mut power = DMatrix::identity(n, n);
        for _ in 0..terms {
            power = &power * c;
            sum += &power;
        }
        sum
    }

    #[test]
    fn combining_matrix_examples() {
        let two = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&two, DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])).unwrap();
        let oracle = brute_series(c.matrix(), 50);
        let a = combining_matrix(&c).unwrap();
        assert_abs_diff_eq!(oracle[(0, 1)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 1), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(1, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(a.get(0, 0), 1.0);

        let t = chain3();
        let c = build_coefficient_matrix(&t, &CouplingSet::uniform(&t, coupling_from_coefficient(0.1))).unwrap();
        let a = combining_matrix(&c).unwrap();
        // The power series also counts walks that double back, giving
        // c² / (1 − 2c²) rather than the single path c².
        assert_abs_diff_eq!(a.get(0, 2), brute_series(c.matrix(), 50)[(0, 2)], epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 2), 0.01 / 0.98, epsilon = 1e-12);
        let exact = fixed_point_combining_matrix(&t, &c).unwrap();
        assert_abs_diff_eq!(exact.get(0, 2), 0.01, epsilon = 2e-4);
        assert_abs_diff_eq!(exact.get(0, 2), 0.01, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_and_series_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t = Topology::random_connected(6, 0.4, &mut rng).unwrap();
            let bound = 0.9 / t.max_degree() as f64;
            let js: Vec<f64> = (0..t.edges().len())
                .map(|_| coupling_from_coefficient(rng.random_range(-bound..bound)))
                .collect();
            let c =
                build_coefficient_matrix(&t, &CouplingSet::from_edge_values(&t, js, vec![0.0; 6]).unwrap()).unwrap();
            let closed = combining_matrix(&c).unwrap();
            let series = combining_matrix_series(&c).unwrap();
            assert!((closed.weights() - series.weights()).amax() < 1e-10);
        }
    }

    #[test]
    fn divergent_matrix_is_rejected() {
        let two = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&two, DMatrix::from_row_slice(2, 2, &[0.0, 1.2, 1.2, 0.0])).unwrap();
        assert!(matches!(combining_matrix(&c), Err(Error::Divergent(_))));
        assert!(matches!(combining_matrix_series(&c), Err(Error::Divergent(_))));
    }

    #[test]
    fn fixed_point_matrix_on_a_single_edge() {
        // A lone edge carries only the one-hop term: a_12 = c, not c / (1 − c²).
        let two = Topology::new(2, [(0, 1)]).unwrap();
        let c = CoefficientMatrix::new(&two, DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])).unwrap();
        let a = fixed_point_combining_matrix(&two, &c).unwrap();
        assert_abs_diff_eq!(a.get(0, 1), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(a.get(0, 0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn combining_matrix_is_permutation_equivariant() {
        let t = Topology::fig1();
        let js = vec![0.3, 0.5, 0.2, 0.4, 0.1, 0.35];
        let c = build_coefficient_matrix(&t, &CouplingSet::from_edge_values(&t, js, vec![0.0; 5]).unwrap()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let lhs = combining_matrix(&c.permuted(&perm)).unwrap();
        let rhs = combining_matrix(&c).unwrap().permuted(&perm);
        assert!((lhs.weights() - rhs.weights()).amax() < 1e-12);
        let tp = t.permuted(&perm).unwrap();
        let lhs = fixed_point_combining_matrix(&tp, &c.permuted(&perm)).unwrap();
        let rhs = fixed_point_combining_matrix(&t, &c).unwrap().permuted(&perm);
        assert!((lhs.weights() - rhs.weights()).amax() < 1e-12);
    }

    #[test]
    fn coupling_estimates() {
        let two = Topology::new(2, [(0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let independent: Vec<Vec<bool>> = (0..10_000)
            .map(|_| vec![rng.random_bool(0.5), rng.random_bool(0.5)])
            .collect();
        let est = estimate_couplings(&two, &independent).unwrap();
        assert!(est.coupling(0).abs() < 0.1, "J = {}", est.coupling(0));

        let identical: Vec<Vec<bool>> = (0..10_000)
            .map(|_| {
                let b = rng.random_bool(0.5);
                vec![b, b]
            })
            .collect();
        assert!(estimate_couplings(&two, &identical).unwrap().coupling(0) > 2.0);

        // All-zero windows stay finite thanks to smoothing; the pair log odds
        // ratio is then ln(2T + 1), not zero.
        let zeros = vec![vec![false, false]; 10_000];
        let est = estimate_couplings(&two, &zeros).unwrap();
        assert_abs_diff_eq!(est.coupling(0), (20_001f64).ln(), epsilon = 1e-9);
        assert!(est.theta()[0] < -9.0);

        assert!(matches!(
            estimate_couplings(&two, &zeros[..50]),
            Err(Error::WindowTooShort { got: 50, need: 100 })
        ));
    }
}
