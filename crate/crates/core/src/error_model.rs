//! Likelihood errors (LE) on local statistics and message errors (ME) on
//! BP messages.
//!
//! Both are zero-mean Gaussians whose strength is given as an SNR in dB
//! relative to a node's local likelihood power `E[γ²]`. A message error on
//! `k → j` is referenced to the sender `k`. An SNR of `+∞` disables the
//! error.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Topology;

/// Error strengths: one LE SNR per node, one ME SNR per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorConfig {
    pub le_snr_db: Vec<f64>,
    pub me_snr_db: Vec<f64>,
}

impl ErrorConfig {
    pub fn error_free(topology: &Topology) -> Self {
        Self::uniform(topology, f64::INFINITY, f64::INFINITY)
    }

    pub fn uniform(topology: &Topology, le_snr_db: f64, me_snr_db: f64) -> Self {
        Self {
            le_snr_db: vec![le_snr_db; topology.node_count()],
            me_snr_db: vec![me_snr_db; topology.directed_count()],
        }
    }

    /// Errors only at the listed nodes: LE on their statistic and ME on every
    /// message they send.
    pub fn faulty_nodes(topology: &Topology, nodes: &[usize], le_snr_db: f64, me_snr_db: f64) -> Result<Self> {
        let mut cfg = Self::error_free(topology);
        for &j in nodes {
            if j >= topology.node_count() {
                return Err(Error::NodeOutOfRange {
                    node: j,
                    node_count: topology.node_count(),
                });
            }
            cfg.le_snr_db[j] = le_snr_db;
            for (id, e) in topology.directed_edges().iter().enumerate() {
                if e.from == j {
                    cfg.me_snr_db[id] = me_snr_db;
                }
            }
        }
        Ok(cfg)
    }

    /// Same configuration with every ME disabled.
    pub fn without_messages(&self) -> Self {
        Self {
            le_snr_db: self.le_snr_db.clone(),
            me_snr_db: vec![f64::INFINITY; self.me_snr_db.len()],
        }
    }

    /// Same configuration with every LE disabled.
    pub fn without_likelihoods(&self) -> Self {
        Self {
            le_snr_db: vec![f64::INFINITY; self.le_snr_db.len()],
            me_snr_db: self.me_snr_db.clone(),
        }
    }

    fn validate(&self, topology: &Topology) -> Result<()> {
        if self.le_snr_db.len() != topology.node_count() || self.me_snr_db.len() != topology.directed_count() {
            return Err(Error::Dimension(format!(
                "error config with {} LE and {} ME entries for {} nodes and {} directed edges",
                self.le_snr_db.len(),
                self.me_snr_db.len(),
                topology.node_count(),
                topology.directed_count()
            )));
        }
        if self
            .le_snr_db
            .iter()
            .chain(&self.me_snr_db)
            .any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(Error::NonFinite("error SNR"));
        }
        Ok(())
    }
}

/// Variance giving `10·log₁₀(power / variance) = snr_db`; zero for `+∞`.
pub fn variance_for_snr(reference_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        reference_power / 10f64.powf(snr_db / 10.0)
    }
}

/// Error variances fixed from reference powers.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedErrorSampler {
    le_variance: Vec<f64>,
    me_variance: Vec<f64>,
    le_sd: Vec<f64>,
    me_sd: Vec<f64>,
    reference_powers: Vec<f64>,
}

impl CalibratedErrorSampler {
    pub fn calibrate(topology: &Topology, reference_powers: &[f64], config: &ErrorConfig) -> Result<Self> {
        config.validate(topology)?;
        if reference_powers.len() != topology.node_count() {
            return Err(Error::Dimension(format!(
                "{} reference powers for {} nodes",
                reference_powers.len(),
                topology.node_count()
            )));
        }
        let needs_power = |j: usize, snr: f64| -> Result<()> {
            if snr.is_finite() && !(reference_powers[j] > 0.0) {
                return Err(Error::NonPositivePower(j));
            }
            Ok(())
        };
        let mut le_variance = Vec::with_capacity(topology.node_count());
        for (j, &snr) in config.le_snr_db.iter().enumerate() {
            needs_power(j, snr)?;
            le_variance.push(variance_for_snr(reference_powers[j], snr));
        }
        let mut me_variance = Vec::with_capacity(topology.directed_count());
        for (e, &snr) in topology.directed_edges().iter().zip(&config.me_snr_db) {
            needs_power(e.from, snr)?;
            me_variance.push(variance_for_snr(reference_powers[e.from], snr));
        }
        Self::from_variances(le_variance, me_variance, reference_powers.to_vec())
    }

    pub fn from_variances(le_variance: Vec<f64>, me_variance: Vec<f64>, reference_powers: Vec<f64>) -> Result<Self> {
        if le_variance
            .iter()
            .chain(&me_variance)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::NonFinite("error variance"));
        }
        Ok(Self {
            le_sd: le_variance.iter().map(|v| v.sqrt()).collect(),
            me_sd: me_variance.iter().map(|v| v.sqrt()).collect(),
            le_variance,
            me_variance,
            reference_powers,
        })
    }

    pub fn error_free(topology: &Topology) -> Self {
        Self::from_variances(
            vec![0.0; topology.node_count()],
            vec![0.0; topology.directed_count()],
            vec![0.0; topology.node_count()],
        )
        .expect("zero variances are valid")
    }

    pub fn le_variance(&self) -> &[f64] {
        &self.le_variance
    }

    pub fn me_variance(&self) -> &[f64] {
        &self.me_variance
    }

    pub fn reference_powers(&self) -> &[f64] {
        &self.reference_powers
    }

    /// Diagonal LE covariance restricted to `nodes`, in that order.
    pub fn le_covariance(&self, nodes: &[usize]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            nodes.len(),
            nodes.iter().map(|&i| self.le_variance[i]),
        ))
    }

    /// Diagonal ME covariance over node `j`'s closed neighborhood: zero for
    /// `j` itself, then `Var[ν_{k→j}]` for each neighbor in ascending order.
    pub fn me_covariance(&self, topology: &Topology, j: usize) -> DMatrix<f64> {
        let diag = std::iter::once(0.0).chain(
            topology
                .neighbors(j)
                .iter()
                .map(|&k| self.me_variance[topology.directed_index(k, j).expect("neighbor edge")]),
        );
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(topology.degree(j) + 1, diag))
    }

    /// `tr Σ_ν_j`: total ME variance arriving at `j`.
    pub fn incoming_me_variance(&self, topology: &Topology, j: usize) -> f64 {
        topology.incoming(j).iter().map(|&e| self.me_variance[e]).sum()
    }

    /// Same sampler with every variance multiplied by `factor²`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f2 = factor * factor;
        Self::from_variances(
            self.le_variance.iter().map(|v| v * f2).collect(),
            self.me_variance.iter().map(|v| v * f2).collect(),
            self.reference_powers.iter().map(|v| v * f2).collect(),
        )
        .expect("scaling keeps variances valid")
    }

    /// One LE draw. Always consumes exactly one normal variate so paired
    /// runs stay aligned whatever the variance.
    pub fn sample_le<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.le_sd[node] * z
    }

    /// One ME draw on a directed edge; consumes one normal variate.
    pub fn sample_me<R: Rng + ?Sized>(&self, edge: usize, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.me_sd[edge] * z
    }

    /// LEs for every node, in node order.
    pub fn sample_le_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.le_variance.len()).map(|j| self.sample_le(j, rng)).collect()
    }
}

/// Mean of `L ≥ 1` received copies.
pub fn average_link_copies(copies: &[f64]) -> Result<f64> {
    if copies.is_empty() {
        return Err(Error::Empty("link copies"));
    }
    Ok(copies.iter().sum::<f64>() / copies.len() as f64)
}
