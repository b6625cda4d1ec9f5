//! Long-format metric records shared by every experiment.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node label used for network averages.
pub const AVERAGE_NODE: &str = "avg";

/// One measured or predicted value. Nodes are 1-based or [`AVERAGE_NODE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: String,
    pub recipe: String,
    pub variant: String,
    pub node: String,
    pub x: f64,
    pub metric: String,
    /// Non-finite values are written as `"inf"`, `"-inf"` or `"nan"`.
    #[serde(with = "extended_float")]
    pub value: f64,
    pub trials: usize,
    pub seed: u64,
}

mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

/// Append-only table holding at most one record per
/// `(variant, x, metric, node)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<MetricRecord>", into = "Vec<MetricRecord>")]
pub struct MetricsTable {
    records: Vec<MetricRecord>,
    #[serde(skip)]
    keys: HashSet<(String, u64, String, String)>,
}

impl From<Vec<MetricRecord>> for MetricsTable {
    fn from(records: Vec<MetricRecord>) -> Self {
        let keys = records.iter().map(key).collect();
        Self { records, keys }
    }
}

impl From<MetricsTable> for Vec<MetricRecord> {
    fn from(t: MetricsTable) -> Self {
        t.records
    }
}

fn key(r: &MetricRecord) -> (String, u64, String, String) {
    (r.variant.clone(), r.x.to_bits(), r.metric.clone(), r.node.clone())
}

/// External label of a 0-based node index.
pub fn node_label(node: Option<usize>) -> String {
    node.map_or_else(|| AVERAGE_NODE.to_string(), |j| (j + 1).to_string())
}

impl MetricsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if !self.keys.insert(key(&record)) {
            return Err(Error::Config(format!(
                "duplicate record for variant {}, node {}, x {}, metric {}",
                record.variant, record.node, record.x, record.metric
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Appends every record of `other`.
    pub fn extend(&mut self, other: MetricsTable) -> Result<()> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Value at one key; `node` is `None` for the network average.
    pub fn get(&self, variant: &str, node: Option<usize>, x: f64, metric: &str) -> Option<f64> {
        let node = node_label(node);
        self.records
            .iter()
            .find(|r| r.variant == variant && r.node == node && r.x == x && r.metric == metric)
            .map(|r| r.value)
    }

    /// `(x, value)` pairs of one series in insertion order.
    pub fn series(&self, variant: &str, node: Option<usize>, metric: &str) -> Vec<(f64, f64)> {
        let node = node_label(node);
        self.records
            .iter()
            .filter(|r| r.variant == variant && r.node == node && r.metric == metric)
            .map(|r| (r.x, r.value))
            .collect()
    }

    /// Distinct variants in order of first appearance.
    pub fn variants(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.records {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }
}

/// Fills the fields shared by all records of one experiment run.
#[derive(Debug, Clone)]
pub struct RecordContext {
    pub experiment: String,
    pub recipe: String,
    pub trials: usize,
    pub seed: u64,
}

impl RecordContext {
    pub fn record(&self, variant: &str, node: Option<usize>, x: f64, metric: &str, value: f64) -> MetricRecord {
        MetricRecord {
            experiment: self.experiment.clone(),
            recipe: self.recipe.clone(),
            variant: variant.to_string(),
            node: node_label(node),
            x,
            metric: metric.to_string(),
            value,
            trials: self.trials,
            seed: self.seed,
        }
    }
}
