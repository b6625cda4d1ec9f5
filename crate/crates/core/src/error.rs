use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph must contain at least one node")]
    EmptyGraph,
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("node {node} out of range for a graph with {node_count} nodes")]
    NodeOutOfRange { node: usize, node_count: usize },
    #[error("no coupling given for edge ({0}, {1})")]
    MissingCoupling(usize, usize),
    #[error("coupling for ({0}, {1}) is not an edge of the topology")]
    UnknownEdge(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("message iteration diverges: spectral radius {0:.6} >= 1")]
    Divergent(f64),
    #[error("degenerate pairwise frequencies on edge ({0}, {1})")]
    DegenerateFrequency(usize, usize),
    #[error("window too short: {got} rows, need at least {need}")]
    WindowTooShort { got: usize, need: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible transmitter correlation {rho} for activity probability {p_on}")]
    InfeasibleCorrelation { p_on: f64, rho: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("insufficient samples for label {label}: got {got}, need {need}")]
    InsufficientSamples { label: u8, got: usize, need: usize },
    #[error("reference power for node {0} must be positive when its error SNR is finite")]
    NonPositivePower(usize),
    #[error("discriminant vector is zero; no detectable signal")]
    ZeroDiscriminant,
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("state enumeration over {0} nodes exceeds the limit of {1}")]
    EnumerationTooLarge(usize, usize),
}
