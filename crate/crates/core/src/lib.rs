//! Distributed binary detection by belief propagation on a pairwise MRF,
//! with stochastic likelihood and message errors.
//!
//! The crate covers the full pipeline: graph and coupling model, signal
//! scenario, error injection, exact/linear/averaging BP, analytical
//! predictors, two-stage linear fusion, blind offline adaptation and the
//! Monte Carlo experiment recipes built on top of them.

// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod analysis;
pub mod bp;
pub mod error;
pub mod error_model;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod rng;
pub mod scenario;

pub use adapt::{
    build_averaged_window, estimate_me_variance, initialize_outcomes, run_offline_adaptation, AdaptationConfig,
    AdaptationOutput, AveragedWindow,
};
pub use analysis::{
    closed_form_rates, empirical_dsnr, ihler_bound, mixture_rates, predict_mse_abp, predict_mse_bp, q_function,
    q_inverse, DsnrReport, IhlerBoundParams, MixtureComponent, MsePrediction,
};
pub use bp::{
    abp_decision, decision_variables, iterate, s_transform, weighted_decision, Averaging, BpMode, DecisionVariables,
    DecisionWeights, MessageRule, MessageState,
};
pub use error::{Error, Result};
pub use error_model::{average_link_copies, CalibratedErrorSampler, ErrorConfig};
pub use experiment::{
    run_experiment, run_experiment_dsnr, run_experiment_roc, run_prediction, EngineConfig, ExperimentSpec, Recipe,
    Setup,
};
pub use fusion::{
    eta_test, maximize_deflection, normalize_for_convergence, stage_one, stage_two, threshold_for_alpha, FusionWeights,
    NodeFusion,
};
pub use graph::{
    build_coefficient_matrix, check_convergence, coefficient_from_coupling, combining_matrix,
    fixed_point_combining_matrix, CoefficientMatrix, CombiningMatrix, ConvergenceVerdict, CouplingSet, Topology,
};
pub use metrics::{MetricRecord, MetricsTable};
pub use scenario::{LocalStats, PrimaryState, Scenario, ScenarioConfig, StatisticMode};
