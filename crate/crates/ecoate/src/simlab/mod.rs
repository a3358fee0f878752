//! Monte Carlo laboratory: the synthetic multi-site generative model, a
//! scenario/replication runner over the estimator lineup, and metric
//! aggregation with text and SVG rendering.

mod dgp;
mod metrics;
mod render;
mod runner;
mod scenario;

pub use dgp::{
    gamma_shape, replicate_rng, replicate_seed, sample_replication, sample_site, source_basis,
    true_beta, NUM_SOURCES, TRUE_ATE,
};
pub use metrics::{summarize_metrics, EstimatorMetrics};
pub use render::{metrics_by_epsilon, render_svg, render_table, MetricsByEpsilon};
pub use runner::{read_rows, run_monte_carlo, run_replication, write_rows, ResultRow};
pub use scenario::{EstimatorKind, SimScenario, DEFAULT_EPSILON_GRID};
