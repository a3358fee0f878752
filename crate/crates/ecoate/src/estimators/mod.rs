//! Estimator front-ends and the common report type.

mod aipw;
mod report;
mod variants;

pub use aipw::{aipw_target_only, aipw_with_nuisance, aipw_with_options};
pub use report::{
    meta_ivw, variance_ci, EstimateReport, ExcludedSource, ReportDiagnostics, SourceFitInfo,
    Z_95,
};
pub use variants::{
    eco_ate, eco_ate_weighted, fused_estimate, meta_ivw_sites, naive_fusion, oracle_pooled,
};
