//! Report type shared by every estimator, plus variance/CI assembly and the
//! inverse-variance meta-analysis combiner.

use crate::data::SiteId;
use crate::error::{Error, Result};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;

/// A source excluded from fusion and why.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcludedSource {
    pub site: SiteId,
    pub reason: String,
}

/// Per-source tilt-fit diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceFitInfo {
    pub site: SiteId,
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// max/min of the combined reweighting `lambda_s w*_s` over the target
    /// sample — a positivity/overlap diagnostic.
    pub overlap: f64,
}

/// Diagnostics attached to every report.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDiagnostics {
    /// Per-source tilt fits (empty for estimators without tilts).
    pub source_fits: Vec<SourceFitInfo>,
    /// Propensity-clamp counts per site, `[site, count]` pairs.
    pub clamped: Vec<(SiteId, usize)>,
    /// Per-site overlap ratio of the mixture factor `r` (max/min over the
    /// site sample).
    pub r_overlap: Vec<(SiteId, f64)>,
    /// Fusion weighting used ("uniform" or "size"), when applicable.
    pub weighting: Option<String>,
    /// Number of protocol messages exchanged (0 for standalone estimators).
    pub messages: usize,
}

/// Point estimate with inference and provenance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateReport {
    pub estimator: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_total: usize,
    pub sources_used: Vec<SiteId>,
    pub excluded: Vec<ExcludedSource>,
    pub diagnostics: ReportDiagnostics,
}

impl EstimateReport {
    /// Build a report with the CI derived from the point and SE.
    pub fn new(estimator: impl Into<String>, estimate: f64, se: f64, n_total: usize) -> Self {
        EstimateReport {
            estimator: estimator.into(),
            estimate,
            se,
            ci_lo: estimate - Z_95 * se,
            ci_hi: estimate + Z_95 * se,
            n_total,
            sources_used: Vec::new(),
            excluded: Vec::new(),
            diagnostics: ReportDiagnostics::default(),
        }
    }

    /// Whether the interval covers `truth`.
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// Standard error and 95% CI from estimated per-observation
/// estimating-function values.
///
/// Uses the population-denominator variance (divide by `n`), matching the
/// moment-based assembly used when the values live on remote sites, so the
/// two routes agree to floating-point error.
pub fn variance_ci(values: &[f64], point: f64) -> Result<(f64, (f64, f64))> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            context: "variance of estimating-function values".into(),
            required: 2,
            available: n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let se = (var / n as f64).sqrt();
    Ok((se, (point - Z_95 * se, point + Z_95 * se)))
}

/// Inverse-variance-weighted combination of independent estimates.
pub fn meta_ivw(estimates: &[(f64, f64)]) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::InsufficientData {
            context: "inverse-variance meta-analysis".into(),
            required: 1,
            available: 0,
        });
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for &(est, se) in estimates {
        if !(se.is_finite() && se > 0.0) {
            return Err(Error::InvalidData(format!(
                "meta-analysis requires a positive finite SE, got {se}"
            )));
        }
        let w = 1.0 / (se * se);
        wsum += w;
        acc += w * est;
    }
    Ok((acc / wsum, wsum.sqrt().recip()))
}
