//! Scenario configuration for the Monte Carlo laboratory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FuseWeighting;

/// Default tilt-strength grid.
pub const DEFAULT_EPSILON_GRID: [f64; 5] = [0.0, 0.5, 0.7, 1.0, 1.1];

/// Which estimator to run on each replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Fused estimate using all three sources.
    EcoAteAll,
    /// Fused estimate using source 1 only.
    EcoAte1,
    /// Fused estimate using source 2 only.
    EcoAte2,
    /// Fused estimate using source 3 only.
    EcoAte3,
    /// Target-only doubly robust estimate.
    Aipw,
    /// Fusion with tilts ignored.
    NaiveFusion,
    /// Centralized individual-level benchmark.
    Oracle,
    /// Inverse-variance meta-analysis of per-site estimates.
    MetaIvw,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::EcoAteAll => "eco-ate-all",
            EstimatorKind::EcoAte1 => "eco-ate-1",
            EstimatorKind::EcoAte2 => "eco-ate-2",
            EstimatorKind::EcoAte3 => "eco-ate-3",
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::NaiveFusion => "naive-fusion",
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::MetaIvw => "meta-ivw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "eco-ate-all" | "eco-ate" => EstimatorKind::EcoAteAll,
            "eco-ate-1" => EstimatorKind::EcoAte1,
            "eco-ate-2" => EstimatorKind::EcoAte2,
            "eco-ate-3" => EstimatorKind::EcoAte3,
            "aipw" | "target-only" => EstimatorKind::Aipw,
            "naive-fusion" | "naive" => EstimatorKind::NaiveFusion,
            "oracle" | "pooled" => EstimatorKind::Oracle,
            "meta-ivw" | "meta" => EstimatorKind::MetaIvw,
            other => {
                return Err(Error::Config(format!(
                    "unknown estimator `{other}` (expected one of eco-ate-all, eco-ate-1, \
                     eco-ate-2, eco-ate-3, aipw, naive-fusion, oracle, meta-ivw)"
                )))
            }
        })
    }

    /// The full default lineup.
    pub fn all() -> Vec<EstimatorKind> {
        vec![
            EstimatorKind::EcoAteAll,
            EstimatorKind::EcoAte1,
            EstimatorKind::EcoAte2,
            EstimatorKind::EcoAte3,
            EstimatorKind::Aipw,
            EstimatorKind::NaiveFusion,
            EstimatorKind::Oracle,
            EstimatorKind::MetaIvw,
        ]
    }
}

/// One simulation cell: a tilt strength, a per-site sample size, a seed,
/// and the estimator lineup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub epsilon: f64,
    pub n_per_site: usize,
    pub base_seed: u64,
    #[serde(default = "EstimatorKind::all")]
    pub estimators: Vec<EstimatorKind>,
    /// Enlarge every source basis with redundant terms.
    #[serde(default)]
    pub overparam: bool,
    /// Fusion weighting for the fused estimators.
    #[serde(default = "default_weighting")]
    pub weighting: FuseWeighting,
}

fn default_weighting() -> FuseWeighting {
    FuseWeighting::Uniform
}

impl SimScenario {
    pub fn new(epsilon: f64, n_per_site: usize, base_seed: u64) -> Self {
        SimScenario {
            epsilon,
            n_per_site,
            base_seed,
            estimators: EstimatorKind::all(),
            overparam: false,
            weighting: FuseWeighting::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_site < 50 {
            return Err(Error::Config(format!(
                "n_per_site must be at least 50, got {}",
                self.n_per_site
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator list is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for kind in EstimatorKind::all() {
            assert_eq!(EstimatorKind::parse(kind.label()).unwrap(), kind);
        }
        assert!(EstimatorKind::parse("bogus").is_err());
    }

    #[test]
    fn scenario_validation() {
        assert!(SimScenario::new(0.5, 500, 1).validate().is_ok());
        assert!(SimScenario::new(0.5, 10, 1).validate().is_err());
        assert!(SimScenario::new(-1.0, 500, 1).validate().is_err());
        let mut s = SimScenario::new(0.5, 500, 1);
        s.estimators.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_config_round_trips_and_rejects_unknown_keys() {
        let s = SimScenario::new(1.1, 500, 42);
        let text = serde_json::to_string(&s).unwrap();
        let back: SimScenario = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        let bad = r#"{"epsilon":1.0,"n_per_site":500,"base_seed":1,"bogus":3}"#;
        assert!(serde_json::from_str::<SimScenario>(bad).is_err());
    }
}
