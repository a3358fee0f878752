//! Replication driver: sample, estimate, record — in parallel, with
//! results independent of the worker count.

use rayon::prelude::*;

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    aipw_target_only, fused_estimate, meta_ivw_sites, naive_fusion, oracle_pooled,
    EstimateReport,
};
use crate::expr::BasisVector;
use crate::federation::{ProtocolConfig, SourceInput};

use super::dgp::{replicate_seed, replicate_rng, sample_replication, source_basis, TRUE_ATE};
use super::scenario::{EstimatorKind, SimScenario};

/// One results-table row: one estimator on one replication.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub estimator: String,
    pub epsilon: f64,
    pub rep: usize,
    pub seed: u64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// 1 if the CI covers the true effect, 0 otherwise.
    pub covered: u8,
    pub sources_used: usize,
    /// 1 if this estimator failed on this replication.
    pub failed: u8,
    #[serde(default)]
    pub error: String,
}

impl ResultRow {
    fn from_report(kind: EstimatorKind, scn: &SimScenario, rep: usize, r: &EstimateReport) -> Self {
        ResultRow {
            estimator: kind.label().to_string(),
            epsilon: scn.epsilon,
            rep,
            seed: replicate_seed(scn.base_seed, rep),
            estimate: r.estimate,
            se: r.se,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            covered: u8::from(r.covers(TRUE_ATE)),
            sources_used: r.sources_used.len(),
            failed: 0,
            error: String::new(),
        }
    }

    fn from_failure(kind: EstimatorKind, scn: &SimScenario, rep: usize, e: &Error) -> Self {
        ResultRow {
            estimator: kind.label().to_string(),
            epsilon: scn.epsilon,
            rep,
            seed: replicate_seed(scn.base_seed, rep),
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            covered: 0,
            sources_used: 0,
            failed: 1,
            error: e.to_string(),
        }
    }
}

/// Run one estimator on one sampled replication.
pub fn run_estimator(
    kind: EstimatorKind,
    sites: &[SiteDataset],
    bases: &[BasisVector],
    cfg: &ProtocolConfig,
) -> Result<EstimateReport> {
    let target = &sites[0];
    let input = |i: usize| SourceInput {
        data: &sites[i],
        xi: Some(&bases[i - 1]),
    };
    match kind {
        EstimatorKind::EcoAteAll => {
            let inputs = [input(1), input(2), input(3)];
            fused_estimate(kind.label(), target, &inputs, cfg)
        }
        EstimatorKind::EcoAte1 => fused_estimate(kind.label(), target, &[input(1)], cfg),
        EstimatorKind::EcoAte2 => fused_estimate(kind.label(), target, &[input(2)], cfg),
        EstimatorKind::EcoAte3 => fused_estimate(kind.label(), target, &[input(3)], cfg),
        EstimatorKind::Aipw => aipw_target_only(target),
        EstimatorKind::NaiveFusion => {
            let inputs = [input(1), input(2), input(3)];
            naive_fusion(target, &inputs, cfg)
        }
        EstimatorKind::Oracle => {
            let inputs = [input(1), input(2), input(3)];
            oracle_pooled(target, &inputs, cfg)
        }
        EstimatorKind::MetaIvw => {
            let inputs = [input(1), input(2), input(3)];
            meta_ivw_sites(target, &inputs)
        }
    }
}

/// One full replication: sample every site, run every configured
/// estimator, and emit one row per estimator. Estimator failures become
/// flagged rows, not errors; only sampling itself can fail the call.
pub fn run_replication(scn: &SimScenario, rep: usize) -> Result<Vec<ResultRow>> {
    let mut rng = replicate_rng(scn.base_seed, rep);
    let sites = sample_replication(scn.n_per_site, scn.epsilon, &mut rng)?;
    let bases: Vec<BasisVector> = (1..=3u32)
        .map(|s| source_basis(s, scn.overparam))
        .collect::<Result<_>>()?;
    let cfg = ProtocolConfig {
        weighting: scn.weighting,
        ..ProtocolConfig::default()
    };
    Ok(scn
        .estimators
        .iter()
        .map(|&kind| match run_estimator(kind, &sites, &bases, &cfg) {
            Ok(report) => ResultRow::from_report(kind, scn, rep, &report),
            Err(e) => ResultRow::from_failure(kind, scn, rep, &e),
        })
        .collect())
}

/// Drive `replications` independent replications on `workers` threads.
///
/// Rows come back grouped by replication in replication order, so the
/// table is identical whatever the worker count.
pub fn run_monte_carlo(
    scn: &SimScenario,
    replications: usize,
    workers: usize,
) -> Result<Vec<ResultRow>> {
    scn.validate()?;
    if replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut per_rep: Vec<(usize, Result<Vec<ResultRow>>)> = pool.install(|| {
        (0..replications)
            .into_par_iter()
            .map(|rep| (rep, run_replication(scn, rep)))
            .collect()
    });
    per_rep.sort_by_key(|(rep, _)| *rep);
    let mut rows = Vec::with_capacity(replications * scn.estimators.len());
    for (_, r) in per_rep {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Write rows as a comma-delimited table with a header.
pub fn write_rows(path: &std::path::Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows back from a comma-delimited table.
pub fn read_rows(path: &std::path::Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
