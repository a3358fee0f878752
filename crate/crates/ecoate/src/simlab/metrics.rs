//! Aggregate replication rows into per-estimator performance metrics with
//! Monte Carlo standard errors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::runner::ResultRow;

/// Per-estimator summary over successful replications.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: String,
    /// Successful replications behind the numbers.
    pub rows: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub bias_sq: f64,
    /// Delta-method Monte Carlo standard error of the squared bias.
    pub bias_sq_se: f64,
    pub variance: f64,
    /// Jackknife Monte Carlo standard error of the variance.
    pub variance_se: f64,
    pub coverage: f64,
    /// Binomial Monte Carlo standard error of the coverage.
    pub coverage_se: f64,
    pub mean_se: f64,
}

/// Group rows by estimator and compute the summary metrics against the
/// true effect. Rows flagged as failed are counted but excluded from the
/// numbers; an estimator needs at least two successes.
pub fn summarize_metrics(rows: &[ResultRow], truth: f64) -> Result<Vec<EstimatorMetrics>> {
    let mut groups: BTreeMap<&str, (Vec<&ResultRow>, usize)> = BTreeMap::new();
    for row in rows {
        let entry = groups.entry(row.estimator.as_str()).or_default();
        if row.failed != 0 {
            entry.1 += 1;
        } else {
            entry.0.push(row);
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for (name, (ok, failures)) in groups {
        let r = ok.len();
        if r < 2 {
            return Err(Error::InsufficientData {
                context: format!("metrics for estimator {name}"),
                required: 2,
                available: r,
            });
        }
        let rf = r as f64;
        let mean = ok.iter().map(|row| row.estimate).sum::<f64>() / rf;
        // Sample variance of the estimates (unbiased denominator).
        let ss = ok
            .iter()
            .map(|row| (row.estimate - mean).powi(2))
            .sum::<f64>();
        let variance = ss / (rf - 1.0);

        let bias = mean - truth;
        let bias_sq = bias * bias;
        // Var((mean - truth)^2) to second order: 4 bias^2 Var(mean) +
        // 2 Var(mean)^2, with Var(mean) = variance / R.
        let var_mean = variance / rf;
        let bias_sq_se = (4.0 * bias_sq * var_mean + 2.0 * var_mean * var_mean).sqrt();

        // Jackknife over replications for the variance's own error: the
        // leave-one-out sample variances via mean/sum-of-squares downdates.
        let mut loo = Vec::with_capacity(r);
        for row in &ok {
            // Downdate the total sum of squares around the leave-one-out mean.
            let ss_i = ss - (row.estimate - mean).powi(2) * rf / (rf - 1.0);
            loo.push(ss_i.max(0.0) / (rf - 2.0).max(1.0));
        }
        let loo_mean = loo.iter().sum::<f64>() / rf;
        let variance_se = ((rf - 1.0) / rf
            * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>())
        .sqrt();

        let covered = ok.iter().filter(|row| row.covered != 0).count() as f64;
        let coverage = covered / rf;
        let coverage_se = (coverage * (1.0 - coverage) / rf).sqrt();
        let mean_se = ok.iter().map(|row| row.se).sum::<f64>() / rf;

        out.push(EstimatorMetrics {
            estimator: name.to_string(),
            rows: r,
            failures,
            mean_estimate: mean,
            bias_sq,
            bias_sq_se,
            variance,
            variance_se,
            coverage,
            coverage_se,
            mean_se,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(est: &str, value: f64, half: f64) -> ResultRow {
        ResultRow {
            estimator: est.into(),
            epsilon: 0.0,
            rep: 0,
            seed: 0,
            estimate: value,
            se: half / 1.96,
            ci_lo: value - half,
            ci_hi: value + half,
            covered: u8::from(value - half <= 1.0 && 1.0 <= value + half),
            sources_used: 3,
            failed: 0,
            error: String::new(),
        }
    }

    #[test]
    fn degenerate_rows_give_zero_spread_full_coverage() {
        let rows: Vec<ResultRow> = (0..10).map(|_| row("e", 1.0, 0.5)).collect();
        let m = &summarize_metrics(&rows, 1.0).unwrap()[0];
        assert_eq!(m.bias_sq, 0.0);
        assert_eq!(m.variance, 0.0);
        assert_eq!(m.coverage, 1.0);
        assert_eq!(m.rows, 10);
        assert_eq!(m.failures, 0);
    }

    #[test]
    fn normal_rows_cover_at_the_nominal_rate() {
        // Estimates ~ N(1, 0.1^2) with CI half-width 0.196: coverage is the
        // probability |Z| < 1.96, i.e. 95%.
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 4000;
        let rows: Vec<ResultRow> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                row("e", 1.0 + 0.1 * z, 0.196)
            })
            .collect();
        let m = &summarize_metrics(&rows, 1.0).unwrap()[0];
        let tol = 4.0 * m.coverage_se.max(1e-3);
        assert!(
            (m.coverage - 0.95).abs() < tol,
            "coverage {} (tolerance {tol})",
            m.coverage
        );
        assert!(m.bias_sq < 4.0 * m.bias_sq_se.max(1e-6));
        assert!((m.variance - 0.01).abs() < 4.0 * m.variance_se);
    }

    #[test]
    fn metrics_ignore_row_order_and_split_by_estimator() {
        let mut rows = vec![
            row("b", 1.1, 0.3),
            row("a", 0.9, 0.3),
            row("b", 0.8, 0.3),
            row("a", 1.2, 0.3),
            row("a", 1.0, 0.3),
        ];
        let fwd = summarize_metrics(&rows, 1.0).unwrap();
        rows.reverse();
        let rev = summarize_metrics(&rows, 1.0).unwrap();
        assert_eq!(fwd, rev);
        assert_eq!(fwd.len(), 2);
        assert_eq!(fwd[0].estimator, "a");
        assert_eq!(fwd[0].rows, 3);
        assert_eq!(fwd[1].estimator, "b");
        assert_eq!(fwd[1].rows, 2);
    }

    #[test]
    fn failed_rows_are_counted_not_averaged() {
        let mut rows: Vec<ResultRow> = (0..5).map(|_| row("e", 1.0, 0.5)).collect();
        let mut bad = row("e", f64::NAN, 0.5);
        bad.failed = 1;
        rows.push(bad);
        let m = &summarize_metrics(&rows, 1.0).unwrap()[0];
        assert_eq!(m.rows, 5);
        assert_eq!(m.failures, 1);
        assert!(m.mean_estimate.is_finite());
    }

    #[test]
    fn too_few_successes_is_an_error() {
        let rows = vec![row("e", 1.0, 0.5)];
        assert!(summarize_metrics(&rows, 1.0).is_err());
    }
}
