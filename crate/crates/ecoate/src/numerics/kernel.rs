//! Nadaraya–Watson kernel regression with a Gaussian product kernel.
//!
//! Used only for site-local smoothing (outer centerings of the
//! influence-function pieces and the pooled-oracle estimator): kernel models
//! keep their training sample in memory and are never serialized into
//! protocol messages.
//!
//! Bandwidths follow the normal-reference rule `1.06 * sd * m^(-1/5)` per
//! covariate, computed within each treatment-arm stratum. Predictions are
//! convex combinations of training responses; weights are rescaled by the
//! nearest training point so distant queries degrade gracefully to the
//! nearest-neighbour response instead of underflowing to 0/0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Options for [`kernel_fit`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Fixed bandwidth for every covariate, overriding the normal-reference
    /// rule when set.
    pub bandwidth_override: Option<f64>,
}

#[derive(Debug, Clone)]
struct Stratum {
    arm: f64,
    /// row-major m x d
    points: Vec<f64>,
    /// row-major m x q
    responses: Vec<f64>,
    m: usize,
    bandwidth: Vec<f64>,
}

/// A fitted kernel smoother, stratified by treatment arm.
#[derive(Debug, Clone)]
pub struct KernelModel {
    dim: usize,
    q: usize,
    strata: Vec<Stratum>,
}

fn silverman(points: &[f64], m: usize, dim: usize) -> Vec<f64> {
    let mut bw = vec![0.0; dim];
    let mf = m as f64;
    for j in 0..dim {
        let mean = (0..m).map(|i| points[i * dim + j]).sum::<f64>() / mf;
        let var = (0..m)
            .map(|i| {
                let d = points[i * dim + j] - mean;
                d * d
            })
            .sum::<f64>()
            / (mf - 1.0).max(1.0);
        let sd = var.sqrt();
        let h = 1.06 * sd * mf.powf(-0.2);
        // Degenerate coordinate: distances are all zero anyway, so any
        // positive bandwidth gives the same (uniform) weighting.
        bw[j] = if h > 1e-300 { h } else { 1.0 };
    }
    bw
}

/// Fit a smoother of `responses` (one row of length `q` per observation) on
/// covariates, stratified by arm.
pub fn kernel_fit(
    x: &[Vec<f64>],
    a: &[f64],
    responses: &[Vec<f64>],
    opts: &KernelOptions,
) -> Result<KernelModel> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InsufficientData {
            context: "kernel_fit".into(),
            required: 1,
            available: 0,
        });
    }
    if a.len() != n || responses.len() != n {
        return Err(Error::DimensionMismatch {
            context: "kernel_fit".into(),
            expected: n,
            actual: a.len().min(responses.len()),
        });
    }
    let dim = x[0].len();
    let q = responses[0].len();
    let mut strata = Vec::new();
    for arm in [0.0, 1.0] {
        let idx: Vec<usize> = (0..n).filter(|&i| a[i] == arm).collect();
        if idx.is_empty() {
            continue;
        }
        let m = idx.len();
        let mut points = Vec::with_capacity(m * dim);
        let mut resp = Vec::with_capacity(m * q);
        for &i in &idx {
            points.extend_from_slice(&x[i]);
            resp.extend_from_slice(&responses[i]);
        }
        let bandwidth = match opts.bandwidth_override {
            Some(h) => vec![h.max(1e-300); dim],
            None => silverman(&points, m, dim),
        };
        strata.push(Stratum {
            arm,
            points,
            responses: resp,
            m,
            bandwidth,
        });
    }
    Ok(KernelModel { dim, q, strata })
}

impl KernelModel {
    pub fn responses(&self) -> usize {
        self.q
    }

    /// Nadaraya–Watson prediction of all response columns at `(x, arm)`.
    pub fn predict_into(&self, x: &[f64], arm: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.q);
        let st = self
            .strata
            .iter()
            .find(|s| s.arm == arm)
            .ok_or(Error::EmptyStratum { arm: arm as u8 })?;
        // squared scaled distances, stabilized by the minimum
        let mut dists = vec![0.0; st.m];
        let mut dmin = f64::INFINITY;
        for i in 0..st.m {
            let mut d2 = 0.0;
            let row = &st.points[i * self.dim..(i + 1) * self.dim];
            for j in 0..self.dim {
                let t = (x[j] - row[j]) / st.bandwidth[j];
                d2 += t * t;
            }
            let d2 = 0.5 * d2;
            dists[i] = d2;
            if d2 < dmin {
                dmin = d2;
            }
        }
        let mut wsum = 0.0;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..st.m {
            let w = (-(dists[i] - dmin)).exp();
            if w > 0.0 {
                wsum += w;
                let row = &st.responses[i * self.q..(i + 1) * self.q];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += w * r;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= wsum;
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64], arm: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.q];
        self.predict_into(x, arm, &mut out)?;
        Ok(out)
    }

    pub fn predict_scalar(&self, x: &[f64], arm: f64) -> Result<f64> {
        let mut out = [0.0];
        debug_assert_eq!(self.q, 1);
        self.predict_into(x, arm, &mut out[..])?;
        Ok(out[0])
    }

    pub fn bandwidths(&self, arm: f64) -> Option<&[f64]> {
        self.strata.iter().find(|s| s.arm == arm).map(|s| s.bandwidth.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_data(n: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
        let mut x = Vec::new();
        let mut a = Vec::new();
        let mut r = Vec::new();
        for i in 0..n {
            let xv = i as f64 / (n as f64 - 1.0);
            x.push(vec![xv]);
            a.push((i % 2) as f64);
            r.push(vec![xv * xv, 1.0 - xv]);
        }
        (x, a, r)
    }

    #[test]
    fn tiny_bandwidth_returns_exact_training_response() {
        let (x, a, r) = grid_data(31);
        let m = kernel_fit(
            &x,
            &a,
            &r,
            &KernelOptions {
                bandwidth_override: Some(1e-6),
            },
        )
        .unwrap();
        let out = m.predict(&[x[4][0]], a[4]).unwrap();
        assert!((out[0] - r[4][0]).abs() < 1e-6);
        assert!((out[1] - r[4][1]).abs() < 1e-6);
    }

    #[test]
    fn silverman_bandwidth_matches_formula() {
        let (x, a, r) = grid_data(41);
        let m = kernel_fit(&x, &a, &r, &KernelOptions::default()).unwrap();
        // stratum arm=0 holds the even indices
        let pts: Vec<f64> = (0..41).filter(|i| i % 2 == 0).map(|i| i as f64 / 40.0).collect();
        let mm = pts.len() as f64;
        let mean = pts.iter().sum::<f64>() / mm;
        let sd = (pts.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (mm - 1.0)).sqrt();
        let expect = 1.06 * sd * mm.powf(-0.2);
        let got = m.bandwidths(0.0).unwrap()[0];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn prediction_stays_within_response_range() {
        let (x, a, r) = grid_data(51);
        let m = kernel_fit(&x, &a, &r, &KernelOptions::default()).unwrap();
        for q in [-5.0, 0.0, 0.3, 0.99, 42.0] {
            let out = m.predict(&[q], 1.0).unwrap();
            assert!(out[0] >= 0.0 && out[0] <= 1.0);
            assert!(out[1] >= 0.0 && out[1] <= 1.0);
        }
    }

    #[test]
    fn smooth_function_is_recovered() {
        let n = 400;
        let mut x = Vec::new();
        let mut a = Vec::new();
        let mut r = Vec::new();
        for i in 0..n {
            let xv = i as f64 / (n as f64 - 1.0);
            x.push(vec![xv]);
            a.push(1.0);
            r.push(vec![(2.0 * xv).sin()]);
        }
        let m = kernel_fit(&x, &a, &r, &KernelOptions::default()).unwrap();
        for q in [0.2, 0.5, 0.8] {
            let out = m.predict_scalar(&[q], 1.0).unwrap();
            assert!((out - (2.0 * q).sin()).abs() < 0.02, "q={q}");
        }
    }

    #[test]
    fn missing_stratum_is_an_error() {
        let x = vec![vec![0.0], vec![1.0]];
        let a = vec![1.0, 1.0];
        let r = vec![vec![1.0], vec![2.0]];
        let m = kernel_fit(&x, &a, &r, &KernelOptions::default()).unwrap();
        assert!(matches!(m.predict(&[0.5], 0.0), Err(Error::EmptyStratum { arm: 0 })));
    }
}
