//! Main-terms logistic regression fit by iteratively reweighted least
//! squares. Used for the target-site propensity model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::numerics::pinv::{pinv, DEFAULT_REL_TOL};
use crate::numerics::sieve::Standardizer;

/// Coefficient bound beyond which the fit is declared separated.
pub const SEPARATION_BOUND: f64 = 30.0;
const GRAD_TOL: f64 = 1e-10;
const MAX_ITER: usize = 100;

/// Fitted logistic model `P(A = 1 | x) = sigmoid(b0 + b' x_std)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    pub standardizer: Standardizer,
    /// `[intercept, slope_1, ..., slope_d]` on standardized covariates.
    pub coef: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    /// Probability of treatment at covariates `x` (raw scale).
    pub fn prob_treated(&self, x: &[f64]) -> f64 {
        let mut t = self.coef[0];
        for (j, (&v, c)) in x.iter().zip(&self.coef[1..]).enumerate() {
            t += c * (v - self.standardizer.mean[j]) / self.standardizer.sd[j];
        }
        sigmoid(t)
    }
}

/// Fit `P(A = 1 | x)` on one site's data by IRLS to gradient sup-norm
/// `< 1e-10` (at most 100 iterations). Quasi-complete separation is reported
/// as an error as soon as any coefficient escapes `[-30, 30]`.
pub fn logistic_fit(data: &SiteDataset) -> Result<LogisticModel> {
    let n = data.n();
    let d = data.dim();
    let p = d + 1;
    if n < p {
        return Err(Error::InsufficientData {
            context: "logistic_fit".into(),
            required: p,
            available: n,
        });
    }
    let treated = data.treatment().iter().filter(|&&a| a == 1.0).count();
    if treated == 0 || treated == n {
        // a single observed class is the degenerate form of separation
        return Err(Error::Separation {
            bound: SEPARATION_BOUND,
        });
    }
    let standardizer = Standardizer::fit(data);
    let mut design = DMatrix::zeros(n, p);
    let mut xs = vec![0.0; d];
    for i in 0..n {
        design[(i, 0)] = 1.0;
        standardizer.apply_into(data.xrow(i), &mut xs);
        for j in 0..d {
            design[(i, j + 1)] = xs[j];
        }
    }
    let labels = DVector::from_iterator(n, data.treatment().iter().cloned());

    let mut beta = DVector::zeros(p);
    for _ in 0..MAX_ITER {
        let eta = &design * &beta;
        let probs = eta.map(sigmoid);
        let resid = &labels - &probs;
        let grad = design.transpose() * &resid / (n as f64);
        if grad.abs().max() < GRAD_TOL {
            break;
        }
        // X' W X with W = p(1-p), floored for numerical safety
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = (probs[i] * (1.0 - probs[i])).max(1e-10);
            for j in 0..p {
                let dj = design[(i, j)] * w;
                for k in j..p {
                    xtwx[(j, k)] += dj * design[(i, k)];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                xtwx[(j, k)] = xtwx[(k, j)];
            }
        }
        let score = design.transpose() * &resid;
        let step = match xtwx.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => pinv(&xtwx, DEFAULT_REL_TOL)? * &score,
        };
        beta += step;
        if beta.abs().max() > SEPARATION_BOUND {
            return Err(Error::Separation {
                bound: SEPARATION_BOUND,
            });
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic_fit coefficients".into()));
    }
    Ok(LogisticModel {
        standardizer,
        coef: beta.iter().cloned().collect(),
    })
}
