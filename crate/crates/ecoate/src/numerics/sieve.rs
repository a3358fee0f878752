//! Sieve (polynomial basis) least squares with a tiny ridge.
//!
//! All conditional-expectation models that travel between sites are linear in
//! a fixed polynomial basis of the covariates, optionally interacted with the
//! treatment arm, so a fitted model is just a coefficient matrix plus the
//! basis description — summary-sized and exactly serializable.
//!
//! The fit minimizes `|D c - Y|^2 + eps |c|^2` via SVD, so rank-deficient
//! designs (e.g. duplicated columns) yield the minimum-norm limit as
//! `eps -> 0` instead of failing.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SiteDataset;
use crate::error::{Error, Result};

/// Default ridge added to the normal equations.
pub const RIDGE_EPS: f64 = 1e-8;

/// Description of the regression basis in `(x, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SieveSpec {
    /// Covariate dimension `d`.
    pub dim: usize,
    /// Maximum marginal power of each covariate.
    pub degree: usize,
    /// Include all pairwise products `x_i * x_j`, `i < j`.
    pub pairwise: bool,
    /// Duplicate the covariate block per treatment arm (separate
    /// coefficients for `a = 0` and `a = 1`). When off, `a` enters as a
    /// single main-effect column.
    pub arm_interaction: bool,
}

impl SieveSpec {
    pub fn default_for_dim(dim: usize) -> Self {
        SieveSpec {
            dim,
            degree: 3,
            pairwise: false,
            arm_interaction: true,
        }
    }

    /// Number of covariate-only basis terms (including the intercept).
    pub fn base_terms(&self) -> usize {
        let pair = if self.pairwise {
            self.dim * (self.dim.saturating_sub(1)) / 2
        } else {
            0
        };
        1 + self.dim * self.degree + pair
    }

    /// Total number of design columns.
    pub fn columns(&self) -> usize {
        if self.arm_interaction {
            2 * self.base_terms()
        } else {
            self.base_terms() + 1
        }
    }

    /// Fill one design row for standardized covariates `xs` and arm `a`.
    pub fn fill_row(&self, xs: &[f64], a: f64, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.columns());
        let p = self.base_terms();
        let mut base = vec![0.0; p];
        base[0] = 1.0;
        let mut idx = 1;
        for &x in xs.iter().take(self.dim) {
            let mut pw = 1.0;
            for _ in 0..self.degree {
                pw *= x;
                base[idx] = pw;
                idx += 1;
            }
        }
        if self.pairwise {
            for i in 0..self.dim {
                for j in (i + 1)..self.dim {
                    base[idx] = xs[i] * xs[j];
                    idx += 1;
                }
            }
        }
        debug_assert_eq!(idx, p);
        if self.arm_interaction {
            for (k, b) in base.iter().enumerate() {
                row[k] = if a == 0.0 { *b } else { 0.0 };
                row[p + k] = if a == 0.0 { 0.0 } else { *b };
            }
        } else {
            row[..p].copy_from_slice(&base);
            row[p] = a;
        }
    }
}

/// Center/scale constants applied to covariates before basis expansion.
/// Fitted on the target site and broadcast, so every site expands the same
/// basis identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &SiteDataset) -> Self {
        let (mean, mut sd) = data.covariate_moments();
        for s in sd.iter_mut() {
            if *s <= 1e-12 {
                *s = 1.0; // constant covariate: leave values centered only
            }
        }
        Standardizer { mean, sd }
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &v), (m, s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.sd)) {
            *o = (v - m) / s;
        }
    }
}

/// A fitted sieve regression: basis + standardization + coefficients for `q`
/// response columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SieveModel {
    pub spec: SieveSpec,
    pub standardizer: Standardizer,
    /// Row-major `columns x q` coefficient matrix.
    pub coef: Vec<Vec<f64>>,
}

impl SieveModel {
    pub fn responses(&self) -> usize {
        self.coef.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Predict all response columns at one observation.
    pub fn predict_into(&self, x: &[f64], a: f64, out: &mut [f64]) {
        let p = self.spec.columns();
        let mut xs = vec![0.0; self.spec.dim];
        self.standardizer.apply_into(x, &mut xs);
        let mut row = vec![0.0; p];
        self.spec.fill_row(&xs, a, &mut row);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (rk, crow) in row.iter().zip(&self.coef) {
            if *rk != 0.0 {
                for (o, c) in out.iter_mut().zip(crow) {
                    *o += rk * c;
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64], a: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.responses()];
        self.predict_into(x, a, &mut out);
        out
    }

    pub fn predict_scalar(&self, x: &[f64], a: f64) -> f64 {
        debug_assert_eq!(self.responses(), 1);
        let mut out = [0.0];
        self.predict_into(x, a, &mut out);
        out[0]
    }
}

/// Build the design matrix for a dataset (rows = observations).
pub fn design_matrix(
    spec: &SieveSpec,
    standardizer: &Standardizer,
    data: &SiteDataset,
) -> DMatrix<f64> {
    let n = data.n();
    let p = spec.columns();
    let mut d = DMatrix::zeros(n, p);
    let mut xs = vec![0.0; spec.dim];
    let mut row = vec![0.0; p];
    for i in 0..n {
        standardizer.apply_into(data.xrow(i), &mut xs);
        spec.fill_row(&xs, data.a(i), &mut row);
        for (j, &v) in row.iter().enumerate() {
            d[(i, j)] = v;
        }
    }
    d
}

/// Ridge least squares via SVD of the design: `c = V diag(s/(s^2+eps)) U' Y`.
pub fn ridge_solve(design: &DMatrix<f64>, responses: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = design.nrows();
    let p = design.ncols();
    if responses.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "ridge_solve responses".into(),
            expected: n,
            actual: responses.nrows(),
        });
    }
    if design.iter().any(|v| !v.is_finite()) || responses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge_solve input".into()));
    }
    if n < 1 {
        return Err(Error::InsufficientData {
            context: "ridge_solve".into(),
            required: 1,
            available: n,
        });
    }
    let svd = design.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Singular("ridge_solve: svd U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Singular("ridge_solve: svd V".into()))?;
    let k = svd.singular_values.len();
    // c = V * diag(s/(s^2+eps)) * U' * Y
    let mut uty = u.transpose() * responses; // k x q
    for i in 0..k {
        let s = svd.singular_values[i];
        let f = s / (s * s + eps);
        for j in 0..uty.ncols() {
            uty[(i, j)] *= f;
        }
    }
    let coef = v_t.transpose() * uty; // p x q
    debug_assert_eq!(coef.nrows(), p);
    Ok(coef)
}

/// Fit a sieve regression of `responses` (n x q, row-major) on `(x, a)`.
pub fn sieve_fit(
    spec: &SieveSpec,
    standardizer: &Standardizer,
    data: &SiteDataset,
    responses: &DMatrix<f64>,
) -> Result<SieveModel> {
    let design = design_matrix(spec, standardizer, data);
    let coef = ridge_solve(&design, responses, RIDGE_EPS)?;
    let coef_rows = (0..coef.nrows())
        .map(|i| coef.row(i).iter().cloned().collect())
        .collect();
    Ok(SieveModel {
        spec: spec.clone(),
        standardizer: standardizer.clone(),
        coef: coef_rows,
    })
}

/// Convenience: single response column from a slice.
pub fn sieve_fit_scalar(
    spec: &SieveSpec,
    standardizer: &Standardizer,
    data: &SiteDataset,
    response: &[f64],
) -> Result<SieveModel> {
    let y = DMatrix::from_column_slice(response.len(), 1, response);
    sieve_fit(spec, standardizer, data, &y)
}
