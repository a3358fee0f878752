//! Distribution-shift machinery.
//!
//! Source sites differ from the target along two axes, each with its own
//! parametric object:
//!
//! * **Covariate/treatment shift** `lambda_s(x, a)`: the density ratio of
//!   `(X, A)` between source `s` and the target. Modeled as an exponential
//!   tilt `exp(gamma' phi(x, a))` over a fixed feature list and fitted on the
//!   target sample by matching the source's uplinked feature means
//!   ([`fit_covariate_tilt`]). Self-normalized, so the target-sample mean of
//!   the fitted `lambda` is exactly 1.
//!
//! * **Outcome tilt** `w_s(z; beta_s) = exp(beta_s' xi_s(y, a, x))`: the
//!   conditional density ratio of `Y | A, X` declared by each source through
//!   its basis `xi_s`. Its conditional normalizer
//!   `W_s(x, a) = E[w_s | X = x, A = a]` under the target law is estimated by
//!   a sieve regression ([`estimate_normalizer`]), and `w*_s = w_s / W_s` is
//!   the properly normalized conditional tilt.
//!
//! [`solve_beta_one`] recovers `beta_s` by matching the source's uplinked
//! basis mean to the lambda-weighted, tilt-reweighted target moment — the
//! only place source information enters is through those summary vectors.

use nalgebra::DVector;

use crate::data::{SiteDataset, SiteId};
use crate::error::{Error, Result};
use crate::expr::BasisVector;
use crate::numerics::newton::{newton_solve, NewtonOptions};
use crate::numerics::sieve::{sieve_fit_scalar, SieveModel, SieveSpec, Standardizer};

/// Floor applied to fitted conditional normalizers.
pub const NORMALIZER_FLOOR: f64 = 1e-6;

/// Overlap warning threshold on `max/min` of `lambda * w*` over the target.
pub const DEFAULT_OVERLAP_WARN: f64 = 100.0;

// ---------------------------------------------------------------------------
// Covariate/treatment shift
// ---------------------------------------------------------------------------

/// Number of features in the fixed covariate-shift basis `phi(x, a)`.
pub fn phi_len(dim: usize) -> usize {
    // x_j, x_j^2, x_i x_j (i<j), a, a*x_j  — intercept-free
    dim + dim + dim * dim.saturating_sub(1) / 2 + 1 + dim
}

/// Fill the covariate-shift features for one observation (raw scale; the
/// basis must be computable identically at every site before any broadcast).
pub fn phi_features(x: &[f64], a: f64, out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), phi_len(d));
    let mut k = 0;
    for &v in x {
        out[k] = v;
        k += 1;
    }
    for &v in x {
        out[k] = v * v;
        k += 1;
    }
    for i in 0..d {
        for j in (i + 1)..d {
            out[k] = x[i] * x[j];
            k += 1;
        }
    }
    out[k] = a;
    k += 1;
    for &v in x {
        out[k] = a * v;
        k += 1;
    }
    debug_assert_eq!(k, out.len());
}

/// Mean of `phi(x, a)` over a dataset — the round-1 uplink of a source site.
pub fn phi_moments(data: &SiteDataset) -> Vec<f64> {
    let p = phi_len(data.dim());
    let mut acc = vec![0.0; p];
    let mut row = vec![0.0; p];
    for i in 0..data.n() {
        phi_features(data.xrow(i), data.a(i), &mut row);
        for (a, r) in acc.iter_mut().zip(&row) {
            *a += r;
        }
    }
    let n = data.n() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Fitted exponential-tilt covariate shift:
/// `lambda(x, a) = exp(gamma' phi(x, a) - log_norm)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateShiftModel {
    pub gamma: Vec<f64>,
    pub log_norm: f64,
}

impl CovariateShiftModel {
    /// The identity shift `lambda == 1` (used for the target itself).
    pub fn identity(dim: usize) -> Self {
        CovariateShiftModel {
            gamma: vec![0.0; phi_len(dim)],
            log_norm: 0.0,
        }
    }

    pub fn lambda(&self, x: &[f64], a: f64) -> f64 {
        let mut row = vec![0.0; self.gamma.len()];
        phi_features(x, a, &mut row);
        let u: f64 = row.iter().zip(&self.gamma).map(|(r, g)| r * g).sum();
        (u - self.log_norm).exp()
    }
}

/// Fit `lambda_s` on the target sample from a source's feature means.
///
/// Solves the self-normalized moment equations
/// `(1/n0) sum_i lambda(x_i, a_i; gamma) phi(x_i, a_i) = moments`,
/// which forces the target-sample mean of `lambda` to be exactly 1.
pub fn fit_covariate_tilt(
    target: &SiteDataset,
    moments: &[f64],
    site: SiteId,
) -> Result<CovariateShiftModel> {
    let n = target.n();
    let p = phi_len(target.dim());
    if moments.len() != p {
        return Err(Error::DimensionMismatch {
            context: format!("covariate-shift moments for site {site}"),
            expected: p,
            actual: moments.len(),
        });
    }
    // Pre-expand the feature matrix once.
    let mut feats = vec![0.0; n * p];
    for i in 0..n {
        phi_features(target.xrow(i), target.a(i), &mut feats[i * p..(i + 1) * p]);
    }
    let nf = n as f64;
    let residual = |gamma: &DVector<f64>| -> Result<DVector<f64>> {
        let mut u = vec![0.0; n];
        let mut umax = f64::NEG_INFINITY;
        for i in 0..n {
            let row = &feats[i * p..(i + 1) * p];
            let ui: f64 = row.iter().zip(gamma.iter()).map(|(r, g)| r * g).sum();
            u[i] = ui;
            if ui > umax {
                umax = ui;
            }
        }
        let mut denom = 0.0;
        for ui in u.iter_mut() {
            *ui = (*ui - umax).exp();
            denom += *ui;
        }
        denom /= nf;
        let mut out = DVector::zeros(p);
        for i in 0..n {
            let lam = u[i] / denom;
            let row = &feats[i * p..(i + 1) * p];
            for j in 0..p {
                out[j] += lam * row[j];
            }
        }
        for j in 0..p {
            out[j] = out[j] / nf - moments[j];
        }
        Ok(out)
    };
    let start = DVector::zeros(p);
    let sol = newton_solve(residual, &start, &NewtonOptions::default()).map_err(|e| match e {
        Error::NoConvergence {
            iterations,
            residual,
            ..
        } => Error::ShiftFit {
            site,
            message: format!(
                "moment matching did not converge after {iterations} iterations \
                 (residual sup-norm {residual:.3e}); source feature means may lie \
                 outside the target's achievable range (poor overlap)"
            ),
        },
        other => other,
    })?;
    // recompute the stabilized log-normalizer at the solution
    let gamma: Vec<f64> = sol.root.iter().cloned().collect();
    let mut umax = f64::NEG_INFINITY;
    let mut u = vec![0.0; n];
    for i in 0..n {
        let row = &feats[i * p..(i + 1) * p];
        let ui: f64 = row.iter().zip(&gamma).map(|(r, g)| r * g).sum();
        u[i] = ui;
        if ui > umax {
            umax = ui;
        }
    }
    let mean_exp: f64 = u.iter().map(|ui| (ui - umax).exp()).sum::<f64>() / nf;
    let log_norm = umax + mean_exp.ln();
    Ok(CovariateShiftModel { gamma, log_norm })
}

// ---------------------------------------------------------------------------
// Outcome tilt
// ---------------------------------------------------------------------------

/// One source's declared outcome tilt: basis plus coefficient.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTilt {
    pub basis: BasisVector,
    pub beta: Vec<f64>,
}

impl SourceTilt {
    /// `w(z) = exp(beta' xi(z))`, with a scratch buffer for the basis values.
    pub fn weight(&self, x: &[f64], a: f64, y: f64, scratch: &mut [f64]) -> Result<f64> {
        self.basis.evaluate_into(x, a, y, scratch)?;
        let t: f64 = scratch.iter().zip(&self.beta).map(|(v, b)| v * b).sum();
        let w = t.exp();
        if w.is_finite() && w > 0.0 {
            Ok(w)
        } else {
            Err(Error::NonFinite("outcome tilt weight".into()))
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

/// Conditional normalizer `W(x, a) = E[w(Z) | X = x, A = a]` under the
/// target law. `Unit` is the exact shortcut for `beta = 0`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum NormalizerModel {
    Unit,
    Fitted { model: SieveModel, floor: f64 },
}

impl NormalizerModel {
    pub fn evaluate(&self, x: &[f64], a: f64) -> f64 {
        match self {
            NormalizerModel::Unit => 1.0,
            NormalizerModel::Fitted { model, floor } => model.predict_scalar(x, a).max(*floor),
        }
    }
}

/// Regress `w(z; beta)` on `(x, a)` over the target sample.
pub fn estimate_normalizer(
    spec: &SieveSpec,
    standardizer: &Standardizer,
    target: &SiteDataset,
    tilt: &SourceTilt,
) -> Result<NormalizerModel> {
    if tilt.beta.iter().all(|&b| b == 0.0) {
        return Ok(NormalizerModel::Unit);
    }
    let n = target.n();
    let mut resp = vec![0.0; n];
    let mut scratch = vec![0.0; tilt.dim()];
    for i in 0..n {
        resp[i] = tilt.weight(target.xrow(i), target.a(i), target.y(i), &mut scratch)?;
    }
    let model = sieve_fit_scalar(spec, standardizer, target, &resp)?;
    Ok(NormalizerModel::Fitted {
        model,
        floor: NORMALIZER_FLOOR,
    })
}

/// Result of the per-source tilt-coefficient solve.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub residual_sup: f64,
}

/// Solve the moment-matching equation for one source's `beta`:
///
/// `xi_bar = (1/n0) sum_i lambda(x_i, a_i) * w*(z_i; beta) * xi(z_i)`
///
/// over the target sample, where `w* = w / W` and the normalizer `W` is
/// re-estimated at every `beta` the solver evaluates (including
/// finite-difference probes), so the fitted pair `(beta, W)` is internally
/// consistent. Starts at `beta = 0`.
pub fn solve_beta_one(
    target: &SiteDataset,
    basis: &BasisVector,
    xi_bar: &[f64],
    lambda: &CovariateShiftModel,
    spec: &SieveSpec,
    standardizer: &Standardizer,
    site: SiteId,
) -> Result<BetaFit> {
    let q = basis.len();
    if xi_bar.len() != q {
        return Err(Error::DimensionMismatch {
            context: format!("xi moments for site {site}"),
            expected: q,
            actual: xi_bar.len(),
        });
    }
    let n = target.n();
    // Fixed pieces: lambda values and basis values over the target.
    let mut lam = vec![0.0; n];
    let mut xi = vec![0.0; n * q];
    for i in 0..n {
        lam[i] = lambda.lambda(target.xrow(i), target.a(i));
        basis.evaluate_into(target.xrow(i), target.a(i), target.y(i), &mut xi[i * q..(i + 1) * q])?;
    }
    let nf = n as f64;
    let residual = |beta: &DVector<f64>| -> Result<DVector<f64>> {
        let tilt = SourceTilt {
            basis: basis.clone(),
            beta: beta.iter().cloned().collect(),
        };
        let normalizer = estimate_normalizer(spec, standardizer, target, &tilt)?;
        let mut out = DVector::zeros(q);
        for i in 0..n {
            let row = &xi[i * q..(i + 1) * q];
            let t: f64 = row.iter().zip(beta.iter()).map(|(v, b)| v * b).sum();
            let w = t.exp();
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("tilt weight for site {site}")));
            }
            let wstar = w / normalizer.evaluate(target.xrow(i), target.a(i));
            let f = lam[i] * wstar;
            for j in 0..q {
                out[j] += f * row[j];
            }
        }
        for j in 0..q {
            out[j] = out[j] / nf - xi_bar[j];
        }
        Ok(out)
    };
    let sol = newton_solve(residual, &DVector::zeros(q), &NewtonOptions::default()).map_err(|e| {
        match e {
            Error::NoConvergence {
                iterations,
                residual,
                ..
            } => Error::BetaSolve {
                site,
                message: format!(
                    "moment matching did not converge after {iterations} iterations \
                     (residual sup-norm {residual:.3e})"
                ),
            },
            other => other,
        }
    })?;
    Ok(BetaFit {
        beta: sol.root.iter().cloned().collect(),
        iterations: sol.iterations,
        residual_sup: sol.residual_sup,
    })
}

/// `max/min` over the target sample of `lambda_s * w*_s` — the effective
/// reweighting a source applies to target observations. Large ratios flag
/// weak overlap.
pub fn overlap_ratio(
    target: &SiteDataset,
    lambda: &CovariateShiftModel,
    tilt: Option<&SourceTilt>,
    normalizer: &NormalizerModel,
) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut scratch = vec![0.0; tilt.map(|t| t.dim()).unwrap_or(0)];
    for i in 0..target.n() {
        let x = target.xrow(i);
        let a = target.a(i);
        let w = match tilt {
            Some(t) => t.weight(x, a, target.y(i), &mut scratch)? / normalizer.evaluate(x, a),
            None => 1.0,
        };
        let v = lambda.lambda(x, a) * w;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(hi / lo)
}
