//! Damped Newton root finder with a finite-difference Jacobian.
//!
//! Solves `f(x) = 0` for moderate-dimensional systems (tilt normalizer
//! moment equations, covariate-shift tilts). The Jacobian is formed by
//! central differences, steps are halved until the residual norm decreases,
//! and a singular Jacobian falls back to a pseudoinverse step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::pinv::{pinv, DEFAULT_REL_TOL};

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Convergence threshold on the residual sup-norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative scale of the central-difference step `h_j = fd_step * (1 + |x_j|)`.
    pub fd_step: f64,
    /// Maximum number of step halvings per iteration.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iter: 100,
            fd_step: 1e-6,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub root: DVector<f64>,
    pub residual_sup: f64,
    pub iterations: usize,
}

/// Solve `f(x) = 0` starting from `x0`.
pub fn newton_solve<F>(mut f: F, x0: &DVector<f64>, opts: &NewtonOptions) -> Result<NewtonSolution>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let p = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x)?;
    if fx.len() != p {
        return Err(Error::DimensionMismatch {
            context: "newton_solve residual".into(),
            expected: p,
            actual: fx.len(),
        });
    }
    let mut best_x = x.clone();
    let mut best_sup = fx.abs().max();
    for iter in 0..opts.max_iter {
        let sup = fx.abs().max();
        if sup < best_sup {
            best_sup = sup;
            best_x = x.clone();
        }
        if sup < opts.tol {
            return Ok(NewtonSolution {
                root: x,
                residual_sup: sup,
                iterations: iter,
            });
        }
        // central-difference Jacobian
        let mut jac = DMatrix::zeros(p, p);
        for j in 0..p {
            let h = opts.fd_step * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fp = f(&xp)?;
            let fm = f(&xm)?;
            for i in 0..p {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let neg = -&fx;
        // Primary step from an LU solve; fall back to a pseudoinverse step
        // when the Jacobian is singular or the LU direction fails to reduce
        // the residual (near-singular Jacobians give wild LU directions).
        let lu_step = jac
            .clone()
            .lu()
            .solve(&neg)
            .filter(|s| s.iter().all(|v| v.is_finite()));
        let f0 = fx.norm();
        let mut accepted = false;
        'steps: for attempt in 0..2 {
            let step = match (attempt, &lu_step) {
                (0, Some(s)) => s.clone(),
                (0, None) => continue,
                (1, _) => pinv(&jac, DEFAULT_REL_TOL)? * &neg,
                _ => unreachable!(),
            };
            // damped line search on the euclidean norm
            let mut t = 1.0;
            for _ in 0..=opts.max_halvings {
                let cand = &x + &step * t;
                match f(&cand) {
                    Ok(fc) if fc.iter().all(|v| v.is_finite()) && fc.norm() < f0 => {
                        x = cand;
                        fx = fc;
                        accepted = true;
                        break 'steps;
                    }
                    _ => t *= 0.5,
                }
            }
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual: best_sup,
                best: best_x.iter().cloned().collect(),
            });
        }
    }
    let sup = fx.abs().max();
    if sup < opts.tol {
        return Ok(NewtonSolution {
            root: x,
            residual_sup: sup,
            iterations: opts.max_iter,
        });
    }
    if sup < best_sup {
        best_sup = sup;
        best_x = x;
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: best_sup,
        best: best_x.iter().cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_two_dimensional_system() {
        // x^2 + y^2 = 5, x*y = 2  -> (2, 1) from a nearby start
        let f = |v: &DVector<f64>| {
            Ok(DVector::from_vec(vec![
                v[0] * v[0] + v[1] * v[1] - 5.0,
                v[0] * v[1] - 2.0,
            ]))
        };
        let sol = newton_solve(f, &DVector::from_vec(vec![1.5, 0.5]), &NewtonOptions::default()).unwrap();
        assert!((sol.root[0] - 2.0).abs() < 1e-7);
        assert!((sol.root[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rootless_function_reports_no_convergence() {
        let f = |v: &DVector<f64>| Ok(DVector::from_vec(vec![v[0] * v[0] + 1.0]));
        match newton_solve(f, &DVector::from_vec(vec![3.0]), &NewtonOptions::default()) {
            Err(Error::NoConvergence { residual, best, .. }) => {
                assert!(residual >= 1.0);
                assert_eq!(best.len(), 1);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn handles_singular_jacobian_at_root() {
        // f(x) = x^3 has a triple root at 0; Newton converges linearly
        let f = |v: &DVector<f64>| Ok(DVector::from_vec(vec![v[0] * v[0] * v[0]]));
        let sol = newton_solve(f, &DVector::from_vec(vec![1.0]), &NewtonOptions::default()).unwrap();
        assert!(sol.root[0].abs() < 0.05);
        assert!(sol.residual_sup < 1e-8);
    }

    #[test]
    fn exponential_moment_equation() {
        // E-type equation: e^x - 3 = 0
        let f = |v: &DVector<f64>| Ok(DVector::from_vec(vec![v[0].exp() - 3.0]));
        let sol = newton_solve(f, &DVector::from_vec(vec![0.0]), &NewtonOptions::default()).unwrap();
        assert!((sol.root[0] - 3.0f64.ln()).abs() < 1e-9);
    }
}
