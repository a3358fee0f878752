//! Moore–Penrose pseudoinverse via singular value decomposition.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative cutoff below which singular values are treated as zero.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Pseudoinverse of `m`. Singular values below `rel_tol * sigma_max` are
/// dropped, which makes the routine stable on exactly singular inputs (the
/// generalized-inverse use in the influence-function algebra hits genuinely
/// rank-deficient matrices in well-specified configurations).
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    pinv_with_floor(m, rel_tol, 0.0)
}

/// Pseudoinverse with an additional absolute singular-value floor: singular
/// values below `max(rel_tol * sigma_max, abs_floor)` are dropped. The
/// absolute floor lets callers declare that directions of a given magnitude
/// are sampling or fitting noise around an exactly singular population
/// matrix, so the inverse must annihilate them rather than blow them up.
pub fn pinv_with_floor(
    m: &DMatrix<f64>,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pinv input".into()));
    }
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        // Degenerate shapes (e.g. no score components): the pseudoinverse
        // is the empty matrix of transposed shape.
        return Ok(DMatrix::zeros(c, r));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Singular("pinv: svd U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Singular("pinv: svd V".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        // Pseudoinverse of the zero matrix is the zero matrix (transposed shape).
        return Ok(DMatrix::zeros(c, r));
    }
    let cut = (rel_tol * smax).max(abs_floor);
    let k = svd.singular_values.len();
    let mut inv_s = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cut {
            inv_s[(i, i)] = 1.0 / s;
        }
    }
    Ok(v_t.transpose() * inv_s * u.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn penrose_ok(a: &DMatrix<f64>, ap: &DMatrix<f64>, tol: f64) {
        let aap_a = a * ap * a;
        let ap_a_ap = ap * a * ap;
        let a_ap = a * ap;
        let ap_a = ap * a;
        assert!((aap_a - a).abs().max() < tol, "A A+ A != A");
        assert!((ap_a_ap - ap).abs().max() < tol, "A+ A A+ != A+");
        assert!((&a_ap - a_ap.transpose()).abs().max() < tol, "A A+ not symmetric");
        assert!((&ap_a - ap_a.transpose()).abs().max() < tol, "A+ A not symmetric");
    }

    #[test]
    fn penrose_conditions_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..40 {
            let r = rng.gen_range(1..7);
            let c = rng.gen_range(1..7);
            let mut a = DMatrix::zeros(r, c);
            for v in a.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            // Half the trials get an exactly repeated column to force rank
            // deficiency.
            if trial % 2 == 0 && c >= 2 {
                let col0 = a.column(0).into_owned();
                a.set_column(c - 1, &col0);
            }
            let ap = pinv(&a, DEFAULT_REL_TOL).unwrap();
            penrose_ok(&a, &ap, 1e-8);
        }
    }

    #[test]
    fn zero_matrix_maps_to_zero() {
        let z = DMatrix::<f64>::zeros(3, 2);
        let p = pinv(&z, DEFAULT_REL_TOL).unwrap();
        assert_eq!(p.shape(), (2, 3));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_of_invertible_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let p = pinv(&a, DEFAULT_REL_TOL).unwrap();
        let id = &a * &p;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let a = DMatrix::from_row_slice(1, 2, &[f64::NAN, 1.0]);
        assert!(pinv(&a, DEFAULT_REL_TOL).is_err());
    }
}
