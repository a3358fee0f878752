//! The benchmark data-generating process and its analytic ground truths.
//!
//! Four sites over a scalar covariate. For site `s` (0 = target):
//!
//! * `X | S=s  ~  1 + Beta(0.5 s + 4, 5)` — support inside `[1, 2]`;
//! * `A | X, S ~  Bernoulli(1/2)`;
//! * `Y | A, X, S=s ~ Gamma(shape_s(X, A), rate = 2X)` with
//!   `shape_s = (2 - eps/2 · 1{s=1}) (X + XA) - eps · 1{s=2} A - eps · 1{s=3} XA`.
//!
//! The target mean is `E[Y | A, X, S=0] = shape/rate = 1 + A`, so the
//! target average treatment effect is exactly 1 at every `eps`, and `eps`
//! only perturbs the sources. Because the sites share the rate `2X`, each
//! source's conditional outcome density differs from the target's by
//! `exp(Δshape · log y)` times an `(a, x)` normalizer — an exact
//! log-linear tilt whose coefficient vector is known in closed form.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Gamma};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::expr::BasisVector;

/// The target-site average treatment effect under this process.
pub const TRUE_ATE: f64 = 1.0;

/// Number of source sites.
pub const NUM_SOURCES: usize = 3;

/// SplitMix64 step — used to derive decorrelated per-replication seeds
/// from `(base seed, replicate index)` so replication streams are
/// independent and insensitive to evaluation order.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derived seed for one replication.
pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(replicate as u64))
}

/// Independent RNG stream for one replication.
pub fn replicate_rng(base_seed: u64, replicate: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(replicate_seed(base_seed, replicate))
}

/// Gamma shape parameter at one observation of site `s`.
pub fn gamma_shape(site: u32, eps: f64, x: f64, a: f64) -> f64 {
    let base = if site == 1 { 2.0 - eps / 2.0 } else { 2.0 };
    let mut shape = base * (x + x * a);
    if site == 2 {
        shape -= eps * a;
    }
    if site == 3 {
        shape -= eps * x * a;
    }
    shape
}

/// Draw `n` observations of site `site` at tilt strength `eps`.
pub fn sample_site(
    site: u32,
    n: usize,
    eps: f64,
    rng: &mut ChaCha12Rng,
) -> Result<SiteDataset> {
    let xb = Beta::new(0.5 * f64::from(site) + 4.0, 5.0)
        .map_err(|e| Error::InvalidData(format!("covariate sampler: {e}")))?;
    let mut d = SiteDataset::new(site, 1);
    for _ in 0..n {
        let x = 1.0 + xb.sample(rng);
        let a = f64::from(rng.gen_bool(0.5));
        let shape = gamma_shape(site, eps, x, a);
        if shape <= 0.0 {
            return Err(Error::Domain {
                context: format!("outcome shape at site {site}"),
                message: format!("shape {shape} <= 0 at x={x}, a={a}, eps={eps}"),
            });
        }
        // rand_distr's Gamma takes (shape, scale); the process's rate is 2x.
        let y = Gamma::new(shape, 1.0 / (2.0 * x))
            .map_err(|e| Error::InvalidData(format!("outcome sampler: {e}")))?
            .sample(rng);
        d.push(&[x], a, y);
    }
    Ok(d)
}

/// Draw the full site list for one replication: target first, then the
/// three sources, all from one replication stream in a fixed order.
pub fn sample_replication(
    n_per_site: usize,
    eps: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<SiteDataset>> {
    (0..=NUM_SOURCES as u32)
        .map(|s| sample_site(s, n_per_site, eps, rng))
        .collect()
}

/// The tilt basis each source declares.
///
/// With `overparam`, the basis is enlarged with redundant terms whose true
/// coefficients are zero, so exact alignment still lies inside the model.
pub fn source_basis(site: u32, overparam: bool) -> Result<BasisVector> {
    let forms: &[&str] = match (site, overparam) {
        (1, false) => &["x1*log(y)", "x1*a*log(y)"],
        (1, true) => &["x1*log(y)", "x1*a*log(y)", "log(y)", "a*log(y)"],
        (2, false) => &["a*log(y)"],
        (2, true) => &["a*log(y)", "x1*log(y)", "x1*a*log(y)"],
        (3, false) => &["x1*a*log(y)"],
        (3, true) => &["x1*a*log(y)", "log(y)", "x1*log(y)"],
        _ => {
            return Err(Error::InvalidData(format!(
                "no declared basis for site {site}"
            )))
        }
    };
    let strings: Vec<String> = forms.iter().map(|s| s.to_string()).collect();
    BasisVector::from_strings(&strings, 1)
}

/// The true tilt coefficients for `source_basis(site, overparam)`:
/// `Δshape · log y` expanded on the declared terms, redundant terms zero.
pub fn true_beta(site: u32, eps: f64, overparam: bool) -> Vec<f64> {
    let mut beta = match site {
        1 => vec![-eps / 2.0, -eps / 2.0],
        2 => vec![-eps],
        3 => vec![-eps],
        _ => Vec::new(),
    };
    if overparam {
        let extra = match site {
            1 => 2,
            2 | 3 => 2,
            _ => 0,
        };
        beta.extend(std::iter::repeat(0.0).take(extra));
    }
    beta
}
