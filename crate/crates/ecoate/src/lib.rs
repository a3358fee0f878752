//! Federated estimation of the average treatment effect on a target site,
//! fusing summary statistics from source sites whose outcome distributions
//! differ from the target's by parametric density-ratio tilts and whose
//! covariate/treatment distributions may shift arbitrarily.
//!
//! The crate is organised bottom-up:
//!
//! * [`expr`] — the textual language for tilt-basis functions `xi(y, a, x)`;
//! * [`numerics`] — sieve least squares, logistic regression, kernel
//!   smoothing, pseudoinverse, and a damped Newton root solver;
//! * [`shift`] — covariate/treatment shift factors `lambda_s(x, a)` and
//!   outcome tilt weights `w_s(z; beta_s)` with their normalizers, plus the
//!   moment-matching solve for `beta`;
//! * [`gradient`] — the per-observation influence-function machinery
//!   (`r`, `M`, `d*`, `a*`, efficient scores, canonical gradient);
//! * [`federation`] — message schemas, transports, and the two-round
//!   protocol that produces the fused estimate;
//! * [`estimators`] — reference estimators (target-only AIPW, naive fusion,
//!   pooled oracle, inverse-variance meta-analysis) and CI assembly;
//! * [`simlab`] — the Monte Carlo laboratory: data-generating processes,
//!   replication driver, metric summaries, and report rendering.

pub mod data;
pub mod error;
pub mod estimators;
pub mod expr;
pub mod federation;
pub mod gradient;
pub mod numerics;
pub mod shift;
pub mod simlab;

pub use error::{Error, Result};
