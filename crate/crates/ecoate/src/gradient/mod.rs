//! Per-observation influence machinery for the fused treatment-effect estimator.
//!
//! Every site that contributes second-round summaries evaluates, observation by
//! observation, the same per-record quantities:
//!
//! * the stacked outcome-tilt weights `wbar = (1, w*_1, ..., w*_k)` where
//!   `w*_s(z) = exp(beta_s' xi_s(z)) / W_s(a, x)` is the normalized outcome
//!   tilt of source `s` (the target occupies slot 0 with weight 1),
//! * the mixture reweighting factor `r(z) = 1 / sum_s p_s lambda_s(x) w*_s(z)`
//!   and its per-site decomposition `rbar_s = p_s lambda_s w*_s r` (which sums
//!   to one by construction),
//! * the projection matrix `M(a, x) = diag(1/p_s) - E[r wbar wbar' | a, x]`
//!   evaluated through broadcast conditional-mean models, symmetrized, and
//!   inverted by a truncated pseudoinverse,
//! * the centered residual kernel `dstar` and the centered score kernel
//!   `astar`, each of which corrects a raw per-record quantity by its
//!   conditional mean and a tilt-direction projection through `M^-`,
//! * the stacked model score `ell(z, m)` for each candidate site membership
//!   `m`, combined into `atilde = sum_m rbar_m ell(z, m)`,
//! * the model-implied per-site conditional means of `dstar` and `astar`
//!   given `(A, X)` — every site's outer centering terms — derived from the
//!   same broadcast models through the alignment identity
//!   `E[g | a, x, S=s] = E[w*_s g | a, x, S=0]`.
//!
//! All conditional means given `(A, X)` under the target law are supplied by a
//! single [`CondBundle`] so that production code can back them with broadcast
//! regression models while tests can inject exact closed-form tables. The
//! final per-record quantities consumed by the fusion step — the efficient
//! score and the estimating-function value — are assembled by free functions
//! at the bottom of this module from an [`ObsEval`] and the centers it
//! carries.

mod fit;

pub use fit::{
    fit_cond_models, CondFamily, CondModels, KernelCondModels, SieveCondModels,
    TargetNuisance,
};

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{pinv_with_floor, DEFAULT_REL_TOL};
use crate::shift::{CovariateShiftModel, NormalizerModel, SourceTilt};

/// Lower propensity clamp: fitted treatment probabilities are truncated into
/// `[PROPENSITY_CLAMP_LO, PROPENSITY_CLAMP_HI]` before dividing.
pub const PROPENSITY_CLAMP_LO: f64 = 0.01;
/// Upper propensity clamp.
pub const PROPENSITY_CLAMP_HI: f64 = 0.99;

/// Absolute singular-value floor for inverting the estimated projection
/// matrix `M(a, x)`, expressed relative to the scale `1 / min_s p_s` of its
/// diagonal part. Directions whose singular value falls below the floor are
/// treated as exact null directions of the population matrix. In particular,
/// with no sources the estimated `M` is a ridge-level perturbation of zero
/// and the floor maps its inverse to zero, so the correction term vanishes
/// identically rather than amplifying fitting noise.
pub const M_SINGULAR_FLOOR: f64 = 1e-8;

/// A conditional mean of a scalar given covariates and arm.
///
/// Used for the outcome regression `mu(a, x)` and the treatment probability
/// `p(x) = P(A = 1 | x)` (which ignores the arm argument). Closures
/// `Fn(&[f64], f64) -> f64` implement it automatically, so tests can inject
/// exact functions.
pub trait ArmScalarFn: Send + Sync {
    fn eval(&self, x: &[f64], a: f64) -> f64;
}

impl<F> ArmScalarFn for F
where
    F: Fn(&[f64], f64) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64], a: f64) -> f64 {
        self(x, a)
    }
}

/// Adapter exposing a fitted single-response regression as an [`ArmScalarFn`].
pub struct SieveScalar(pub crate::numerics::SieveModel);

impl ArmScalarFn for SieveScalar {
    fn eval(&self, x: &[f64], a: f64) -> f64 {
        self.0.predict_scalar(x, a)
    }
}

/// Adapter exposing a fitted treatment model as an [`ArmScalarFn`] returning
/// `P(A = 1 | x)` regardless of the arm argument.
pub struct LogisticTreated(pub crate::numerics::LogisticModel);

impl ArmScalarFn for LogisticTreated {
    fn eval(&self, x: &[f64], _a: f64) -> f64 {
        self.0.prob_treated(x)
    }
}

/// Treatment-probability evaluator with clamping.
pub struct Propensity {
    model: Arc<dyn ArmScalarFn>,
    lo: f64,
    hi: f64,
}

impl Propensity {
    pub fn new(model: Arc<dyn ArmScalarFn>) -> Self {
        Self {
            model,
            lo: PROPENSITY_CLAMP_LO,
            hi: PROPENSITY_CLAMP_HI,
        }
    }

    /// `P(A = a | x)` clamped into the configured range; the flag reports
    /// whether clamping was applied.
    pub fn prob(&self, x: &[f64], a: f64) -> (f64, bool) {
        let raw = self.model.eval(x, 1.0);
        let clamped = raw.clamp(self.lo, self.hi);
        let hit = clamped != raw;
        let p = if a == 1.0 { clamped } else { 1.0 - clamped };
        (p, hit)
    }
}

/// Index layout of the flat conditional-mean vector produced by a
/// [`CondBundle`].
///
/// The first stage holds, in order: `E[r wbar | a, x]` (`kk` entries),
/// `E[r wbar wbar' | a, x]` (`kk * kk`, row major), `E[dtilde | a, x]` (one
/// entry), `E[dtilde wbar | a, x]` (`kk`), then for each source `s` with an
/// outcome tilt and each candidate membership `m = 0..kk` the block
/// `E[xi_s | a, x, membership m]` (`xi_dims[s]` entries, memberships
/// contiguous within a source). The second stage holds `E[atilde | a, x]`
/// (`beta_dim`) followed by `E[atilde wbar' | a, x]` (`beta_dim * kk`, row
/// major).
#[derive(Debug, Clone, PartialEq)]
pub struct CondLayout {
    /// Number of participating sites including the target (`k + 1`).
    pub kk: usize,
    /// Dimension of each source's outcome-tilt basis (0 when untilted).
    pub xi_dims: Vec<usize>,
    /// Offset of each source's block in the stacked tilt coordinate.
    pub offsets: Vec<usize>,
    /// Total stacked tilt dimension.
    pub beta_dim: usize,
}

impl CondLayout {
    pub fn new(xi_dims: Vec<usize>) -> Self {
        let kk = xi_dims.len() + 1;
        let mut offsets = Vec::with_capacity(xi_dims.len());
        let mut acc = 0usize;
        for &q in &xi_dims {
            offsets.push(acc);
            acc += q;
        }
        Self {
            kk,
            xi_dims,
            offsets,
            beta_dim: acc,
        }
    }

    /// Number of sources (`kk - 1`).
    pub fn k(&self) -> usize {
        self.kk - 1
    }

    pub fn rw(&self) -> Range<usize> {
        0..self.kk
    }

    pub fn rww(&self) -> Range<usize> {
        let b = self.kk;
        b..b + self.kk * self.kk
    }

    pub fn dtilde(&self) -> usize {
        self.kk + self.kk * self.kk
    }

    pub fn dtilde_w(&self) -> Range<usize> {
        let b = self.dtilde() + 1;
        b..b + self.kk
    }

    fn xi_base(&self) -> usize {
        self.dtilde_w().end
    }

    /// Slice of `E[xi_s | a, x, membership m]` for source index `si`.
    pub fn xi(&self, si: usize, m: usize) -> Range<usize> {
        debug_assert!(m < self.kk);
        let q = self.xi_dims[si];
        let b = self.xi_base() + self.offsets[si] * self.kk + m * q;
        b..b + q
    }

    /// Length of the first-stage conditional vector.
    pub fn stage_a_len(&self) -> usize {
        self.xi_base() + self.beta_dim * self.kk
    }

    pub fn atilde(&self) -> Range<usize> {
        0..self.beta_dim
    }

    pub fn atilde_w(&self) -> Range<usize> {
        self.beta_dim..self.beta_dim + self.beta_dim * self.kk
    }

    /// Length of the second-stage conditional vector.
    pub fn stage_b_len(&self) -> usize {
        self.beta_dim + self.beta_dim * self.kk
    }
}

/// Provider of every conditional mean given `(A, X)` under the target law
/// that the per-observation evaluation needs.
///
/// `stage_a` receives a slice of length [`CondLayout::stage_a_len`];
/// `stage_b` receives one of length [`CondLayout::stage_b_len`] and is only
/// called when the stacked tilt dimension is positive.
pub trait CondBundle: Send + Sync {
    fn stage_a(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()>;
    fn stage_b(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()>;
}

/// Per-source ingredients carried by a [`GradientContext`].
#[derive(Debug, Clone)]
pub struct SourceContext {
    /// Site identifier of the source.
    pub id: crate::data::SiteId,
    /// Population share `p_s = n_s / n`.
    pub prob: f64,
    /// Outcome tilt `exp(beta' xi)`; `None` means the source is modeled as
    /// sharing the target outcome law (weight identically one).
    pub tilt: Option<SourceTilt>,
    /// Arm-wise normalizer `W_s(a, x)`.
    pub normalizer: NormalizerModel,
    /// Covariate tilt `lambda_s(x, a)`.
    pub lambda: CovariateShiftModel,
}

/// Everything needed to evaluate the per-observation machinery at any site.
pub struct GradientContext {
    /// Target population share `p_0 = n_0 / n`.
    pub p0: f64,
    /// Participating sources in stacking order.
    pub sources: Vec<SourceContext>,
    /// Clamped treatment-probability evaluator.
    pub propensity: Propensity,
    /// Outcome regression `mu(a, x)` under the target law.
    pub mu: Arc<dyn ArmScalarFn>,
    /// Conditional means given `(A, X)` under the target law.
    pub cond: Arc<dyn CondBundle>,
    /// Index layout shared with `cond`.
    pub layout: CondLayout,
    /// Absolute singular-value cutoff used when inverting `M(a, x)`.
    pub m_floor: f64,
}

/// All per-record quantities produced by [`GradientContext::evaluate_obs`].
#[derive(Debug, Clone)]
pub struct ObsEval {
    /// Stacked tilt weights `(1, w*_1, ..., w*_k)`.
    pub wbar: Vec<f64>,
    /// Mixture reweighting factor `r(z)`.
    pub r: f64,
    /// Per-site shares `rbar_s = p_s lambda_s w*_s r`; sums to one.
    pub rbar: Vec<f64>,
    /// Raw residual kernel `r (2a - 1) / pi(a, x) * (y - mu(a, x))`.
    pub dtilde: f64,
    /// Centered and projection-corrected residual kernel.
    pub dstar: f64,
    /// Raw stacked tilt-basis values `xi_s(z)` for every tilted source.
    pub xi_stack: Vec<f64>,
    /// Membership-averaged score `sum_m rbar_m ell(z, m)`.
    pub atilde: Vec<f64>,
    /// Centered and projection-corrected score kernel.
    pub astar: Vec<f64>,
    /// Conditional means `E[xi_j | a, x, membership m]` for every stacked
    /// coordinate `j` and candidate membership `m`, laid out `j*(k+1) + m`.
    pub xi_cond: Vec<f64>,
    /// Model-implied conditional means `E[dstar | a, x, S=s]` for every
    /// site slot `s` (target slot 0 vanishes identically: its centering is
    /// already built into `dstar`).
    pub center_d: Vec<f64>,
    /// Model-implied conditional means `E[astar_j | a, x, S=s]`, laid out
    /// `j*(k+1) + s` (slot 0 vanishes identically).
    pub center_a: Vec<f64>,
    /// Whether the propensity clamp was active at this record.
    pub pi_clamped: bool,
}

impl GradientContext {
    /// Number of sources.
    pub fn k(&self) -> usize {
        self.sources.len()
    }

    /// Smallest site share, used to scale the `M` inversion floor.
    fn min_prob(&self) -> f64 {
        self.sources
            .iter()
            .map(|s| s.prob)
            .fold(self.p0, f64::min)
    }

    pub fn new(
        p0: f64,
        sources: Vec<SourceContext>,
        propensity: Propensity,
        mu: Arc<dyn ArmScalarFn>,
        cond: Arc<dyn CondBundle>,
        layout: CondLayout,
    ) -> Self {
        let mut ctx = Self {
            p0,
            sources,
            propensity,
            mu,
            cond,
            layout,
            m_floor: 0.0,
        };
        ctx.m_floor = M_SINGULAR_FLOOR / ctx.min_prob();
        ctx
    }

    /// Outcome-regression difference `mu(1, x) - mu(0, x)`.
    pub fn mu_delta(&self, x: &[f64]) -> f64 {
        self.mu.eval(x, 1.0) - self.mu.eval(x, 0.0)
    }

    /// Stacked tilt weights and per-source basis values at one record.
    ///
    /// Writes `wbar` (length `k + 1`, target slot first) and the stacked raw
    /// basis values `xi_stack` (length `beta_dim`).
    pub fn weights_at(
        &self,
        x: &[f64],
        a: f64,
        y: f64,
        wbar: &mut Vec<f64>,
        xi_stack: &mut Vec<f64>,
    ) -> Result<()> {
        weights_at_impl(&self.sources, &self.layout, x, a, y, wbar, xi_stack)
    }

    /// The reweighting factor `r` and shares `rbar` given stacked weights.
    pub fn mixture_shares(
        &self,
        x: &[f64],
        a: f64,
        wbar: &[f64],
        rbar: &mut Vec<f64>,
    ) -> Result<f64> {
        mixture_shares_impl(&self.sources, self.p0, x, a, wbar, rbar)
    }

    /// Truncated pseudoinverse of the symmetrized projection matrix
    /// `M(a, x) = diag(1/p_s) - E[r wbar wbar' | a, x]`.
    ///
    /// `rww` is the row-major conditional second-moment block from the
    /// bundle. Singular values below the context floor are treated as null
    /// directions of the population matrix.
    pub fn m_pinv(&self, rww: &[f64]) -> Result<DMatrix<f64>> {
        let kk = self.layout.kk;
        let mut m = DMatrix::<f64>::zeros(kk, kk);
        for i in 0..kk {
            for j in 0..kk {
                // Symmetrize the fitted second moment before subtracting.
                let avg = 0.5 * (rww[i * kk + j] + rww[j * kk + i]);
                m[(i, j)] = -avg;
            }
        }
        m[(0, 0)] += 1.0 / self.p0;
        for (si, src) in self.sources.iter().enumerate() {
            m[(si + 1, si + 1)] += 1.0 / src.prob;
        }
        pinv_with_floor(&m, DEFAULT_REL_TOL, self.m_floor)
    }

    /// Evaluate every per-record quantity at one observation.
    pub fn evaluate_obs(&self, x: &[f64], a: f64, y: f64) -> Result<ObsEval> {
        let kk = self.layout.kk;
        let bd = self.layout.beta_dim;

        let mut wbar = Vec::with_capacity(kk);
        let mut xi_stack = Vec::new();
        self.weights_at(x, a, y, &mut wbar, &mut xi_stack)?;

        let mut rbar = Vec::with_capacity(kk);
        let r = self.mixture_shares(x, a, &wbar, &mut rbar)?;

        let (pi, pi_clamped) = self.propensity.prob(x, a);
        let mu = self.mu.eval(x, a);
        let dtilde = r * (2.0 * a - 1.0) / pi * (y - mu);
        if !dtilde.is_finite() {
            return Err(Error::NonFinite(format!(
                "residual kernel at a={a}, y={y}"
            )));
        }

        let mut cond_a = vec![0.0; self.layout.stage_a_len()];
        self.cond.stage_a(x, a, &mut cond_a)?;

        let m_inv = self.m_pinv(&cond_a[self.layout.rww()])?;

        // braced = r wbar - E[r wbar | a, x]; mcorr = M^- braced.
        let rw_hat = &cond_a[self.layout.rw()];
        let mut mcorr = vec![0.0; kk];
        {
            let braced: Vec<f64> = (0..kk).map(|i| r * wbar[i] - rw_hat[i]).collect();
            for i in 0..kk {
                let mut acc = 0.0;
                for j in 0..kk {
                    acc += m_inv[(i, j)] * braced[j];
                }
                mcorr[i] = acc;
            }
        }

        let dtilde_hat = cond_a[self.layout.dtilde()];
        let dtilde_w_hat = &cond_a[self.layout.dtilde_w()];
        let dstar = dtilde - dtilde_hat
            + dtilde_w_hat
                .iter()
                .zip(mcorr.iter())
                .map(|(g, c)| g * c)
                .sum::<f64>();

        // Model-implied per-site conditional means given (A, X). By the
        // alignment identity E[g | a, x, S=s] = E[w*_s g | a, x, S=0]:
        // the site-s conditional mean of dtilde is entry s of the fitted
        // E[dtilde wbar' | a, x], and the braced factor
        // r wbar - E[r wbar | a, x] has site-s conditional mean equal to
        // column s of the (symmetrized) second-moment block minus
        // E[r wbar | a, x]. At the target slot both differences pair
        // identical regression responses, so center_d[0] is exactly zero.
        let rww = &cond_a[self.layout.rww()];
        let msym = |i: usize, s: usize| 0.5 * (rww[i * kk + s] + rww[s * kk + i]);
        let mut center_d = vec![0.0; kk];
        {
            let mut g = vec![0.0; kk];
            for i in 0..kk {
                let mut acc = 0.0;
                for j in 0..kk {
                    acc += m_inv[(i, j)] * dtilde_w_hat[j];
                }
                g[i] = acc;
            }
            for s in 0..kk {
                let mut v = dtilde_w_hat[s] - dtilde_hat;
                for i in 0..kk {
                    v += g[i] * (msym(i, s) - rw_hat[i]);
                }
                center_d[s] = v;
            }
        }

        let mut atilde = vec![0.0; bd];
        let mut astar = vec![0.0; bd];
        let mut xi_cond = vec![0.0; bd * kk];
        let mut center_a = vec![0.0; bd * kk];
        if bd > 0 {
            // atilde = sum_m rbar_m (xi - E[xi | a, x, membership m])
            //        = xi - sum_m rbar_m E[xi | a, x, membership m],
            // because the shares rbar_m sum to one.
            for (si, _) in self.sources.iter().enumerate() {
                let q = self.layout.xi_dims[si];
                if q == 0 {
                    continue;
                }
                let off = self.layout.offsets[si];
                for j in 0..q {
                    let mut avg = 0.0;
                    for (m, share) in rbar.iter().enumerate() {
                        avg += share * cond_a[self.layout.xi(si, m)][j];
                    }
                    atilde[off + j] = xi_stack[off + j] - avg;
                }
            }

            for (si, _) in self.sources.iter().enumerate() {
                let q = self.layout.xi_dims[si];
                if q == 0 {
                    continue;
                }
                let off = self.layout.offsets[si];
                for m in 0..kk {
                    let blk = &cond_a[self.layout.xi(si, m)];
                    for j in 0..q {
                        xi_cond[(off + j) * kk + m] = blk[j];
                    }
                }
            }

            let mut cond_b = vec![0.0; self.layout.stage_b_len()];
            self.cond.stage_b(x, a, &mut cond_b)?;
            let atilde_hat = &cond_b[self.layout.atilde()];
            let atilde_w_hat = &cond_b[self.layout.atilde_w()];
            let mut ga = vec![0.0; kk];
            for j in 0..bd {
                let row = &atilde_w_hat[j * kk..(j + 1) * kk];
                let mut corr = 0.0;
                for i in 0..kk {
                    corr += row[i] * mcorr[i];
                }
                astar[j] = atilde[j] - atilde_hat[j] + corr;

                // Same construction as center_d, coordinate by coordinate:
                // entry s of the fitted E[atilde_j wbar' | a, x] is the
                // site-s conditional mean of atilde_j.
                for i in 0..kk {
                    let mut acc = 0.0;
                    for q in 0..kk {
                        acc += m_inv[(i, q)] * row[q];
                    }
                    ga[i] = acc;
                }
                for s in 0..kk {
                    let mut v = row[s] - atilde_hat[j];
                    for i in 0..kk {
                        v += ga[i] * (msym(i, s) - rw_hat[i]);
                    }
                    center_a[j * kk + s] = v;
                }
            }
        }

        Ok(ObsEval {
            wbar,
            r,
            rbar,
            dtilde,
            dstar,
            xi_stack,
            atilde,
            astar,
            xi_cond,
            center_d,
            center_a,
            pi_clamped,
        })
    }

    /// The local (uncentered) stacked score of belonging to site `s_obs`:
    /// for each tilted source block, `xi_s(z) - E[xi_s | a, x, membership
    /// s_obs]`, where `s_obs` is given as a stacking index (0 = target,
    /// `si + 1` = source `si`).
    pub fn local_score(
        &self,
        obs_slot: usize,
        x: &[f64],
        a: f64,
        xi_stack: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let mut cond_a = vec![0.0; self.layout.stage_a_len()];
        self.cond.stage_a(x, a, &mut cond_a)?;
        for si in 0..self.sources.len() {
            let q = self.layout.xi_dims[si];
            if q == 0 {
                continue;
            }
            let off = self.layout.offsets[si];
            let hat = &cond_a[self.layout.xi(si, obs_slot)];
            for j in 0..q {
                out[off + j] = xi_stack[off + j] - hat[j];
            }
        }
        Ok(())
    }
}

/// The stacked-tilt layout implied by a source list.
pub fn layout_for(sources: &[SourceContext]) -> CondLayout {
    CondLayout::new(
        sources
            .iter()
            .map(|s| s.tilt.as_ref().map_or(0, |t| t.dim()))
            .collect(),
    )
}

pub(crate) fn weights_at_impl(
    sources: &[SourceContext],
    layout: &CondLayout,
    x: &[f64],
    a: f64,
    y: f64,
    wbar: &mut Vec<f64>,
    xi_stack: &mut Vec<f64>,
) -> Result<()> {
    wbar.clear();
    wbar.push(1.0);
    xi_stack.clear();
    xi_stack.resize(layout.beta_dim, 0.0);
    for (si, src) in sources.iter().enumerate() {
        let w = match &src.tilt {
            Some(tilt) => {
                let q = layout.xi_dims[si];
                let off = layout.offsets[si];
                let slot = &mut xi_stack[off..off + q];
                tilt.basis.evaluate_into(x, a, y, slot)?;
                let exponent: f64 = tilt
                    .beta
                    .iter()
                    .zip(slot.iter())
                    .map(|(b, v)| b * v)
                    .sum();
                let numer = exponent.exp();
                let denom = src.normalizer.evaluate(x, a);
                let w = numer / denom;
                if !w.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "outcome tilt weight for source {} at a={a}",
                        src.id
                    )));
                }
                w
            }
            None => 1.0,
        };
        wbar.push(w);
    }
    Ok(())
}

pub(crate) fn mixture_shares_impl(
    sources: &[SourceContext],
    p0: f64,
    x: &[f64],
    a: f64,
    wbar: &[f64],
    rbar: &mut Vec<f64>,
) -> Result<f64> {
    rbar.clear();
    rbar.push(p0);
    let mut denom = p0;
    for (si, src) in sources.iter().enumerate() {
        let lam = src.lambda.lambda(x, a);
        let term = src.prob * lam * wbar[si + 1];
        denom += term;
        rbar.push(term);
    }
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::NonFinite(format!(
            "mixture denominator {denom} in reweighting factor"
        )));
    }
    let r = 1.0 / denom;
    for v in rbar.iter_mut() {
        *v *= r;
    }
    Ok(r)
}

/// Fused target-round quantities every site needs to finish the efficient
/// estimating function: the point estimate, the coefficient
/// `c = I^- C` applied to the centered score, and the target share.
#[derive(Debug, Clone)]
pub struct FusedCoefficients {
    /// Fused point estimate of the treatment effect.
    pub phi_hat: f64,
    /// `I^- C`: weights applied to the centered efficient score.
    pub c_coef: Vec<f64>,
    /// Target population share `p_0`.
    pub p0: f64,
}

/// Centered efficient score at one record:
/// `(ell_local - ell_local_center) - (astar - astar_center)` where
/// `ell_local` is the stacked local score at the observed site and the
/// centerings are the observed site's conditional means given `(A, X)`.
pub fn efficient_score_into(
    local_score: &[f64],
    local_score_center: &[f64],
    astar: &[f64],
    astar_center: &[f64],
    out: &mut [f64],
) {
    for j in 0..out.len() {
        out[j] =
            (local_score[j] - local_score_center[j]) - (astar[j] - astar_center[j]);
    }
}

/// Efficient estimating-function value at one record.
///
/// `dstar_center` is the observed site's conditional mean of `dstar` given
/// `(A, X)`; `score` is the centered efficient score from
/// [`efficient_score_into`]; `mu_delta` carries `mu(1, x) - mu(0, x)` for
/// target records and `None` elsewhere.
pub fn estimating_function_value(
    dstar: f64,
    dstar_center: f64,
    score: &[f64],
    mu_delta: Option<f64>,
    fused: &FusedCoefficients,
) -> f64 {
    let mut v = dstar - dstar_center;
    if let Some(md) = mu_delta {
        v += (md - fused.phi_hat) / fused.p0;
    }
    v -= fused
        .c_coef
        .iter()
        .zip(score.iter())
        .map(|(c, s)| c * s)
        .sum::<f64>();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SiteDataset;
    use crate::expr::BasisVector;
    use crate::numerics::{sieve_fit_scalar, SieveSpec, Standardizer};
    use crate::shift::CovariateShiftModel;

    /// Exact conditional bundle backed by closures, for injecting
    /// closed-form tables in tests.
    pub struct FnBundle<FA, FB> {
        pub a: FA,
        pub b: FB,
    }

    impl<FA, FB> CondBundle for FnBundle<FA, FB>
    where
        FA: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
        FB: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
    {
        fn stage_a(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
            (self.a)(x, a, out);
            Ok(())
        }
        fn stage_b(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
            (self.b)(x, a, out);
            Ok(())
        }
    }

    fn small_target() -> SiteDataset {
        let mut d = SiteDataset::new(0, 1);
        for i in 0..40 {
            let x = 1.0 + (i % 5) as f64 * 0.25;
            let a = (i % 2) as f64;
            let y = 0.5 + 0.3 * x + 0.4 * a * x + 0.05 * ((i % 7) as f64 - 3.0);
            d.push(&[x], a, y);
        }
        d
    }

    /// With no sources the reweighting factor is exactly one and the
    /// projection correction vanishes identically, so the centered residual
    /// kernel is exactly "raw minus its fitted conditional mean".
    #[test]
    fn no_source_reduction_is_exact() {
        let target = small_target();
        let spec = SieveSpec::default_for_dim(1);
        let st = Standardizer::fit(&target);

        let mu = sieve_fit_scalar(&spec, &st, &target, target.outcome()).unwrap();
        let propensity = crate::numerics::logistic_fit(&target).unwrap();
        let nuisance = TargetNuisance {
            spec: spec.clone(),
            standardizer: st.clone(),
            propensity,
            mu,
        };
        let models =
            fit_cond_models(&target, &nuisance, &[], 1.0, CondFamily::Sieve, None).unwrap();
        let ctx = models.into_context(&nuisance, vec![], 1.0).unwrap();

        assert_eq!(ctx.layout, CondLayout::new(vec![]));
        for i in 0..target.n() {
            let o = target.obs(i);
            let ev = ctx.evaluate_obs(o.x, o.a, o.y).unwrap();
            assert_eq!(ev.r, 1.0);
            assert_eq!(ev.rbar, vec![1.0]);
            assert!(ev.xi_stack.is_empty());
            assert!(ev.astar.is_empty());
            // dstar must equal dtilde minus its fitted conditional mean with
            // no projection leakage at all.
            let mut cond_a = vec![0.0; ctx.layout.stage_a_len()];
            ctx.cond.stage_a(o.x, o.a, &mut cond_a).unwrap();
            let expect = ev.dtilde - cond_a[ctx.layout.dtilde()];
            assert!(
                (ev.dstar - expect).abs() < 1e-12,
                "dstar {} vs centered dtilde {}",
                ev.dstar,
                expect
            );
        }
    }

    /// Shares always sum to one, whatever the tilts.
    #[test]
    fn shares_sum_to_one() {
        let basis = BasisVector::parse_list("log(y), a * log(y)", 1).unwrap();
        let tilt = SourceTilt {
            basis,
            beta: vec![0.3, -0.2],
        };
        let lambda = CovariateShiftModel {
            gamma: vec![0.2, 0.0, 0.0, 0.0],
            log_norm: 0.35,
        };
        let sources = vec![SourceContext {
            id: 1,
            prob: 0.4,
            tilt: Some(tilt),
            normalizer: NormalizerModel::Unit,
            lambda,
        }];
        let layout = CondLayout::new(vec![2]);
        let la = layout.clone();
        let ctx = GradientContext::new(
            0.6,
            sources,
            Propensity::new(Arc::new(|_: &[f64], _: f64| 0.5)),
            Arc::new(|x: &[f64], a: f64| x[0] + a),
            Arc::new(FnBundle {
                a: move |_: &[f64], _: f64, out: &mut [f64]| {
                    out.fill(0.1);
                    // keep the second-moment block symmetric-ish
                    for v in &mut out[la.rww()] {
                        *v = 0.2;
                    }
                },
                b: |_: &[f64], _: f64, out: &mut [f64]| out.fill(0.05),
            }),
            layout,
        );
        for (x, a, y) in [(1.0, 0.0, 1.2), (1.5, 1.0, 2.4), (2.0, 1.0, 0.7)] {
            let ev = ctx.evaluate_obs(&[x], a, y).unwrap();
            let s: f64 = ev.rbar.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "shares sum {s}");
            assert!(ev.r > 0.0);
            assert!(ev.wbar.iter().all(|w| *w > 0.0));
        }
    }

    /// With unit tilts, flat covariate shifts, and exact conditional means,
    /// the factor is one, every share equals its site's population share,
    /// and the projection matrix identity
    /// `(M diag(p) lambda_bar)_s = lambda_s - 1` holds (here trivially 0).
    #[test]
    fn untilted_sources_reduce_to_population_shares() {
        let kk = 3usize;
        let probs = [0.5, 0.3, 0.2];
        let sources: Vec<SourceContext> = (1..=2)
            .map(|i| SourceContext {
                id: i as u32,
                prob: probs[i],
                tilt: None,
                normalizer: NormalizerModel::Unit,
                lambda: CovariateShiftModel::identity(1),
            })
            .collect();
        let layout = CondLayout::new(vec![0, 0]);
        let la = layout.clone();
        // Exact conditionals: r = 1, wbar = 1 => E[r wbar] = 1,
        // E[r wbar wbar'] = all-ones matrix, E[dtilde | a, x] = 0 for a
        // symmetric toy residual law; the dtilde blocks do not matter here.
        let ctx = GradientContext::new(
            probs[0],
            sources,
            Propensity::new(Arc::new(|_: &[f64], _: f64| 0.5)),
            Arc::new(|_: &[f64], _: f64| 0.0),
            Arc::new(FnBundle {
                a: move |_: &[f64], _: f64, out: &mut [f64]| {
                    out.fill(0.0);
                    for v in &mut out[la.rw()] {
                        *v = 1.0;
                    }
                    for v in &mut out[la.rww()] {
                        *v = 1.0;
                    }
                },
                b: |_: &[f64], _: f64, out: &mut [f64]| out.fill(0.0),
            }),
            layout,
        );
        let ev = ctx.evaluate_obs(&[1.0], 1.0, 2.0).unwrap();
        assert!((ev.r - 1.0).abs() < 1e-15);
        for (i, p) in probs.iter().enumerate() {
            assert!((ev.rbar[i] - p).abs() < 1e-15);
        }
        // M = diag(1/p) - 11'; with lambda_bar = 1 the identity
        // M diag(p) 1 = lambda - 1 = 0 must hold in exact arithmetic.
        let mut m = DMatrix::<f64>::from_element(kk, kk, -1.0);
        for i in 0..kk {
            m[(i, i)] += 1.0 / probs[i];
        }
        let mut v = [0.0; 3];
        for i in 0..kk {
            for j in 0..kk {
                v[i] += m[(i, j)] * probs[j] * 1.0;
            }
        }
        for e in v {
            assert!(e.abs() < 1e-14);
        }
    }

    /// The projection-matrix identity `(M diag(p) lambda_bar)_s =
    /// lambda_s - 1` under a genuinely tilted configuration with exact
    /// population conditionals on a two-point covariate toy.
    #[test]
    fn projection_identity_under_tilt() {
        // One source, lambda(x) piecewise on x in {1, 2}, no outcome tilt so
        // wbar = 1 but lambda shifts the mixture. Populations:
        //   target: P(X=1) = 0.6; source: P(X=1) = 0.4; p0 = 0.55, p1 = 0.45.
        let p0 = 0.55;
        let p1 = 0.45;
        let lam = |x: f64| -> f64 {
            if x == 1.0 {
                0.4 / 0.6
            } else {
                0.6 / 0.4
            }
        };
        for &x in &[1.0, 2.0] {
            let l = lam(x);
            let r = 1.0 / (p0 + p1 * l);
            // Exact E[r wbar wbar' | a, x] = r * 11' (wbar = 1, and r is a
            // function of x only).
            let mut m = DMatrix::<f64>::from_element(2, 2, -r);
            m[(0, 0)] += 1.0 / p0;
            m[(1, 1)] += 1.0 / p1;
            // (M diag(p) lambda_bar)_s with lambda_bar = (1, lambda(x)).
            let lam_bar = [1.0, l];
            let mut out = [0.0; 2];
            for i in 0..2 {
                for j in 0..2 {
                    out[i] += m[(i, j)] * [p0, p1][j] * lam_bar[j];
                }
            }
            assert!((out[0] - (lam_bar[0] - 1.0)).abs() < 1e-12);
            assert!((out[1] - (lam_bar[1] - 1.0)).abs() < 1e-12);
        }
    }

    /// The estimating-function assembly: target records get the regression
    /// contrast term, all records subtract the weighted centered score.
    #[test]
    fn estimating_function_terms() {
        let fused = FusedCoefficients {
            phi_hat: 1.0,
            c_coef: vec![0.5, -1.0],
            p0: 0.25,
        };
        let score = [0.2, 0.1];
        let v_src = estimating_function_value(0.7, 0.2, &score, None, &fused);
        // 0.5 - (0.5*0.2 - 1.0*0.1) = 0.5 - 0.0 = 0.5
        assert!((v_src - 0.5).abs() < 1e-15);
        let v_tgt =
            estimating_function_value(0.7, 0.2, &score, Some(1.5), &fused);
        assert!((v_tgt - (0.5 + (1.5 - 1.0) / 0.25)).abs() < 1e-15);
    }

    /// Propensity clamping triggers on extreme fitted probabilities and is
    /// reported.
    #[test]
    fn propensity_clamps() {
        let p = Propensity::new(Arc::new(|x: &[f64], _: f64| x[0]));
        let (v, hit) = p.prob(&[0.999], 1.0);
        assert!((v - PROPENSITY_CLAMP_HI).abs() < 1e-15 && hit);
        let (v, hit) = p.prob(&[0.999], 0.0);
        assert!((v - (1.0 - PROPENSITY_CLAMP_HI)).abs() < 1e-15 && hit);
        let (v, hit) = p.prob(&[0.5], 1.0);
        assert!((v - 0.5).abs() < 1e-15 && !hit);
    }
}
