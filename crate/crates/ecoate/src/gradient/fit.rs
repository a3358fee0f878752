//! Fitting the broadcast conditional-mean models on the target sample.
//!
//! The per-observation machinery needs a battery of conditional means given
//! `(A, X)` under the target law. They are fit here in two stages on the
//! target sample:
//!
//! * **Stage one** regresses, jointly in a single multi-response fit, the
//!   raw quantities `r wbar`, `r wbar wbar'`, `dtilde`, `dtilde wbar`, and —
//!   for every tilted source `s` and candidate membership `m` — the
//!   tilt-aligned basis values `w*_m xi_s` (whose target-law conditional
//!   mean equals the membership-`m` conditional mean of `xi_s`).
//! * **Stage two** evaluates the stage-one fits to form the
//!   membership-averaged score `atilde` at every target record, then
//!   regresses `atilde` and `atilde wbar'` the same way.
//!
//! Both stages can be fit with the series-regression family (whose
//! coefficient matrices are broadcast to sources) or with an arm-stratified
//! kernel smoother (used by the centralized benchmark variant, never
//! serialized).

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::numerics::{
    kernel_fit, sieve_fit, KernelModel, KernelOptions, LogisticModel, SieveModel,
    SieveSpec, Standardizer,
};

use super::{
    layout_for, mixture_shares_impl, weights_at_impl, ArmScalarFn, CondBundle,
    CondLayout, GradientContext, LogisticTreated, Propensity, SieveScalar,
    SourceContext,
};

/// Target-sample nuisance fits shared by every estimator variant: the series
/// basis, covariate standardization, treatment model, and outcome
/// regression.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNuisance {
    pub spec: SieveSpec,
    pub standardizer: Standardizer,
    pub propensity: LogisticModel,
    pub mu: SieveModel,
}

impl TargetNuisance {
    /// Fit the shared nuisances on the target sample with the default basis.
    pub fn fit(target: &SiteDataset) -> Result<Self> {
        Self::fit_with(target, None)
    }

    /// Fit with an explicit series degree (`None` = dimension default).
    pub fn fit_with(target: &SiteDataset, degree: Option<usize>) -> Result<Self> {
        let mut spec = SieveSpec::default_for_dim(target.dim());
        if let Some(d) = degree {
            spec.degree = d;
        }
        let standardizer = Standardizer::fit(target);
        let propensity = crate::numerics::logistic_fit(target)?;
        let mu = crate::numerics::sieve_fit_scalar(
            &spec,
            &standardizer,
            target,
            target.outcome(),
        )?;
        Ok(Self {
            spec,
            standardizer,
            propensity,
            mu,
        })
    }

    pub fn propensity_eval(&self) -> Propensity {
        Propensity::new(Arc::new(LogisticTreated(self.propensity.clone())))
    }

    pub fn mu_eval(&self) -> Arc<dyn ArmScalarFn> {
        Arc::new(SieveScalar(self.mu.clone()))
    }
}

/// Which regression family backs the conditional-mean models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondFamily {
    /// Series (polynomial basis) regression — representable as coefficient
    /// matrices, so it can be broadcast to sources.
    Sieve,
    /// Arm-stratified kernel smoothing — requires the training sample, so it
    /// only exists on the fitting machine (benchmark use).
    Kernel,
}

/// Serializable conditional-mean models: two multi-response series fits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SieveCondModels {
    /// Tilt-basis dimension per source (0 = untilted), fixing the layout.
    pub xi_dims: Vec<usize>,
    pub stage_a: SieveModel,
    pub stage_b: Option<SieveModel>,
}

/// Kernel-backed conditional-mean models (benchmark only, not serialized).
#[derive(Debug, Clone)]
pub struct KernelCondModels {
    pub xi_dims: Vec<usize>,
    pub stage_a: KernelModel,
    pub stage_b: Option<KernelModel>,
}

impl CondBundle for SieveCondModels {
    fn stage_a(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
        self.stage_a.predict_into(x, a, out);
        Ok(())
    }

    fn stage_b(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
        match &self.stage_b {
            Some(model) => {
                model.predict_into(x, a, out);
                Ok(())
            }
            None => Err(Error::Protocol(
                "second-stage conditional models requested but absent".into(),
            )),
        }
    }
}

impl CondBundle for KernelCondModels {
    fn stage_a(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
        self.stage_a.predict_into(x, a, out)
    }

    fn stage_b(&self, x: &[f64], a: f64, out: &mut [f64]) -> Result<()> {
        match &self.stage_b {
            Some(model) => model.predict_into(x, a, out),
            None => Err(Error::Protocol(
                "second-stage conditional models requested but absent".into(),
            )),
        }
    }
}

/// Fitted conditional-mean models of either family.
pub enum CondModels {
    Sieve(SieveCondModels),
    Kernel(KernelCondModels),
}

impl CondModels {
    pub fn xi_dims(&self) -> &[usize] {
        match self {
            CondModels::Sieve(m) => &m.xi_dims,
            CondModels::Kernel(m) => &m.xi_dims,
        }
    }

    /// Combine with the shared nuisances and source ingredients into an
    /// evaluation context.
    pub fn into_context(
        self,
        nuisance: &TargetNuisance,
        sources: Vec<SourceContext>,
        p0: f64,
    ) -> Result<GradientContext> {
        let layout = layout_for(&sources);
        if layout.xi_dims != *self.xi_dims() {
            return Err(Error::DimensionMismatch {
                context: "conditional models vs source list".into(),
                expected: layout.beta_dim,
                actual: self.xi_dims().iter().sum(),
            });
        }
        let bundle: Arc<dyn CondBundle> = match self {
            CondModels::Sieve(m) => Arc::new(m),
            CondModels::Kernel(m) => Arc::new(m),
        };
        Ok(GradientContext::new(
            p0,
            sources,
            nuisance.propensity_eval(),
            nuisance.mu_eval(),
            bundle,
            layout,
        ))
    }
}

/// Per-record raw quantities shared by both fitting stages.
struct RawRows {
    layout: CondLayout,
    wbars: Vec<Vec<f64>>,
    rbars: Vec<Vec<f64>>,
    xis: Vec<Vec<f64>>,
    stage_a: Vec<Vec<f64>>,
}

fn compute_stage_a_rows(
    target: &SiteDataset,
    nuisance: &TargetNuisance,
    sources: &[SourceContext],
    p0: f64,
) -> Result<RawRows> {
    let layout = layout_for(sources);
    let n = target.n();
    if n == 0 {
        return Err(Error::InsufficientData {
            context: "conditional-model fit".into(),
            required: 1,
            available: 0,
        });
    }
    let kk = layout.kk;
    let a_len = layout.stage_a_len();
    let propensity = nuisance.propensity_eval();
    let mu = nuisance.mu_eval();

    let mut wbars = Vec::with_capacity(n);
    let mut rbars = Vec::with_capacity(n);
    let mut xis = Vec::with_capacity(n);
    let mut stage_a = Vec::with_capacity(n);

    for i in 0..n {
        let o = target.obs(i);
        let mut wbar = Vec::with_capacity(kk);
        let mut xi = Vec::new();
        weights_at_impl(sources, &layout, o.x, o.a, o.y, &mut wbar, &mut xi)?;
        let mut rbar = Vec::with_capacity(kk);
        let r = mixture_shares_impl(sources, p0, o.x, o.a, &wbar, &mut rbar)?;

        let (pi, _) = propensity.prob(o.x, o.a);
        let dtilde = r * (2.0 * o.a - 1.0) / pi * (o.y - mu.eval(o.x, o.a));

        let mut row = vec![0.0; a_len];
        for j in 0..kk {
            row[layout.rw().start + j] = r * wbar[j];
        }
        let rww_base = layout.rww().start;
        for p in 0..kk {
            for q in 0..kk {
                row[rww_base + p * kk + q] = r * wbar[p] * wbar[q];
            }
        }
        row[layout.dtilde()] = dtilde;
        let dw_base = layout.dtilde_w().start;
        for j in 0..kk {
            row[dw_base + j] = dtilde * wbar[j];
        }
        for si in 0..sources.len() {
            let q = layout.xi_dims[si];
            if q == 0 {
                continue;
            }
            let off = layout.offsets[si];
            for m in 0..kk {
                let rng = layout.xi(si, m);
                for j in 0..q {
                    // Alignment identity: the target-law conditional mean of
                    // w*_m xi_s given (A, X) equals the membership-m
                    // conditional mean of xi_s.
                    row[rng.start + j] = wbar[m] * xi[off + j];
                }
            }
        }

        wbars.push(wbar);
        rbars.push(rbar);
        xis.push(xi);
        stage_a.push(row);
    }

    Ok(RawRows {
        layout,
        wbars,
        rbars,
        xis,
        stage_a,
    })
}

/// Stage-two responses: evaluate the fitted stage-one models at every target
/// record to form `atilde`, then stack `[atilde | atilde wbar']`.
fn compute_stage_b_rows(
    target: &SiteDataset,
    raw: &RawRows,
    bundle: &dyn CondBundle,
) -> Result<Vec<Vec<f64>>> {
    let layout = &raw.layout;
    let kk = layout.kk;
    let bd = layout.beta_dim;
    let n = target.n();
    let mut rows = Vec::with_capacity(n);
    let mut cond_a = vec![0.0; layout.stage_a_len()];
    for i in 0..n {
        let o = target.obs(i);
        bundle.stage_a(o.x, o.a, &mut cond_a)?;
        let rbar = &raw.rbars[i];
        let xi = &raw.xis[i];
        let wbar = &raw.wbars[i];
        let mut row = vec![0.0; bd + bd * kk];
        for si in 0..layout.xi_dims.len() {
            let q = layout.xi_dims[si];
            if q == 0 {
                continue;
            }
            let off = layout.offsets[si];
            for j in 0..q {
                let mut avg = 0.0;
                for (m, share) in rbar.iter().enumerate() {
                    avg += share * cond_a[layout.xi(si, m)][j];
                }
                row[off + j] = xi[off + j] - avg;
            }
        }
        for j in 0..bd {
            for m in 0..kk {
                row[bd + j * kk + m] = row[j] * wbar[m];
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, q, |i, j| rows[i][j])
}

fn fit_sieve_stage(
    spec: &SieveSpec,
    standardizer: &Standardizer,
    target: &SiteDataset,
    rows: &[Vec<f64>],
) -> Result<SieveModel> {
    let responses = rows_to_matrix(rows);
    sieve_fit(spec, standardizer, target, &responses)
}

fn fit_kernel_stage(
    target: &SiteDataset,
    rows: &[Vec<f64>],
    bandwidth: Option<f64>,
) -> Result<KernelModel> {
    let n = target.n();
    let x: Vec<Vec<f64>> = (0..n).map(|i| target.xrow(i).to_vec()).collect();
    let a: Vec<f64> = (0..n).map(|i| target.a(i)).collect();
    let opts = KernelOptions {
        bandwidth_override: bandwidth,
        ..KernelOptions::default()
    };
    kernel_fit(&x, &a, rows, &opts)
}

/// Fit the full conditional-mean battery on the target sample.
///
/// `p0` and the source `prob` fields must be the population shares
/// `n_s / n` of the fused sample. `bandwidth` pins the kernel family's
/// smoother (ignored by the series family). Returns the fitted models;
/// combine them with [`CondModels::into_context`] to obtain an evaluation
/// context.
pub fn fit_cond_models(
    target: &SiteDataset,
    nuisance: &TargetNuisance,
    sources: &[SourceContext],
    p0: f64,
    family: CondFamily,
    bandwidth: Option<f64>,
) -> Result<CondModels> {
    let raw = compute_stage_a_rows(target, nuisance, sources, p0)?;
    let layout = raw.layout.clone();
    let bd = layout.beta_dim;
    let xi_dims = layout.xi_dims.clone();

    match family {
        CondFamily::Sieve => {
            let stage_a = fit_sieve_stage(
                &nuisance.spec,
                &nuisance.standardizer,
                target,
                &raw.stage_a,
            )?;
            let mut models = SieveCondModels {
                xi_dims,
                stage_a,
                stage_b: None,
            };
            if bd > 0 {
                let rows_b = compute_stage_b_rows(target, &raw, &models)?;
                models.stage_b = Some(fit_sieve_stage(
                    &nuisance.spec,
                    &nuisance.standardizer,
                    target,
                    &rows_b,
                )?);
            }
            Ok(CondModels::Sieve(models))
        }
        CondFamily::Kernel => {
            let stage_a = fit_kernel_stage(target, &raw.stage_a, bandwidth)?;
            let mut models = KernelCondModels {
                xi_dims,
                stage_a,
                stage_b: None,
            };
            if bd > 0 {
                let rows_b = compute_stage_b_rows(target, &raw, &models)?;
                models.stage_b = Some(fit_kernel_stage(target, &rows_b, bandwidth)?);
            }
            Ok(CondModels::Kernel(models))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BasisVector;
    use crate::shift::{CovariateShiftModel, NormalizerModel, SourceTilt};

    fn training_target(n: usize) -> SiteDataset {
        let mut d = SiteDataset::new(0, 1);
        for i in 0..n {
            let x = 1.0 + (i % 8) as f64 * 0.2;
            let a = (i % 2) as f64;
            let y = (1.0 + 0.4 * x + 0.3 * a + 0.1 * ((i % 5) as f64 - 2.0)).exp().ln()
                + 0.5;
            d.push(&[x], a, y);
        }
        d
    }

    fn one_source(dim: usize) -> SourceContext {
        let basis = BasisVector::parse_list("log(y), a * log(y)", dim).unwrap();
        SourceContext {
            id: 1,
            prob: 0.5,
            tilt: Some(SourceTilt {
                basis,
                beta: vec![0.2, -0.1],
            }),
            normalizer: NormalizerModel::Unit,
            lambda: CovariateShiftModel::identity(dim),
        }
    }

    /// Both fitting families produce contexts whose per-record shares sum to
    /// one and whose dimensions line up with the layout.
    #[test]
    fn fit_families_agree_on_shapes() {
        let target = training_target(64);
        let nuisance = TargetNuisance::fit(&target).unwrap();
        let sources = vec![one_source(1)];

        for family in [CondFamily::Sieve, CondFamily::Kernel] {
            let models =
                fit_cond_models(&target, &nuisance, &sources, 0.5, family, None).unwrap();
            let ctx = models
                .into_context(&nuisance, sources.clone(), 0.5)
                .unwrap();
            assert_eq!(ctx.layout.kk, 2);
            assert_eq!(ctx.layout.beta_dim, 2);
            let o = target.obs(3);
            let ev = ctx.evaluate_obs(o.x, o.a, o.y).unwrap();
            assert!((ev.rbar.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(ev.astar.len(), 2);
            assert_eq!(ev.xi_stack.len(), 2);
            assert!(ev.dstar.is_finite());
        }
    }

    /// The fitted first-stage conditional means reproduce in-sample averages
    /// of their responses: the fit of `r wbar` integrates to the sample mean
    /// of `r wbar` (series regression preserves means against an intercept).
    #[test]
    fn stage_one_preserves_sample_means() {
        let target = training_target(120);
        let nuisance = TargetNuisance::fit(&target).unwrap();
        let sources = vec![one_source(1)];
        let raw = compute_stage_a_rows(&target, &nuisance, &sources, 0.5).unwrap();
        let models =
            fit_cond_models(&target, &nuisance, &sources, 0.5, CondFamily::Sieve, None)
                .unwrap();
        let bundle = match &models {
            CondModels::Sieve(m) => m,
            _ => unreachable!(),
        };
        let n = target.n();
        let a_len = raw.layout.stage_a_len();
        let mut mean_resp = vec![0.0; a_len];
        let mut mean_pred = vec![0.0; a_len];
        let mut buf = vec![0.0; a_len];
        for i in 0..n {
            let o = target.obs(i);
            for j in 0..a_len {
                mean_resp[j] += raw.stage_a[i][j] / n as f64;
            }
            CondBundle::stage_a(bundle, o.x, o.a, &mut buf).unwrap();
            for j in 0..a_len {
                mean_pred[j] += buf[j] / n as f64;
            }
        }
        for j in 0..a_len {
            assert!(
                (mean_resp[j] - mean_pred[j]).abs() < 1e-6,
                "column {j}: sample mean {} vs integrated fit {}",
                mean_resp[j],
                mean_pred[j]
            );
        }
    }

    /// Serialization round-trip of the broadcastable models is exact.
    #[test]
    fn sieve_models_roundtrip() {
        let target = training_target(48);
        let nuisance = TargetNuisance::fit(&target).unwrap();
        let sources = vec![one_source(1)];
        let models =
            fit_cond_models(&target, &nuisance, &sources, 0.5, CondFamily::Sieve, None)
                .unwrap();
        let m = match models {
            CondModels::Sieve(m) => m,
            _ => unreachable!(),
        };
        let json = serde_json::to_string(&m).unwrap();
        let back: SieveCondModels = serde_json::from_str(&json).unwrap();
        assert_eq!(m.stage_a.coef, back.stage_a.coef);
        assert_eq!(
            m.stage_b.as_ref().unwrap().coef,
            back.stage_b.as_ref().unwrap().coef
        );
    }
}
