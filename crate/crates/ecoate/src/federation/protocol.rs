//! The two-round protocol: per-site computations and target-side fusion.
//!
//! Round 1 (uplink): every source sends sizes, covariate/treatment feature
//! means, its declared outcome-tilt basis, and the basis's empirical mean.
//! The target fits, per source, the covariate shift from the feature means
//! and the tilt coefficient from the basis mean, fits its own treatment and
//! outcome models, fits the broadcast conditional-mean models, and
//! broadcasts everything. Round 2 (uplink): every site — target included —
//! evaluates the per-observation machinery on its own records, centers each
//! record by the model-implied conditional means of its own site that the
//! broadcast models carry, and sends the handful of means the fusion needs.
//! The target pools them into the point estimate and its variance.

use nalgebra::{DMatrix, DVector};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, ExcludedSource, ReportDiagnostics, SourceFitInfo};
use crate::expr::BasisVector;
use crate::gradient::{
    efficient_score_into, CondFamily, CondModels, GradientContext, SourceContext,
    TargetNuisance,
};
use crate::numerics::{pinv, DEFAULT_REL_TOL};
use crate::shift::{
    estimate_normalizer, fit_covariate_tilt, overlap_ratio, phi_moments, solve_beta_one,
    SourceTilt,
};

use super::messages::{
    BroadcastPackage, Round1Summary, Round2Diagnostics, Round2Summary, SourceModels,
    TargetExtras, SCHEMA,
};

/// How fused site summaries are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseWeighting {
    /// Every site weighted `1/(k+1)` — the default.
    Uniform,
    /// Sites weighted by their sample share `n_s / n`.
    Size,
}

impl FuseWeighting {
    pub fn label(self) -> &'static str {
        match self {
            FuseWeighting::Uniform => "uniform",
            FuseWeighting::Size => "size",
        }
    }
}

/// What to do when a source's target-side fit fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Drop the source, record the reason, continue with the rest.
    Exclude,
    /// Abort the whole run.
    Abort,
}

/// Protocol-level configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub weighting: FuseWeighting,
    /// Treat every source as untilted (ignore declared bases): the shared
    /// conditional-outcome-law assumption.
    pub ignore_tilts: bool,
    pub on_source_failure: FailurePolicy,
    /// Series degree for the target-sample nuisance and broadcast models
    /// (`None` = dimension default).
    pub sieve_degree: Option<usize>,
    /// Fixed kernel bandwidth for the kernel-family conditional-mean fits
    /// used by the centralized benchmark (`None` = data-driven; the
    /// federated path's series models ignore it).
    pub bandwidth: Option<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            weighting: FuseWeighting::Uniform,
            ignore_tilts: false,
            on_source_failure: FailurePolicy::Exclude,
            sieve_degree: None,
            bandwidth: None,
        }
    }
}

/// Source-side round 1: empirical feature means and tilt-basis mean.
pub fn source_round1(data: &SiteDataset, xi: Option<&BasisVector>) -> Result<Round1Summary> {
    if data.n() == 0 {
        return Err(Error::InsufficientData {
            context: format!("round-1 summary of site {}", data.site),
            required: 1,
            available: 0,
        });
    }
    let moments = phi_moments(data);
    let (xi_forms, xi_mean) = match xi {
        None => (Vec::new(), Vec::new()),
        Some(basis) => {
            let q = basis.len();
            let mut acc = vec![0.0; q];
            let mut row = vec![0.0; q];
            for i in 0..data.n() {
                basis.evaluate_into(data.xrow(i), data.a(i), data.y(i), &mut row)?;
                for (s, v) in acc.iter_mut().zip(&row) {
                    *s += v;
                }
            }
            for s in acc.iter_mut() {
                *s /= data.n() as f64;
            }
            (basis.to_strings(), acc)
        }
    };
    Ok(Round1Summary {
        schema: SCHEMA.into(),
        site: data.site,
        n: data.n(),
        phi_moments: moments,
        xi_forms,
        xi_mean,
    })
}

/// Target-side per-source fits (shift, tilt coefficient, normalizer),
/// applying the failure policy.
pub struct TargetSideFit {
    pub nuisance: TargetNuisance,
    pub sources: Vec<SourceModels>,
    pub excluded: Vec<ExcludedSource>,
}

pub fn target_side_fit(
    target: &SiteDataset,
    round1: &[Round1Summary],
    cfg: &ProtocolConfig,
) -> Result<TargetSideFit> {
    let dim = target.dim();
    let nuisance = TargetNuisance::fit_with(target, cfg.sieve_degree)?;
    let mut sources = Vec::new();
    let mut excluded = Vec::new();

    for r1 in round1 {
        r1.validate(dim)?;
        match fit_one_source(target, &nuisance, r1, cfg) {
            Ok(models) => sources.push(models),
            Err(e) => match cfg.on_source_failure {
                FailurePolicy::Exclude => excluded.push(ExcludedSource {
                    site: r1.site,
                    reason: e.to_string(),
                }),
                FailurePolicy::Abort => return Err(e),
            },
        }
    }
    Ok(TargetSideFit {
        nuisance,
        sources,
        excluded,
    })
}

fn fit_one_source(
    target: &SiteDataset,
    nuisance: &TargetNuisance,
    r1: &Round1Summary,
    cfg: &ProtocolConfig,
) -> Result<SourceModels> {
    let lambda = fit_covariate_tilt(target, &r1.phi_moments, r1.site)?;
    let (tilt, normalizer, iterations, residual) =
        if cfg.ignore_tilts || r1.xi_forms.is_empty() {
            (None, crate::shift::NormalizerModel::Unit, 0, 0.0)
        } else {
            let basis = BasisVector::from_strings(&r1.xi_forms, target.dim())?;
            let fit = solve_beta_one(
                target,
                &basis,
                &r1.xi_mean,
                &lambda,
                &nuisance.spec,
                &nuisance.standardizer,
                r1.site,
            )?;
            let tilt = SourceTilt {
                basis,
                beta: fit.beta,
            };
            let normalizer =
                estimate_normalizer(&nuisance.spec, &nuisance.standardizer, target, &tilt)?;
            (Some(tilt), normalizer, fit.iterations, fit.residual_sup)
        };
    let overlap = overlap_ratio(target, &lambda, tilt.as_ref(), &normalizer)?;
    Ok(SourceModels {
        id: r1.site,
        n: r1.n,
        tilt,
        normalizer,
        lambda,
        solve_iterations: iterations,
        solve_residual: residual,
        overlap,
    })
}

/// Target-side round 1: fit everything and assemble the broadcast.
pub fn target_estimate_and_broadcast(
    target: &SiteDataset,
    round1: &[Round1Summary],
    cfg: &ProtocolConfig,
) -> Result<BroadcastPackage> {
    let fit = target_side_fit(target, round1, cfg)?;
    let n_total = target.n() + fit.sources.iter().map(|s| s.n).sum::<usize>();
    let mut site_probs = Vec::with_capacity(fit.sources.len() + 1);
    site_probs.push(target.n() as f64 / n_total as f64);
    for s in &fit.sources {
        site_probs.push(s.n as f64 / n_total as f64);
    }
    let contexts: Vec<SourceContext> = fit
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| SourceContext {
            id: s.id,
            prob: site_probs[i + 1],
            tilt: s.tilt.clone(),
            normalizer: s.normalizer.clone(),
            lambda: s.lambda.clone(),
        })
        .collect();
    let cond = match crate::gradient::fit_cond_models(
        target,
        &fit.nuisance,
        &contexts,
        site_probs[0],
        CondFamily::Sieve,
        cfg.bandwidth,
    )? {
        CondModels::Sieve(m) => m,
        CondModels::Kernel(_) => unreachable!("requested the series family"),
    };
    let pkg = BroadcastPackage {
        schema: SCHEMA.into(),
        target_site: target.site,
        target_n: target.n(),
        site_probs,
        nuisance: fit.nuisance,
        sources: fit.sources,
        cond,
        excluded: fit.excluded,
    };
    pkg.validate(target.dim())?;
    Ok(pkg)
}

/// Round 2 at one site given an already-built evaluation context.
///
/// `slot` is the site's stacking index (0 = target). Evaluates the
/// per-observation machinery at every local record, centers the gradient
/// kernel and the score by this site's model-implied conditional means
/// given `(A, X)` — fixed functions carried by the broadcast models, not
/// refit on the site's own sample — and averages.
pub fn round2_from_context(
    data: &SiteDataset,
    ctx: &GradientContext,
    slot: usize,
) -> Result<Round2Summary> {
    let n = data.n();
    if n == 0 {
        return Err(Error::InsufficientData {
            context: format!("round-2 summary of site {}", data.site),
            required: 1,
            available: 0,
        });
    }
    let kk = ctx.layout.kk;
    let bd = ctx.layout.beta_dim;
    if slot >= kk {
        return Err(Error::Protocol(format!(
            "site slot {slot} out of range for {kk} participating sites"
        )));
    }

    let mut clamped = 0usize;
    let mut r_min = f64::INFINITY;
    let mut r_max = 0.0f64;

    let mut h = 0.0;
    let mut d2 = 0.0;
    let mut l = vec![0.0; bd];
    let mut dl = vec![0.0; bd];
    let mut i_mat = vec![vec![0.0; bd]; bd];
    let mut score = vec![0.0; bd];
    let mut xi_ctr = vec![0.0; bd];
    let mut astar_ctr = vec![0.0; bd];

    // Target-only accumulators.
    let mut c = vec![0.0; bd];
    let mut mu_delta_mean = 0.0;
    let mut mu_delta_sq = 0.0;
    let mut d_mu_delta = 0.0;
    let mut score_mu_delta = vec![0.0; bd];

    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let o = data.obs(i);
        let ev = ctx.evaluate_obs(o.x, o.a, o.y)?;
        if ev.pi_clamped {
            clamped += 1;
        }
        r_min = r_min.min(ev.r);
        r_max = r_max.max(ev.r);

        let d_centered = ev.dstar - ev.center_d[slot];
        for j in 0..bd {
            xi_ctr[j] = ev.xi_cond[j * kk + slot];
            astar_ctr[j] = ev.center_a[j * kk + slot];
        }
        efficient_score_into(&ev.xi_stack, &xi_ctr, &ev.astar, &astar_ctr, &mut score);

        h += d_centered * inv_n;
        d2 += d_centered * d_centered * inv_n;
        for j in 0..bd {
            l[j] += score[j] * inv_n;
            dl[j] += d_centered * score[j] * inv_n;
            for jj in 0..bd {
                i_mat[j][jj] += score[j] * score[jj] * inv_n;
            }
        }

        if slot == 0 {
            let (pi, _) = ctx.propensity.prob(o.x, o.a);
            let resid = (2.0 * o.a - 1.0) / pi * (o.y - ctx.mu.eval(o.x, o.a));
            let md = ctx.mu_delta(o.x);
            mu_delta_mean += md * inv_n;
            mu_delta_sq += md * md * inv_n;
            d_mu_delta += d_centered * md * inv_n;
            for j in 0..bd {
                c[j] += resid * score[j] * inv_n;
                score_mu_delta[j] += score[j] * md * inv_n;
            }
        }
    }

    let target_extras = (slot == 0).then_some(TargetExtras {
        c,
        mu_delta_mean,
        mu_delta_sq_mean: mu_delta_sq,
        d_mu_delta_mean: d_mu_delta,
        score_mu_delta_mean: score_mu_delta,
    });

    Ok(Round2Summary {
        schema: SCHEMA.into(),
        site: data.site,
        n,
        h,
        l,
        i: i_mat,
        d2,
        dl,
        target_extras,
        diagnostics: Round2Diagnostics {
            clamped,
            r_overlap: if r_min > 0.0 { r_max / r_min } else { f64::INFINITY },
        },
    })
}

/// Round 2 at one site from the broadcast package.
pub fn site_round2(data: &SiteDataset, pkg: &BroadcastPackage) -> Result<Round2Summary> {
    let ctx = pkg.build_context(data.dim())?;
    let slot = pkg.slot_of(data.site).ok_or_else(|| Error::Protocol(format!(
        "site {} does not appear in the broadcast package",
        data.site
    )))?;
    round2_from_context(data, &ctx, slot)
}

/// The fused estimate and variance assembled from per-site summaries.
pub struct FusionOutput {
    pub estimate: f64,
    pub se: f64,
    /// `I^- C`, the score weights entering the estimating function.
    pub c_coef: Vec<f64>,
    /// Plug-in regression term (target mean of the fitted contrast).
    pub n0: f64,
    /// Per-site fused contributions `H_s + M_s` in slot order.
    pub site_terms: Vec<f64>,
}

/// Pool second-round summaries: the point estimate and its variance.
///
/// `site_probs` are population shares in slot order (target first);
/// `round2` must be in the same slot order, the target's summary carrying
/// its extras.
pub fn fuse_summaries(
    site_probs: &[f64],
    round2: &[Round2Summary],
    weighting: FuseWeighting,
) -> Result<FusionOutput> {
    let kk = site_probs.len();
    if round2.len() != kk {
        return Err(Error::Protocol(format!(
            "fusion needs one round-2 summary per site: got {} for {kk} sites",
            round2.len()
        )));
    }
    let bd = round2[0].l.len();
    for r2 in round2 {
        r2.validate(bd)?;
    }
    let extras = round2[0]
        .target_extras
        .as_ref()
        .ok_or_else(|| Error::Protocol("target round-2 summary lacks its extras".into()))?;
    let n_total: usize = round2.iter().map(|r| r.n).sum();

    // Pooled score information and its generalized inverse.
    let mut info = DMatrix::<f64>::zeros(bd, bd);
    for (s, r2) in round2.iter().enumerate() {
        for r in 0..bd {
            for c in 0..bd {
                info[(r, c)] += site_probs[s] * r2.i[r][c];
            }
        }
    }
    let info_pinv = pinv(&info, DEFAULT_REL_TOL)?;
    let c_vec = DVector::from_column_slice(&extras.c);
    let c_coef = &info_pinv * &c_vec;

    // Per-site fused contributions.
    let mut site_terms = Vec::with_capacity(kk);
    for r2 in round2 {
        let l = DVector::from_column_slice(&r2.l);
        let m_s = c_coef.dot(&l);
        site_terms.push(r2.h + m_s);
    }
    let n0 = extras.mu_delta_mean;
    let estimate = match weighting {
        FuseWeighting::Uniform => {
            n0 + site_terms.iter().sum::<f64>() / kk as f64
        }
        FuseWeighting::Size => {
            n0 + site_terms
                .iter()
                .zip(site_probs)
                .map(|(t, p)| t * p)
                .sum::<f64>()
        }
    };

    // Variance of the estimating function, assembled from site moments.
    // Per record: eff = D + 1(target) u - c' score, u = (contrast - est)/p0.
    let p0 = site_probs[0];
    let mut mean_eff = 0.0;
    let mut second = 0.0;
    for (s, r2) in round2.iter().enumerate() {
        let l = DVector::from_column_slice(&r2.l);
        let dl = DVector::from_column_slice(&r2.dl);
        let i_m = DMatrix::from_fn(bd, bd, |r, c| r2.i[r][c]);
        let e1 = r2.h - c_coef.dot(&l);
        let e2 = r2.d2 - 2.0 * c_coef.dot(&dl) + (&i_m * &c_coef).dot(&c_coef);
        mean_eff += site_probs[s] * e1;
        second += site_probs[s] * e2;
    }
    // Target-only terms involving u.
    let l0 = DVector::from_column_slice(&round2[0].l);
    let smd = DVector::from_column_slice(&extras.score_mu_delta_mean);
    let h0 = round2[0].h;
    mean_eff += n0 - estimate;
    second += 2.0
        * ((extras.d_mu_delta_mean - estimate * h0)
            - c_coef.dot(&(&smd - &l0 * estimate)));
    second += (extras.mu_delta_sq_mean - 2.0 * estimate * n0 + estimate * estimate) / p0;

    let var = (second - mean_eff * mean_eff).max(0.0);
    let se = (var / n_total as f64).sqrt();

    Ok(FusionOutput {
        estimate,
        se,
        c_coef: c_coef.iter().cloned().collect(),
        n0,
        site_terms,
    })
}

/// Arrange round-2 summaries into package slot order (target first).
pub fn order_by_slot(
    pkg: &BroadcastPackage,
    round2: &[Round2Summary],
) -> Result<Vec<Round2Summary>> {
    let kk = pkg.sources.len() + 1;
    let mut ordered: Vec<Option<&Round2Summary>> = vec![None; kk];
    for r2 in round2 {
        let slot = pkg.slot_of(r2.site).ok_or_else(|| {
            Error::Protocol(format!("round-2 summary from unknown site {}", r2.site))
        })?;
        if ordered[slot].is_some() {
            return Err(Error::Protocol(format!(
                "duplicate round-2 summary from site {}",
                r2.site
            )));
        }
        ordered[slot] = Some(r2);
    }
    ordered
        .into_iter()
        .enumerate()
        .map(|(slot, r2)| {
            r2.cloned().ok_or_else(|| {
                Error::Protocol(format!("missing round-2 summary for slot {slot}"))
            })
        })
        .collect()
}

/// Build the final report out of fitted source models and ordered round-2
/// summaries. Shared by the federated and centralized front-ends.
pub fn assemble_report(
    name: &str,
    n_total: usize,
    sources: &[SourceModels],
    excluded: &[ExcludedSource],
    ordered: &[Round2Summary],
    fusion: &FusionOutput,
    weighting: FuseWeighting,
) -> EstimateReport {
    let mut report = EstimateReport::new(name, fusion.estimate, fusion.se, n_total);
    report.sources_used = sources.iter().map(|s| s.id).collect();
    report.excluded = excluded.to_vec();
    report.diagnostics = ReportDiagnostics {
        source_fits: sources
            .iter()
            .map(|s| SourceFitInfo {
                site: s.id,
                beta: s.tilt.as_ref().map(|t| t.beta.clone()).unwrap_or_default(),
                iterations: s.solve_iterations,
                residual: s.solve_residual,
                overlap: s.overlap,
            })
            .collect(),
        clamped: ordered
            .iter()
            .map(|r2| (r2.site, r2.diagnostics.clamped))
            .collect(),
        r_overlap: ordered
            .iter()
            .map(|r2| (r2.site, r2.diagnostics.r_overlap))
            .collect(),
        weighting: Some(weighting.label().to_string()),
        messages: 0,
    };
    report
}

/// Target-side fusion into a full report.
pub fn target_fuse(
    pkg: &BroadcastPackage,
    round2: &[Round2Summary],
    cfg: &ProtocolConfig,
) -> Result<EstimateReport> {
    let ordered = order_by_slot(pkg, round2)?;
    let fusion = fuse_summaries(&pkg.site_probs, &ordered, cfg.weighting)?;
    Ok(assemble_report(
        "eco-ate",
        pkg.n_total(),
        &pkg.sources,
        &pkg.excluded,
        &ordered,
        &fusion,
        cfg.weighting,
    ))
}
