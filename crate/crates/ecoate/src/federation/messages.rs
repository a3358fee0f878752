//! Message types for the two-round protocol.
//!
//! Every message is a plain serializable value containing only sample sizes,
//! empirical moments, and fitted model coefficients — never individual
//! records. Serialization is canonical JSON with round-trip-exact floats, so
//! a message survives a file hop bit-for-bit.

use nalgebra::DMatrix;

use crate::data::SiteId;
use crate::error::{Error, Result};
use crate::gradient::{layout_for, GradientContext, SieveCondModels, SourceContext, TargetNuisance};
use crate::shift::{phi_len, CovariateShiftModel, NormalizerModel, SourceTilt};

/// Protocol schema identifier carried by every message.
pub const SCHEMA: &str = "eco-ate/1";

/// Tolerance for the symmetry / positive-semidefiniteness check on the
/// score second-moment matrix.
pub const PSD_TOL: f64 = 1e-8;

fn check_schema(schema: &str) -> Result<()> {
    if schema == SCHEMA {
        Ok(())
    } else {
        Err(Error::SchemaVersion {
            expected: SCHEMA.into(),
            actual: schema.into(),
        })
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} contains a non-finite value")))
    }
}

/// First uplink, source → target: sizes, covariate/treatment feature means,
/// the declared outcome-tilt basis, and its empirical mean.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Round1Summary {
    pub schema: String,
    pub site: SiteId,
    pub n: usize,
    /// Empirical means of the covariate/treatment feature map.
    pub phi_moments: Vec<f64>,
    /// Declared outcome-tilt basis as expression strings (empty: no tilt).
    pub xi_forms: Vec<String>,
    /// Empirical mean of the basis over the site sample.
    pub xi_mean: Vec<f64>,
}

impl Round1Summary {
    pub fn validate(&self, dim: usize) -> Result<()> {
        check_schema(&self.schema)?;
        if self.n < 1 {
            return Err(Error::Message {
                site: self.site,
                message: "round-1 summary reports an empty sample".into(),
            });
        }
        if self.phi_moments.len() != phi_len(dim) {
            return Err(Error::DimensionMismatch {
                context: format!("round-1 feature moments from site {}", self.site),
                expected: phi_len(dim),
                actual: self.phi_moments.len(),
            });
        }
        if self.xi_forms.len() != self.xi_mean.len() {
            return Err(Error::DimensionMismatch {
                context: format!("round-1 basis mean from site {}", self.site),
                expected: self.xi_forms.len(),
                actual: self.xi_mean.len(),
            });
        }
        check_finite("round-1 feature moments", &self.phi_moments)?;
        check_finite("round-1 basis mean", &self.xi_mean)
    }
}

/// Fitted per-source models carried in the broadcast.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModels {
    pub id: SiteId,
    pub n: usize,
    /// Outcome tilt with the solved coefficient; `None` when the source is
    /// treated as sharing the target outcome law.
    pub tilt: Option<SourceTilt>,
    pub normalizer: NormalizerModel,
    pub lambda: CovariateShiftModel,
    /// Newton iterations of the tilt-coefficient solve (0 when untilted).
    pub solve_iterations: usize,
    /// Final residual sup-norm of that solve.
    pub solve_residual: f64,
    /// max/min of `lambda_s w*_s` over the target sample.
    pub overlap: f64,
}

/// Broadcast, target → all sites: everything a site needs to evaluate the
/// per-observation machinery locally.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BroadcastPackage {
    pub schema: String,
    pub target_site: SiteId,
    pub target_n: usize,
    /// Population shares, target first then `sources` order; sums to one.
    pub site_probs: Vec<f64>,
    /// Shared target-sample nuisance fits.
    pub nuisance: TargetNuisance,
    pub sources: Vec<SourceModels>,
    /// Broadcast conditional-mean models (series family).
    pub cond: SieveCondModels,
    /// Sources dropped during target-side fitting, with reasons.
    pub excluded: Vec<crate::estimators::ExcludedSource>,
}

impl BroadcastPackage {
    pub fn n_total(&self) -> usize {
        self.target_n + self.sources.iter().map(|s| s.n).sum::<usize>()
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    /// Stacking slot of a site: 0 for the target, `1 + index` for sources.
    pub fn slot_of(&self, site: SiteId) -> Option<usize> {
        if site == self.target_site {
            return Some(0);
        }
        self.sources
            .iter()
            .position(|s| s.id == site)
            .map(|i| i + 1)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_schema(&self.schema)?;
        if self.site_probs.len() != self.sources.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "broadcast site shares".into(),
                expected: self.sources.len() + 1,
                actual: self.site_probs.len(),
            });
        }
        check_finite("broadcast site shares", &self.site_probs)?;
        let total: f64 = self.site_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.site_probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::Protocol(format!(
                "broadcast site shares must be positive and sum to 1, got sum {total}"
            )));
        }
        let n_total = self.n_total();
        for (slot, n) in std::iter::once(self.target_n)
            .chain(self.sources.iter().map(|s| s.n))
            .enumerate()
        {
            let expect = n as f64 / n_total as f64;
            if (self.site_probs[slot] - expect).abs() > 1e-9 {
                return Err(Error::Protocol(format!(
                    "broadcast share {} of slot {slot} disagrees with sizes ({expect})",
                    self.site_probs[slot]
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sources {
            if s.id == self.target_site || !seen.insert(s.id) {
                return Err(Error::Protocol(format!(
                    "broadcast source list repeats or shadows site {}",
                    s.id
                )));
            }
            if let Some(t) = &s.tilt {
                if t.beta.len() != t.basis.len() {
                    return Err(Error::DimensionMismatch {
                        context: format!("tilt coefficient of source {}", s.id),
                        expected: t.basis.len(),
                        actual: t.beta.len(),
                    });
                }
                check_finite("tilt coefficient", &t.beta)?;
            }
            if s.lambda.gamma.len() != phi_len(dim) {
                return Err(Error::DimensionMismatch {
                    context: format!("covariate-shift model of source {}", s.id),
                    expected: phi_len(dim),
                    actual: s.lambda.gamma.len(),
                });
            }
        }
        // Conditional-model layout must match the source tilt dims.
        let xi_dims: Vec<usize> = self
            .sources
            .iter()
            .map(|s| s.tilt.as_ref().map_or(0, |t| t.dim()))
            .collect();
        if self.cond.xi_dims != xi_dims {
            return Err(Error::DimensionMismatch {
                context: "broadcast conditional-model layout".into(),
                expected: xi_dims.iter().sum(),
                actual: self.cond.xi_dims.iter().sum(),
            });
        }
        let layout = crate::gradient::CondLayout::new(xi_dims);
        if self.cond.stage_a.responses() != layout.stage_a_len() {
            return Err(Error::DimensionMismatch {
                context: "broadcast first-stage conditional models".into(),
                expected: layout.stage_a_len(),
                actual: self.cond.stage_a.responses(),
            });
        }
        if layout.beta_dim > 0 {
            match &self.cond.stage_b {
                Some(m) if m.responses() == layout.stage_b_len() => {}
                Some(m) => {
                    return Err(Error::DimensionMismatch {
                        context: "broadcast second-stage conditional models".into(),
                        expected: layout.stage_b_len(),
                        actual: m.responses(),
                    })
                }
                None => {
                    return Err(Error::Protocol(
                        "broadcast lacks second-stage conditional models".into(),
                    ))
                }
            }
        }
        if self.nuisance.standardizer.mean.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "broadcast standardization constants".into(),
                expected: dim,
                actual: self.nuisance.standardizer.mean.len(),
            });
        }
        Ok(())
    }

    /// Per-source evaluation ingredients in stacking order.
    pub fn source_contexts(&self) -> Vec<SourceContext> {
        self.sources
            .iter()
            .enumerate()
            .map(|(i, s)| SourceContext {
                id: s.id,
                prob: self.site_probs[i + 1],
                tilt: s.tilt.clone(),
                normalizer: s.normalizer.clone(),
                lambda: s.lambda.clone(),
            })
            .collect()
    }

    /// Build the evaluation context a receiving site uses.
    pub fn build_context(&self, dim: usize) -> Result<GradientContext> {
        self.validate(dim)?;
        let sources = self.source_contexts();
        let layout = layout_for(&sources);
        let bundle = std::sync::Arc::new(self.cond.clone());
        Ok(GradientContext::new(
            self.site_probs[0],
            sources,
            self.nuisance.propensity_eval(),
            self.nuisance.mu_eval(),
            bundle,
            layout,
        ))
    }
}

/// Target-only second-round extras: the cross moment defining the fusion
/// correction, and the moments of the regression contrast needed to
/// assemble the variance without another round.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetExtras {
    /// Target mean of (AIPW residual) × (centered efficient score).
    pub c: Vec<f64>,
    /// Target mean of `mu(1, x) - mu(0, x)` (the plug-in regression term).
    pub mu_delta_mean: f64,
    /// Target mean of its square.
    pub mu_delta_sq_mean: f64,
    /// Target mean of (centered gradient kernel) × (regression contrast).
    pub d_mu_delta_mean: f64,
    /// Target mean of (centered efficient score) × (regression contrast).
    pub score_mu_delta_mean: Vec<f64>,
}

/// Per-site second-round diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Round2Diagnostics {
    /// Records where the propensity clamp was active.
    pub clamped: usize,
    /// max/min of the mixture factor `r` over the site sample.
    pub r_overlap: f64,
}

/// Second uplink, every site → target: the site means the fusion needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Round2Summary {
    pub schema: String,
    pub site: SiteId,
    pub n: usize,
    /// Site mean of the kernel-centered gradient kernel
    /// `d*(z) - E_hat[d* | a, x, site]`.
    pub h: f64,
    /// Site mean of the centered efficient score.
    pub l: Vec<f64>,
    /// Site mean of the score outer product (rows).
    pub i: Vec<Vec<f64>>,
    /// Site mean of the squared centered gradient kernel (for variance
    /// assembly).
    pub d2: f64,
    /// Site mean of (centered gradient kernel) × (centered efficient
    /// score).
    pub dl: Vec<f64>,
    /// Present only on the target's own summary.
    pub target_extras: Option<TargetExtras>,
    pub diagnostics: Round2Diagnostics,
}

impl Round2Summary {
    pub fn validate(&self, beta_dim: usize) -> Result<()> {
        check_schema(&self.schema)?;
        if self.l.len() != beta_dim
            || self.dl.len() != beta_dim
            || self.i.len() != beta_dim
            || self.i.iter().any(|row| row.len() != beta_dim)
        {
            return Err(Error::DimensionMismatch {
                context: format!("round-2 summary from site {}", self.site),
                expected: beta_dim,
                actual: self.l.len(),
            });
        }
        check_finite("round-2 score mean", &self.l)?;
        check_finite("round-2 cross moment", &self.dl)?;
        if !(self.h.is_finite() && self.d2.is_finite()) {
            return Err(Error::NonFinite(format!(
                "round-2 summary from site {}",
                self.site
            )));
        }
        if beta_dim > 0 {
            let m = DMatrix::from_fn(beta_dim, beta_dim, |r, c| self.i[r][c]);
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "round-2 second moment from site {}",
                    self.site
                )));
            }
            for r in 0..beta_dim {
                for c in 0..r {
                    if (m[(r, c)] - m[(c, r)]).abs() > PSD_TOL {
                        return Err(Error::Message {
                            site: self.site,
                            message: "round-2 second moment not symmetric".into(),
                        });
                    }
                }
            }
            let sym = (&m + m.transpose()) * 0.5;
            let eig = sym.symmetric_eigenvalues();
            if eig.iter().any(|&e| e < -PSD_TOL) {
                return Err(Error::Message {
                    site: self.site,
                    message: format!(
                        "round-2 second moment not positive semidefinite (min eigenvalue {})",
                        eig.iter().cloned().fold(f64::INFINITY, f64::min)
                    ),
                });
            }
        }
        if let Some(ex) = &self.target_extras {
            if ex.c.len() != beta_dim || ex.score_mu_delta_mean.len() != beta_dim {
                return Err(Error::DimensionMismatch {
                    context: "round-2 target extras".into(),
                    expected: beta_dim,
                    actual: ex.c.len(),
                });
            }
            check_finite("round-2 target cross moment", &ex.c)?;
            check_finite("round-2 target score contrast", &ex.score_mu_delta_mean)?;
            if !(ex.mu_delta_mean.is_finite()
                && ex.mu_delta_sq_mean.is_finite()
                && ex.d_mu_delta_mean.is_finite())
            {
                return Err(Error::NonFinite("round-2 target extras".into()));
            }
        }
        Ok(())
    }
}

/// Envelope for transport and transcripts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Round1(Round1Summary),
    Broadcast(BroadcastPackage),
    Round2(Round2Summary),
}

impl Message {
    /// Round label used for file names and transcripts.
    pub fn round(&self) -> &'static str {
        match self {
            Message::Round1(_) => "round1",
            Message::Broadcast(_) => "broadcast",
            Message::Round2(_) => "round2",
        }
    }

    pub fn site(&self) -> SiteId {
        match self {
            Message::Round1(m) => m.site,
            Message::Broadcast(m) => m.target_site,
            Message::Round2(m) => m.site,
        }
    }
}

/// Shared-directory manifest announcing the run to participating processes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub target_site: SiteId,
    pub source_sites: Vec<SiteId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_mismatch_is_rejected() {
        let r1 = Round1Summary {
            schema: "eco-ate/2".into(),
            site: 1,
            n: 5,
            phi_moments: vec![0.0; phi_len(1)],
            xi_forms: vec![],
            xi_mean: vec![],
        };
        assert!(matches!(
            r1.validate(1),
            Err(Error::SchemaVersion { .. })
        ));
    }

    #[test]
    fn round1_dimension_checks() {
        let mut r1 = Round1Summary {
            schema: SCHEMA.into(),
            site: 1,
            n: 5,
            phi_moments: vec![0.0; phi_len(2)],
            xi_forms: vec!["log(y)".into()],
            xi_mean: vec![0.1],
        };
        assert!(r1.validate(2).is_ok());
        r1.xi_mean.push(0.2);
        assert!(r1.validate(2).is_err());
        r1.xi_mean.pop();
        r1.phi_moments.pop();
        assert!(r1.validate(2).is_err());
    }

    #[test]
    fn round2_psd_check() {
        let good = Round2Summary {
            schema: SCHEMA.into(),
            site: 0,
            n: 10,
            h: 0.1,
            l: vec![0.0, 0.0],
            i: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            d2: 0.2,
            dl: vec![0.0, 0.0],
            target_extras: None,
            diagnostics: Round2Diagnostics {
                clamped: 0,
                r_overlap: 1.0,
            },
        };
        assert!(good.validate(2).is_ok());
        let mut indefinite = good.clone();
        indefinite.i = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(indefinite.validate(2).is_err());
        let mut asym = good;
        asym.i = vec![vec![1.0, 0.5], vec![0.2, 1.0]];
        assert!(asym.validate(2).is_err());
    }
}
