//! One entry point over the estimator menu.
//!
//! `fit_estimator` hides the plumbing each estimator needs: the
//! bias-corrected variants augment the design with group-level covariate
//! summaries first, and the ridge-penalized fits borrow their plug-in
//! variance (and dispersion) from a companion random-intercept fit on the
//! same design. A `FitCache` keeps those companion fits so that running
//! several estimators on one dataset — or thousands of bootstrap refits —
//! does not repeat the expensive marginal-likelihood optimizations.

use crate::EstimatorKind;
use crate::data::{AugmentInfo, AugmentScheme, GroupedDataset};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::inference::{BootstrapCi, BootstrapOptions, cluster_bootstrap};
use crate::irls::{self, FitResult, RidgePenalty};
use crate::mlm::{self, MlmFit, MlmOptions, MlmStart, QuadratureSpec};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What to fit and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub estimator: EstimatorKind,
    pub family: Family,
    #[serde(default)]
    pub quad: QuadratureSpec,
    /// Plug-in random-intercept variance for the ridge fits; when absent it
    /// comes from the companion random-intercept fit.
    #[serde(default)]
    pub omega_sq: Option<f64>,
    /// Dispersion for the ridge penalty scaling (Gaussian only); when
    /// absent it comes from the companion fit.
    #[serde(default)]
    pub theta: Option<f64>,
    /// Augmentation scheme for the bias-corrected fits; defaults to group
    /// means for random intercepts and within-group projection otherwise.
    #[serde(default)]
    pub augment_scheme: Option<AugmentScheme>,
}

impl EstimatorConfig {
    pub fn new(estimator: EstimatorKind, family: Family) -> Self {
        EstimatorConfig {
            estimator,
            family,
            quad: QuadratureSpec::default(),
            omega_sq: None,
            theta: None,
            augment_scheme: None,
        }
    }

    fn scheme_for(&self, ds: &GroupedDataset) -> AugmentScheme {
        self.augment_scheme.unwrap_or(if ds.d() == 1 {
            AugmentScheme::GroupMeans
        } else {
            AugmentScheme::WithinProjection
        })
    }
}

/// A fit from either engine.
#[derive(Debug, Clone)]
pub enum AnyFit {
    Irls(FitResult),
    Mlm(MlmFit),
}

impl AnyFit {
    pub fn estimator(&self) -> EstimatorKind {
        match self {
            AnyFit::Irls(f) => f.estimator,
            AnyFit::Mlm(f) => f.estimator,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            AnyFit::Irls(f) => f.family,
            AnyFit::Mlm(f) => f.family,
        }
    }

    /// Fixed effects for the base design columns.
    pub fn beta(&self) -> &DVector<f64> {
        match self {
            AnyFit::Irls(f) => &f.beta_hat,
            AnyFit::Mlm(f) => &f.beta_hat,
        }
    }

    /// Fixed effects for augmentation columns (empty when not augmented).
    pub fn alpha(&self) -> &DVector<f64> {
        match self {
            AnyFit::Irls(f) => &f.alpha_hat,
            AnyFit::Mlm(f) => &f.alpha_hat,
        }
    }

    /// All fixed effects, base then augmentation.
    pub fn fixed_all(&self) -> DVector<f64> {
        match self {
            AnyFit::Irls(f) => f.fixed(),
            AnyFit::Mlm(f) => f.fixed().clone(),
        }
    }

    pub fn loglik(&self) -> f64 {
        match self {
            AnyFit::Irls(f) => f.loglik,
            AnyFit::Mlm(f) => f.loglik,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            AnyFit::Irls(f) => f.converged,
            AnyFit::Mlm(f) => f.converged,
        }
    }

    pub fn augment_info(&self) -> Option<&AugmentInfo> {
        match self {
            AnyFit::Irls(f) => f.augment.as_ref(),
            AnyFit::Mlm(f) => f.augment.as_ref(),
        }
    }

    /// Group effects used for prediction: estimates for the fixed-effect
    /// engines, posterior modes for the marginal-likelihood fits.
    pub fn group_effects(&self) -> &DMatrix<f64> {
        match self {
            AnyFit::Irls(f) => &f.gamma_hat,
            AnyFit::Mlm(f) => &f.gamma_mode,
        }
    }

    pub fn as_irls(&self) -> Option<&FitResult> {
        match self {
            AnyFit::Irls(f) => Some(f),
            AnyFit::Mlm(_) => None,
        }
    }

    pub fn as_mlm(&self) -> Option<&MlmFit> {
        match self {
            AnyFit::Mlm(f) => Some(f),
            AnyFit::Irls(_) => None,
        }
    }
}

/// Companion fits shared across estimators on one dataset. Valid only for
/// the (dataset, family, quadrature) combination it was first used with.
#[derive(Debug, Default, Clone)]
pub struct FitCache {
    /// Random-intercept fit on the raw design.
    pub ri: Option<MlmFit>,
    /// Augmented design and its per-group coefficients.
    pub augmented: Option<(GroupedDataset, AugmentInfo)>,
    /// Random-intercept fit on the augmented design.
    pub bc_ri: Option<MlmFit>,
}

impl FitCache {
    fn augmented(
        &mut self,
        ds: &GroupedDataset,
        cfg: &EstimatorConfig,
    ) -> Result<&(GroupedDataset, AugmentInfo)> {
        if self.augmented.is_none() {
            self.augmented = Some(ds.augment(cfg.scheme_for(ds))?);
        }
        Ok(self.augmented.as_ref().unwrap())
    }

    /// Companion random-intercept fit on `target` (the raw or augmented
    /// design), warm-started from `warm` when provided.
    fn companion_ri(
        slot: &mut Option<MlmFit>,
        target: &GroupedDataset,
        cfg: &EstimatorConfig,
        warm: Option<&MlmFit>,
        need_se: bool,
    ) -> Result<MlmFit> {
        if let Some(f) = slot.as_ref() {
            if !need_se || f.beta_cov.is_some() || f.boundary {
                return Ok(f.clone());
            }
        }
        let opts = MlmOptions {
            start: slot
                .as_ref()
                .map(MlmStart::from)
                .or_else(|| warm.map(MlmStart::from)),
            skip_se: !need_se,
        };
        let fit = if target.d() == 1 {
            mlm::fit_ri_mlm_with(target, cfg.family, &cfg.quad, &opts)?
        } else {
            mlm::fit_mlm_laplace(target, cfg.family)?
        };
        *slot = Some(fit.clone());
        Ok(fit)
    }
}

/// Fit one estimator, reusing nothing.
pub fn fit_estimator(ds: &GroupedDataset, cfg: &EstimatorConfig) -> Result<AnyFit> {
    fit_estimator_cached(ds, cfg, &mut FitCache::default())
}

/// Fit one estimator, sharing companion fits through `cache`.
pub fn fit_estimator_cached(
    ds: &GroupedDataset,
    cfg: &EstimatorConfig,
    cache: &mut FitCache,
) -> Result<AnyFit> {
    fit_with(ds, cfg, cache, None, false)
}

/// Bootstrap-refit variant: warm-start companion fits from a base run's
/// cache and skip information matrices throughout.
pub fn fit_estimator_warm(
    ds: &GroupedDataset,
    cfg: &EstimatorConfig,
    cache: &mut FitCache,
    warm: Option<&FitCache>,
) -> Result<AnyFit> {
    fit_with(ds, cfg, cache, warm, true)
}

fn fit_with(
    ds: &GroupedDataset,
    cfg: &EstimatorConfig,
    cache: &mut FitCache,
    warm: Option<&FitCache>,
    skip_se: bool,
) -> Result<AnyFit> {
    match cfg.estimator {
        EstimatorKind::PooledGlm => Ok(AnyFit::Irls(irls::fit_pooled(ds, cfg.family)?)),
        EstimatorKind::GroupFe => Ok(AnyFit::Irls(irls::fit_fe(ds, cfg.family)?)),
        EstimatorKind::RiMlm => {
            let fit = FitCache::companion_ri(
                &mut cache.ri,
                ds,
                cfg,
                warm.and_then(|w| w.ri.as_ref()),
                !skip_se,
            )?;
            Ok(AnyFit::Mlm(fit))
        }
        EstimatorKind::RegFe => {
            let (omega, theta) = plugin_penalty(ds, cfg, cache, warm, None)?;
            let fit = irls::fit_regfe(ds, cfg.family, &RidgePenalty { omega }, theta)?;
            Ok(AnyFit::Irls(fit))
        }
        EstimatorKind::BcRi => {
            let (aug_ds, info) = cache.augmented(ds, cfg)?.clone();
            let mut fit = FitCache::companion_ri(
                &mut cache.bc_ri,
                &aug_ds,
                cfg,
                warm.and_then(|w| w.bc_ri.as_ref()),
                !skip_se,
            )?;
            split_mlm_fixed(&mut fit, ds.p(), info);
            fit.estimator = EstimatorKind::BcRi;
            Ok(AnyFit::Mlm(fit))
        }
        EstimatorKind::BcRegFe => {
            let (aug_ds, info) = cache.augmented(ds, cfg)?.clone();
            let (omega, theta) = plugin_penalty(ds, cfg, cache, warm, Some(&aug_ds))?;
            let mut fit =
                irls::fit_regfe(&aug_ds, cfg.family, &RidgePenalty { omega }, theta)?;
            split_irls_fixed(&mut fit, ds.p(), info);
            fit.estimator = EstimatorKind::BcRegFe;
            Ok(AnyFit::Irls(fit))
        }
    }
}

/// Penalty covariance and dispersion for a ridge fit: explicit overrides
/// when configured, otherwise from the companion random-intercept fit on
/// the same design (`aug` holds the augmented design for the
/// bias-corrected variant; None means the raw design).
fn plugin_penalty(
    ds: &GroupedDataset,
    cfg: &EstimatorConfig,
    cache: &mut FitCache,
    warm: Option<&FitCache>,
    aug: Option<&GroupedDataset>,
) -> Result<(DMatrix<f64>, f64)> {
    if let Some(os) = cfg.omega_sq {
        if ds.d() != 1 {
            return Err(Error::InvalidConfig(
                "scalar variance override requires an intercept-only random-effect design"
                    .into(),
            ));
        }
        if !(os.is_finite() && os > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "plug-in variance must be positive and finite, got {os}"
            )));
        }
        let theta = match cfg.theta {
            Some(t) if t.is_finite() && t > 0.0 => t,
            Some(t) => {
                return Err(Error::InvalidConfig(format!(
                    "plug-in dispersion must be positive and finite, got {t}"
                )));
            }
            None if cfg.family.has_dispersion() => {
                return Err(Error::InvalidConfig(
                    "gaussian ridge fit with an explicit variance also needs a dispersion"
                        .into(),
                ));
            }
            None => 1.0,
        };
        return Ok((DMatrix::from_element(1, 1, os), theta));
    }
    let companion = match aug {
        Some(aug_ds) => FitCache::companion_ri(
            &mut cache.bc_ri,
            aug_ds,
            cfg,
            warm.and_then(|w| w.bc_ri.as_ref()),
            false,
        )?,
        None => FitCache::companion_ri(
            &mut cache.ri,
            ds,
            cfg,
            warm.and_then(|w| w.ri.as_ref()),
            false,
        )?,
    };
    if companion.boundary {
        return Err(Error::BoundaryVariance { omega_sq: companion.omega_sq() });
    }
    Ok((companion.omega.clone(), companion.theta_hat))
}

/// Split an augmented design's fixed effects into base and augmentation
/// parts and attach the augmentation metadata.
fn split_mlm_fixed(fit: &mut MlmFit, p_base: usize, info: AugmentInfo) {
    let fixed = fit.fixed().clone();
    fit.beta_hat = fixed.rows(0, p_base).into_owned();
    fit.alpha_hat = fixed.rows(p_base, fixed.len() - p_base).into_owned();
    fit.augment = Some(info);
    fit.p_base = p_base;
}

fn split_irls_fixed(fit: &mut FitResult, p_base: usize, info: AugmentInfo) {
    let fixed = fit.fixed();
    fit.beta_hat = fixed.rows(0, p_base).into_owned();
    fit.alpha_hat = fixed.rows(p_base, fixed.len() - p_base).into_owned();
    fit.augment = Some(info);
}

/// Mean predictions on (possibly new) data. For augmented fits the new
/// design is augmented with the training groups' coefficients, which
/// requires the same groups in the same order. Group effects enter through
/// the fit's `group_effects` (divergent fixed effects predict the limiting
/// 0/1 mean).
pub fn predict_mu(fit: &AnyFit, ds: &GroupedDataset) -> Result<DVector<f64>> {
    let target;
    let ds_eff = match fit.augment_info() {
        Some(info) => {
            target = ds.apply_augmentation(info)?;
            &target
        }
        None => ds,
    };
    let fixed = fit.fixed_all();
    if fixed.len() != ds_eff.p() {
        return Err(Error::InvalidData(format!(
            "fit has {} fixed effects, design has {} columns",
            fixed.len(),
            ds_eff.p()
        )));
    }
    let gamma = fit.group_effects();
    if gamma.nrows() != ds_eff.n_groups() {
        return Err(Error::InvalidData(format!(
            "fit has {} group effects, data has {} groups",
            gamma.nrows(),
            ds_eff.n_groups()
        )));
    }
    let fam = fit.family();
    let mut mu = DVector::zeros(ds_eff.n());
    for g in 0..ds_eff.n_groups() {
        for i in ds_eff.group_range(g) {
            let mut eta = 0.0;
            for j in 0..ds_eff.p() {
                eta += ds_eff.x()[(i, j)] * fixed[j];
            }
            for a in 0..ds_eff.d() {
                let ge = gamma[(g, a)];
                if ge.is_infinite() {
                    // Separated group: the limit dominates the predictor.
                    eta = ge;
                    break;
                }
                eta += ds_eff.z()[(i, a)] * ge;
            }
            mu[i] = fam.link_inverse(eta);
        }
    }
    Ok(mu)
}

/// Percentile cluster bootstrap of the fixed effects (base design then
/// augmentation columns), with every replicate warm-started from the base
/// run's companion fits.
pub fn bootstrap_fixed_effects(
    ds: &GroupedDataset,
    cfg: &EstimatorConfig,
    base_cache: &FitCache,
    opts: &BootstrapOptions,
    rng: &mut ChaCha8Rng,
) -> Result<BootstrapCi> {
    cluster_bootstrap(ds, opts, rng, |rds| {
        let mut cache = FitCache::default();
        let fit = fit_estimator_warm(rds, cfg, &mut cache, Some(base_cache))?;
        Ok(fit.fixed_all())
    })
}
