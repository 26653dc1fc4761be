//! Estimation for grouped/clustered GLMs: fixed-effect, regularized
//! fixed-effect, and random-intercept maximum-likelihood fits, with
//! cluster-robust and bootstrap inference and a simulation harness for
//! comparing the estimators under misspecified group structure.
//!
//! Module map:
//! - [`family`]: exponential-family log-likelihoods with canonical links.
//! - [`data`]: grouped design matrices, CSV ingestion, covariate
//!   augmentation (group means / within-group projections).
//! - [`quad`]: Gauss–Hermite rules.
//! - [`optim`]: dense quasi-Newton minimizer and finite differences.
//! - [`irls`]: penalized iteratively reweighted least squares with a
//!   block-arrowhead solver; fixed-effect and ridge-penalized fits.
//! - [`mlm`]: maximum marginal likelihood via adaptive quadrature.
//! - [`inference`]: cluster-robust sandwich covariance and the cluster
//!   bootstrap.
//! - [`estimators`]: one entry point dispatching over the estimator menu.
//! - [`sim`]: data-generating processes and the replication harness.

pub mod data;
pub mod error;
pub mod estimators;
pub mod family;
pub mod inference;
pub mod irls;
pub mod mlm;
pub mod optim;
pub mod quad;
pub mod rng;
pub mod sim;

pub use data::{AugmentScheme, GroupedDataset, ZSpec};
pub use error::{Error, Result};
pub use family::Family;
pub use mlm::QuadratureSpec;

use serde::{Deserialize, Serialize};

/// The estimator menu.
///
/// - `PooledGlm`: ignores grouping entirely.
/// - `RiMlm`: random intercept, integrated out by maximum likelihood.
/// - `GroupFe`: per-group fixed effects (first group pinned to zero).
/// - `RegFe`: ridge-penalized group effects at a plug-in variance.
/// - `BcRi` / `BcRegFe`: the same likelihoods after augmenting the design
///   with group means of the covariates, which absorbs group-level
///   confounding the way a within transformation would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    PooledGlm,
    RiMlm,
    GroupFe,
    RegFe,
    BcRi,
    BcRegFe,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::PooledGlm,
        EstimatorKind::RiMlm,
        EstimatorKind::GroupFe,
        EstimatorKind::RegFe,
        EstimatorKind::BcRi,
        EstimatorKind::BcRegFe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::PooledGlm => "pooled-glm",
            EstimatorKind::RiMlm => "ri-mlm",
            EstimatorKind::GroupFe => "group-fe",
            EstimatorKind::RegFe => "reg-fe",
            EstimatorKind::BcRi => "bc-ri",
            EstimatorKind::BcRegFe => "bc-reg-fe",
        }
    }

    /// Estimators whose design is augmented with group-mean covariates.
    pub fn augmented(&self) -> bool {
        matches!(self, EstimatorKind::BcRi | EstimatorKind::BcRegFe)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown estimator '{s}'; expected one of: {}",
                    EstimatorKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
