//! Exponential-family distributions with their canonical links.
//!
//! Only the canonical pairings are supported: Gaussian/identity,
//! Bernoulli/logit, Poisson/log. The canonical choice makes the working
//! weight equal to the conditional variance `v(mu)` and keeps the
//! observation-level score simply `(y - mu) / s(theta)`, which every
//! estimator in this crate relies on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Distribution of the outcome given the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// Link function; one canonical link per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Bernoulli => Link::Logit,
            Family::Poisson => Link::Log,
        }
    }

    /// Link h(mu), mapping the mean to the linear predictor.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            // ln(mu) - ln(1 - mu), with ln_1p keeping precision near mu = 0.
            Family::Bernoulli => mu.ln() - (-mu).ln_1p(),
            Family::Poisson => mu.ln(),
        }
    }

    /// Inverse link h^{-1}(eta). The logistic branch form never overflows,
    /// so |eta| > 700 maps cleanly onto the limits 0 and 1.
    pub fn link_inverse(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Bernoulli => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Family::Poisson => eta.exp(),
        }
    }

    /// Link derivative h'(mu).
    pub fn link_deriv(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => 1.0 / (mu * (1.0 - mu)),
            Family::Poisson => 1.0 / mu,
        }
    }

    /// Conditional variance function v(mu).
    pub fn variance_fn(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    /// Dispersion s(theta): sigma^2 for Gaussian, 1 otherwise.
    pub fn dispersion(self, theta: f64) -> f64 {
        match self {
            Family::Gaussian => theta,
            Family::Bernoulli | Family::Poisson => 1.0,
        }
    }

    /// Whether the family carries a free dispersion parameter.
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Log-density of one observation at linear predictor `eta`,
    /// including normalizing constants.
    pub fn loglik_obs(self, y: f64, eta: f64, theta: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let r = y - eta;
                -0.5 * (r * r / theta + (2.0 * std::f64::consts::PI * theta).ln())
            }
            Family::Bernoulli => y * eta - softplus(eta),
            Family::Poisson => y * eta - eta.exp() - statrs::function::gamma::ln_gamma(y + 1.0),
        }
    }

    /// Score with respect to eta: (y - mu) / s(theta) for canonical links.
    pub fn score_eta(self, y: f64, mu: f64, theta: f64) -> f64 {
        (y - mu) / self.dispersion(theta)
    }

    /// Negative second derivative of the log-likelihood in eta:
    /// v(mu) / s(theta) for canonical links.
    pub fn weight_eta(self, mu: f64, theta: f64) -> f64 {
        self.variance_fn(mu) / self.dispersion(theta)
    }

    /// Validate that `y` lies in the family's support.
    pub fn check_support(self, y: f64) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Support { family: self.name(), detail })
        };
        if !y.is_finite() {
            return fail(format!("non-finite outcome {y}"));
        }
        match self {
            Family::Gaussian => Ok(()),
            Family::Bernoulli => {
                if y == 0.0 || y == 1.0 { Ok(()) } else { fail(format!("outcome {y} not in {{0, 1}}")) }
            }
            Family::Poisson => {
                if y >= 0.0 && y.fract() == 0.0 { Ok(()) } else { fail(format!("outcome {y} is not a nonnegative integer")) }
            }
        }
    }
}
