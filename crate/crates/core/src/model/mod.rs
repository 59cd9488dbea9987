//! Parameter spaces, priors, likelihoods and log-posteriors.
//!
//! Four observation regimes are supported: pooled or hierarchical behavior,
//! observed either as full trajectories or as anonymized daily counts.

mod likelihood;
mod pmd;
mod posterior;
mod prior;

pub use likelihood::{loglik_hier, loglik_hier_counts_approx, loglik_pooled, loglik_pooled_counts};
pub use pmd::{multinomial_moments, pmd_exact_pmf, pmd_moments, PMD_ENUMERATION_LIMIT};
pub use posterior::{
    Dataset, InitValues, ModelSpec, Observation, OdBlock, Parameterization, Posterior, Regime, RhoMode,
    UnconstrainedVector,
};
pub use prior::{Prior, PriorSpec};

use serde::{Deserialize, Serialize};

use crate::dynamics::{Behavior, Hyper};
use crate::error::{Error, Result};

/// Shared behavior of a pooled population plus optional initial-value
/// offsets `delta(j) = V1(j+1) - V1(1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledParams {
    pub eta: f64,
    pub theta: f64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

impl PooledParams {
    pub fn new(eta: f64, theta: f64, rho: f64) -> Self {
        PooledParams {
            eta,
            theta,
            rho,
            delta: None,
        }
    }

    pub fn with_delta(mut self, delta: Vec<f64>) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn behavior(&self) -> Behavior {
        Behavior {
            eta: self.eta,
            theta: self.theta,
            rho: self.rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.behavior().validate()?;
        if let Some(d) = &self.delta {
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::param("delta entries must be finite"));
            }
        }
        Ok(())
    }

    /// Initial values: `base` shifted by `(0, delta)` when offsets are present.
    pub fn initial_values(&self, base: &[f64]) -> Result<Vec<f64>> {
        initial_values(base, self.delta.as_deref())
    }
}

pub(crate) fn initial_values(base: &[f64], delta: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut v = base.to_vec();
    if let Some(d) = delta {
        if d.len() + 1 != base.len() {
            return Err(Error::dim(format!("{} offsets for {} routes", d.len(), base.len())));
        }
        for (vi, di) in v[1..].iter_mut().zip(d) {
            *vi += di;
        }
    }
    Ok(v)
}

/// Hyperparameters plus standardized per-commuter offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct HierParams {
    pub hyper: Hyper,
    pub z: Vec<[f64; 3]>,
}

impl HierParams {
    pub fn individuals(&self) -> Vec<Behavior> {
        self.z.iter().map(|&z| self.hyper.individual(z)).collect()
    }
}

/// `log(x (1 - x))` for `x = logistic(u)`, stable for large `|u|`.
pub(crate) fn log_logistic_jacobian(u: f64) -> f64 {
    -u.abs() - 2.0 * (-u.abs()).exp().ln_1p()
}
