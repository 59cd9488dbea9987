use serde::{Deserialize, Serialize};

use super::log_logistic_jacobian;
use crate::dynamics::{logistic, logit};
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior family on a constrained parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    /// `logit(x) ~ Normal(mu, sigma)` on (0,1).
    LogitNormal { mu: f64, sigma: f64 },
    /// `log(x) ~ Normal(mu, sigma)` on (0,inf).
    LogNormal { mu: f64, sigma: f64 },
    /// `x ~ Normal(mu, sigma)` on the real line.
    Normal { mu: f64, sigma: f64 },
    /// `|Normal(0, sigma)|` on (0,inf).
    HalfNormal { sigma: f64 },
    /// Improper, flat on the sampler's unconstrained scale.
    Flat,
}

/// How a coordinate maps from the unconstrained to the constrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transform {
    Logistic,
    Exp,
    Identity,
}

impl Transform {
    pub(crate) fn forward(self, u: f64) -> f64 {
        match self {
            Transform::Logistic => logistic(u),
            Transform::Exp => u.exp(),
            Transform::Identity => u,
        }
    }

    pub(crate) fn inverse(self, x: f64) -> f64 {
        match self {
            Transform::Logistic => logit(x),
            Transform::Exp => x.ln(),
            Transform::Identity => x,
        }
    }

    /// `log |dx/du|`.
    pub(crate) fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Logistic => log_logistic_jacobian(u),
            Transform::Exp => u,
            Transform::Identity => 0.0,
        }
    }
}

fn normal_lpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let scale = match *self {
            Prior::LogitNormal { mu, sigma } | Prior::LogNormal { mu, sigma } | Prior::Normal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(Error::param("prior location must be finite"));
                }
                sigma
            }
            Prior::HalfNormal { sigma } => sigma,
            Prior::Flat => return Ok(()),
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(format!("prior scale must be positive, got {scale}")));
        }
        Ok(())
    }

    pub(crate) fn supports(&self, t: Transform) -> bool {
        matches!(
            (self, t),
            (Prior::Flat, _)
                | (Prior::LogitNormal { .. }, Transform::Logistic)
                | (Prior::LogNormal { .. }, Transform::Exp)
                | (Prior::HalfNormal { .. }, Transform::Exp)
                | (Prior::Normal { .. }, Transform::Identity)
        )
    }

    /// Log density at a constrained value.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::LogitNormal { mu, sigma } => {
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                normal_lpdf(logit(x), mu, sigma) - x.ln() - (1.0 - x).ln()
            }
            Prior::LogNormal { mu, sigma } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                normal_lpdf(x.ln(), mu, sigma) - x.ln()
            }
            Prior::Normal { mu, sigma } => normal_lpdf(x, mu, sigma),
            Prior::HalfNormal { sigma } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                std::f64::consts::LN_2 + normal_lpdf(x, 0.0, sigma)
            }
            Prior::Flat => 0.0,
        }
    }

    /// Prior plus log-Jacobian on the unconstrained scale, with its derivative.
    pub(crate) fn unconstrained_term(&self, t: Transform, u: f64) -> (f64, f64) {
        match *self {
            Prior::LogitNormal { mu, sigma } | Prior::LogNormal { mu, sigma } | Prior::Normal { mu, sigma } => {
                (normal_lpdf(u, mu, sigma), -(u - mu) / (sigma * sigma))
            }
            Prior::HalfNormal { sigma } => {
                let x = u.exp();
                (
                    std::f64::consts::LN_2 + normal_lpdf(x, 0.0, sigma) + u,
                    1.0 - x * x / (sigma * sigma),
                )
            }
            Prior::Flat => {
                let _ = t;
                (0.0, 0.0)
            }
        }
    }
}

/// Priors for every parameter the model may estimate. Pooled fits read
/// `eta`, `theta`, `rho`; hierarchical fits read the six hyperpriors. Both
/// read `delta` when initial-value offsets are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub eta: Prior,
    pub theta: Prior,
    pub rho: Prior,
    pub delta: Prior,
    pub mu_eta: Prior,
    pub sigma_eta: Prior,
    pub mu_theta: Prior,
    pub sigma_theta: Prior,
    pub mu_rho: Prior,
    pub sigma_rho: Prior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            eta: Prior::LogitNormal { mu: 0.0, sigma: 1.5 },
            theta: Prior::LogNormal { mu: 0.0, sigma: 1.0 },
            rho: Prior::LogitNormal { mu: -2.0, sigma: 1.0 },
            delta: Prior::Normal { mu: 0.0, sigma: 5.0 },
            mu_eta: Prior::Normal { mu: -1.5, sigma: 0.5 },
            sigma_eta: Prior::HalfNormal { sigma: 0.5 },
            mu_theta: Prior::Normal { mu: 0.0, sigma: 0.5 },
            sigma_theta: Prior::HalfNormal { sigma: 0.5 },
            mu_rho: Prior::Normal { mu: -2.0, sigma: 1.0 },
            sigma_rho: Prior::HalfNormal { sigma: 1.0 },
        }
    }
}

impl PriorSpec {
    /// Flat on every unconstrained coordinate.
    pub fn flat() -> Self {
        PriorSpec {
            eta: Prior::Flat,
            theta: Prior::Flat,
            rho: Prior::Flat,
            delta: Prior::Flat,
            mu_eta: Prior::Flat,
            sigma_eta: Prior::Flat,
            mu_theta: Prior::Flat,
            sigma_theta: Prior::Flat,
            mu_rho: Prior::Flat,
            sigma_rho: Prior::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("eta", self.eta, Transform::Logistic),
            ("theta", self.theta, Transform::Exp),
            ("rho", self.rho, Transform::Logistic),
            ("delta", self.delta, Transform::Identity),
            ("mu_eta", self.mu_eta, Transform::Identity),
            ("sigma_eta", self.sigma_eta, Transform::Exp),
            ("mu_theta", self.mu_theta, Transform::Identity),
            ("sigma_theta", self.sigma_theta, Transform::Exp),
            ("mu_rho", self.mu_rho, Transform::Identity),
            ("sigma_rho", self.sigma_rho, Transform::Exp),
        ];
        for (name, prior, t) in checks {
            prior.validate()?;
            if !prior.supports(t) {
                return Err(Error::param(format!(
                    "prior {prior:?} does not match the support of {name}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(a + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn constrained_densities_integrate_to_one() {
        let p = Prior::LogitNormal { mu: -1.0, sigma: 0.8 };
        assert!((trapezoid(|x| p.log_density(x).exp(), 1e-9, 1.0 - 1e-9, 200_000) - 1.0).abs() < 1e-4);
        let p = Prior::LogNormal { mu: 0.0, sigma: 0.5 };
        assert!((trapezoid(|x| p.log_density(x).exp(), 1e-9, 30.0, 200_000) - 1.0).abs() < 1e-4);
        let p = Prior::HalfNormal { sigma: 0.5 };
        assert!((trapezoid(|x| p.log_density(x).exp(), 0.0, 6.0, 200_000) - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn unconstrained_term_is_density_plus_jacobian(u in -6.0f64..4.0) {
            let cases = [
                (Prior::LogitNormal { mu: 0.3, sigma: 1.5 }, Transform::Logistic),
                (Prior::LogNormal { mu: -0.2, sigma: 1.0 }, Transform::Exp),
                (Prior::HalfNormal { sigma: 0.7 }, Transform::Exp),
                (Prior::Normal { mu: 1.0, sigma: 5.0 }, Transform::Identity),
            ];
            for (p, t) in cases {
                let (val, grad) = p.unconstrained_term(t, u);
                let oracle = p.log_density(t.forward(u)) + t.log_jacobian(u);
                prop_assert!((val - oracle).abs() < 1e-9);
                let h = 1e-6;
                let fd = (p.unconstrained_term(t, u + h).0 - p.unconstrained_term(t, u - h).0) / (2.0 * h);
                prop_assert!((grad - fd).abs() < 1e-6 * grad.abs().max(1.0));
            }
        }

        #[test]
        fn transforms_round_trip(u in -8.0f64..8.0, x in 1e-6f64..(1.0 - 1e-6)) {
            for t in [Transform::Logistic, Transform::Exp, Transform::Identity] {
                let back = t.inverse(t.forward(u));
                prop_assert!((back - u).abs() < 1e-12 * u.abs().max(1.0));
                prop_assert!((t.forward(t.inverse(x)) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spec_defaults_and_validation() {
        PriorSpec::default().validate().unwrap();
        PriorSpec::flat().validate().unwrap();
        let bad = PriorSpec {
            theta: Prior::LogitNormal { mu: 0.0, sigma: 1.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PriorSpec {
            eta: Prior::LogitNormal { mu: 0.0, sigma: 0.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(Transform::Exp.log_jacobian(0.7), 0.7);
        assert_eq!(Transform::Logistic.forward(0.0), 0.5);
    }

    #[test]
    fn prior_spec_json_round_trip() {
        let spec = PriorSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"family\":\"logit_normal\""));
        let back: PriorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let partial: PriorSpec =
            serde_json::from_str(r#"{"eta":{"family":"logit_normal","mu":1.0,"sigma":2.0}}"#).unwrap();
        assert_eq!(partial.theta, spec.theta);
    }
}
