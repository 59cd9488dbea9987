use std::path::Path;

use d2d_core::dynamics::{BackgroundConfig, Behavior, Hyper, SmithParams};
use d2d_core::experiments::{
    AnonymizedConfig, FunnelConfig, HierRecoveryConfig, MisspecConfig, RecoveryConfig, SbcConfig,
};
use d2d_core::inference::PredictiveConfig;
use d2d_core::model::{Parameterization, PriorSpec, RhoMode};
use d2d_core::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub predict: PredictConfig,
    pub compare: CompareConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub behavior: Behavior,
    pub hyper: Hyper,
    pub smith: SmithParams,
    pub background: BackgroundConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            behavior: Behavior {
                eta: 0.3,
                theta: 0.5,
                rho: 0.1,
            },
            hyper: Hyper {
                mu_eta: -1.5,
                sigma_eta: 0.5,
                mu_theta: 0.0,
                sigma_theta: 0.5,
                mu_rho: -2.0,
                sigma_rho: 1.0,
            },
            smith: SmithParams::default(),
            background: BackgroundConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub sampler: SamplerConfig,
    pub priors: PriorSpec,
    pub parameterization: Parameterization,
    pub rho: RhoMode,
    /// HDI mass.
    pub alpha: f64,
    pub max_rhat: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            sampler: SamplerConfig::default(),
            priors: PriorSpec::default(),
            parameterization: Parameterization::NonCentered,
            rho: RhoMode::Estimated,
            alpha: 0.95,
            max_rhat: 1.05,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    #[serde(flatten)]
    pub predictive: PredictiveConfig,
    /// Non-travel probability for draws without a `rho` column.
    pub fixed_rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastScale {
    /// `logit(a) - logit(b)` for parameters in (0, 1).
    #[default]
    Logit,
    /// `a - b`
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub param: String,
    pub rope: (f64, f64),
    pub scale: ContrastScale,
    pub alpha: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            param: "eta".into(),
            rope: (-0.1, 0.1),
            scale: ContrastScale::Logit,
            alpha: 0.95,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pooled_recovery: RecoveryConfig,
    pub hier_recovery: HierRecoveryConfig,
    pub sbc: SbcConfig,
    pub funnel: FunnelConfig,
    pub anonymized: AnonymizedConfig,
    pub misspecification: MisspecConfig,
}

/// Parsed configuration and the SHA-256 of its canonical JSON.
pub fn load(path: Option<&Path>) -> Result<(Config, String), CliError> {
    let config: Config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    let canonical = serde_json::to_vec(&config).expect("config serializes");
    Ok((config, hex::encode(Sha256::digest(&canonical))))
}
