//! Adaptive Hamiltonian Monte Carlo over unconstrained targets.

mod adapt;
pub mod diagnostics;
mod nuts;

pub use diagnostics::{ess, ks_uniform, rank_of_truth, split_rhat, Diagnostics, ParamDiagnostics};
pub use nuts::MAX_ENERGY_ERROR;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Posterior;
use crate::rng::{self, tag};
use adapt::{DualAveraging, MassAdaptation};
use nuts::{Integrator, Point};

/// Log density on an unconstrained space. Implementations must be safe to
/// call from several chains at once.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density at `x`, writing its gradient into `grad`. Non-finite
    /// values mark points outside the numerical domain.
    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn constrained_names(&self) -> Vec<String> {
        self.unconstrained_names()
    }

    fn unconstrained_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x[{i}]")).collect()
    }
}

impl Target for Posterior {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        Posterior::logp_and_grad(self, x, grad)
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        Posterior::constrain(self, x)
    }

    fn constrained_names(&self) -> Vec<String> {
        Posterior::constrained_names(self)
    }

    fn unconstrained_names(&self) -> Vec<String> {
        Posterior::unconstrained_names(self).to_vec()
    }
}

/// Closure-backed target, handy for tests and custom densities.
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> FnTarget<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnTarget { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            init_jitter: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 {
            return Err(Error::param("chains and draws must be positive"));
        }
        if self.warmup < 100 {
            return Err(Error::param(format!(
                "warmup must be at least 100, got {}",
                self.warmup
            )));
        }
        if !(self.target_accept > 0.5 && self.target_accept < 1.0) {
            return Err(Error::param(format!(
                "target_accept must lie in (0.5,1), got {}",
                self.target_accept
            )));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 12 {
            return Err(Error::param(format!(
                "max_tree_depth must lie in 1..=12, got {}",
                self.max_tree_depth
            )));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::param("init_jitter must be nonnegative"));
        }
        Ok(())
    }
}

/// Post-warmup draws of all chains, stored chain by chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub unconstrained_names: Vec<String>,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// `S x d` constrained draws.
    pub samples: Vec<Vec<f64>>,
    /// `S x d'` unconstrained draws; empty when loaded from a file.
    pub unconstrained: Vec<Vec<f64>>,
    pub chain_id: Vec<usize>,
    pub divergent: Vec<bool>,
    pub step_size: Vec<f64>,
    pub inv_mass: Vec<Vec<f64>>,
    pub warmup_divergences: Vec<usize>,
}

impl PosteriorDraws {
    /// Draws assembled from a table, as when reading a draws file. Rows must
    /// be grouped by chain with equal chain lengths.
    pub fn from_rows(
        names: Vec<String>,
        chain_id: Vec<usize>,
        divergent: Vec<bool>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("no draws"));
        }
        if chain_id.len() != samples.len() || divergent.len() != samples.len() {
            return Err(Error::dim("chain ids, flags and samples differ in length"));
        }
        if let Some(r) = samples.iter().position(|r| r.len() != names.len()) {
            return Err(Error::dim(format!("draw {r} has the wrong width")));
        }
        let mut chains = 0;
        let mut counts: Vec<usize> = Vec::new();
        for (i, &c) in chain_id.iter().enumerate() {
            if i == 0 || c != chain_id[i - 1] {
                if counts.len() != c {
                    return Err(Error::data(
                        "draws must be grouped by consecutive chain ids starting at 0",
                    ));
                }
                counts.push(0);
                chains += 1;
            }
            counts[c] += 1;
        }
        if counts.iter().any(|&n| n != counts[0]) {
            return Err(Error::data("chains have unequal lengths"));
        }
        Ok(PosteriorDraws {
            names,
            unconstrained_names: Vec::new(),
            chains,
            draws_per_chain: counts[0],
            samples,
            unconstrained: Vec::new(),
            chain_id,
            divergent,
            step_size: Vec::new(),
            inv_mass: Vec::new(),
            warmup_divergences: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|r| r[i]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        self.index_of(name)
            .map(|i| self.column(i))
            .ok_or_else(|| Error::data(format!("no parameter named '{name}'")))
    }

    /// Column `i` split by chain.
    pub fn by_chain(&self, i: usize) -> Vec<Vec<f64>> {
        self.samples
            .chunks(self.draws_per_chain)
            .map(|chunk| chunk.iter().map(|r| r[i]).collect())
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    /// Every `k`-th draw so that at most `max` remain, in storage order.
    pub fn thinned(&self, max: usize) -> Vec<&[f64]> {
        let step = self.samples.len().div_ceil(max.max(1)).max(1);
        self.samples.iter().step_by(step).map(Vec::as_slice).collect()
    }
}

struct ChainOutput {
    constrained: Vec<Vec<f64>>,
    unconstrained: Vec<Vec<f64>>,
    divergent: Vec<bool>,
    step_size: f64,
    inv_mass: Vec<f64>,
    warmup_divergences: usize,
}

const INIT_ATTEMPTS: usize = 100;

fn initial_point<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    rng: &mut crate::rng::StreamRng,
) -> Result<Point> {
    let dim = target.dim();
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..dim)
            .map(|_| config.init_jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = target.logp_and_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(Point {
                q,
                p: vec![0.0; dim],
                grad,
                logp,
            });
        }
    }
    Err(Error::Sampler(format!(
        "no finite log density after {INIT_ATTEMPTS} initialization attempts"
    )))
}

fn run_chain<T: Target + ?Sized>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = rng::stream(config.seed, &[tag::CHAIN, chain as u64]);
    let dim = target.dim();
    let mut current = initial_point(target, config, &mut rng)?;
    let mut integrator = Integrator {
        target,
        inv_mass: vec![1.0; dim],
        step_size: 1.0,
        max_depth: config.max_tree_depth,
    };
    integrator.init_step_size(&current, &mut rng).map_err(Error::Sampler)?;
    let mut dual = DualAveraging::new(config.target_accept);
    dual.restart(integrator.step_size);
    let mut mass = MassAdaptation::new(dim, config.warmup);
    let mut warmup_divergences = 0;

    for _ in 0..config.warmup {
        let (next, stats) = integrator.transition(&current, &mut rng);
        current = next;
        warmup_divergences += stats.divergent as usize;
        integrator.step_size = dual.learn(stats.accept);
        if let Some(var) = mass.observe(&current.q) {
            integrator.inv_mass = var;
            integrator.init_step_size(&current, &mut rng).map_err(Error::Sampler)?;
            dual.restart(integrator.step_size);
        }
    }
    if warmup_divergences == config.warmup {
        return Err(Error::Sampler(format!(
            "chain {chain}: every warmup transition diverged"
        )));
    }
    integrator.step_size = dual.final_step_size();

    let mut out = ChainOutput {
        constrained: Vec::with_capacity(config.draws),
        unconstrained: Vec::with_capacity(config.draws),
        divergent: Vec::with_capacity(config.draws),
        step_size: integrator.step_size,
        inv_mass: integrator.inv_mass.clone(),
        warmup_divergences,
    };
    for _ in 0..config.draws {
        let (next, stats) = integrator.transition(&current, &mut rng);
        current = next;
        out.constrained.push(target.constrain(&current.q));
        out.unconstrained.push(current.q.clone());
        out.divergent.push(stats.divergent);
    }
    Ok(out)
}

/// Runs `config.chains` adaptive NUTS chains in parallel and merges them in
/// chain order.
pub fn nuts_sample<T: Target + ?Sized>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    if target.dim() == 0 {
        return Err(Error::param("target has no dimensions"));
    }
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c))
        .collect();
    let mut draws = PosteriorDraws {
        names: target.constrained_names(),
        unconstrained_names: target.unconstrained_names(),
        chains: config.chains,
        draws_per_chain: config.draws,
        samples: Vec::with_capacity(config.chains * config.draws),
        unconstrained: Vec::with_capacity(config.chains * config.draws),
        chain_id: Vec::with_capacity(config.chains * config.draws),
        divergent: Vec::with_capacity(config.chains * config.draws),
        step_size: Vec::with_capacity(config.chains),
        inv_mass: Vec::with_capacity(config.chains),
        warmup_divergences: Vec::with_capacity(config.chains),
    };
    for (c, out) in outputs.into_iter().enumerate() {
        let out = out?;
        draws.chain_id.extend(std::iter::repeat_n(c, out.constrained.len()));
        draws.samples.extend(out.constrained);
        draws.unconstrained.extend(out.unconstrained);
        draws.divergent.extend(out.divergent);
        draws.step_size.push(out.step_size);
        draws.inv_mass.push(out.inv_mass);
        draws.warmup_divergences.push(out.warmup_divergences);
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(dim: usize) -> FnTarget<impl Fn(&[f64], &mut [f64]) -> f64 + Sync> {
        FnTarget::new(dim, |x: &[f64], g: &mut [f64]| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        })
    }

    #[test]
    fn standard_normal_moments() {
        let draws = nuts_sample(
            &std_normal(1),
            &SamplerConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(draws.len(), 4000);
        let x = draws.column(0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let e = ess(&draws.by_chain(0)).unwrap();
        assert!(mean.abs() < 4.0 / e.sqrt(), "mean {mean}, ess {e}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert_eq!(draws.divergences(), 0);
    }

    #[test]
    fn conjugate_normal_posterior_mean() {
        // y_i ~ N(mu, 1), mu ~ N(0, 10^2): posterior N(sum y / (n + 0.01), 1 / (n + 0.01)).
        let y = [1.2, 0.7, 2.1, 1.6, 0.9];
        let prec = y.len() as f64 + 0.01;
        let post_mean = y.iter().sum::<f64>() / prec;
        let target = FnTarget::new(1, move |x: &[f64], g: &mut [f64]| {
            let mu = x[0];
            g[0] = y.iter().map(|yi| yi - mu).sum::<f64>() - mu / 100.0;
            -0.5 * y.iter().map(|yi| (yi - mu).powi(2)).sum::<f64>() - mu * mu / 200.0
        });
        let draws = nuts_sample(
            &target,
            &SamplerConfig {
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let x = draws.column(0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let se = (1.0 / prec).sqrt() / ess(&draws.by_chain(0)).unwrap().sqrt();
        assert!((mean - post_mean).abs() < 3.0 * se, "{mean} vs {post_mean}");
    }

    #[test]
    fn correlated_gaussian_covariance() {
        // Covariance [[1, 0.8], [0.8, 1]].
        let det = 1.0 - 0.64;
        let target = FnTarget::new(2, move |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -(a - 0.8 * b) / det;
            g[1] = -(b - 0.8 * a) / det;
            -0.5 * (a * a - 1.6 * a * b + b * b) / det
        });
        let draws = nuts_sample(
            &target,
            &SamplerConfig {
                seed: 1,
                draws: 2000,
                ..Default::default()
            },
        )
        .unwrap();
        let n = draws.len() as f64;
        let (a, b) = (draws.column(0), draws.column(1));
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let caa = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let cbb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cab = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let err = ((caa - 1.0).powi(2) + (cbb - 1.0).powi(2) + 2.0 * (cab - 0.8).powi(2)).sqrt();
        let norm = (1.0f64 + 1.0 + 2.0 * 0.64).sqrt();
        assert!(err / norm < 0.15, "relative Frobenius error {}", err / norm);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SamplerConfig {
            seed: 9,
            warmup: 100,
            draws: 50,
            chains: 2,
            ..Default::default()
        };
        let a = nuts_sample(&std_normal(3), &cfg).unwrap();
        let b = nuts_sample(&std_normal(3), &cfg).unwrap();
        assert_eq!(a, b);
        let c = nuts_sample(&std_normal(3), &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn failures_are_reported() {
        let nowhere = FnTarget::new(1, |_: &[f64], _: &mut [f64]| f64::NEG_INFINITY);
        assert!(matches!(
            nuts_sample(&nowhere, &SamplerConfig::default()),
            Err(Error::Sampler(_))
        ));
        assert!(SamplerConfig {
            warmup: 50,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            target_accept: 0.4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            max_tree_depth: 13,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn draws_from_rows_validation() {
        let names = vec!["a".to_string()];
        let ok =
            PosteriorDraws::from_rows(names.clone(), vec![0, 0, 1, 1], vec![false; 4], vec![vec![1.0]; 4]).unwrap();
        assert_eq!((ok.chains, ok.draws_per_chain), (2, 2));
        assert!(PosteriorDraws::from_rows(names.clone(), vec![0, 1, 1], vec![false; 3], vec![vec![1.0]; 3]).is_err());
        assert!(PosteriorDraws::from_rows(names, vec![1, 1], vec![false; 2], vec![vec![1.0]; 2]).is_err());
    }
}
