use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::likelihood::{
    check_costs, choice_weights, count_weights, log_prob_path, mixture_log_probs, multinomial_constant, weighted_loglik,
};
use super::prior::{Prior, PriorSpec, Transform};
use super::{initial_values, PooledParams};
use crate::dynamics::{logistic, Behavior, ChoiceTrajectory, CountSeries, Hyper};
use crate::error::{Error, Result};
use crate::network::CostSequence;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Behavioral model crossed with observability.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    PooledComplete,
    PooledCounts,
    HierComplete,
    HierCounts,
}

impl Regime {
    pub fn is_pooled(self) -> bool {
        matches!(self, Regime::PooledComplete | Regime::PooledCounts)
    }

    pub fn uses_counts(self) -> bool {
        matches!(self, Regime::PooledCounts | Regime::HierCounts)
    }

    pub fn from_parts(hierarchical: bool, counts: bool) -> Self {
        match (hierarchical, counts) {
            (false, false) => Regime::PooledComplete,
            (false, true) => Regime::PooledCounts,
            (true, false) => Regime::HierComplete,
            (true, true) => Regime::HierCounts,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::PooledComplete => "pooled-complete",
            Regime::PooledCounts => "pooled-counts",
            Regime::HierComplete => "hier-complete",
            Regime::HierCounts => "hier-counts",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled-complete" => Ok(Regime::PooledComplete),
            "pooled-counts" => Ok(Regime::PooledCounts),
            "hier-complete" => Ok(Regime::HierComplete),
            "hier-counts" => Ok(Regime::HierCounts),
            other => Err(Error::param(format!("unknown regime '{other}'"))),
        }
    }
}

/// How day-1 perceived values are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitValues {
    /// Use each block's `v1` as given (zeros or free-flow times).
    #[default]
    Fixed,
    /// Estimate offsets `delta` relative to route 1 on top of `v1`.
    EndogenousDelta,
}

/// Coordinates used for individual parameters in hierarchical fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// `logit eta_n = mu + sigma z_n` with standard-normal `z_n`.
    #[default]
    NonCentered,
    /// Individual logits sampled directly with a `Normal(mu, sigma)` prior.
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMode {
    #[default]
    Estimated,
    /// Non-travel probability held at a known value (0 for fixed demand).
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub regime: Regime,
    pub init: InitValues,
    pub parameterization: Parameterization,
    pub rho: RhoMode,
    pub priors: PriorSpec,
}

impl ModelSpec {
    pub fn new(regime: Regime) -> Self {
        ModelSpec {
            regime,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Trajectory(ChoiceTrajectory),
    Counts(CountSeries),
}

impl Observation {
    pub fn routes(&self) -> usize {
        match self {
            Observation::Trajectory(t) => t.routes(),
            Observation::Counts(c) => c.routes(),
        }
    }

    pub fn days(&self) -> usize {
        match self {
            Observation::Trajectory(t) => t.days(),
            Observation::Counts(c) => c.days(),
        }
    }

    pub fn commuters(&self) -> usize {
        match self {
            Observation::Trajectory(t) => t.commuters(),
            Observation::Counts(c) => c.population() as usize,
        }
    }
}

/// Observations of one OD pair with its cost history and base initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct OdBlock {
    pub costs: CostSequence,
    pub obs: Observation,
    pub v1: Vec<f64>,
}

/// Independent OD blocks sharing behavioral parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub blocks: Vec<OdBlock>,
}

impl Dataset {
    pub fn single(costs: CostSequence, obs: Observation, v1: Vec<f64>) -> Self {
        Dataset {
            blocks: vec![OdBlock { costs, obs, v1 }],
        }
    }
}

/// Point on the sampler's scale with coordinate names.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    pub log_jacobian: f64,
}

struct BlockCache {
    weights: Vec<f64>,
    commuter_weights: Vec<Vec<f64>>,
    constant: f64,
    delta_start: usize,
    first_commuter: usize,
    commuters: usize,
}

/// Log-posterior of one model over one dataset, on the unconstrained scale.
pub struct Posterior {
    data: Dataset,
    spec: ModelSpec,
    cache: Vec<BlockCache>,
    transforms: Vec<Transform>,
    names: Vec<String>,
    generated: Vec<String>,
    dim: usize,
    indiv_start: usize,
    stride: usize,
}

fn normal_term(x: f64) -> (f64, f64) {
    (-0.5 * x * x - LN_SQRT_2PI, -x)
}

impl Posterior {
    pub fn new(data: Dataset, spec: ModelSpec) -> Result<Self> {
        spec.priors.validate()?;
        if let RhoMode::Fixed(r) = spec.rho {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::param(format!("fixed rho must lie in [0,1), got {r}")));
            }
        }
        if data.blocks.is_empty() {
            return Err(Error::data("dataset has no OD blocks"));
        }
        let estimate_rho = spec.rho == RhoMode::Estimated;
        let pooled = spec.regime.is_pooled();
        let mut names: Vec<String> = Vec::new();
        let mut transforms = Vec::new();
        let mut push = |n: &str, t: Transform, names: &mut Vec<String>| {
            names.push(n.to_string());
            transforms.push(t);
        };
        if pooled {
            push("eta", Transform::Logistic, &mut names);
            push("theta", Transform::Exp, &mut names);
            if estimate_rho {
                push("rho", Transform::Logistic, &mut names);
            }
        } else {
            push("mu_eta", Transform::Identity, &mut names);
            push("sigma_eta", Transform::Exp, &mut names);
            push("mu_theta", Transform::Identity, &mut names);
            push("sigma_theta", Transform::Exp, &mut names);
            if estimate_rho {
                push("mu_rho", Transform::Identity, &mut names);
                push("sigma_rho", Transform::Exp, &mut names);
            }
        }

        let multi = data.blocks.len() > 1;
        let mut cache = Vec::with_capacity(data.blocks.len());
        let mut first_commuter = 0;
        for (bi, block) in data.blocks.iter().enumerate() {
            let m = block.obs.routes();
            check_costs(m, block.obs.days(), &block.costs)?;
            if block.v1.len() != m || block.v1.iter().any(|v| !v.is_finite()) {
                return Err(Error::dim(format!(
                    "block {bi}: initial values must be {m} finite numbers"
                )));
            }
            let delta_start = names.len();
            if spec.init == InitValues::EndogenousDelta {
                for j in 2..=m {
                    let name = if multi {
                        format!("delta[{}][{j}]", block.costs.od_id)
                    } else {
                        format!("delta[{j}]")
                    };
                    push(&name, Transform::Identity, &mut names);
                }
            }
            let (weights, commuter_weights, constant) = match (&block.obs, spec.regime) {
                (Observation::Trajectory(t), Regime::PooledComplete) => {
                    (count_weights(&crate::dynamics::anonymize(t)), Vec::new(), 0.0)
                }
                (Observation::Counts(c), Regime::PooledCounts) => {
                    (count_weights(c), Vec::new(), multinomial_constant(c))
                }
                (Observation::Trajectory(t), Regime::HierComplete) => (
                    Vec::new(),
                    (0..t.commuters()).map(|n| choice_weights(t.commuter(n), m)).collect(),
                    0.0,
                ),
                (Observation::Counts(c), Regime::HierCounts) => (count_weights(c), Vec::new(), multinomial_constant(c)),
                (obs, regime) => {
                    let kind = match obs {
                        Observation::Trajectory(_) => "a trajectory",
                        Observation::Counts(_) => "counts",
                    };
                    return Err(Error::data(format!("regime {regime} cannot use {kind} (block {bi})")));
                }
            };
            if !estimate_rho && spec.rho == RhoMode::Fixed(0.0) {
                let home = if weights.is_empty() {
                    commuter_weights
                        .iter()
                        .any(|w| w.iter().step_by(m + 1).any(|&x| x != 0.0))
                } else {
                    weights.iter().step_by(m + 1).any(|&x| x != 0.0)
                };
                if home {
                    return Err(Error::data("non-travel observed but rho is fixed at 0"));
                }
            }
            let commuters = block.obs.commuters();
            cache.push(BlockCache {
                weights,
                commuter_weights,
                constant,
                delta_start,
                first_commuter,
                commuters,
            });
            first_commuter += commuters;
        }

        let indiv_start = names.len();
        let stride = if estimate_rho { 3 } else { 2 };
        let mut generated = Vec::new();
        if !pooled {
            let labels: &[&str] = if estimate_rho {
                &["eta", "theta", "rho"]
            } else {
                &["eta", "theta"]
            };
            let centered = spec.parameterization == Parameterization::Centered;
            for n in 1..=first_commuter {
                for l in labels {
                    if centered {
                        let prefix = if *l == "theta" { "log" } else { "logit" };
                        push(&format!("{prefix}_{l}[{n}]"), Transform::Identity, &mut names);
                    } else {
                        push(&format!("z_{l}[{n}]"), Transform::Identity, &mut names);
                    }
                }
            }
            for n in 1..=first_commuter {
                for l in labels {
                    generated.push(format!("{l}[{n}]"));
                }
            }
        }
        let dim = names.len();
        Ok(Posterior {
            data,
            spec,
            cache,
            transforms,
            names,
            generated,
            dim,
            indiv_start,
            stride,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of commuters across blocks.
    pub fn commuters(&self) -> usize {
        self.cache.iter().map(|c| c.commuters).sum()
    }

    pub fn unconstrained_names(&self) -> &[String] {
        &self.names
    }

    /// Names of [`Posterior::constrain`]'s output: the parameters, then the
    /// individual parameters implied by a hierarchical fit.
    pub fn constrained_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .names
            .iter()
            .map(|n| {
                n.strip_prefix("logit_")
                    .or_else(|| n.strip_prefix("log_"))
                    .map(|s| format!("u_{s}"))
                    .unwrap_or_else(|| n.clone())
            })
            .collect();
        out.extend(self.generated.iter().cloned());
        out
    }

    fn check_point(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::dim(format!(
                "point has {} coordinates, model has {}",
                u.len(),
                self.dim
            )));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("unconstrained point must be finite"));
        }
        Ok(())
    }

    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        self.transforms.iter().zip(u).map(|(t, &x)| t.log_jacobian(x)).sum()
    }

    /// Maps unconstrained coordinates to the constrained scale and appends the
    /// individual parameters of hierarchical fits.
    pub fn constrain(&self, u: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.transforms.iter().zip(u).map(|(t, &x)| t.forward(x)).collect();
        if !self.spec.regime.is_pooled() {
            for b in self.individuals(u) {
                out.push(b.eta);
                out.push(b.theta);
                if self.stride == 3 {
                    out.push(b.rho);
                }
            }
        }
        out
    }

    /// Inverse of [`Posterior::constrain`] on the first `dim` entries.
    pub fn unconstrain(&self, constrained: &[f64]) -> Result<UnconstrainedVector> {
        if constrained.len() < self.dim {
            return Err(Error::dim(format!(
                "need {} constrained values, got {}",
                self.dim,
                constrained.len()
            )));
        }
        let values: Vec<f64> = self
            .transforms
            .iter()
            .zip(constrained)
            .map(|(t, &x)| t.inverse(x))
            .collect();
        self.check_point(&values)?;
        Ok(UnconstrainedVector {
            log_jacobian: self.log_jacobian(&values),
            values,
            names: self.names.clone(),
        })
    }

    fn rho_of(&self, u: f64) -> f64 {
        match self.spec.rho {
            RhoMode::Estimated => logistic(u),
            RhoMode::Fixed(r) => r,
        }
    }

    /// Shared behavior of a pooled fit.
    pub fn pooled_behavior(&self, u: &[f64]) -> Behavior {
        Behavior {
            eta: logistic(u[0]),
            theta: u[1].exp(),
            rho: self.rho_of(if self.stride == 3 { u[2] } else { 0.0 }),
        }
    }

    /// Pooled parameters with the offsets of block `block`, if estimated.
    pub fn pooled_params(&self, u: &[f64], block: usize) -> PooledParams {
        let b = self.pooled_behavior(u);
        PooledParams {
            eta: b.eta,
            theta: b.theta,
            rho: b.rho,
            delta: self.delta(u, block).map(<[f64]>::to_vec),
        }
    }

    pub fn hyper(&self, u: &[f64]) -> Option<Hyper> {
        if self.spec.regime.is_pooled() {
            return None;
        }
        let (mu_rho, sigma_rho) = if self.stride == 3 {
            (u[4], u[5].exp())
        } else {
            (f64::NAN, f64::NAN)
        };
        Some(Hyper {
            mu_eta: u[0],
            sigma_eta: u[1].exp(),
            mu_theta: u[2],
            sigma_theta: u[3].exp(),
            mu_rho,
            sigma_rho,
        })
    }

    fn individual_logits(&self, u: &[f64], k: usize) -> [f64; 3] {
        let base = self.indiv_start + k * self.stride;
        let mut out = [0.0; 3];
        for j in 0..self.stride {
            out[j] = match self.spec.parameterization {
                Parameterization::NonCentered => u[2 * j] + u[2 * j + 1].exp() * u[base + j],
                Parameterization::Centered => u[base + j],
            };
        }
        out
    }

    /// Individual parameters of every commuter in a hierarchical fit.
    pub fn individuals(&self, u: &[f64]) -> Vec<Behavior> {
        (0..self.commuters())
            .map(|k| {
                let l = self.individual_logits(u, k);
                Behavior {
                    eta: logistic(l[0]),
                    theta: l[1].exp(),
                    rho: self.rho_of(l[2]),
                }
            })
            .collect()
    }

    fn delta<'a>(&self, u: &'a [f64], block: usize) -> Option<&'a [f64]> {
        (self.spec.init == InitValues::EndogenousDelta).then(|| {
            let start = self.cache[block].delta_start;
            &u[start..start + self.data.blocks[block].obs.routes() - 1]
        })
    }

    pub fn log_posterior(&self, u: &[f64]) -> Result<f64> {
        self.check_point(u)?;
        Ok(self.evaluate(u, None))
    }

    pub fn grad_log_posterior(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_point(u)?;
        let mut g = vec![0.0; self.dim];
        self.evaluate(u, Some(&mut g));
        Ok(g)
    }

    /// Log-likelihood alone, excluding priors and Jacobians.
    pub fn log_likelihood(&self, u: &[f64]) -> Result<f64> {
        self.check_point(u)?;
        Ok(self.likelihood_part(u, None))
    }

    /// Log-posterior and its gradient; `-inf` outside the numerical domain.
    pub fn logp_and_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let lp = self.evaluate(u, Some(grad));
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let mut lp = self.prior_part(u, grad.as_deref_mut());
        lp += self.likelihood_part(u, grad);
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn prior_part(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let p = &self.spec.priors;
        let mut lp = 0.0;
        let mut add = |i: usize, prior: &Prior, grad: &mut Option<&mut [f64]>| {
            let (v, d) = prior.unconstrained_term(self.transforms[i], u[i]);
            lp += v;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += d;
            }
        };
        let heads: Vec<&Prior> = if self.spec.regime.is_pooled() {
            vec![&p.eta, &p.theta, &p.rho]
        } else {
            vec![
                &p.mu_eta,
                &p.sigma_eta,
                &p.mu_theta,
                &p.sigma_theta,
                &p.mu_rho,
                &p.sigma_rho,
            ]
        };
        let n_heads = if self.spec.regime.is_pooled() {
            self.stride
        } else {
            2 * self.stride
        };
        for (i, prior) in heads.into_iter().take(n_heads).enumerate() {
            add(i, prior, &mut grad);
        }
        for (bi, c) in self.cache.iter().enumerate() {
            if self.spec.init == InitValues::EndogenousDelta {
                for j in 0..self.data.blocks[bi].obs.routes() - 1 {
                    add(c.delta_start + j, &p.delta, &mut grad);
                }
            }
        }
        if !self.spec.regime.is_pooled() {
            for k in 0..self.commuters() {
                let base = self.indiv_start + k * self.stride;
                for j in 0..self.stride {
                    match self.spec.parameterization {
                        Parameterization::NonCentered => {
                            let (v, d) = normal_term(u[base + j]);
                            lp += v;
                            if let Some(g) = grad.as_deref_mut() {
                                g[base + j] += d;
                            }
                        }
                        Parameterization::Centered => {
                            let mu = u[2 * j];
                            let log_sigma = u[2 * j + 1];
                            let sigma = log_sigma.exp();
                            let z = (u[base + j] - mu) / sigma;
                            lp += -0.5 * z * z - log_sigma - LN_SQRT_2PI;
                            if let Some(g) = grad.as_deref_mut() {
                                g[base + j] -= z / sigma;
                                g[2 * j] += z / sigma;
                                g[2 * j + 1] += z * z - 1.0;
                            }
                        }
                    }
                }
            }
        }
        lp
    }

    fn likelihood_part(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let want = grad.is_some();
        let mut lp = 0.0;
        if self.spec.regime.is_pooled() {
            let b = self.pooled_behavior(u);
            let (mut ge, mut gt, mut gr) = (0.0, 0.0, 0.0);
            for (bi, (block, c)) in self.data.blocks.iter().zip(&self.cache).enumerate() {
                let delta = self.delta(u, bi);
                let v1 = initial_values(&block.v1, delta).expect("layout matches routes");
                let (val, g) = weighted_loglik(&b, &v1, &block.costs, &c.weights, want && delta.is_some());
                lp += val + c.constant;
                ge += g.eta;
                gt += g.theta;
                gr += g.rho;
                if let (Some(gr), Some(d)) = (grad.as_deref_mut(), delta) {
                    for j in 0..d.len() {
                        gr[c.delta_start + j] += g.v1[j + 1];
                    }
                }
            }
            if let Some(g) = grad {
                g[0] += ge * b.eta * (1.0 - b.eta);
                g[1] += gt * b.theta;
                if self.stride == 3 {
                    g[2] += gr * b.rho * (1.0 - b.rho);
                }
            }
            return lp;
        }

        let people = self.individuals(u);
        for (bi, (block, c)) in self.data.blocks.iter().zip(&self.cache).enumerate() {
            let delta = self.delta(u, bi);
            let v1 = initial_values(&block.v1, delta).expect("layout matches routes");
            let members = &people[c.first_commuter..c.first_commuter + c.commuters];
            let want_v1 = want && delta.is_some();
            let mut grads = Vec::with_capacity(if want { c.commuters } else { 0 });
            if self.spec.regime == Regime::HierComplete {
                for (b, w) in members.iter().zip(&c.commuter_weights) {
                    let (val, g) = weighted_loglik(b, &v1, &block.costs, w, want_v1);
                    lp += val;
                    if want {
                        grads.push(g);
                    }
                }
            } else {
                let days = block.obs.days();
                let paths: Vec<Vec<f64>> = members
                    .iter()
                    .map(|b| log_prob_path(b, &v1, &block.costs, days))
                    .collect();
                let mix = mixture_log_probs(&paths);
                lp += c.constant;
                for (w, lm) in c.weights.iter().zip(&mix) {
                    if *w != 0.0 {
                        lp += w * lm;
                    }
                }
                if want {
                    let nf = c.commuters as f64;
                    for (b, path) in members.iter().zip(&paths) {
                        let weights: Vec<f64> = c
                            .weights
                            .iter()
                            .zip(path.iter().zip(&mix))
                            .map(|(&o, (&lp_n, &lm))| if o == 0.0 { 0.0 } else { o * (lp_n - lm).exp() / nf })
                            .collect();
                        grads.push(weighted_loglik(b, &v1, &block.costs, &weights, want_v1).1);
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (i, (b, pg)) in members.iter().zip(&grads).enumerate() {
                    let k = c.first_commuter + i;
                    let du = [
                        pg.eta * b.eta * (1.0 - b.eta),
                        pg.theta * b.theta,
                        pg.rho * b.rho * (1.0 - b.rho),
                    ];
                    let base = self.indiv_start + k * self.stride;
                    for j in 0..self.stride {
                        match self.spec.parameterization {
                            Parameterization::NonCentered => {
                                let sigma = u[2 * j + 1].exp();
                                let z = u[base + j];
                                g[2 * j] += du[j];
                                g[2 * j + 1] += du[j] * sigma * z;
                                g[base + j] += du[j] * sigma;
                            }
                            Parameterization::Centered => g[base + j] += du[j],
                        }
                    }
                    if let Some(d) = delta {
                        for j in 0..d.len() {
                            g[c.delta_start + j] += pg.v1[j + 1];
                        }
                    }
                }
            }
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{anonymize, simulate_hierarchical, simulate_pooled};
    use crate::model::{loglik_hier, loglik_hier_counts_approx, loglik_pooled, loglik_pooled_counts};
    use rand::{Rng, SeedableRng};

    fn costs(seed: u64, days: usize, routes: usize) -> CostSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CostSequence::new(
            seed as u32,
            (0..days)
                .map(|_| (0..routes).map(|_| rng.random_range(5.0..25.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn pooled_data(counts: bool) -> Dataset {
        let c = costs(1, 12, 3);
        let traj = simulate_pooled(&Behavior::new(0.3, 0.8, 0.2).unwrap(), &[0.0; 3], &c, 6, 2).unwrap();
        let obs = if counts {
            Observation::Counts(anonymize(&traj))
        } else {
            Observation::Trajectory(traj)
        };
        Dataset::single(c, obs, vec![0.0; 3])
    }

    fn hier_data(counts: bool, n: usize) -> Dataset {
        let c = costs(3, 10, 3);
        let hyper = Hyper {
            mu_eta: -1.0,
            sigma_eta: 0.5,
            mu_theta: 0.0,
            sigma_theta: 0.5,
            mu_rho: -2.0,
            sigma_rho: 0.8,
        };
        let (_, traj) = simulate_hierarchical(&hyper, n, &[0.0; 3], &c, 4).unwrap();
        let obs = if counts {
            Observation::Counts(anonymize(&traj))
        } else {
            Observation::Trajectory(traj)
        };
        Dataset::single(c, obs, vec![0.0; 3])
    }

    fn random_point(p: &Posterior, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn fd_check(p: &Posterior, u: &[f64]) {
        let g = p.grad_log_posterior(u).unwrap();
        let h = 1e-6;
        for i in 0..u.len() {
            let mut a = u.to_vec();
            let mut b = u.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (p.log_posterior(&a).unwrap() - p.log_posterior(&b).unwrap()) / (2.0 * h);
            let err = (g[i] - fd).abs() / 1f64.max(g[i].abs()).max(fd.abs());
            assert!(
                err < 1e-5,
                "{}: analytic {} vs fd {}",
                p.unconstrained_names()[i],
                g[i],
                fd
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_every_regime() {
        for counts in [false, true] {
            for init in [InitValues::Fixed, InitValues::EndogenousDelta] {
                let spec = ModelSpec {
                    regime: Regime::from_parts(false, counts),
                    init,
                    ..Default::default()
                };
                let p = Posterior::new(pooled_data(counts), spec).unwrap();
                for s in 0..3 {
                    fd_check(&p, &random_point(&p, s));
                }
                for par in [Parameterization::NonCentered, Parameterization::Centered] {
                    let spec = ModelSpec {
                        regime: Regime::from_parts(true, counts),
                        init,
                        parameterization: par,
                        ..Default::default()
                    };
                    let p = Posterior::new(hier_data(counts, 4), spec).unwrap();
                    for s in 0..2 {
                        fd_check(&p, &random_point(&p, s));
                    }
                }
            }
        }
    }

    #[test]
    fn term_by_term_composition() {
        let data = pooled_data(false);
        let p = Posterior::new(data.clone(), ModelSpec::new(Regime::PooledComplete)).unwrap();
        let u = [0.4, -0.3, -1.2];
        let b = p.pooled_behavior(&u);
        let Observation::Trajectory(traj) = &data.blocks[0].obs else {
            unreachable!()
        };
        let ll = loglik_pooled(
            &PooledParams::new(b.eta, b.theta, b.rho),
            traj,
            &data.blocks[0].costs,
            &[0.0; 3],
        )
        .unwrap();
        let pr = PriorSpec::default();
        let oracle = ll
            + pr.eta.log_density(b.eta)
            + pr.theta.log_density(b.theta)
            + pr.rho.log_density(b.rho)
            + p.log_jacobian(&u);
        assert!((p.log_posterior(&u).unwrap() - oracle).abs() < 1e-10);
        assert!((p.log_likelihood(&u).unwrap() - ll).abs() < 1e-12);
    }

    #[test]
    fn flat_priors_leave_the_likelihood() {
        let spec = ModelSpec {
            priors: PriorSpec::flat(),
            ..ModelSpec::new(Regime::PooledComplete)
        };
        let p = Posterior::new(pooled_data(false), spec).unwrap();
        for s in 0..5 {
            let u = random_point(&p, s);
            assert!((p.log_posterior(&u).unwrap() - p.log_likelihood(&u).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchical_likelihoods_match_direct_functions() {
        for counts in [false, true] {
            let data = hier_data(counts, 5);
            let p = Posterior::new(data.clone(), ModelSpec::new(Regime::from_parts(true, counts))).unwrap();
            let u = random_point(&p, 9);
            let people = p.individuals(&u);
            let block = &data.blocks[0];
            let direct = match &block.obs {
                Observation::Trajectory(t) => loglik_hier(&people, t, &block.costs, &block.v1).unwrap(),
                Observation::Counts(c) => loglik_hier_counts_approx(&people, c, &block.costs, &block.v1).unwrap(),
            };
            assert!((p.log_likelihood(&u).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn pooled_counts_matches_direct_function() {
        let data = pooled_data(true);
        let p = Posterior::new(data.clone(), ModelSpec::new(Regime::PooledCounts)).unwrap();
        let u = [0.1, 0.2, -0.5];
        let b = p.pooled_behavior(&u);
        let Observation::Counts(c) = &data.blocks[0].obs else {
            unreachable!()
        };
        let direct = loglik_pooled_counts(
            &PooledParams::new(b.eta, b.theta, b.rho),
            c,
            &data.blocks[0].costs,
            &[0.0; 3],
        )
        .unwrap();
        assert!((p.log_likelihood(&u).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn non_centered_reconstruction_equals_centered_transform() {
        let data = hier_data(false, 3);
        let nc = Posterior::new(data.clone(), ModelSpec::new(Regime::HierComplete)).unwrap();
        let c = Posterior::new(
            data,
            ModelSpec {
                parameterization: Parameterization::Centered,
                ..ModelSpec::new(Regime::HierComplete)
            },
        )
        .unwrap();
        let u = random_point(&nc, 5);
        let mut uc = u.clone();
        for k in 0..3 {
            for j in 0..3 {
                let i = nc.indiv_start + 3 * k + j;
                uc[i] = u[2 * j] + u[2 * j + 1].exp() * u[i];
            }
        }
        assert_eq!(nc.individuals(&u), c.individuals(&uc));
        assert!((nc.log_likelihood(&u).unwrap() - c.log_likelihood(&uc).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn multi_od_blocks_share_behavior_and_own_offsets() {
        let blocks: Vec<OdBlock> = (0..3)
            .map(|i| {
                let c = costs(10 + i, 8, 2);
                let traj = simulate_pooled(&Behavior::new(0.2, 0.5, 0.3).unwrap(), &[0.0; 2], &c, 4, i).unwrap();
                OdBlock {
                    costs: c,
                    obs: Observation::Counts(anonymize(&traj)),
                    v1: vec![0.0; 2],
                }
            })
            .collect();
        let spec = ModelSpec {
            init: InitValues::EndogenousDelta,
            ..ModelSpec::new(Regime::PooledCounts)
        };
        let p = Posterior::new(Dataset { blocks }, spec).unwrap();
        assert_eq!(p.dim(), 6);
        assert_eq!(p.unconstrained_names()[3], "delta[10][2]");
        fd_check(&p, &random_point(&p, 1));
    }

    #[test]
    fn round_trip_and_names() {
        let p = Posterior::new(hier_data(false, 2), ModelSpec::new(Regime::HierComplete)).unwrap();
        let u = random_point(&p, 3);
        let x = p.constrain(&u);
        assert_eq!(x.len(), p.constrained_names().len());
        assert_eq!(p.constrained_names()[6], "z_eta[1]");
        assert_eq!(p.constrained_names().last().unwrap(), "rho[2]");
        let back = p.unconstrain(&x).unwrap();
        for (a, b) in back.values.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((back.log_jacobian - p.log_jacobian(&u)).abs() < 1e-12);
        let pooled = Posterior::new(pooled_data(false), ModelSpec::new(Regime::PooledComplete)).unwrap();
        assert_eq!(pooled.constrain(&[0.0, 0.0, 0.0])[0], 0.5);
        assert!((pooled.log_jacobian(&[0.0, 0.7, 0.0]) - pooled.log_jacobian(&[0.0, 0.0, 0.0]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn regime_mismatch_and_fixed_rho() {
        assert!(Posterior::new(pooled_data(true), ModelSpec::new(Regime::PooledComplete)).is_err());
        assert!(Posterior::new(pooled_data(false), ModelSpec::new(Regime::HierCounts)).is_err());
        let spec = ModelSpec {
            rho: RhoMode::Fixed(0.0),
            ..ModelSpec::new(Regime::PooledComplete)
        };
        assert!(Posterior::new(pooled_data(false), spec).is_err());
        let spec = ModelSpec {
            rho: RhoMode::Fixed(0.2),
            ..ModelSpec::new(Regime::HierCounts)
        };
        let p = Posterior::new(hier_data(true, 3), spec).unwrap();
        assert_eq!(p.dim(), 4 + 2 * 3);
        fd_check(&p, &random_point(&p, 2));
        assert!("hier-counts".parse::<Regime>().unwrap() == Regime::HierCounts);
        assert!("bogus".parse::<Regime>().is_err());
    }

    #[test]
    fn equal_costs_zero_theta_gradient_of_likelihood() {
        let c = CostSequence::new(0, vec![vec![9.0; 3]; 6]).unwrap();
        let traj = simulate_pooled(&Behavior::new(0.3, 0.8, 0.2).unwrap(), &[0.0; 3], &c, 5, 1).unwrap();
        let spec = ModelSpec {
            priors: PriorSpec::flat(),
            ..ModelSpec::new(Regime::PooledComplete)
        };
        let p = Posterior::new(Dataset::single(c, Observation::Trajectory(traj), vec![0.0; 3]), spec).unwrap();
        let g = p.grad_log_posterior(&[0.2, -0.4, -1.0]).unwrap();
        assert!(g[1].abs() < 1e-12);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn z_gradient_vanishes_for_unobserved_commuter_as_sigma_shrinks() {
        let c = costs(3, 10, 3);
        let hyper = Hyper {
            mu_eta: -1.0,
            sigma_eta: 0.5,
            mu_theta: 0.0,
            sigma_theta: 0.5,
            mu_rho: -2.0,
            sigma_rho: 0.8,
        };
        let (_, traj) = simulate_hierarchical(&hyper, 3, &[0.0; 3], &c, 4).unwrap();
        let spec = ModelSpec {
            priors: PriorSpec::flat(),
            ..ModelSpec::new(Regime::HierComplete)
        };
        let p = Posterior::new(Dataset::single(c, Observation::Trajectory(traj), vec![0.0; 3]), spec).unwrap();
        let mut u = random_point(&p, 8);
        u[1] = -40.0;
        let g = p.grad_log_posterior(&u).unwrap();
        let z0 = p.indiv_start;
        // Likelihood part of the z gradient is scaled by sigma; only the N(0,1) prior remains.
        assert!((g[z0] + u[z0]).abs() < 1e-12);
    }
}
