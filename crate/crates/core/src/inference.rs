//! Posterior summaries and decisions: means, highest-density intervals,
//! equivalence tests, predictive replication and extrapolation.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fill_probabilities, logit, smooth, Behavior, CountSeries, Hyper};
use crate::error::{Error, Result};
use crate::model::initial_values;
use crate::network::CostSequence;
use crate::rng::{self, tag};
use crate::sampler::{Diagnostics, PosteriorDraws};

/// Arithmetic mean of every constrained column.
pub fn posterior_mean(draws: &PosteriorDraws) -> Vec<f64> {
    let s = draws.len() as f64;
    (0..draws.names.len())
        .map(|i| draws.samples.iter().map(|r| r[i]).sum::<f64>() / s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdiResult {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub contained_draws: usize,
    /// 0-based index of `lower` among the sorted draws.
    pub start_index: usize,
}

/// Narrowest window `[x_(k), x_(k + floor(alpha S))]` over the sorted draws;
/// the first such window wins ties.
pub fn hdi(draws: &[f64], alpha: f64) -> Result<HdiResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if draws.iter().any(|d| d.is_nan()) {
        return Err(Error::data("draws contain NaN"));
    }
    let s = draws.len();
    let span = (alpha * s as f64 + 1e-9).floor() as usize;
    if span < 1 || span >= s {
        return Err(Error::param(format!(
            "{s} draws cannot form an interval at alpha = {alpha}"
        )));
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let mut best = 0;
    for k in 1..s - span {
        if x[k + span] - x[k] < x[best + span] - x[best] {
            best = k;
        }
    }
    Ok(HdiResult {
        lower: x[best],
        upper: x[best + span],
        alpha,
        contained_draws: span + 1,
        start_index: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeVerdict {
    Equivalent,
    RejectedBelow,
    RejectedAbove,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeResult {
    pub rope: (f64, f64),
    pub fraction_below: f64,
    pub fraction_inside: f64,
    pub fraction_above: f64,
    pub verdict: RopeVerdict,
}

/// Mass share that decides a verdict.
pub const ROPE_DECISION_MASS: f64 = 0.95;

/// Posterior mass below, inside (closed interval) and above a region of
/// practical equivalence, with the 95%-mass decision rule.
pub fn rope_test(contrast: &[f64], rope: (f64, f64)) -> Result<RopeResult> {
    if contrast.is_empty() {
        return Err(Error::data("no contrast draws"));
    }
    if !(rope.0 < rope.1) {
        return Err(Error::param(format!("invalid interval [{}, {}]", rope.0, rope.1)));
    }
    let s = contrast.len() as f64;
    let below = contrast.iter().filter(|&&x| x < rope.0).count();
    let above = contrast.iter().filter(|&&x| x > rope.1).count();
    let inside = contrast.len() - below - above;
    let (fb, fi, fa) = (below as f64 / s, inside as f64 / s, above as f64 / s);
    let verdict = if fi >= ROPE_DECISION_MASS {
        RopeVerdict::Equivalent
    } else if fb >= ROPE_DECISION_MASS {
        RopeVerdict::RejectedBelow
    } else if fa >= ROPE_DECISION_MASS {
        RopeVerdict::RejectedAbove
    } else {
        RopeVerdict::Undecided
    };
    Ok(RopeResult {
        rope,
        fraction_below: fb,
        fraction_inside: fi,
        fraction_above: fa,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Draw `s` of one set against draw `s` of the other.
    Paired,
    /// Independent resampling with replacement from both sets.
    Resampled { seed: u64, size: usize },
}

/// Draws of `f(a) - f(b)`: paired draw by draw when both sets have the same
/// size, otherwise resampled with replacement to the larger size.
pub fn contrast_draws(a: &[f64], b: &[f64], f: impl Fn(f64) -> f64, seed: u64) -> Result<(Vec<f64>, Pairing)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("no draws"));
    }
    if a.len() == b.len() {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x) - f(y)).collect(), Pairing::Paired));
    }
    let size = a.len().max(b.len());
    let mut rng = rng::stream(seed, &[tag::RESAMPLE]);
    let out = (0..size)
        .map(|_| f(a[rng.random_range(0..a.len())]) - f(b[rng.random_range(0..b.len())]))
        .collect();
    Ok((out, Pairing::Resampled { seed, size }))
}

/// Draws of `logit(a) - logit(b)`; `exp` of a draw is the odds ratio.
pub fn logit_contrast(a: &[f64], b: &[f64], seed: u64) -> Result<(Vec<f64>, Pairing)> {
    if a.iter().chain(b).any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::param("contrast draws must lie strictly inside (0,1)"));
    }
    contrast_draws(a, b, logit, seed)
}

/// Behavior implied by one posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub enum DrawBehavior {
    Pooled(Behavior),
    Individuals(Vec<Behavior>),
}

/// One posterior draw ready for forward simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraw {
    pub behavior: DrawBehavior,
    pub delta: Option<Vec<f64>>,
}

impl PredictiveDraw {
    pub fn pooled(b: Behavior) -> Self {
        PredictiveDraw {
            behavior: DrawBehavior::Pooled(b),
            delta: None,
        }
    }
}

/// Reads behaviors from named constrained columns: `eta`, `theta`, `rho`
/// for pooled fits or `eta[n]`, `theta[n]`, `rho[n]` for hierarchical fits.
/// A missing `rho` column takes `fixed_rho`. Offsets are read from
/// `delta[j]`, or from `delta[od][j]` when `od` is given.
pub fn predictive_draws(
    draws: &PosteriorDraws,
    fixed_rho: Option<f64>,
    od: Option<u32>,
) -> Result<Vec<PredictiveDraw>> {
    let col = |name: &str| draws.index_of(name);
    let rho_missing = || fixed_rho.ok_or_else(|| Error::data("draws have no rho column and no fixed rho was supplied"));
    let mut delta_cols = Vec::new();
    for j in 2.. {
        let name = match od {
            Some(o) => format!("delta[{o}][{j}]"),
            None => format!("delta[{j}]"),
        };
        match col(&name) {
            Some(i) => delta_cols.push(i),
            None => break,
        }
    }
    let delta = |row: &[f64]| (!delta_cols.is_empty()).then(|| delta_cols.iter().map(|&i| row[i]).collect());

    if let (Some(e), Some(t)) = (col("eta"), col("theta")) {
        let r = col("rho");
        let fixed = if r.is_none() { Some(rho_missing()?) } else { None };
        return Ok(draws
            .samples
            .iter()
            .map(|row| PredictiveDraw {
                behavior: DrawBehavior::Pooled(Behavior {
                    eta: row[e],
                    theta: row[t],
                    rho: r.map_or_else(|| fixed.unwrap_or(0.0), |i| row[i]),
                }),
                delta: delta(row),
            })
            .collect());
    }
    let mut people = Vec::new();
    for n in 1.. {
        match (col(&format!("eta[{n}]")), col(&format!("theta[{n}]"))) {
            (Some(e), Some(t)) => people.push((e, t, col(&format!("rho[{n}]")))),
            _ => break,
        }
    }
    if people.is_empty() {
        return Err(Error::data(
            "draws carry neither pooled nor individual behavior columns",
        ));
    }
    let fixed = if people.iter().any(|p| p.2.is_none()) {
        Some(rho_missing()?)
    } else {
        None
    };
    Ok(draws
        .samples
        .iter()
        .map(|row| PredictiveDraw {
            behavior: DrawBehavior::Individuals(
                people
                    .iter()
                    .map(|&(e, t, r)| Behavior {
                        eta: row[e],
                        theta: row[t],
                        rho: r.map_or_else(|| fixed.unwrap_or(0.0), |i| row[i]),
                    })
                    .collect(),
            ),
            delta: delta(row),
        })
        .collect())
}

/// Daily probabilities `days x (M + 1)` of every agent of a draw, after
/// running the value recursion through `burn_in` days of costs first.
fn agent_paths(
    d: &PredictiveDraw,
    v1: &[f64],
    burn_in: Option<&CostSequence>,
    costs: &CostSequence,
) -> Result<Vec<Vec<f64>>> {
    let v1 = initial_values(v1, d.delta.as_deref())?;
    let agents: Vec<Behavior> = match &d.behavior {
        DrawBehavior::Pooled(b) => vec![*b],
        DrawBehavior::Individuals(v) => v.clone(),
    };
    let m = costs.routes();
    Ok(agents
        .iter()
        .map(|b| {
            let mut v = v1.clone();
            if let Some(train) = burn_in {
                for c in train.rows() {
                    smooth(&mut v, b.eta, c);
                }
            }
            let mut out = vec![0.0; costs.days() * (m + 1)];
            for (t, c) in costs.rows().enumerate() {
                fill_probabilities(&v, b.theta, b.rho, &mut out[t * (m + 1)..(t + 1) * (m + 1)]);
                smooth(&mut v, b.eta, c);
            }
            out
        })
        .collect())
}

fn check_draws(draws: &[PredictiveDraw], v1: &[f64], costs: &CostSequence) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::data("no posterior draws"));
    }
    if v1.len() != costs.routes() {
        return Err(Error::dim("initial values do not match the route count"));
    }
    for d in draws {
        let agents: &[Behavior] = match &d.behavior {
            DrawBehavior::Pooled(b) => std::slice::from_ref(b),
            DrawBehavior::Individuals(v) => v,
        };
        for b in agents {
            if !(b.eta >= 0.0 && b.eta <= 1.0 && b.theta > 0.0 && (0.0..1.0).contains(&b.rho)) {
                return Err(Error::param(format!("draw outside the parameter space: {b:?}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveBand {
    pub day: usize,
    pub route_id: usize,
    pub mean: f64,
    pub lo50: f64,
    pub hi50: f64,
    pub lo95: f64,
    pub hi95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub bands: Vec<PredictiveBand>,
    pub replications: usize,
    pub draws_used: usize,
    pub commuters: usize,
}

impl PredictiveSummary {
    pub fn band(&self, day: usize, route: usize) -> Option<&PredictiveBand> {
        self.bands.iter().find(|b| b.day == day && b.route_id == route)
    }

    /// Share of observed `(day, alternative)` cells inside the 95% band.
    pub fn coverage(&self, observed: &CountSeries) -> f64 {
        let mut hit = 0;
        let mut total = 0;
        for b in &self.bands {
            if b.day <= observed.days() {
                let o = observed.day(b.day - 1)[b.route_id] as f64;
                total += 1;
                hit += (o >= b.lo95 && o <= b.hi95) as usize;
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictiveConfig {
    pub replications: usize,
    pub max_draws: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        PredictiveConfig {
            replications: 500,
            max_draws: 200,
        }
    }
}

fn quantile_from_histogram(hist: &[u64], total: u64, q: f64) -> f64 {
    let target = q * total as f64;
    let mut acc = 0u64;
    for (k, &h) in hist.iter().enumerate() {
        acc += h;
        if acc as f64 >= target - 1e-9 && acc > 0 {
            return k as f64;
        }
    }
    (hist.len() - 1) as f64
}

/// Replicated daily counts over the cost horizon: every retained draw is
/// simulated forward `replications` times and the counts are summarized per
/// day and alternative.
pub fn posterior_predictive(
    draws: &[PredictiveDraw],
    v1: &[f64],
    costs: &CostSequence,
    commuters: usize,
    config: &PredictiveConfig,
    seed: u64,
) -> Result<PredictiveSummary> {
    check_draws(draws, v1, costs)?;
    if config.replications == 0 || config.max_draws == 0 {
        return Err(Error::param("replications and max_draws must be positive"));
    }
    if commuters == 0 {
        return Err(Error::param("need at least one commuter"));
    }
    let step = draws.len().div_ceil(config.max_draws);
    let kept: Vec<(usize, &PredictiveDraw)> = draws.iter().enumerate().step_by(step).collect();
    let m = costs.routes();
    let width = m + 1;
    let days = costs.days();
    let cells = days * width;

    let hist = kept
        .par_iter()
        .map(|&(idx, d)| -> Result<Vec<u64>> {
            let paths = agent_paths(d, v1, None, costs)?;
            if paths.len() > 1 && paths.len() != commuters {
                return Err(Error::dim(format!(
                    "draw has {} individuals, predicting {commuters} commuters",
                    paths.len()
                )));
            }
            let mut hist = vec![0u64; cells * (commuters + 1)];
            let mut rng = rng::stream(seed, &[tag::PREDICT, idx as u64]);
            let mut row = vec![0usize; width];
            for _ in 0..config.replications {
                for t in 0..days {
                    row.fill(0);
                    if paths.len() == 1 {
                        let p = &paths[0][t * width..(t + 1) * width];
                        let mut left = commuters as u64;
                        let mut mass = 1.0;
                        for i in 0..width {
                            if left == 0 {
                                break;
                            }
                            let k = if i + 1 == width || mass <= 0.0 {
                                left
                            } else {
                                let pr = (p[i] / mass).clamp(0.0, 1.0);
                                Binomial::new(left, pr)
                                    .map_err(|e| Error::Numerical(e.to_string()))?
                                    .sample(&mut rng)
                            };
                            row[i] = k as usize;
                            left -= k;
                            mass -= p[i];
                        }
                    } else {
                        for path in &paths {
                            let p = &path[t * width..(t + 1) * width];
                            let u: f64 = rng.random();
                            let mut acc = 0.0;
                            let mut pick = width - 1;
                            for (i, &pi) in p.iter().enumerate() {
                                acc += pi;
                                if u < acc {
                                    pick = i;
                                    break;
                                }
                            }
                            row[pick] += 1;
                        }
                    }
                    for (i, &k) in row.iter().enumerate() {
                        hist[(t * width + i) * (commuters + 1) + k] += 1;
                    }
                }
            }
            Ok(hist)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .reduce(|mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        })
        .expect("at least one draw");

    let total = (kept.len() * config.replications) as u64;
    let mut bands = Vec::with_capacity(cells);
    for t in 0..days {
        for i in 0..width {
            let h = &hist[(t * width + i) * (commuters + 1)..(t * width + i + 1) * (commuters + 1)];
            let mean = h.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum::<f64>() / total as f64;
            bands.push(PredictiveBand {
                day: t + 1,
                route_id: i,
                mean,
                lo50: quantile_from_histogram(h, total, 0.25),
                hi50: quantile_from_histogram(h, total, 0.75),
                lo95: quantile_from_histogram(h, total, 0.025),
                hi95: quantile_from_histogram(h, total, 0.975),
            });
        }
    }
    Ok(PredictiveSummary {
        bands,
        replications: config.replications,
        draws_used: kept.len(),
        commuters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationDay {
    pub day: usize,
    pub route_id: usize,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub days: Vec<ExtrapolationDay>,
    /// Mean absolute error against the truth over physical routes.
    pub mae: Option<f64>,
}

impl Extrapolation {
    /// Posterior mean probabilities, `horizon x (M + 1)`.
    pub fn mean_path(&self) -> Vec<Vec<f64>> {
        let width = self.days.iter().map(|d| d.route_id).max().unwrap_or(0) + 1;
        self.days
            .chunks(width)
            .map(|c| c.iter().map(|d| d.mean).collect())
            .collect()
    }
}

/// Population-average choice probabilities over future days. Each draw's
/// values are first carried through the training costs, so that future day 1
/// uses the values after the last training day.
pub fn extrapolate(
    draws: &[PredictiveDraw],
    v1: &[f64],
    train: &CostSequence,
    future: &CostSequence,
    truth: Option<&[Vec<f64>]>,
) -> Result<Extrapolation> {
    check_draws(draws, v1, future)?;
    if train.routes() != future.routes() {
        return Err(Error::dim("training and future costs cover different routes"));
    }
    let width = future.routes() + 1;
    let horizon = future.days();
    if let Some(t) = truth {
        if t.len() != horizon || t.iter().any(|r| r.len() != width) {
            return Err(Error::dim("truth must be horizon x (M + 1)"));
        }
    }
    let aggregates: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|d| -> Result<Vec<f64>> {
            let paths = agent_paths(d, v1, Some(train), future)?;
            let n = paths.len() as f64;
            let mut agg = vec![0.0; horizon * width];
            for p in &paths {
                for (a, x) in agg.iter_mut().zip(p) {
                    *a += x / n;
                }
            }
            Ok(agg)
        })
        .collect::<Result<_>>()?;
    let s = aggregates.len();
    let mut out = Vec::with_capacity(horizon * width);
    let mut abs_err = 0.0;
    for t in 0..horizon {
        for i in 0..width {
            let mut col: Vec<f64> = aggregates.iter().map(|a| a[t * width + i]).collect();
            let mean = col.iter().sum::<f64>() / s as f64;
            col.sort_by(f64::total_cmp);
            let q = |p: f64| col[((p * (s - 1) as f64).round() as usize).min(s - 1)];
            let tr = truth.map(|tr| tr[t][i]);
            if let (Some(v), true) = (tr, i > 0) {
                abs_err += (mean - v).abs();
            }
            out.push(ExtrapolationDay {
                day: t + 1,
                route_id: i,
                mean,
                lo95: q(0.025),
                hi95: q(0.975),
                truth: tr,
            });
        }
    }
    Ok(Extrapolation {
        days: out,
        mae: truth.map(|_| abs_err / (horizon * (width - 1)) as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndividualParam {
    Eta,
    Theta,
    Rho,
}

/// Density of an individual parameter implied by the hyperparameters,
/// averaged over hyperparameter draws.
pub fn population_distribution(hyper_draws: &[Hyper], grid: &[f64], param: IndividualParam) -> Result<Vec<f64>> {
    if hyper_draws.is_empty() {
        return Err(Error::data("no hyperparameter draws"));
    }
    let unit = matches!(param, IndividualParam::Eta | IndividualParam::Rho);
    if grid.iter().any(|&x| !(x > 0.0 && (!unit || x < 1.0) && x.is_finite())) {
        return Err(Error::param("grid leaves the parameter's support"));
    }
    let norm = |u: f64, mu: f64, sigma: f64| {
        let z = (u - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    Ok(grid
        .iter()
        .map(|&x| {
            hyper_draws
                .iter()
                .map(|h| match param {
                    IndividualParam::Eta => norm(logit(x), h.mu_eta, h.sigma_eta) / (x * (1.0 - x)),
                    IndividualParam::Rho => norm(logit(x), h.mu_rho, h.sigma_rho) / (x * (1.0 - x)),
                    IndividualParam::Theta => norm(x.ln(), h.mu_theta, h.sigma_theta) / x,
                })
                .sum::<f64>()
                / hyper_draws.len() as f64
        })
        .collect())
}

/// Hyperparameter columns of hierarchical draws.
pub fn hyper_draws(draws: &PosteriorDraws) -> Result<Vec<Hyper>> {
    let idx = |n: &str| draws.index_of(n);
    let (Some(me), Some(se), Some(mt), Some(st)) =
        (idx("mu_eta"), idx("sigma_eta"), idx("mu_theta"), idx("sigma_theta"))
    else {
        return Err(Error::data("draws have no hyperparameter columns"));
    };
    let (mr, sr) = (idx("mu_rho"), idx("sigma_rho"));
    Ok(draws
        .samples
        .iter()
        .map(|r| Hyper {
            mu_eta: r[me],
            sigma_eta: r[se],
            mu_theta: r[mt],
            sigma_theta: r[st],
            mu_rho: mr.map_or(f64::NAN, |i| r[i]),
            sigma_rho: sr.map_or(f64::NAN, |i| r[i]),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub hdi_lower: f64,
    pub hdi_upper: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Mean, HDI and convergence diagnostics of every constrained column.
pub fn summarize(draws: &PosteriorDraws, alpha: f64) -> Result<Vec<ParamSummary>> {
    let diag = Diagnostics::compute(draws);
    let means = posterior_mean(draws);
    draws
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let h = hdi(&draws.column(i), alpha)?;
            Ok(ParamSummary {
                name: name.clone(),
                mean: means[i],
                hdi_lower: h.lower,
                hdi_upper: h.upper,
                rhat: diag.params[i].rhat,
                ess: diag.params[i].ess,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{anonymize, probability_path, simulate_pooled};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn exhaustive_hdi(x: &[f64], alpha: f64) -> (usize, f64) {
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        let span = (alpha * s.len() as f64 + 1e-9).floor() as usize;
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..s.len() - span {
            let w = s[i + span] - s[i];
            if w < best.1 {
                best = (i, w);
            }
        }
        best
    }

    #[test]
    fn hdi_examples() {
        let x = [0.0, 0.0, 0.0, 1.0, 5.0];
        let h = hdi(&x, 0.6).unwrap();
        assert_eq!((h.lower, h.upper, h.contained_draws, h.start_index), (0.0, 1.0, 4, 0));
        let h = hdi(&x, 0.4).unwrap();
        assert_eq!((h.lower, h.upper, h.contained_draws), (0.0, 0.0, 3));
        let grid: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let h = hdi(&grid, 0.95).unwrap();
        assert_eq!((h.start_index, h.upper - h.lower), (0, 95.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let bimodal: Vec<f64> = (0..1000)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if i < 600 {
                    0.5 * z
                } else {
                    10.0 + 0.5 * z
                }
            })
            .collect();
        let h = hdi(&bimodal, 0.5).unwrap();
        assert!(h.lower > -2.0 && h.upper < 2.0);
        assert!(hdi(&x, 1.0).is_err());
        assert!(hdi(&x, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn hdi_matches_exhaustive_search(
            x in prop::collection::vec(prop_oneof![prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 7.0]), -100.0f64..100.0], 2..200),
            alpha in 0.05f64..0.95,
        ) {
            let span = (alpha * x.len() as f64 + 1e-9).floor() as usize;
            prop_assume!(span >= 1 && span < x.len());
            let h = hdi(&x, alpha).unwrap();
            let (start, width) = exhaustive_hdi(&x, alpha);
            prop_assert_eq!(h.start_index, start);
            prop_assert_eq!(h.upper - h.lower, width);
        }

        #[test]
        fn rope_fractions_sum_to_one_and_ignore_order(x in prop::collection::vec(-1.0f64..1.0, 1..100), seed in 0u64..100) {
            let r = rope_test(&x, (-0.1, 0.1)).unwrap();
            prop_assert!((r.fraction_below + r.fraction_inside + r.fraction_above - 1.0).abs() < 1e-12);
            let mut y = x.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for i in (1..y.len()).rev() {
                y.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(rope_test(&y, (-0.1, 0.1)).unwrap(), r);
        }
    }

    #[test]
    fn hdi_contains_mode_of_unimodal_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..20_000)
            .map(|_| rng.sample::<f64, _>(rand_distr::Gamma::new(3.0, 1.0).unwrap()))
            .collect();
        let bins = 100;
        let max = x.iter().copied().fold(0.0, f64::max);
        let mut hist = vec![0; bins];
        for &v in &x {
            hist[((v / max * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let k = (0..bins).max_by_key(|&i| hist[i]).unwrap();
        let mode = (k as f64 + 0.5) * max / bins as f64;
        let h = hdi(&x, 0.5).unwrap();
        assert!(h.lower <= mode && mode <= h.upper);
    }

    #[test]
    fn rope_examples() {
        let r = rope_test(&[0.5; 10], (-0.1, 0.1)).unwrap();
        assert_eq!(
            (r.fraction_below, r.fraction_inside, r.fraction_above, r.verdict),
            (0.0, 0.0, 1.0, RopeVerdict::RejectedAbove)
        );
        let r = rope_test(&[0.0; 10], (-0.1, 0.1)).unwrap();
        assert_eq!(r.verdict, RopeVerdict::Equivalent);
        let mut x = vec![-0.5; 97];
        x.extend([0.0; 3]);
        let r = rope_test(&x, (-0.1, 0.1)).unwrap();
        assert_eq!((r.fraction_below, r.verdict), (0.97, RopeVerdict::RejectedBelow));
        let r = rope_test(&[0.0, 0.0], (0.0, 0.01)).unwrap();
        assert_eq!(r.verdict, RopeVerdict::Equivalent);
        assert!(rope_test(&[], (0.0, 1.0)).is_err());
        assert!(rope_test(&[0.0], (1.0, 0.0)).is_err());
    }

    #[test]
    fn contrast_examples() {
        let (c, pairing) = logit_contrast(&[0.3, 0.6], &[0.3, 0.6], 0).unwrap();
        assert_eq!((c, pairing), (vec![0.0, 0.0], Pairing::Paired));
        let (c, _) = logit_contrast(&[0.5; 3], &[0.25; 3], 0).unwrap();
        assert!((c[0] - 3f64.ln()).abs() < 1e-15);
        let odds = (0.5 / 0.5) / (0.25 / 0.75);
        assert!((c[0].exp() - odds).abs() < 1e-12);
        let (c, pairing) = logit_contrast(&[0.5; 3], &[0.25; 5], 7).unwrap();
        assert_eq!(pairing, Pairing::Resampled { seed: 7, size: 5 });
        assert_eq!(c.len(), 5);
        assert!(logit_contrast(&[1.0], &[0.5], 0).is_err());
    }

    fn cost_rows(rows: &[[f64; 2]]) -> CostSequence {
        CostSequence::new(0, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn predictive_symmetry_and_static_probabilities() {
        let costs = cost_rows(&[[10.0, 10.0]; 5]);
        let d = [PredictiveDraw::pooled(Behavior {
            eta: 0.3,
            theta: 1.0,
            rho: 0.0,
        })];
        let s = posterior_predictive(
            &d,
            &[0.0; 2],
            &costs,
            40,
            &PredictiveConfig {
                replications: 2000,
                max_draws: 1,
            },
            1,
        )
        .unwrap();
        for t in 1..=5 {
            assert!((s.band(t, 1).unwrap().mean - 20.0).abs() < 0.5);
            assert_eq!(s.band(t, 0).unwrap().hi95, 0.0);
            let b = s.band(t, 2).unwrap();
            assert!(b.lo95 <= b.lo50 && b.lo50 <= b.hi50 && b.hi50 <= b.hi95);
            assert!(b.lo95 <= b.mean && b.mean <= b.hi95);
        }
        let costs = cost_rows(&[[10.0, 14.0], [3.0, 20.0], [12.0, 8.0]]);
        let d = [PredictiveDraw::pooled(Behavior {
            eta: 0.0,
            theta: 0.5,
            rho: 0.2,
        })];
        let s = posterior_predictive(
            &d,
            &[1.0, 2.0],
            &costs,
            30,
            &PredictiveConfig {
                replications: 300,
                max_draws: 1,
            },
            2,
        )
        .unwrap();
        for i in 0..3 {
            let a = s.band(1, i).unwrap();
            for t in 2..=3 {
                let b = s.band(t, i).unwrap();
                assert!((a.mean - b.mean).abs() < 1.0);
            }
        }
    }

    #[test]
    fn predictive_bands_cover_point_mass_data() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let costs = CostSequence::new(
            0,
            (0..15)
                .map(|_| {
                    vec![
                        rng.random_range(8.0..14.0),
                        rng.random_range(8.0..14.0),
                        rng.random_range(8.0..14.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let b = Behavior {
            eta: 0.3,
            theta: 0.8,
            rho: 0.15,
        };
        let s = posterior_predictive(
            &[PredictiveDraw::pooled(b)],
            &[0.0; 3],
            &costs,
            20,
            &PredictiveConfig::default(),
            3,
        )
        .unwrap();
        let mut cov = 0.0;
        for rep in 0..50 {
            let counts = anonymize(&simulate_pooled(&b, &[0.0; 3], &costs, 20, 100 + rep).unwrap());
            cov += s.coverage(&counts);
        }
        assert!(cov / 50.0 >= 0.9, "{}", cov / 50.0);
    }

    #[test]
    fn extrapolation_point_mass_and_contraction() {
        let train = cost_rows(&[[10.0, 12.0], [14.0, 9.0], [11.0, 11.0]]);
        let future = cost_rows(&[[13.0, 10.0]; 30]);
        let b = Behavior {
            eta: 0.25,
            theta: 0.9,
            rho: 0.1,
        };
        let all = CostSequence::new(0, train.rows().chain(future.rows()).map(<[f64]>::to_vec).collect()).unwrap();
        let truth: Vec<Vec<f64>> = probability_path(&b, &[0.0; 2], &all)[3..].to_vec();
        let ex = extrapolate(&[PredictiveDraw::pooled(b)], &[0.0; 2], &train, &future, Some(&truth)).unwrap();
        assert!(ex.mae.unwrap() < 1e-10);
        for (row, tr) in ex.mean_path().iter().zip(&truth) {
            for (a, t) in row.iter().zip(tr) {
                assert!((a - t).abs() < 1e-10);
            }
        }
        // Perceived values close the gap to the constant costs by (1 - eta) per day.
        let limit = crate::dynamics::choice_probabilities(&[13.0, 10.0], 0.9, 0.1).unwrap();
        let path = ex.mean_path();
        let gap = |t: usize| (path[t][1] - limit[1]).abs();
        for t in 10..20 {
            let ratio = gap(t + 1) / gap(t);
            assert!((ratio - 0.75).abs() < 0.02, "day {t}: {ratio}");
        }
    }

    #[test]
    fn extrapolation_is_day_shift_equivariant() {
        let b = Behavior {
            eta: 0.4,
            theta: 0.7,
            rho: 0.1,
        };
        let train = cost_rows(&[[10.0, 12.0]; 4]);
        let future = cost_rows(&[[10.0, 12.0]; 6]);
        let v_star = [10.0, 12.0];
        let ex = extrapolate(&[PredictiveDraw::pooled(b)], &v_star, &train, &future, None).unwrap();
        let p = ex.mean_path();
        for t in 1..6 {
            for i in 0..3 {
                assert!((p[t][i] - p[0][i]).abs() < 1e-14);
            }
        }
        let short = cost_rows(&[[10.0, 12.0]; 6]).slice(0, 2).unwrap();
        assert_eq!(
            extrapolate(&[PredictiveDraw::pooled(b)], &v_star, &train, &short, None)
                .unwrap()
                .days
                .len(),
            6
        );
    }

    #[test]
    fn population_density_examples() {
        let h = Hyper {
            mu_eta: -1.0,
            sigma_eta: 0.6,
            mu_theta: 0.2,
            sigma_theta: 0.4,
            mu_rho: -2.0,
            sigma_rho: 0.9,
        };
        let n = 20_000;
        let grid: Vec<f64> = (1..n).map(|i| i as f64 / n as f64).collect();
        for param in [IndividualParam::Eta, IndividualParam::Rho] {
            let d = population_distribution(&[h, h], &grid, param).unwrap();
            let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) / n as f64).sum();
            assert!((integral - 1.0).abs() < 1e-3, "{param:?}: {integral}");
        }
        let tgrid: Vec<f64> = (1..n).map(|i| i as f64 * 10.0 / n as f64).collect();
        let d = population_distribution(&[h], &tgrid, IndividualParam::Theta).unwrap();
        let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 10.0 / n as f64).sum();
        assert!((integral - 1.0).abs() < 1e-3);
        let x = 0.3;
        let direct = (-(logit(x) + 1.0f64).powi(2) / (2.0 * 0.36)).exp()
            / (0.6 * (2.0 * std::f64::consts::PI).sqrt())
            / (x * (1.0 - x));
        assert!((population_distribution(&[h], &[x], IndividualParam::Eta).unwrap()[0] - direct).abs() < 1e-12);
        let tight = Hyper { sigma_eta: 1e-3, ..h };
        let d = population_distribution(&[tight], &grid, IndividualParam::Eta).unwrap();
        let peak = grid[(0..grid.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()];
        assert!((peak - crate::dynamics::logistic(-1.0)).abs() < 1e-3);
        assert!(population_distribution(&[h], &[1.5], IndividualParam::Eta).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let names = vec!["a".to_string()];
        let d =
            PosteriorDraws::from_rows(names.clone(), vec![0, 0], vec![false; 2], vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(posterior_mean(&d), vec![0.5]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..100_000).map(|_| vec![rng.random::<f64>() * 10.0]).collect();
        let mut streaming = 0.0;
        for (k, r) in rows.iter().enumerate() {
            streaming += (r[0] - streaming) / (k + 1) as f64;
        }
        let d = PosteriorDraws::from_rows(names, vec![0; 100_000], vec![false; 100_000], rows).unwrap();
        assert!((posterior_mean(&d)[0] - streaming).abs() < 1e-12);
    }
}
