//! Forward simulation of day-to-day route choice.
//!
//! Commuters keep exponentially smoothed perceptions of route costs and pick
//! a route each day from a logit model, with a virtual alternative 0 for not
//! traveling. Costs are exogenous: they are read from a [`CostSequence`] and
//! never respond to the simulated choices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{path_costs, CostSequence, LinkCostFn, Network};
use crate::rng::{self, tag, StreamRng};

/// Behavioral parameters of one commuter (or of everyone, in the pooled model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// Learning rate of the exponential smoothing.
    pub eta: f64,
    /// Logit scale, 1/minutes.
    pub theta: f64,
    /// Daily probability of not traveling.
    pub rho: f64,
}

impl Behavior {
    pub fn new(eta: f64, theta: f64, rho: f64) -> Result<Self> {
        let b = Behavior { eta, theta, rho };
        b.validate()?;
        Ok(b)
    }

    /// `eta` in (0,1), `theta` > 0 and `rho` in [0,1). A zero `rho` is the
    /// fixed-demand special case used by the Horowitz and Smith settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::param(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::param(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return Err(Error::param(format!("rho must lie in [0,1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// Population distribution of individual parameters: logit-normal learning
/// rate and non-travel probability, log-normal logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub mu_eta: f64,
    pub sigma_eta: f64,
    pub mu_theta: f64,
    pub sigma_theta: f64,
    pub mu_rho: f64,
    pub sigma_rho: f64,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let locs = [self.mu_eta, self.mu_theta, self.mu_rho];
        if locs.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("hyper locations must be finite"));
        }
        for (name, s) in [
            ("sigma_eta", self.sigma_eta),
            ("sigma_theta", self.sigma_theta),
            ("sigma_rho", self.sigma_rho),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Individual parameters for standardized offsets `z = (z_eta, z_theta, z_rho)`.
    pub fn individual(&self, z: [f64; 3]) -> Behavior {
        Behavior {
            eta: logistic(self.mu_eta + self.sigma_eta * z[0]),
            theta: (self.mu_theta + self.sigma_theta * z[1]).exp(),
            rho: logistic(self.mu_rho + self.sigma_rho * z[2]),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.mu_eta,
            self.sigma_eta,
            self.mu_theta,
            self.sigma_theta,
            self.mu_rho,
            self.sigma_rho,
        ]
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Perceived route costs of `commuters` travelers on day `day` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct ValuationState {
    values: Vec<f64>,
    commuters: usize,
    routes: usize,
    pub day: usize,
}

impl ValuationState {
    /// Every commuter starts from the same initial values `v1`.
    pub fn new(v1: &[f64], commuters: usize) -> Result<Self> {
        if v1.len() < 2 || commuters == 0 {
            return Err(Error::dim("need at least two routes and one commuter"));
        }
        if v1.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("initial values must be finite"));
        }
        Ok(ValuationState {
            values: v1.repeat(commuters),
            commuters,
            routes: v1.len(),
            day: 1,
        })
    }

    pub fn commuters(&self) -> usize {
        self.commuters
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    pub fn values(&self, commuter: usize) -> &[f64] {
        &self.values[commuter * self.routes..(commuter + 1) * self.routes]
    }
}

/// One day of exponential smoothing, `V' = (1 - eta) V + eta c`, applied to
/// every route of every commuter.
pub fn update_values(state: &ValuationState, eta: f64, costs_today: &[f64]) -> Result<ValuationState> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param(format!("eta must lie in (0,1), got {eta}")));
    }
    if costs_today.len() != state.routes {
        return Err(Error::dim(format!(
            "{} costs for {} routes",
            costs_today.len(),
            state.routes
        )));
    }
    let mut next = state.clone();
    for row in next.values.chunks_mut(state.routes) {
        smooth(row, eta, costs_today);
    }
    next.day += 1;
    Ok(next)
}

#[inline]
pub(crate) fn smooth(values: &mut [f64], eta: f64, costs: &[f64]) {
    for (v, &c) in values.iter_mut().zip(costs) {
        *v = (1.0 - eta) * *v + eta * c;
    }
}

/// Choice probabilities over `{0 (stay home), 1..=M}`.
pub fn choice_probabilities(values: &[f64], theta: f64, rho: f64) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("perceived values must be finite"));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::param(format!("theta must be positive, got {theta}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::param(format!("rho must lie in [0,1), got {rho}")));
    }
    let mut p = vec![0.0; values.len() + 1];
    fill_probabilities(values, theta, rho, &mut p);
    Ok(p)
}

#[inline]
pub(crate) fn fill_probabilities(values: &[f64], theta: f64, rho: f64, out: &mut [f64]) {
    let min_v = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, &v) in out[1..].iter_mut().zip(values) {
        *o = (-theta * (v - min_v)).exp();
        total += *o;
    }
    let scale = (1.0 - rho) / total;
    for o in &mut out[1..] {
        *o *= scale;
    }
    out[0] = rho;
}

/// Logit split `softmax(-theta * v)` over physical routes only.
pub(crate) fn logit_shares(values: &[f64], theta: f64) -> Vec<f64> {
    let mut p = vec![0.0; values.len() + 1];
    fill_probabilities(values, theta, 0.0, &mut p);
    p.remove(0);
    p
}

fn draw_categorical(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last positive entry.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Per-commuter, per-day choices; entries in `{0..=M}` with 0 for not traveling.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceTrajectory {
    pub od_id: u32,
    routes: usize,
    commuters: usize,
    days: usize,
    choices: Vec<u16>,
}

impl ChoiceTrajectory {
    /// `rows[n][t]` is commuter `n`'s choice on day `t`.
    pub fn new(od_id: u32, routes: usize, rows: Vec<Vec<u16>>) -> Result<Self> {
        if routes < 2 {
            return Err(Error::data("trajectory needs at least two routes"));
        }
        let commuters = rows.len();
        if commuters == 0 {
            return Err(Error::data("trajectory needs at least one commuter"));
        }
        let days = rows[0].len();
        if days == 0 {
            return Err(Error::data("trajectory needs at least one day"));
        }
        let mut choices = Vec::with_capacity(commuters * days);
        for (n, row) in rows.into_iter().enumerate() {
            if row.len() != days {
                return Err(Error::dim(format!(
                    "commuter {n} has {} days, expected {days}",
                    row.len()
                )));
            }
            if let Some(&bad) = row.iter().find(|&&c| c as usize > routes) {
                return Err(Error::data(format!("commuter {n}: choice {bad} outside 0..={routes}")));
            }
            choices.extend(row);
        }
        Ok(ChoiceTrajectory {
            od_id,
            routes,
            commuters,
            days,
            choices,
        })
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    pub fn commuters(&self) -> usize {
        self.commuters
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn choice(&self, commuter: usize, day: usize) -> usize {
        self.choices[commuter * self.days + day] as usize
    }

    pub fn commuter(&self, commuter: usize) -> &[u16] {
        &self.choices[commuter * self.days..(commuter + 1) * self.days]
    }

    /// First `days` days of every commuter.
    pub fn truncate_days(&self, days: usize) -> Result<Self> {
        if days == 0 || days > self.days {
            return Err(Error::dim(format!("cannot keep {days} of {} days", self.days)));
        }
        let rows = (0..self.commuters).map(|n| self.commuter(n)[..days].to_vec()).collect();
        ChoiceTrajectory::new(self.od_id, self.routes, rows)
    }

    /// First `commuters` commuters.
    pub fn truncate_commuters(&self, commuters: usize) -> Result<Self> {
        if commuters == 0 || commuters > self.commuters {
            return Err(Error::dim(format!(
                "cannot keep {commuters} of {} commuters",
                self.commuters
            )));
        }
        let rows = (0..commuters).map(|n| self.commuter(n).to_vec()).collect();
        ChoiceTrajectory::new(self.od_id, self.routes, rows)
    }
}

/// Daily counts over `{0..=M}`; each row sums to the population `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSeries {
    pub od_id: u32,
    routes: usize,
    days: usize,
    population: u32,
    counts: Vec<u32>,
}

impl CountSeries {
    /// Rows must have `M + 1` entries and share one total.
    pub fn new(od_id: u32, rows: Vec<Vec<u32>>) -> Result<Self> {
        let days = rows.len();
        if days == 0 {
            return Err(Error::data("count series needs at least one day"));
        }
        let width = rows[0].len();
        if width < 3 {
            return Err(Error::data(
                "count rows need the non-travel entry and at least two routes",
            ));
        }
        let population: u32 = rows[0].iter().sum();
        let mut counts = Vec::with_capacity(days * width);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(Error::dim(format!(
                    "day {} has {} entries, expected {width}",
                    t + 1,
                    row.len()
                )));
            }
            let total: u32 = row.iter().sum();
            if total != population {
                return Err(Error::data(format!(
                    "day {}: counts sum to {total}, expected {population}",
                    t + 1
                )));
            }
            counts.extend(row);
        }
        Ok(CountSeries {
            od_id,
            routes: width - 1,
            days,
            population,
            counts,
        })
    }

    /// Tops up the non-travel entry of every row so that each row sums to
    /// `population`. Rows that already exceed it are rejected.
    pub fn padded(od_id: u32, mut rows: Vec<Vec<u32>>, population: u32) -> Result<Self> {
        for (t, row) in rows.iter_mut().enumerate() {
            let total: u32 = row.iter().sum();
            if total > population {
                return Err(Error::data(format!(
                    "day {}: {total} observed commuters exceed the declared population {population}",
                    t + 1
                )));
            }
            if let Some(first) = row.first_mut() {
                *first += population - total;
            }
        }
        CountSeries::new(od_id, rows)
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn population(&self) -> u32 {
        self.population
    }

    pub fn day(&self, t: usize) -> &[u32] {
        let w = self.routes + 1;
        &self.counts[t * w..(t + 1) * w]
    }

    pub fn truncate_days(&self, days: usize) -> Result<Self> {
        if days == 0 || days > self.days {
            return Err(Error::dim(format!("cannot keep {days} of {} days", self.days)));
        }
        CountSeries::new(self.od_id, (0..days).map(|t| self.day(t).to_vec()).collect())
    }
}

/// Daily counts `O_t(i) = #{n : X_t^n = i}`.
pub fn anonymize(traj: &ChoiceTrajectory) -> CountSeries {
    let width = traj.routes + 1;
    let mut rows = vec![vec![0u32; width]; traj.days];
    for n in 0..traj.commuters {
        for (t, &c) in traj.commuter(n).iter().enumerate() {
            rows[t][c as usize] += 1;
        }
    }
    CountSeries::new(traj.od_id, rows).expect("anonymized rows are consistent")
}

fn check_v1(v1: &[f64], costs: &CostSequence) -> Result<()> {
    if v1.len() != costs.routes() {
        return Err(Error::dim(format!(
            "initial values have {} routes, costs have {}",
            v1.len(),
            costs.routes()
        )));
    }
    if v1.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("initial values must be finite"));
    }
    Ok(())
}

/// Daily choice probabilities of one commuter over the whole horizon,
/// `days x (M + 1)`.
pub fn probability_path(behavior: &Behavior, v1: &[f64], costs: &CostSequence) -> Vec<Vec<f64>> {
    let mut v = v1.to_vec();
    let mut out = Vec::with_capacity(costs.days());
    for c in costs.rows() {
        let mut p = vec![0.0; v.len() + 1];
        fill_probabilities(&v, behavior.theta, behavior.rho, &mut p);
        out.push(p);
        smooth(&mut v, behavior.eta, c);
    }
    out
}

/// Simulates one commuter with the given probability path on its own stream.
fn simulate_commuter(probs: &[Vec<f64>], rng: &mut StreamRng) -> Vec<u16> {
    probs.iter().map(|p| draw_categorical(p, rng) as u16).collect()
}

/// Pooled model: every commuter shares one parameter triple and one valuation
/// path; choices are independent given the values.
pub fn simulate_pooled(
    behavior: &Behavior,
    v1: &[f64],
    costs: &CostSequence,
    commuters: usize,
    seed: u64,
) -> Result<ChoiceTrajectory> {
    behavior.validate()?;
    check_v1(v1, costs)?;
    if commuters == 0 {
        return Err(Error::param("need at least one commuter"));
    }
    let probs = probability_path(behavior, v1, costs);
    let rows = (0..commuters)
        .map(|n| {
            let mut rng = rng::stream(seed, &[tag::COMMUTER, n as u64]);
            simulate_commuter(&probs, &mut rng)
        })
        .collect();
    ChoiceTrajectory::new(costs.od_id, costs.routes(), rows)
}

/// Heterogeneous commuters with fixed individual parameters.
pub fn simulate_individuals(
    behaviors: &[Behavior],
    v1: &[f64],
    costs: &CostSequence,
    seed: u64,
) -> Result<ChoiceTrajectory> {
    check_v1(v1, costs)?;
    if behaviors.is_empty() {
        return Err(Error::param("need at least one commuter"));
    }
    let rows = behaviors
        .iter()
        .enumerate()
        .map(|(n, b)| {
            b.validate()?;
            let mut rng = rng::stream(seed, &[tag::COMMUTER, n as u64]);
            Ok(simulate_commuter(&probability_path(b, v1, costs), &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    ChoiceTrajectory::new(costs.od_id, costs.routes(), rows)
}

/// Hierarchical model: each commuter draws its own parameters from `hyper`,
/// then follows the individual model. Returns the drawn parameters as ground
/// truth alongside the trajectory.
pub fn simulate_hierarchical(
    hyper: &Hyper,
    commuters: usize,
    v1: &[f64],
    costs: &CostSequence,
    seed: u64,
) -> Result<(Vec<Behavior>, ChoiceTrajectory)> {
    hyper.validate()?;
    check_v1(v1, costs)?;
    if commuters == 0 {
        return Err(Error::param("need at least one commuter"));
    }
    let mut behaviors = Vec::with_capacity(commuters);
    let mut rows = Vec::with_capacity(commuters);
    for n in 0..commuters {
        let mut rng = rng::stream(seed, &[tag::COMMUTER, n as u64]);
        let z: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let b = hyper.individual(z);
        if !(b.eta > 0.0 && b.eta < 1.0 && b.theta > 0.0 && b.theta.is_finite() && b.rho > 0.0 && b.rho < 1.0) {
            return Err(Error::Numerical(format!(
                "commuter {n}: drawn parameters left their support ({b:?})"
            )));
        }
        rows.push(simulate_commuter(&probability_path(&b, v1, costs), &mut rng));
        behaviors.push(b);
    }
    Ok((behaviors, ChoiceTrajectory::new(costs.od_id, costs.routes(), rows)?))
}

/// One day of Horowitz dynamics: smooth perceived path costs with today's
/// costs, then split `demand` by a logit on the updated perceptions.
pub fn horowitz_step(
    perceived: &[f64],
    costs_today: &[f64],
    eta: f64,
    theta: f64,
    demand: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param(format!("eta must lie in (0,1), got {eta}")));
    }
    if !(theta > 0.0) {
        return Err(Error::param(format!("theta must be positive, got {theta}")));
    }
    if !(demand >= 0.0 && demand.is_finite()) {
        return Err(Error::param(format!("demand must be nonnegative, got {demand}")));
    }
    if perceived.len() != costs_today.len() {
        return Err(Error::dim("perceived and realized costs differ in length"));
    }
    let mut next = perceived.to_vec();
    smooth(&mut next, eta, costs_today);
    let flows = logit_shares(&next, theta).into_iter().map(|s| s * demand).collect();
    Ok((next, flows))
}

/// Route-swapping parameters: rate `tau` per minute of cost advantage and a
/// baseline switching probability `epsilon` toward routes that are not cheaper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmithParams {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for SmithParams {
    fn default() -> Self {
        SmithParams {
            tau: 0.1,
            epsilon: 0.05,
        }
    }
}

impl SmithParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::param(format!("epsilon must lie in [0,1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Row `i` of the day's transition matrix over physical routes (0-based):
    /// `tau (c_i - c_j)` toward strictly cheaper routes, `epsilon` otherwise,
    /// and the remainder for staying.
    pub fn switch_probabilities(&self, from: usize, costs: &[f64]) -> Result<Vec<f64>> {
        let mut row = vec![0.0; costs.len()];
        let mut moving = 0.0;
        for (j, &cj) in costs.iter().enumerate() {
            if j == from {
                continue;
            }
            let p = if cj < costs[from] {
                self.tau * (costs[from] - cj)
            } else {
                self.epsilon
            };
            row[j] = p;
            moving += p;
        }
        if moving > 1.0 + 1e-12 {
            return Err(Error::param(format!(
                "switch probabilities from route {} sum to {moving:.4} > 1",
                from + 1
            )));
        }
        row[from] = (1.0 - moving).max(0.0);
        Ok(row)
    }

    /// Full `M x M` transition matrix for the given costs.
    pub fn transition_matrix(&self, costs: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..costs.len()).map(|i| self.switch_probabilities(i, costs)).collect()
    }
}

/// One day of Smith swapping. Choices use trajectory coding (routes `1..=M`);
/// commuter `n` draws from stream `n` of `seed`.
pub fn smith_step(prev_choices: &[u16], costs_prev: &[f64], smith: &SmithParams, seed: u64) -> Result<Vec<u16>> {
    smith.validate()?;
    let m = costs_prev.len();
    let matrix = smith.transition_matrix(costs_prev)?;
    prev_choices
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            if c == 0 || c as usize > m {
                return Err(Error::data(format!("commuter {n}: route {c} outside 1..={m}")));
            }
            let mut rng = rng::stream(seed, &[tag::SMITH, n as u64]);
            Ok(draw_categorical(&matrix[c as usize - 1], &mut rng) as u16 + 1)
        })
        .collect()
}

/// Smith population: uniform random routes on day 1, then daily swapping
/// driven by the previous day's costs. Nobody stays home.
pub fn simulate_smith(
    smith: &SmithParams,
    costs: &CostSequence,
    commuters: usize,
    seed: u64,
) -> Result<ChoiceTrajectory> {
    smith.validate()?;
    if commuters == 0 {
        return Err(Error::param("need at least one commuter"));
    }
    let m = costs.routes();
    let mut day: Vec<u16> = (0..commuters)
        .map(|n| {
            let mut rng = rng::stream(seed, &[tag::COMMUTER, n as u64]);
            rng.random_range(1..=m as u16)
        })
        .collect();
    let mut rows: Vec<Vec<u16>> = day.iter().map(|&c| vec![c]).collect();
    for t in 1..costs.days() {
        day = smith_step(
            &day,
            costs.day(t - 1),
            smith,
            rng::derive_seed(seed, &[tag::SMITH, t as u64]),
        )?;
        for (row, &c) in rows.iter_mut().zip(&day) {
            row.push(c);
        }
    }
    ChoiceTrajectory::new(costs.od_id, m, rows)
}

/// Settings for background traffic on a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Total simulated days, including the warm start.
    pub days: usize,
    pub warmup: usize,
    /// Standard deviation of the daily Gaussian perturbation of path valuations, minutes.
    pub noise_sd: f64,
    pub eta: f64,
    pub theta: f64,
    pub cost_fn: LinkCostFn,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            days: 120,
            warmup: 20,
            noise_sd: 1.0,
            eta: 0.3,
            theta: 0.3,
            cost_fn: LinkCostFn::default(),
        }
    }
}

/// Background run: study-OD costs after the warm start plus the daily path
/// flows of every OD pair (`[day][od][path]`, all days).
#[derive(Debug, Clone)]
pub struct BackgroundRun {
    pub costs: CostSequence,
    pub path_flows: Vec<Vec<Vec<f64>>>,
}

/// Background demand follows Horowitz dynamics from zero valuations with
/// i.i.d. Gaussian noise on path valuations before the logit split. Costs of
/// the study OD's paths are recorded from day `warmup + 1` on.
pub fn simulate_background_run(
    network: &Network,
    study_od: usize,
    config: &BackgroundConfig,
    seed: u64,
) -> Result<BackgroundRun> {
    if config.days == 0 || config.days <= config.warmup {
        return Err(Error::param(format!(
            "days ({}) must exceed the warm start ({})",
            config.days, config.warmup
        )));
    }
    if !(config.noise_sd >= 0.0) {
        return Err(Error::param("noise_sd must be nonnegative"));
    }
    if !(config.eta > 0.0 && config.eta < 1.0) || !(config.theta > 0.0) {
        return Err(Error::param("background eta must lie in (0,1) and theta be positive"));
    }
    if study_od >= network.od_pairs.len() {
        return Err(Error::param(format!("no OD pair {study_od}")));
    }
    let mut rng = rng::stream(seed, &[tag::BACKGROUND]);
    let mut perceived: Vec<Vec<f64>> = network.od_pairs.iter().map(|od| vec![0.0; od.paths.len()]).collect();
    let mut study_costs = Vec::with_capacity(config.days - config.warmup);
    let mut all_flows = Vec::with_capacity(config.days);

    for day in 1..=config.days {
        let mut link_flows = vec![0.0; network.links.len()];
        let mut flows_today = Vec::with_capacity(network.od_pairs.len());
        for (od, p) in network.od_pairs.iter().zip(&perceived) {
            let noisy: Vec<f64> = p
                .iter()
                .map(|&v| {
                    let e: f64 = rng.sample(StandardNormal);
                    v + config.noise_sd * e
                })
                .collect();
            let flows: Vec<f64> = logit_shares(&noisy, config.theta)
                .into_iter()
                .map(|s| s * od.demand)
                .collect();
            for (path, &f) in od.paths.iter().zip(&flows) {
                for &l in path {
                    link_flows[l] += f;
                }
            }
            flows_today.push(flows);
        }
        let costs = path_costs(network, &link_flows, &config.cost_fn)?;
        if day > config.warmup {
            study_costs.push(costs[study_od].clone());
        }
        for (p, c) in perceived.iter_mut().zip(&costs) {
            smooth(p, config.eta, c);
        }
        all_flows.push(flows_today);
    }
    Ok(BackgroundRun {
        costs: CostSequence::new(study_od as u32, study_costs)?,
        path_flows: all_flows,
    })
}

/// Study-OD cost sequence of length `days - warmup`.
pub fn simulate_background(
    network: &Network,
    study_od: usize,
    config: &BackgroundConfig,
    seed: u64,
) -> Result<CostSequence> {
    Ok(simulate_background_run(network, study_od, config, seed)?.costs)
}
