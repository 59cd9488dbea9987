//! Simulation studies: parameter recovery for the pooled and hierarchical
//! models, calibration, sampler geometry, anonymized observation and
//! misspecified data-generating processes.
//!
//! Replication `r` draws its truth and data from streams keyed by `r` alone,
//! so every grid cell of a study sees the same truths and nested data.

use rand_distr::{Beta, Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    anonymize, logistic, probability_path, simulate_hierarchical, simulate_individuals, simulate_pooled,
    simulate_smith, BackgroundConfig, Behavior, ChoiceTrajectory, Hyper, SmithParams,
};
use crate::error::{Error, Result};
use crate::inference::{extrapolate, hdi, predictive_draws};
use crate::model::{Dataset, ModelSpec, Observation, Parameterization, Posterior, PriorSpec, Regime, RhoMode};
use crate::network::{build_nd_network, CostSequence, ND_STUDY_OD};
use crate::rng::{self, derive_seed, tag, StreamRng};
use crate::sampler::{ks_uniform, nuts_sample, rank_of_truth, Diagnostics, PosteriorDraws, SamplerConfig};

/// Share of failed replications above which a cell fails the run.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Four chains of 500 warmup and 500 retained draws.
pub fn desk_sampler() -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 500,
        draws: 500,
        ..SamplerConfig::default()
    }
}

/// Study-OD route costs on the Nguyen-Dupuis network with background traffic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostEnvironment {
    pub background: BackgroundConfig,
    pub seed: u64,
}

impl Default for CostEnvironment {
    fn default() -> Self {
        CostEnvironment {
            background: BackgroundConfig::default(),
            seed: 1,
        }
    }
}

impl CostEnvironment {
    /// The first `days` days of the study OD's costs.
    pub fn costs(&self, days: usize) -> Result<CostSequence> {
        let all = crate::dynamics::simulate_background(&build_nd_network(), ND_STUDY_OD, &self.background, self.seed)?;
        if days > all.days() {
            return Err(Error::param(format!(
                "{days} days requested, background run provides {}",
                all.days()
            )));
        }
        all.slice(0, days)
    }
}

/// Distribution of one generated parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Generator {
    /// `logistic(Normal(mu, sigma))`
    LogitNormal {
        mu: f64,
        sigma: f64,
    },
    /// `exp(Normal(mu, sigma))`
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
    /// Shape and scale.
    Gamma {
        shape: f64,
        scale: f64,
    },
    Fixed {
        value: f64,
    },
}

impl Generator {
    pub fn sample(&self, rng: &mut StreamRng) -> Result<f64> {
        let bad = |e: &dyn std::fmt::Display| Error::param(format!("{self:?}: {e}"));
        Ok(match *self {
            Generator::LogitNormal { mu, sigma } => logistic(Normal::new(mu, sigma).map_err(|e| bad(&e))?.sample(rng)),
            Generator::LogNormal { mu, sigma } => Normal::new(mu, sigma).map_err(|e| bad(&e))?.sample(rng).exp(),
            Generator::Beta { a, b } => Beta::new(a, b).map_err(|e| bad(&e))?.sample(rng),
            Generator::Gamma { shape, scale } => Gamma::new(shape, scale).map_err(|e| bad(&e))?.sample(rng),
            Generator::Fixed { value } => value,
        })
    }
}

/// Generating distributions of pooled truths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthGenerator {
    pub eta: Generator,
    pub theta: Generator,
    pub rho: Generator,
}

impl Default for TruthGenerator {
    fn default() -> Self {
        TruthGenerator::standard()
    }
}

impl TruthGenerator {
    /// Same distributions as the default pooled priors.
    pub fn standard() -> Self {
        TruthGenerator {
            eta: Generator::LogitNormal { mu: 0.0, sigma: 1.5 },
            theta: Generator::LogNormal { mu: 0.0, sigma: 1.0 },
            rho: Generator::LogitNormal { mu: -2.0, sigma: 1.0 },
        }
    }

    pub fn shifted() -> Self {
        TruthGenerator {
            eta: Generator::LogitNormal { mu: -0.85, sigma: 0.5 },
            theta: Generator::LogNormal { mu: 1.1, sigma: 0.6 },
            rho: Generator::LogitNormal { mu: -1.5, sigma: 0.7 },
        }
    }

    pub fn alt_family() -> Self {
        TruthGenerator {
            eta: Generator::Beta { a: 2.0, b: 5.0 },
            theta: Generator::Gamma { shape: 2.0, scale: 1.0 },
            rho: Generator::Beta { a: 2.0, b: 8.0 },
        }
    }

    /// Redraws until the triple is a valid behavior.
    pub fn draw(&self, rng: &mut StreamRng) -> Result<Behavior> {
        for _ in 0..100 {
            let b = Behavior {
                eta: self.eta.sample(rng)?,
                theta: self.theta.sample(rng)?,
                rho: self.rho.sample(rng)?,
            };
            if b.validate().is_ok() && b.eta > 0.0 && b.theta.is_finite() {
                return Ok(b);
            }
        }
        Err(Error::param("truth generator keeps leaving the parameter space"))
    }
}

/// Generating distributions of hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperGenerator {
    pub mu_eta: (f64, f64),
    pub sigma_eta: f64,
    pub mu_theta: (f64, f64),
    pub sigma_theta: f64,
    pub mu_rho: (f64, f64),
    pub sigma_rho: f64,
}

impl Default for HyperGenerator {
    /// Normal locations `(mean, sd)` and half-normal scales.
    fn default() -> Self {
        HyperGenerator {
            mu_eta: (-1.5, 0.5),
            sigma_eta: 0.5,
            mu_theta: (0.0, 0.5),
            sigma_theta: 0.5,
            mu_rho: (-2.0, 1.0),
            sigma_rho: 1.0,
        }
    }
}

impl HyperGenerator {
    pub fn draw(&self, rng: &mut StreamRng) -> Result<Hyper> {
        let normal = |rng: &mut StreamRng, (m, s): (f64, f64)| -> Result<f64> {
            Ok(Normal::new(m, s).map_err(|e| Error::param(e.to_string()))?.sample(rng))
        };
        let half = |rng: &mut StreamRng, s: f64| -> Result<f64> { Ok(normal(rng, (0.0, s))?.abs()) };
        let h = Hyper {
            mu_eta: normal(rng, self.mu_eta)?,
            sigma_eta: half(rng, self.sigma_eta)?,
            mu_theta: normal(rng, self.mu_theta)?,
            sigma_theta: half(rng, self.sigma_theta)?,
            mu_rho: normal(rng, self.mu_rho)?,
            sigma_rho: half(rng, self.sigma_rho)?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// One `(N, T)` grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub t: usize,
}

impl Cell {
    pub fn new(n: usize, t: usize) -> Self {
        Cell { n, t }
    }
}

/// `N x T` product grid.
pub fn grid(ns: &[usize], ts: &[usize]) -> Vec<Cell> {
    ns.iter()
        .flat_map(|&n| ts.iter().map(move |&t| Cell { n, t }))
        .collect()
}

/// Outcome for one parameter in one fitted replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamOutcome {
    pub param: String,
    pub truth: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamOutcome {
    pub fn error(&self) -> f64 {
        self.estimate - self.truth
    }

    pub fn covered(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Posterior mean and HDI of named columns against known truths.
pub fn score(draws: &PosteriorDraws, truths: &[(&str, f64)], alpha: f64) -> Result<Vec<ParamOutcome>> {
    truths
        .iter()
        .map(|&(name, truth)| {
            let col = draws.column_by_name(name)?;
            let h = hdi(&col, alpha)?;
            Ok(ParamOutcome {
                param: name.to_string(),
                truth,
                estimate: col.iter().sum::<f64>() / col.len() as f64,
                lower: h.lower,
                upper: h.upper,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub param: String,
    /// Mean absolute error of the posterior mean.
    pub bias: f64,
    pub coverage: f64,
    pub width: f64,
    pub reps: usize,
    pub failures: usize,
    #[serde(skip)]
    pub signed_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

/// Outcome of one replication in one cell; `Err` holds the failure message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub cell: Cell,
    pub replication: usize,
    pub outcome: std::result::Result<Vec<ParamOutcome>, String>,
}

impl MetricsTable {
    /// Aggregates per cell and parameter. Records are sorted by replication
    /// first, so the result does not depend on their order.
    pub fn aggregate(cells: &[Cell], records: &[ReplicationRecord]) -> MetricsTable {
        let mut rows = Vec::new();
        for &cell in cells {
            let mut recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.cell == cell).collect();
            recs.sort_by_key(|r| r.replication);
            let ok: Vec<&Vec<ParamOutcome>> = recs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let failures = recs.len() - ok.len();
            let Some(first) = ok.first() else {
                continue;
            };
            for (k, p) in first.iter().enumerate() {
                let outs: Vec<&ParamOutcome> = ok.iter().map(|o| &o[k]).collect();
                let m = outs.len() as f64;
                rows.push(MetricRow {
                    n: cell.n,
                    t: cell.t,
                    param: p.param.clone(),
                    bias: outs.iter().map(|o| o.error().abs()).sum::<f64>() / m,
                    coverage: outs.iter().filter(|o| o.covered()).count() as f64 / m,
                    width: outs.iter().map(|o| o.width()).sum::<f64>() / m,
                    reps: outs.len(),
                    failures,
                    signed_bias: outs.iter().map(|o| o.error()).sum::<f64>() / m,
                });
            }
        }
        MetricsTable { rows }
    }

    pub fn get(&self, cell: Cell, param: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.n == cell.n && r.t == cell.t && r.param == param)
    }

    pub fn params(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.param) {
                out.push(r.param.clone());
            }
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["N", "T", "param", "bias", "coverage", "width", "reps", "failures"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fails when a cell lost more than [`MAX_FAILURE_RATE`] of its replications.
fn check_failures(cells: &[Cell], records: &[ReplicationRecord]) -> Result<()> {
    for &cell in cells {
        let recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.cell == cell).collect();
        let failed: Vec<&&ReplicationRecord> = recs.iter().filter(|r| r.outcome.is_err()).collect();
        if failed.len() as f64 > MAX_FAILURE_RATE * recs.len() as f64 {
            let first = failed[0];
            return Err(Error::Replication {
                replication: first.replication,
                source: Box::new(Error::Sampler(format!(
                    "cell N={} T={}: {} of {} replications failed; first: {}",
                    cell.n,
                    cell.t,
                    failed.len(),
                    recs.len(),
                    first.outcome.as_ref().err().map_or("", String::as_str)
                ))),
            });
        }
    }
    Ok(())
}

fn check_cells(cells: &[Cell], replications: usize) -> Result<()> {
    if replications == 0 {
        return Err(Error::param("replications must be at least 1"));
    }
    if cells.is_empty() || cells.iter().any(|c| c.n == 0 || c.t == 0) {
        return Err(Error::param("grid cells must be positive"));
    }
    Ok(())
}

fn fit_seed(seed: u64, rep: usize, cell: usize) -> u64 {
    derive_seed(seed, &[tag::FIT, rep as u64, cell as u64])
}

fn data_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &[tag::DATA, rep as u64])
}

fn pooled_posterior(
    costs: &CostSequence,
    traj: ChoiceTrajectory,
    counts: bool,
    rho: RhoMode,
    priors: PriorSpec,
) -> Result<Posterior> {
    let v1 = vec![0.0; costs.routes()];
    let obs = if counts {
        Observation::Counts(anonymize(&traj))
    } else {
        Observation::Trajectory(traj)
    };
    let spec = ModelSpec {
        rho,
        priors,
        ..ModelSpec::new(Regime::from_parts(false, counts))
    };
    Posterior::new(Dataset::single(costs.clone(), obs, v1), spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub replications: usize,
    pub cells: Vec<Cell>,
    pub truth: TruthGenerator,
    /// Fit anonymized counts instead of trajectories.
    pub counts: bool,
    pub sampler: SamplerConfig,
    pub priors: PriorSpec,
    pub environment: CostEnvironment,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            replications: 50,
            cells: grid(&[1, 5, 10, 20], &[10, 30, 50]),
            truth: TruthGenerator::standard(),
            counts: false,
            sampler: desk_sampler(),
            priors: PriorSpec::default(),
            environment: CostEnvironment::default(),
            alpha: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub table: MetricsTable,
    pub records: Vec<ReplicationRecord>,
}

/// Pooled parameter recovery over a grid of `(N, T)` cells.
pub fn run_pooled_recovery(config: &RecoveryConfig) -> Result<RecoveryReport> {
    check_cells(&config.cells, config.replications)?;
    config.sampler.validate()?;
    let max_t = config.cells.iter().map(|c| c.t).max().unwrap_or(1);
    let costs = config.environment.costs(max_t)?;
    let jobs: Vec<(usize, usize)> = (0..config.replications)
        .flat_map(|r| (0..config.cells.len()).map(move |c| (r, c)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(rep, ci)| -> Result<ReplicationRecord> {
            let cell = config.cells[ci];
            let truth = config
                .truth
                .draw(&mut rng::stream(config.seed, &[tag::TRUTH, rep as u64]))?;
            let c = costs.slice(0, cell.t)?;
            let traj = simulate_pooled(&truth, &vec![0.0; c.routes()], &c, cell.n, data_seed(config.seed, rep))?;
            let outcome = pooled_posterior(&c, traj, config.counts, RhoMode::Estimated, config.priors)
                .and_then(|post| {
                    let sampler = SamplerConfig {
                        seed: fit_seed(config.seed, rep, ci),
                        ..config.sampler
                    };
                    nuts_sample(&post, &sampler)
                })
                .and_then(|d| {
                    score(
                        &d,
                        &[("eta", truth.eta), ("theta", truth.theta), ("rho", truth.rho)],
                        config.alpha,
                    )
                })
                .map_err(|e| e.to_string());
            Ok(ReplicationRecord {
                cell,
                replication: rep,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_failures(&config.cells, &records)?;
    Ok(RecoveryReport {
        table: MetricsTable::aggregate(&config.cells, &records),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierRecoveryConfig {
    pub replications: usize,
    pub cells: Vec<Cell>,
    pub truth: HyperGenerator,
    pub counts: bool,
    pub sampler: SamplerConfig,
    pub priors: PriorSpec,
    pub environment: CostEnvironment,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for HierRecoveryConfig {
    fn default() -> Self {
        HierRecoveryConfig {
            replications: 20,
            cells: vec![
                Cell::new(10, 30),
                Cell::new(30, 30),
                Cell::new(50, 30),
                Cell::new(30, 50),
            ],
            truth: HyperGenerator::default(),
            counts: false,
            sampler: desk_sampler(),
            priors: PriorSpec::default(),
            environment: CostEnvironment::default(),
            alpha: 0.95,
            seed: 0,
        }
    }
}

pub const HYPER_NAMES: [&str; 6] = ["mu_eta", "sigma_eta", "mu_theta", "sigma_theta", "mu_rho", "sigma_rho"];

/// Draws a hyperparameter truth and a population that stays inside the
/// parameter space, redrawing the truth when it does not.
fn draw_population(
    gen: &HyperGenerator,
    seed: u64,
    rep: usize,
    n: usize,
    costs: &CostSequence,
) -> Result<(Hyper, ChoiceTrajectory)> {
    let mut rng = rng::stream(seed, &[tag::TRUTH, rep as u64]);
    let v1 = vec![0.0; costs.routes()];
    let mut last = None;
    for _ in 0..50 {
        let h = gen.draw(&mut rng)?;
        match simulate_hierarchical(&h, n, &v1, costs, data_seed(seed, rep)) {
            Ok((_, traj)) => return Ok((h, traj)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::param("no valid population")))
}

fn hier_posterior(
    costs: &CostSequence,
    traj: ChoiceTrajectory,
    counts: bool,
    parameterization: Parameterization,
    priors: PriorSpec,
) -> Result<Posterior> {
    let v1 = vec![0.0; costs.routes()];
    let obs = if counts {
        Observation::Counts(anonymize(&traj))
    } else {
        Observation::Trajectory(traj)
    };
    let spec = ModelSpec {
        parameterization,
        priors,
        ..ModelSpec::new(Regime::from_parts(true, counts))
    };
    Posterior::new(Dataset::single(costs.clone(), obs, v1), spec)
}

/// Hierarchical recovery of the six hyperparameters. Every cell of a
/// replication uses the same truth; the population is drawn for the largest
/// `N` in the grid and cells see its first `N` commuters.
pub fn run_hier_recovery(config: &HierRecoveryConfig) -> Result<RecoveryReport> {
    check_cells(&config.cells, config.replications)?;
    config.sampler.validate()?;
    let max_t = config.cells.iter().map(|c| c.t).max().unwrap_or(1);
    let max_n = config.cells.iter().map(|c| c.n).max().unwrap_or(1);
    let costs = config.environment.costs(max_t)?;
    let populations = (0..config.replications)
        .into_par_iter()
        .map(|rep| draw_population(&config.truth, config.seed, rep, max_n, &costs))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..config.replications)
        .flat_map(|r| (0..config.cells.len()).map(move |c| (r, c)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(rep, ci)| -> Result<ReplicationRecord> {
            let cell = config.cells[ci];
            let (h, full) = &populations[rep];
            let traj = full.truncate_commuters(cell.n)?.truncate_days(cell.t)?;
            let c = costs.slice(0, cell.t)?;
            let truth = h.as_array();
            let named: Vec<(&str, f64)> = HYPER_NAMES.iter().copied().zip(truth).collect();
            let outcome = hier_posterior(&c, traj, config.counts, Parameterization::NonCentered, config.priors)
                .and_then(|post| {
                    let sampler = SamplerConfig {
                        seed: fit_seed(config.seed, rep, ci),
                        ..config.sampler
                    };
                    nuts_sample(&post, &sampler)
                })
                .and_then(|d| score(&d, &named, config.alpha))
                .map_err(|e| e.to_string());
            Ok(ReplicationRecord {
                cell,
                replication: rep,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_failures(&config.cells, &records)?;
    Ok(RecoveryReport {
        table: MetricsTable::aggregate(&config.cells, &records),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbcConfig {
    pub replications: usize,
    pub commuters: usize,
    pub days: usize,
    pub sampler: SamplerConfig,
    pub environment: CostEnvironment,
    /// Posterior draws kept per replication when ranking, to thin autocorrelation.
    pub rank_draws: usize,
    pub seed: u64,
}

impl Default for SbcConfig {
    fn default() -> Self {
        SbcConfig {
            replications: 200,
            commuters: 5,
            days: 20,
            sampler: desk_sampler(),
            environment: CostEnvironment::default(),
            rank_draws: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcParam {
    pub param: String,
    pub ranks: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcReport {
    pub params: Vec<SbcParam>,
    pub failures: usize,
}

/// Simulation-based calibration of the pooled model: truths are drawn from
/// the fitting priors, and the normalized rank of each truth among its
/// posterior draws is tested for uniformity.
pub fn run_sbc(config: &SbcConfig) -> Result<SbcReport> {
    check_cells(&[Cell::new(config.commuters, config.days)], config.replications)?;
    config.sampler.validate()?;
    let costs = config.environment.costs(config.days)?;
    let gen = TruthGenerator::standard();
    let priors = PriorSpec::default();
    let outcomes: Vec<std::result::Result<[f64; 3], String>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let truth = gen.draw(&mut rng::stream(config.seed, &[tag::TRUTH, rep as u64]))?;
            let traj = simulate_pooled(
                &truth,
                &vec![0.0; costs.routes()],
                &costs,
                config.commuters,
                data_seed(config.seed, rep),
            )?;
            Ok((truth, traj))
        })
        .collect::<Result<Vec<_>>>()?
        .into_par_iter()
        .enumerate()
        .map(|(rep, (truth, traj))| {
            pooled_posterior(&costs, traj, false, RhoMode::Estimated, priors)
                .and_then(|post| {
                    nuts_sample(
                        &post,
                        &SamplerConfig {
                            seed: fit_seed(config.seed, rep, 0),
                            ..config.sampler
                        },
                    )
                })
                .map(|d| {
                    let keep = d.thinned(config.rank_draws.max(1));
                    let rank = |name: &str, t: f64| {
                        let i = d.index_of(name).expect("pooled column");
                        rank_of_truth(&keep.iter().map(|r| r[i]).collect::<Vec<_>>(), t)
                    };
                    [
                        rank("eta", truth.eta),
                        rank("theta", truth.theta),
                        rank("rho", truth.rho),
                    ]
                })
                .map_err(|e| e.to_string())
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * config.replications as f64 {
        return Err(Error::Sampler(format!(
            "{failures} of {} calibration fits failed",
            config.replications
        )));
    }
    let ok: Vec<[f64; 3]> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let params = ["eta", "theta", "rho"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let ranks: Vec<f64> = ok.iter().map(|r| r[k]).collect();
            let (d, p) = ks_uniform(&ranks)?;
            Ok(SbcParam {
                param: name.to_string(),
                ranks,
                ks_statistic: d,
                ks_p_value: p,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SbcReport { params, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunnelConfig {
    pub sampler_seeds: Vec<u64>,
    pub commuters: usize,
    pub days: usize,
    pub hyper: Hyper,
    pub sampler: SamplerConfig,
    pub environment: CostEnvironment,
    pub seed: u64,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            sampler_seeds: vec![1, 2, 3, 4, 5],
            commuters: 10,
            days: 15,
            hyper: Hyper {
                mu_eta: -1.5,
                sigma_eta: 0.2,
                mu_theta: 0.0,
                sigma_theta: 0.2,
                mu_rho: -2.0,
                sigma_rho: 0.3,
            },
            sampler: desk_sampler(),
            environment: CostEnvironment::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelRun {
    pub sampler_seed: u64,
    pub non_centered_divergences: usize,
    pub centered_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub runs: Vec<FunnelRun>,
    pub non_centered_total: usize,
    pub centered_total: usize,
}

/// Post-warmup divergences of non-centered and centered hierarchical fits
/// on one dataset across sampler seeds.
pub fn run_funnel(config: &FunnelConfig) -> Result<FunnelReport> {
    config.sampler.validate()?;
    if config.sampler_seeds.is_empty() {
        return Err(Error::param("need at least one sampler seed"));
    }
    let costs = config.environment.costs(config.days)?;
    let (_, traj) = simulate_hierarchical(
        &config.hyper,
        config.commuters,
        &vec![0.0; costs.routes()],
        &costs,
        data_seed(config.seed, 0),
    )?;
    let divergences = |par: Parameterization, seed: u64| -> Result<usize> {
        let post = hier_posterior(&costs, traj.clone(), false, par, PriorSpec::default())?;
        match nuts_sample(&post, &SamplerConfig { seed, ..config.sampler }) {
            Ok(d) => Ok(d.divergences()),
            // A warmup that never leaves divergent territory counts every draw.
            Err(Error::Sampler(_)) => Ok(config.sampler.chains * config.sampler.draws),
            Err(e) => Err(e),
        }
    };
    let runs = config
        .sampler_seeds
        .iter()
        .map(|&s| {
            Ok(FunnelRun {
                sampler_seed: s,
                non_centered_divergences: divergences(Parameterization::NonCentered, s)?,
                centered_divergences: divergences(Parameterization::Centered, s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FunnelReport {
        non_centered_total: runs.iter().map(|r| r.non_centered_divergences).sum(),
        centered_total: runs.iter().map(|r| r.centered_divergences).sum(),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnonymizedConfig {
    pub commuters: usize,
    pub days: usize,
    pub hyper: Hyper,
    pub sampler: SamplerConfig,
    pub environment: CostEnvironment,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AnonymizedConfig {
    fn default() -> Self {
        AnonymizedConfig {
            commuters: 50,
            days: 50,
            hyper: Hyper {
                mu_eta: -1.5,
                sigma_eta: 0.5,
                mu_theta: 0.0,
                sigma_theta: 1.0,
                mu_rho: -2.0,
                sigma_rho: 1.0,
            },
            sampler: desk_sampler(),
            environment: CostEnvironment::default(),
            alpha: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub hyper: Vec<ParamOutcome>,
    /// Posterior means of every commuter's learning rate.
    pub individual_eta: Vec<f64>,
    pub individual_eta_sd: f64,
    pub divergences: usize,
    pub max_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizedReport {
    pub truth: Hyper,
    pub true_individual_eta_sd: f64,
    pub complete: FitSummary,
    pub anonymized: FitSummary,
}

fn sd(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0).max(1.0)).sqrt()
}

/// One heterogeneous population fitted on its trajectories and on their
/// anonymized counts with the same sampler seed.
pub fn run_anonymized_comparison(config: &AnonymizedConfig) -> Result<AnonymizedReport> {
    config.sampler.validate()?;
    let costs = config.environment.costs(config.days)?;
    let (people, traj) = simulate_hierarchical(
        &config.hyper,
        config.commuters,
        &vec![0.0; costs.routes()],
        &costs,
        data_seed(config.seed, 0),
    )?;
    let truth = config.hyper.as_array();
    let named: Vec<(&str, f64)> = HYPER_NAMES.iter().copied().zip(truth).collect();
    let sampler = SamplerConfig {
        seed: fit_seed(config.seed, 0, 0),
        ..config.sampler
    };
    let fit = |counts: bool| -> Result<FitSummary> {
        let post = hier_posterior(
            &costs,
            traj.clone(),
            counts,
            Parameterization::NonCentered,
            PriorSpec::default(),
        )?;
        let d = nuts_sample(&post, &sampler)?;
        let individual_eta: Vec<f64> = (1..=config.commuters)
            .map(|n| {
                let c = d.column_by_name(&format!("eta[{n}]"))?;
                Ok(c.iter().sum::<f64>() / c.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(FitSummary {
            hyper: score(&d, &named, config.alpha)?,
            individual_eta_sd: sd(&individual_eta),
            individual_eta,
            divergences: d.divergences(),
            max_rhat: Diagnostics::compute(&d).max_rhat(),
        })
    };
    Ok(AnonymizedReport {
        truth: config.hyper,
        true_individual_eta_sd: sd(&people.iter().map(|b| b.eta).collect::<Vec<_>>()),
        complete: fit(false)?,
        anonymized: fit(true)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ShiftedPrior,
    AltFamily,
    HeterogeneousPooled,
    Smith,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shifted-prior" => Ok(Scenario::ShiftedPrior),
            "alt-family" => Ok(Scenario::AltFamily),
            "heterogeneous-pooled" => Ok(Scenario::HeterogeneousPooled),
            "smith" => Ok(Scenario::Smith),
            other => Err(Error::param(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisspecConfig {
    pub replications: usize,
    pub commuters: usize,
    /// Days fitted; recovery scenarios use only these.
    pub train_days: usize,
    pub test_days: usize,
    /// Individual learning rates and logit scales of heterogeneous populations.
    pub heterogeneity: (Generator, Generator),
    pub smith: SmithParams,
    pub sampler: SamplerConfig,
    pub priors: PriorSpec,
    pub environment: CostEnvironment,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MisspecConfig {
    fn default() -> Self {
        MisspecConfig {
            replications: 20,
            commuters: 10,
            train_days: 30,
            test_days: 20,
            heterogeneity: (
                Generator::Beta { a: 2.0, b: 5.0 },
                Generator::Gamma { shape: 2.0, scale: 1.0 },
            ),
            smith: SmithParams::default(),
            sampler: desk_sampler(),
            priors: PriorSpec::default(),
            environment: CostEnvironment::default(),
            alpha: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRecord {
    pub replication: usize,
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MisspecReport {
    /// Recovery under the misspecified truth and under the standard truth on
    /// the same seeds.
    Recovery {
        scenario: Scenario,
        table: MetricsTable,
        baseline: MetricsTable,
    },
    /// Mean absolute error of extrapolated aggregate probabilities.
    Extrapolation {
        scenario: Scenario,
        records: Vec<ExtrapolationRecord>,
        mean_mae: f64,
        /// Switching rate actually used by the swapping rule.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        smith_tau: Option<f64>,
    },
}

impl MisspecReport {
    pub fn mean_mae(&self) -> Option<f64> {
        match self {
            MisspecReport::Extrapolation { mean_mae, .. } => Some(*mean_mae),
            MisspecReport::Recovery { .. } => None,
        }
    }
}

/// Largest switching rate up to `smith.tau` that keeps every row of the
/// swapping rule a distribution on these costs.
pub fn admissible_smith_tau(smith: &SmithParams, costs: &CostSequence) -> f64 {
    let m = costs.routes();
    let mut tau = smith.tau;
    for c in costs.rows() {
        for i in 0..m {
            let gain: f64 = (0..m).filter(|&j| j != i && c[j] <= c[i]).map(|j| c[i] - c[j]).sum();
            let costlier = (0..m).filter(|&j| j != i && c[j] > c[i]).count() as f64;
            if gain > 0.0 {
                tau = tau.min((1.0 - smith.epsilon * costlier) / gain);
            }
        }
    }
    tau
}

/// Daily choice distribution of one swapping commuter, `days x (M + 1)`:
/// uniform on day 1, then pushed through each day's transition matrix.
pub fn smith_marginals(smith: &SmithParams, costs: &CostSequence) -> Result<Vec<Vec<f64>>> {
    let m = costs.routes();
    let mut state = vec![1.0 / m as f64; m];
    let mut out = Vec::with_capacity(costs.days());
    for t in 0..costs.days() {
        if t > 0 {
            let p = smith.transition_matrix(costs.day(t - 1))?;
            state = (0..m).map(|j| (0..m).map(|i| state[i] * p[i][j]).sum()).collect();
        }
        out.push(std::iter::once(0.0).chain(state.iter().copied()).collect());
    }
    Ok(out)
}

/// Robustness of the pooled estimator to data it was not built for.
pub fn run_misspecification(scenario: Scenario, config: &MisspecConfig) -> Result<MisspecReport> {
    config.sampler.validate()?;
    check_cells(&[Cell::new(config.commuters, config.train_days)], config.replications)?;
    match scenario {
        Scenario::ShiftedPrior | Scenario::AltFamily => {
            let truth = if scenario == Scenario::ShiftedPrior {
                TruthGenerator::shifted()
            } else {
                TruthGenerator::alt_family()
            };
            let base = RecoveryConfig {
                replications: config.replications,
                cells: vec![Cell::new(config.commuters, config.train_days)],
                truth,
                counts: false,
                sampler: config.sampler,
                priors: config.priors,
                environment: config.environment,
                alpha: config.alpha,
                seed: config.seed,
            };
            let table = run_pooled_recovery(&base)?.table;
            let baseline = run_pooled_recovery(&RecoveryConfig {
                truth: TruthGenerator::standard(),
                ..base
            })?
            .table;
            Ok(MisspecReport::Recovery {
                scenario,
                table,
                baseline,
            })
        }
        Scenario::HeterogeneousPooled | Scenario::Smith => extrapolation_study(scenario, config),
    }
}

fn extrapolation_study(scenario: Scenario, config: &MisspecConfig) -> Result<MisspecReport> {
    if config.test_days == 0 {
        return Err(Error::param("test_days must be positive"));
    }
    let all = config.environment.costs(config.train_days + config.test_days)?;
    let train = all.slice(0, config.train_days)?;
    let future = all.slice(config.train_days, all.days())?;
    let m = all.routes();
    let v1 = vec![0.0; m];
    let smith = SmithParams {
        tau: admissible_smith_tau(&config.smith, &all),
        ..config.smith
    };
    smith.validate()?;

    let records = (0..config.replications)
        .into_par_iter()
        .map(|rep| -> Result<ExtrapolationRecord> {
            let dseed = data_seed(config.seed, rep);
            let (traj, truth) = match scenario {
                Scenario::HeterogeneousPooled => {
                    let mut rng = rng::stream(config.seed, &[tag::TRUTH, rep as u64]);
                    let people = (0..config.commuters)
                        .map(|_| {
                            TruthGenerator {
                                eta: config.heterogeneity.0,
                                theta: config.heterogeneity.1,
                                rho: Generator::Fixed { value: 0.0 },
                            }
                            .draw(&mut rng)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let traj = simulate_individuals(&people, &v1, &all, dseed)?.truncate_days(config.train_days)?;
                    let mut truth = vec![vec![0.0; m + 1]; config.test_days];
                    for b in &people {
                        let path = probability_path(b, &v1, &all);
                        for (row, p) in truth.iter_mut().zip(&path[config.train_days..]) {
                            for (x, y) in row.iter_mut().zip(p) {
                                *x += y / people.len() as f64;
                            }
                        }
                    }
                    (traj, truth)
                }
                Scenario::Smith => {
                    let traj = simulate_smith(&smith, &train, config.commuters, dseed)?;
                    (traj, smith_marginals(&smith, &all)?[config.train_days..].to_vec())
                }
                _ => unreachable!("recovery scenarios handled elsewhere"),
            };
            let outcome = pooled_posterior(&train, traj, false, RhoMode::Fixed(0.0), config.priors)
                .and_then(|post| {
                    nuts_sample(
                        &post,
                        &SamplerConfig {
                            seed: fit_seed(config.seed, rep, 0),
                            ..config.sampler
                        },
                    )
                })
                .and_then(|d| {
                    let pd = predictive_draws(&d, Some(0.0), None)?;
                    let step = pd.len().div_ceil(200);
                    let kept: Vec<_> = pd.into_iter().step_by(step).collect();
                    extrapolate(&kept, &v1, &train, &future, Some(&truth))
                })
                .map(|ex| ex.mae.unwrap_or(f64::NAN))
                .map_err(|e| e.to_string());
            Ok(ExtrapolationRecord {
                replication: rep,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<f64> = records
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().copied())
        .collect();
    if (records.len() - ok.len()) as f64 > MAX_FAILURE_RATE * records.len() as f64 {
        return Err(Error::Sampler(format!(
            "{} of {} extrapolation fits failed",
            records.len() - ok.len(),
            records.len()
        )));
    }
    Ok(MisspecReport::Extrapolation {
        scenario,
        mean_mae: ok.iter().sum::<f64>() / ok.len() as f64,
        records,
        smith_tau: (scenario == Scenario::Smith).then_some(smith.tau),
    })
}

/// Average of a metric over parameters in one cell.
pub fn mean_metric(table: &MetricsTable, cell: Cell, params: &[&str], f: impl Fn(&MetricRow) -> f64) -> Option<f64> {
    let vals: Option<Vec<f64>> = params.iter().map(|p| table.get(cell, p).map(&f)).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}
