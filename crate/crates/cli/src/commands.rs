use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use d2d_core::dynamics::{
    anonymize, choice_probabilities, horowitz_step, simulate_background, simulate_hierarchical, simulate_pooled,
    simulate_smith, BackgroundConfig, Behavior, ChoiceTrajectory, SmithParams,
};
use d2d_core::experiments::{self, MisspecReport, Scenario};
use d2d_core::inference::{
    contrast_draws, extrapolate, hdi, logit_contrast, posterior_predictive, predictive_draws, rope_test, summarize,
    DrawBehavior, PredictiveDraw,
};
use d2d_core::io;
use d2d_core::model::{Dataset, InitValues, ModelSpec, Observation, OdBlock, Posterior, Regime};
use d2d_core::network::{build_nd_network, CostSequence, ND_STUDY_OD};
use d2d_core::sampler::{nuts_sample, Diagnostics, PosteriorDraws, SamplerConfig};
use d2d_core::Error;
use serde_json::json;

use crate::args::{
    Cli, Command, CompareArgs, DiagnoseArgs, Env, ExperimentArgs, FitArgs, FitModel, InitMode, Obs, PredictArgs,
    ScenarioArg, SimModel, SimulateArgs, Study,
};
use crate::config::{self, Config, ContrastScale};
use crate::manifest::{self, RunManifest};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_VALIDATION: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::Sampler(_) | Error::Numerical(_) | Error::Replication { .. } => EXIT_FAILURE,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
}

struct Run<'a> {
    cli: &'a Cli,
    config: Config,
    manifest: RunManifest,
    warnings: Vec<String>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        self.manifest.output(&p);
        Ok(BufWriter::new(f))
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        io::save_json(&p, value)?;
        self.manifest.output(&p);
        Ok(())
    }

    fn finish(mut self) -> Result<Outcome> {
        self.manifest.finished_unix = manifest::now();
        self.manifest
            .notes
            .extend(self.warnings.iter().map(|w| format!("warning: {w}")));
        let p = self.path("manifest.json");
        io::save_json(&p, &self.manifest)?;
        if let Some(missing) = self.manifest.missing().first() {
            return Err(CliError::io(format!("output {} was not written", missing.display())));
        }
        Ok(Outcome {
            warnings: self.warnings,
        })
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let (config, hash) = config::load(cli.config.as_deref())?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(format!("{}: {e}", cli.out.display())))?;
    let mut run = Run {
        cli,
        config,
        manifest: RunManifest::new(hash, cli.seed),
        warnings: Vec::new(),
    };
    match &cli.command {
        Command::Simulate(a) => simulate(&mut run, a)?,
        Command::Fit(a) => fit(&mut run, a)?,
        Command::Predict(a) => predict(&mut run, a)?,
        Command::Compare(a) => compare(&mut run, a)?,
        Command::Diagnose(a) => diagnose(&mut run, a)?,
        Command::Experiment(a) => experiment(&mut run, a)?,
    }
    run.finish()
}

fn pick_od(seqs: Vec<CostSequence>, od: Option<u32>, file: &Path) -> Result<CostSequence> {
    match od {
        Some(id) => seqs
            .into_iter()
            .find(|c| c.od_id == id)
            .ok_or_else(|| CliError::invalid(format!("{}: no od_id {id}", file.display()))),
        None if seqs.len() == 1 => Ok(seqs.into_iter().next().expect("one sequence")),
        None => Err(CliError::invalid(format!(
            "{}: several OD pairs; choose one with --od",
            file.display()
        ))),
    }
}

fn simulate(run: &mut Run, a: &SimulateArgs) -> Result<()> {
    if a.n == 0 || a.t == 0 {
        return Err(CliError::invalid("--n and --t must be positive"));
    }
    let cfg = run.config.simulate.clone();
    let seed = run.cli.seed;
    let costs = match a.env {
        Env::NdBackground => {
            let bg = BackgroundConfig {
                days: cfg.background.warmup + a.t,
                ..cfg.background
            };
            simulate_background(&build_nd_network(), ND_STUDY_OD, &bg, seed)?
        }
        Env::FileCosts => {
            let path = a
                .costs
                .as_ref()
                .ok_or_else(|| CliError::invalid("--env file-costs needs --costs"))?;
            let c = pick_od(io::load_costs(path)?, a.od, path)?;
            if c.days() < a.t {
                return Err(CliError::invalid(format!(
                    "cost file has {} days, {} requested",
                    c.days(),
                    a.t
                )));
            }
            c.slice(0, a.t)?
        }
    };
    let v1 = vec![0.0; costs.routes()];
    let (traj, truth): (ChoiceTrajectory, serde_json::Value) = match a.model {
        SimModel::Pooled => (
            simulate_pooled(&cfg.behavior, &v1, &costs, a.n, seed)?,
            json!({ "model": "pooled", "behavior": cfg.behavior, "v1": v1 }),
        ),
        SimModel::Hier => {
            let (people, traj) = simulate_hierarchical(&cfg.hyper, a.n, &v1, &costs, seed)?;
            (
                traj,
                json!({ "model": "hier", "hyper": cfg.hyper, "individuals": people, "v1": v1 }),
            )
        }
        SimModel::Horowitz => {
            let b = Behavior {
                rho: 0.0,
                ..cfg.behavior
            };
            let traj = simulate_pooled(&b, &v1, &costs, a.n, seed)?;
            let mut perceived = v1.clone();
            let mut shares = vec![choice_probabilities(&v1, b.theta, 0.0)?[1..].to_vec()];
            for t in 0..costs.days() - 1 {
                let (next, flows) = horowitz_step(&perceived, costs.day(t), b.eta, b.theta, 1.0)?;
                perceived = next;
                shares.push(flows);
            }
            (
                traj,
                json!({ "model": "horowitz", "behavior": b, "v1": v1, "aggregate_shares": shares }),
            )
        }
        SimModel::Smith => {
            let tau = experiments::admissible_smith_tau(&cfg.smith, &costs);
            if tau < cfg.smith.tau {
                run.manifest.notes.push(format!(
                    "smith tau lowered from {} to {tau} so every switch row is a distribution",
                    cfg.smith.tau
                ));
            }
            let smith = SmithParams { tau, ..cfg.smith };
            let traj = simulate_smith(&smith, &costs, a.n, seed)?;
            let marginals = experiments::smith_marginals(&smith, &costs)?;
            (
                traj,
                json!({ "model": "smith", "smith": smith, "configured_tau": cfg.smith.tau, "marginals": marginals }),
            )
        }
    };
    io::write_trajectories(run.create("trajectory.csv")?, std::slice::from_ref(&traj))?;
    if a.anonymize {
        io::write_counts(run.create("counts.csv")?, &[anonymize(&traj)])?;
    }
    io::write_costs(run.create("costs.csv")?, std::slice::from_ref(&costs))?;
    run.json("truth.json", &truth)?;
    Ok(())
}

fn initial_values(mode: InitMode, costs: &CostSequence) -> (Vec<f64>, InitValues) {
    match mode {
        InitMode::Zeros => (vec![0.0; costs.routes()], InitValues::Fixed),
        InitMode::Freeflow => {
            let v = (0..costs.routes())
                .map(|i| costs.rows().map(|r| r[i]).fold(f64::INFINITY, f64::min))
                .collect();
            (v, InitValues::Fixed)
        }
        InitMode::Delta => (vec![0.0; costs.routes()], InitValues::EndogenousDelta),
    }
}

fn costs_for(all: &[CostSequence], od: u32, days: usize) -> Result<CostSequence> {
    let c = all
        .iter()
        .find(|c| c.od_id == od)
        .ok_or_else(|| CliError::invalid(format!("no costs for od_id {od}")))?;
    if c.days() < days {
        return Err(CliError::invalid(format!(
            "od {od}: {days} data days but only {} cost days",
            c.days()
        )));
    }
    Ok(c.slice(0, days)?)
}

const HIER_COUNTS_CAVEAT: &str = "hierarchical fit on anonymized counts: the count likelihood replaces each day's \
    heterogeneous count law by a multinomial at the average probabilities, which carries little information about \
    between-commuter spread; expect sigma_* and individual estimates to be shrunk toward zero dispersion";

fn fit(run: &mut Run, a: &FitArgs) -> Result<()> {
    let cfg = run.config.fit.clone();
    let all_costs = io::load_costs(&a.costs)?;
    let routes_of = |od: u32| all_costs.iter().find(|c| c.od_id == od).map(CostSequence::routes);
    let observations: Vec<Observation> = match a.obs {
        Obs::Complete => {
            if a.pad_to_n.is_some() {
                return Err(CliError::invalid("--pad-to-n applies to count data"));
            }
            io::load_trajectories(&a.data, routes_of)?
                .into_iter()
                .map(Observation::Trajectory)
                .collect()
        }
        Obs::Counts => io::load_counts(&a.data, a.pad_to_n)?
            .into_iter()
            .map(Observation::Counts)
            .collect(),
    };
    let mut init = InitValues::Fixed;
    let mut blocks = Vec::new();
    for obs in observations {
        let od = match &obs {
            Observation::Trajectory(t) => t.od_id,
            Observation::Counts(c) => c.od_id,
        };
        let costs = costs_for(&all_costs, od, obs.days())?;
        let (v1, mode) = initial_values(a.init_values, &costs);
        init = mode;
        blocks.push(OdBlock { costs, obs, v1 });
    }
    let hier = a.model == FitModel::Hier;
    let counts = a.obs == Obs::Counts;
    let spec = ModelSpec {
        regime: Regime::from_parts(hier, counts),
        init,
        parameterization: cfg.parameterization,
        rho: cfg.rho,
        priors: cfg.priors,
    };
    let post = Posterior::new(Dataset { blocks }, spec)?;
    let sampler = SamplerConfig {
        seed: run.cli.seed,
        chains: a.chains.unwrap_or(cfg.sampler.chains),
        warmup: a.warmup.unwrap_or(cfg.sampler.warmup),
        draws: a.draws.unwrap_or(cfg.sampler.draws),
        ..cfg.sampler
    };
    let draws = nuts_sample(&post, &sampler)?;
    io::write_draws(run.create("draws.csv")?, &draws)?;
    let diag = Diagnostics::compute(&draws);
    for p in &diag.params {
        if let Some(r) = p.rhat.filter(|&r| r > cfg.max_rhat) {
            run.warnings
                .push(format!("{}: R-hat {r:.3} exceeds {}", p.name, cfg.max_rhat));
        }
    }
    run.json("diagnostics.json", &diag)?;
    let mut caveats = Vec::new();
    if hier && counts {
        caveats.push(HIER_COUNTS_CAVEAT);
    }
    let summary = json!({
        "regime": spec.regime,
        "init_values": format!("{:?}", a.init_values).to_lowercase(),
        "commuters": post.commuters(),
        "alpha": cfg.alpha,
        "params": summarize(&draws, cfg.alpha)?,
        "divergences": draws.divergences(),
        "warmup_divergences": draws.warmup_divergences,
        "step_size": draws.step_size,
        "warnings": run.warnings,
        "caveats": caveats,
    });
    run.json("summary.json", &summary)?;
    Ok(())
}

fn predict(run: &mut Run, a: &PredictArgs) -> Result<()> {
    let cfg = run.config.predict.clone();
    let draws = io::load_draws(&a.draws)?;
    let costs = pick_od(io::load_costs(&a.costs)?, a.od, &a.costs)?;
    if a.train_days == 0 || a.train_days > costs.days() {
        return Err(CliError::invalid(format!(
            "--train-days must lie in 1..={} for this cost file",
            costs.days()
        )));
    }
    let od_prefix = format!("delta[{}][", costs.od_id);
    let od = draws
        .names
        .iter()
        .any(|n| n.starts_with(&od_prefix))
        .then_some(costs.od_id);
    let pdraws = predictive_draws(&draws, cfg.fixed_rho, od)?;
    let train = costs.slice(0, a.train_days)?;
    let (v1, _) = initial_values(a.init_values, &train);
    let n = match (&pdraws[0].behavior, a.n) {
        (_, Some(n)) => n,
        (DrawBehavior::Individuals(v), None) => v.len(),
        (DrawBehavior::Pooled(_), None) => return Err(CliError::invalid("pooled draws need --n")),
    };
    let bands = posterior_predictive(&pdraws, &v1, &train, n, &cfg.predictive, run.cli.seed)?;
    io::write_bands(run.create("bands.csv")?, &bands.bands)?;
    if costs.days() > a.train_days {
        let future = costs.slice(a.train_days, costs.days())?;
        let step = pdraws.len().div_ceil(cfg.predictive.max_draws.max(1));
        let kept: Vec<PredictiveDraw> = pdraws.into_iter().step_by(step).collect();
        let ex = extrapolate(&kept, &v1, &train, &future, None)?;
        let mut w = csv::Writer::from_writer(run.create("extrapolation.csv")?);
        w.write_record(["day", "route_id", "mean", "lo95", "hi95"])
            .map_err(Error::from)?;
        for d in &ex.days {
            w.serialize((d.day + a.train_days, d.route_id, d.mean, d.lo95, d.hi95))
                .map_err(Error::from)?;
        }
        w.flush().map_err(|e| CliError::io(e.to_string()))?;
    }
    Ok(())
}

fn compare(run: &mut Run, a: &CompareArgs) -> Result<()> {
    let cfg = run.config.compare.clone();
    let da = io::load_draws(&a.a)?;
    let db = io::load_draws(&a.b)?;
    let xa = da.column_by_name(&cfg.param)?;
    let xb = db.column_by_name(&cfg.param)?;
    let (contrast, pairing) = match cfg.scale {
        ContrastScale::Logit => logit_contrast(&xa, &xb, run.cli.seed)?,
        ContrastScale::Identity => contrast_draws(&xa, &xb, |x| x, run.cli.seed)?,
    };
    let rope = rope_test(&contrast, cfg.rope)?;
    let band = hdi(&contrast, cfg.alpha).ok();
    let mean = contrast.iter().sum::<f64>() / contrast.len() as f64;
    let report = json!({
        "param": cfg.param,
        "scale": cfg.scale,
        "pairing": pairing,
        "contrast_mean": mean,
        "contrast_hdi": band.map(|h| [h.lower, h.upper]),
        "rope": rope,
        "odds_ratio_band": (cfg.scale == ContrastScale::Logit).then(|| [cfg.rope.0.exp(), cfg.rope.1.exp()]),
    });
    run.json("rope.json", &report)?;
    Ok(())
}

fn diagnose(run: &mut Run, a: &DiagnoseArgs) -> Result<()> {
    let draws: PosteriorDraws = io::load_draws(&a.draws)?;
    let diag = Diagnostics::compute(&draws);
    let limit = run.config.fit.max_rhat;
    for p in &diag.params {
        if let Some(r) = p.rhat.filter(|&r| r > limit) {
            run.warnings.push(format!("{}: R-hat {r:.3} exceeds {limit}", p.name));
        }
    }
    run.json("diagnostics.json", &diag)?;
    Ok(())
}

fn experiment(run: &mut Run, a: &ExperimentArgs) -> Result<()> {
    let mut cfg = run.config.experiment.clone();
    let seed = run.cli.seed;
    let reps = a.replications;
    if a.scenario.is_some() && a.study != Study::Misspecification {
        return Err(CliError::invalid("--scenario applies to --study misspecification"));
    }
    match a.study {
        Study::PooledRecovery => {
            let c = &mut cfg.pooled_recovery;
            c.seed = seed;
            c.replications = reps.unwrap_or(c.replications);
            let r = experiments::run_pooled_recovery(c)?;
            r.table.write_csv(run.create("metrics.csv")?)?;
            run.json("report.json", &r)?;
        }
        Study::HierRecovery => {
            let c = &mut cfg.hier_recovery;
            c.seed = seed;
            c.replications = reps.unwrap_or(c.replications);
            let r = experiments::run_hier_recovery(c)?;
            r.table.write_csv(run.create("metrics.csv")?)?;
            run.json("report.json", &r)?;
        }
        Study::Sbc => {
            let c = &mut cfg.sbc;
            c.seed = seed;
            c.replications = reps.unwrap_or(c.replications);
            run.json("report.json", &experiments::run_sbc(c)?)?;
        }
        Study::Funnel => {
            let c = &mut cfg.funnel;
            c.seed = seed;
            run.json("report.json", &experiments::run_funnel(c)?)?;
        }
        Study::Anonymized => {
            let c = &mut cfg.anonymized;
            c.seed = seed;
            run.json("report.json", &experiments::run_anonymized_comparison(c)?)?;
        }
        Study::Misspecification => {
            let scenario = match a
                .scenario
                .ok_or_else(|| CliError::invalid("--study misspecification needs --scenario"))?
            {
                ScenarioArg::ShiftedPrior => Scenario::ShiftedPrior,
                ScenarioArg::AltFamily => Scenario::AltFamily,
                ScenarioArg::HeterogeneousPooled => Scenario::HeterogeneousPooled,
                ScenarioArg::Smith => Scenario::Smith,
            };
            let c = &mut cfg.misspecification;
            c.seed = seed;
            c.replications = reps.unwrap_or(c.replications);
            let r = experiments::run_misspecification(scenario, c)?;
            if let MisspecReport::Recovery { table, .. } = &r {
                table.write_csv(run.create("metrics.csv")?)?;
            }
            run.manifest.notes.push("estimation priors: model defaults".into());
            run.json("report.json", &r)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let io_err = Error::Io(std::io::Error::other("disk"));
        assert_eq!(CliError::from(io_err).exit_code(), EXIT_IO);
        assert_eq!(CliError::from(Error::Sampler("stuck".into())).exit_code(), EXIT_FAILURE);
        assert_eq!(CliError::from(Error::UnknownLink(3)).exit_code(), EXIT_INVALID);
    }

    #[test]
    fn freeflow_values_are_route_minima() {
        let costs = CostSequence::new(1, vec![vec![3.0, 5.0], vec![2.0, 6.0]]).unwrap();
        let (v, mode) = initial_values(InitMode::Freeflow, &costs);
        assert_eq!(v, vec![2.0, 5.0]);
        assert_eq!(mode, InitValues::Fixed);
    }
}
