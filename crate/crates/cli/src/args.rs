use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "d2d",
    version,
    about = "Day-to-day route choice: simulation and Bayesian estimation"
)]
pub struct Cli {
    /// JSON configuration holding every numeric setting.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Exit nonzero when a validation warning is raised.
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate choices on a cost sequence.
    Simulate(SimulateArgs),
    /// Fit a model with NUTS.
    Fit(FitArgs),
    /// Posterior predictive bands and extrapolation from a draws file.
    Predict(PredictArgs),
    /// ROPE test on the contrast between two draw files.
    Compare(CompareArgs),
    /// Convergence diagnostics of a draws file.
    Diagnose(DiagnoseArgs),
    /// Run a simulation study.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimModel {
    Pooled,
    Hier,
    Horowitz,
    Smith,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Env {
    NdBackground,
    FileCosts,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Data-generating model.
    #[arg(long, value_enum)]
    pub model: SimModel,
    /// Source of daily route costs.
    #[arg(long, value_enum, default_value = "nd-background")]
    pub env: Env,
    /// Cost file for `--env file-costs`.
    #[arg(long, value_name = "PATH")]
    pub costs: Option<PathBuf>,
    /// OD pair to use from a multi-OD cost file.
    #[arg(long)]
    pub od: Option<u32>,
    /// Commuters.
    #[arg(long)]
    pub n: usize,
    /// Days.
    #[arg(long)]
    pub t: usize,
    /// Also write daily counts.
    #[arg(long)]
    pub anonymize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Obs {
    Complete,
    Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitModel {
    Pooled,
    Hier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitMode {
    /// Day-1 values are zero.
    Zeros,
    /// Day-1 values are each route's smallest observed cost.
    Freeflow,
    /// Zeros plus estimated offsets relative to route 1.
    Delta,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Trajectory or count file.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Route costs covering every day of the data.
    #[arg(long, value_name = "PATH")]
    pub costs: PathBuf,
    /// Whether the data file holds trajectories or daily counts.
    #[arg(long, value_enum)]
    pub obs: Obs,
    /// Pooled or hierarchical model.
    #[arg(long, value_enum)]
    pub model: FitModel,
    /// Day-1 perceived values.
    #[arg(long = "init-values", value_enum, default_value = "zeros")]
    pub init_values: InitMode,
    /// Top up non-travel counts so that every day sums to K.
    #[arg(long = "pad-to-n", value_name = "K")]
    pub pad_to_n: Option<u32>,
    /// Overrides fit.sampler.chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Overrides fit.sampler.warmup.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Overrides fit.sampler.draws.
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Draws file written by `fit`.
    #[arg(long, value_name = "PATH")]
    pub draws: PathBuf,
    /// Costs of the training days followed by any days to extrapolate.
    #[arg(long, value_name = "PATH")]
    pub costs: PathBuf,
    /// OD pair to use from a multi-OD cost file.
    #[arg(long)]
    pub od: Option<u32>,
    /// Days used for fitting; later cost rows are extrapolated.
    #[arg(long = "train-days")]
    pub train_days: usize,
    /// Commuters per replicated dataset; defaults to the fitted population.
    #[arg(long)]
    pub n: Option<usize>,
    /// Day-1 perceived values; must match the fit.
    #[arg(long = "init-values", value_enum, default_value = "zeros")]
    pub init_values: InitMode,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// First draws file.
    #[arg(long, value_name = "PATH")]
    pub a: PathBuf,
    /// Second draws file; the contrast is a minus b.
    #[arg(long, value_name = "PATH")]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Draws file to check.
    #[arg(long, value_name = "PATH")]
    pub draws: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    PooledRecovery,
    HierRecovery,
    Sbc,
    Funnel,
    Anonymized,
    Misspecification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    ShiftedPrior,
    AltFamily,
    HeterogeneousPooled,
    Smith,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Study to run; settings come from the experiment section of the config.
    #[arg(long, value_enum)]
    pub study: Study,
    /// Misspecification scenario.
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Overrides the configured replication count.
    #[arg(long)]
    pub replications: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_has_help() {
        let cli = Cli::command();
        for sub in cli.get_subcommands() {
            for arg in sub.get_arguments() {
                assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
            }
        }
        Cli::command().debug_assert();
    }
}
