use std::path::{Path, PathBuf};

use fairbranch_core::data::{stratified_split, Dataset, SplitSpec, StratifyOn};
use fairbranch_core::trainer::{
    run_training, save_run, TrainConfig, TrainMode, TrainReport,
};

use crate::util::{
    load_table, prepare_run_dir, usage_check, write_invocation, CliError, CliResult, DataArgs,
};

#[derive(clap::Args, Clone, Debug)]
pub struct CommonTrainArgs {
    /// Base config JSON; missing fields take defaults, flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Epoch cap.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of rows held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Replace an existing non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

impl CommonTrainArgs {
    pub fn resolve(&self, tau: Option<f64>) -> CliResult<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::usage(format!("bad config {}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = tau {
            cfg.tau = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        usage_check(cfg.validate())?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CliError::usage(format!(
                "--val-fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(cfg)
    }
}

pub fn split_train_val(
    data: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> CliResult<(Dataset, Dataset)> {
    stratified_split(
        data,
        &SplitSpec {
            train_fraction: 1.0 - val_fraction,
            stratify_on: StratifyOn::Protected,
            seed,
        },
    )
    .map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(clap::ValueEnum, Clone, Copy, PartialEq, Debug)]
pub enum ModeArg {
    Fairbranch,
    Vanilla,
    Stl,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory to create.
    #[arg(short, long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Fairbranch)]
    pub mode: ModeArg,
    /// Task index; required by and exclusive to --mode stl.
    #[arg(long)]
    pub task: Option<usize>,
    /// Similarity threshold for branch pairing.
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

fn mode_of(args: &TrainArgs) -> CliResult<TrainMode> {
    match (args.mode, args.task) {
        (ModeArg::Stl, Some(task)) => Ok(TrainMode::Stl { task }),
        (ModeArg::Stl, None) => Err(CliError::usage("--mode stl requires --task")),
        (_, Some(_)) => Err(CliError::usage("--task applies only to --mode stl")),
        (ModeArg::Fairbranch, None) => Ok(TrainMode::FairBranch),
        (ModeArg::Vanilla, None) => Ok(TrainMode::Vanilla),
    }
}

pub fn train_into(
    dir: &Path,
    mode: TrainMode,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> CliResult<TrainReport> {
    let (train, val) = match mode {
        TrainMode::Stl { task } => {
            let bound = train.n_tasks();
            if task >= bound {
                return Err(CliError::usage(format!(
                    "--task {task} out of range; dataset has tasks 0..{bound}"
                )));
            }
            (train.single_task(task)?, val.single_task(task)?)
        }
        _ => (train.clone(), val.clone()),
    };
    let report = run_training(mode, &train, &val, cfg)?;
    save_run(&report, dir)?;
    Ok(report)
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.common.resolve(args.tau)?;
    let mode = mode_of(args)?;
    let data = load_table(&args.data)?;
    let (train, val) = split_train_val(&data, args.common.val_fraction, cfg.seed)?;
    prepare_run_dir(&args.out, args.common.force)?;
    write_invocation(&args.out)?;
    let report = train_into(&args.out, mode, &train, &val, &cfg)?;
    println!(
        "{}: {} epochs ({}), {} branch events, relative parameters {:.4}, \
         conflicts {} accuracy / {} fairness ({} corrected)",
        args.out.display(),
        report.epochs_run,
        if report.converged { "converged" } else { "epoch cap" },
        report.branch_events.len(),
        report.relative_parameters,
        report.conflict_counts.accuracy,
        report.conflict_counts.fairness,
        report.conflict_counts.corrected,
    );
    Ok(())
}
