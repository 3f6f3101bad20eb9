use std::path::PathBuf;

use fairbranch_core::metrics::evaluate;
use fairbranch_core::trainer::TrainMode;

use crate::train::{split_train_val, train_into, CommonTrainArgs};
use crate::util::{
    load_table, prepare_run_dir, standardized, stl_scores, write_invocation, CliError, CliResult,
    DataArgs,
};

/// Keeps zero-violation baselines from blowing up the fairness ratio.
const ARF_EPSILON: f64 = 1e-6;

#[derive(clap::Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Similarity thresholds to sweep, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub taus: Vec<f64>,
    /// Sweep directory to create.
    #[arg(short, long, default_value = "sweep")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

struct SweepRow {
    tau: f64,
    rp: f64,
    ara: f64,
    arf_ep: f64,
    arf_eo: f64,
}

fn check_taus(taus: &[f64]) -> CliResult<()> {
    if taus.is_empty() {
        return Err(CliError::usage("--taus needs at least one value"));
    }
    for (i, tau) in taus.iter().enumerate() {
        if !(*tau > 0.0 && *tau <= 1.0) {
            return Err(CliError::usage(format!("tau must be in (0,1], got {tau}")));
        }
        if taus[..i].contains(tau) {
            return Err(CliError::usage(format!("duplicate tau {tau}")));
        }
    }
    Ok(())
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    check_taus(&args.taus)?;
    let cfg = args.common.resolve(None)?;
    let data = load_table(&args.data)?;
    let (train, val) = split_train_val(&data, args.common.val_fraction, cfg.seed)?;
    prepare_run_dir(&args.out, args.common.force)?;
    write_invocation(&args.out)?;

    // One shared set of single-task baselines; every tau is scored against it.
    let mut baselines = Vec::with_capacity(data.n_tasks());
    for task in 0..data.n_tasks() {
        let dir = args.out.join(format!("stl_task{task}"));
        let report = train_into(&dir, TrainMode::Stl { task }, &train, &val, &cfg)?;
        let single = val.single_task(task)?;
        baselines.push(stl_scores(
            &report.topology,
            report.standardizer.as_ref(),
            &single,
        )?);
    }

    let mut rows = Vec::with_capacity(args.taus.len());
    for &tau in &args.taus {
        let mut cfg_tau = cfg.clone();
        cfg_tau.tau = tau;
        let dir = args.out.join(format!("tau_{tau}"));
        let report = train_into(&dir, TrainMode::FairBranch, &train, &val, &cfg_tau)?;
        let scored = standardized(&val, report.standardizer.as_ref());
        let result = evaluate(&report.topology, &scored, &baselines)?;

        let t_count = data.n_tasks() as f64;
        let mut ara = 0.0;
        let mut arf_ep = 0.0;
        let mut arf_eo = 0.0;
        for (e, b) in result.per_task.iter().zip(&baselines) {
            ara += e.accuracy / b.accuracy / t_count;
            arf_ep += (e.ep_viol + ARF_EPSILON) / (b.ep_viol + ARF_EPSILON) / t_count;
            arf_eo += (e.eo_viol + ARF_EPSILON) / (b.eo_viol + ARF_EPSILON) / t_count;
        }
        rows.push(SweepRow {
            tau,
            rp: report.relative_parameters,
            ara,
            arf_ep,
            arf_eo,
        });
    }

    let mut w = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    w.write_record(["tau", "rp", "ara", "arf_ep", "arf_eo"])?;
    println!(
        "{:>6} {:>8} {:>8} {:>8} {:>8}",
        "tau", "rp", "ara", "arf_ep", "arf_eo"
    );
    for row in &rows {
        w.write_record([
            row.tau.to_string(),
            row.rp.to_string(),
            row.ara.to_string(),
            row.arf_ep.to_string(),
            row.arf_eo.to_string(),
        ])?;
        println!(
            "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.tau, row.rp, row.ara, row.arf_ep, row.arf_eo
        );
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}
