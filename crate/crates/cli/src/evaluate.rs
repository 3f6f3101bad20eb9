use std::path::{Path, PathBuf};

use fairbranch_core::branching::BranchEvent;
use fairbranch_core::checkpoint::{load_checkpoint, MANIFEST_FILE};
use fairbranch_core::data::{Dataset, Standardizer};
use fairbranch_core::metrics::{evaluate, EvalResult, StlBaseline};
use fairbranch_core::network::Topology;

use crate::util::{
    input_error, load_table, standardized, stl_scores, CliError, CliResult, DataArgs,
};

#[derive(clap::ValueEnum, Clone, Copy, PartialEq, Debug)]
pub enum Format {
    Json,
    Csv,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Run directory holding the model to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Single-task run directories supplying per-task baselines.
    #[arg(long, value_delimiter = ',')]
    pub stl: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_run(dir: &Path) -> CliResult<(Topology, Option<Standardizer>, Vec<BranchEvent>)> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::usage(format!(
            "{} has no checkpoint",
            dir.display()
        )));
    }
    load_checkpoint(dir).map_err(input_error)
}

/// Which label column a single-task run was trained on, per its own report.
fn baseline_column(dir: &Path) -> CliResult<String> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("bad report {}: {e}", path.display())))?;
    if v["mode"]["stl"].is_null() {
        return Err(CliError::usage(format!(
            "{} is not a single-task run",
            dir.display()
        )));
    }
    v["task_names"][0]
        .as_str()
        .map(String::from)
        .ok_or_else(|| CliError::usage(format!("bad report {}: no task names", path.display())))
}

fn collect_baselines(args: &EvaluateArgs, data: &Dataset) -> CliResult<Vec<StlBaseline>> {
    let t_count = data.n_tasks();
    let mut slots: Vec<Option<StlBaseline>> = vec![None; t_count];
    for dir in &args.stl {
        let name = baseline_column(dir)?;
        let Some(task) = data.task_names.iter().position(|n| *n == name) else {
            return Err(CliError::usage(format!(
                "{} was trained on column {name}, which is not among the dataset tasks",
                dir.display()
            )));
        };
        if slots[task].is_some() {
            return Err(CliError::usage(format!(
                "two baselines given for task column {name}"
            )));
        }
        let (top, st, _) = load_run(dir)?;
        let single = data.single_task(task)?;
        slots[task] = Some(stl_scores(&top, st.as_ref(), &single)?);
    }
    let missing: Vec<String> = (0..t_count)
        .filter(|t| slots[*t].is_none())
        .map(|t| data.task_names[t].clone())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "missing single-task baselines for tasks: {}",
            missing.join(", ")
        )));
    }
    Ok(slots.into_iter().map(|s| s.unwrap()).collect())
}

fn render_csv(result: &EvalResult) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "accuracy", "ep_viol", "eo_viol", "kg", "dg_ep", "dg_eo"])?;
    for (t, e) in result.per_task.iter().enumerate() {
        w.write_record([
            t.to_string(),
            e.accuracy.to_string(),
            e.ep_viol.to_string(),
            e.eo_viol.to_string(),
            e.kg.to_string(),
            e.dg_ep.to_string(),
            e.dg_eo.to_string(),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        result.mean_accuracy.to_string(),
        result.mean_ep_viol.to_string(),
        result.mean_eo_viol.to_string(),
        result.mean_kg.to_string(),
        result.mean_dg_ep.to_string(),
        result.mean_dg_eo.to_string(),
    ])?;
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(args: &EvaluateArgs) -> CliResult<()> {
    let data = load_table(&args.data)?;
    let (top, st, _events) = load_run(&args.checkpoint)?;
    if top.n_tasks() != data.n_tasks() {
        return Err(CliError::usage(format!(
            "checkpoint has {} heads but the dataset has {} task columns",
            top.n_tasks(),
            data.n_tasks()
        )));
    }
    if top.in_dim != data.n_features() {
        return Err(CliError::usage(format!(
            "checkpoint expects {} features but the dataset has {}",
            top.in_dim,
            data.n_features()
        )));
    }
    let baselines = collect_baselines(args, &data)?;
    let result = evaluate(&top, &standardized(&data, st.as_ref()), &baselines)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&result)? + "\n",
        Format::Csv => render_csv(&result)?,
    };
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
