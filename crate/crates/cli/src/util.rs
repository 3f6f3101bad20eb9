use std::fmt;
use std::path::{Path, PathBuf};

use fairbranch_core::data::{load_csv, load_meta, Dataset, Standardizer, TaskMetaMap};
use fairbranch_core::metrics::{evaluate, StlBaseline};
use fairbranch_core::network::Topology;
use fairbranch_core::Error;

/// Usage errors exit 2, runtime errors exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reclassifies validation failures as usage errors.
pub fn usage_check<T>(r: fairbranch_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

/// Malformed input files are the caller's problem, not the tool's.
pub fn input_error(e: Error) -> CliError {
    match e {
        Error::Schema(_) | Error::Parse { .. } | Error::Config(_) | Error::Split(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::from(other),
    }
}

#[derive(clap::Args, Clone, Debug)]
pub struct DataArgs {
    /// CSV with feature columns, the protected column, and task label columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Task metadata sidecar; defaults to meta.json beside the CSV.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Protected-attribute column name.
    #[arg(long, default_value = fairbranch_core::data::PROTECTED_COLUMN)]
    pub protected_column: String,
    /// Task label columns in head order; defaults to the sidecar tasks in
    /// CSV header order.
    #[arg(long, value_delimiter = ',')]
    pub task_columns: Vec<String>,
}

pub fn load_table(args: &DataArgs) -> CliResult<Dataset> {
    if !args.data.exists() {
        return Err(CliError::usage(format!(
            "dataset {} does not exist",
            args.data.display()
        )));
    }
    let task_columns = if args.task_columns.is_empty() {
        let meta_path = args
            .meta
            .clone()
            .unwrap_or_else(|| args.data.with_file_name("meta.json"));
        if !meta_path.exists() {
            return Err(CliError::usage(format!(
                "no --task-columns given and no task sidecar at {}",
                meta_path.display()
            )));
        }
        let meta = load_meta(&meta_path).map_err(input_error)?;
        header_ordered_tasks(&args.data, &meta)?
    } else {
        args.task_columns.clone()
    };
    load_csv(&args.data, &args.protected_column, &task_columns).map_err(input_error)
}

/// Sidecar tasks reordered to match their appearance in the CSV header.
fn header_ordered_tasks(csv_path: &Path, meta: &TaskMetaMap) -> CliResult<Vec<String>> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: {e}", csv_path.display())))?;
    let cols: Vec<String> = headers
        .iter()
        .filter(|h| meta.contains_key(*h))
        .map(str::to_string)
        .collect();
    if cols.len() != meta.len() {
        return Err(CliError::usage(format!(
            "sidecar lists {} tasks but the CSV header carries {}",
            meta.len(),
            cols.len()
        )));
    }
    Ok(cols)
}

/// Run directories are append-only; replacing one takes --force.
pub fn prepare_run_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(CliError::usage(format!(
                "run directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        if occupied {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Echoes the exact invocation so a run can be reproduced from its directory.
pub fn write_invocation(dir: &Path) -> CliResult<()> {
    let argv: Vec<String> = std::env::args().collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({ "argv": argv }))?;
    std::fs::write(dir.join("invocation.json"), text + "\n")?;
    Ok(())
}

/// Applies a run's feature scaling before scoring new data.
pub fn standardized(data: &Dataset, st: Option<&Standardizer>) -> Dataset {
    match st {
        Some(st) => Dataset {
            features: st.apply(&data.features),
            protected: data.protected.clone(),
            labels: data.labels.clone(),
            task_names: data.task_names.clone(),
        },
        None => data.clone(),
    }
}

/// Accuracy and violation scores of a single-task model on its task slice.
pub fn stl_scores(
    top: &Topology,
    st: Option<&Standardizer>,
    single: &Dataset,
) -> CliResult<StlBaseline> {
    if top.in_dim != single.n_features() {
        return Err(CliError::usage(format!(
            "baseline model expects {} features but the dataset has {}",
            top.in_dim,
            single.n_features()
        )));
    }
    let zero = [StlBaseline {
        accuracy: 0.0,
        ep_viol: 0.0,
        eo_viol: 0.0,
    }];
    let e = evaluate(top, &standardized(single, st), &zero)?;
    Ok(StlBaseline {
        accuracy: e.per_task[0].accuracy,
        ep_viol: e.per_task[0].ep_viol,
        eo_viol: e.per_task[0].eo_viol,
    })
}
