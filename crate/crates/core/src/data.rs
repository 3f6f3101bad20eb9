//! Tabular multi-task datasets: synthetic generation with planted task
//! families and injected group bias, CSV ingestion, stratified splitting,
//! and seeded batching.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the per-task weight perturbation relative to a unit family
/// weight. Small enough that tasks in one family agree on > 90% of labels.
const TASK_PERTURBATION: f64 = 0.05;

/// Features, a binary protected attribute, and T binary task labels.
///
/// Group 0 is the reference group `g`, group 1 is `g-bar`. Immutable after
/// construction; cheap to share read-only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub protected: Array1<u8>,
    pub labels: Array2<u8>,
    pub task_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        protected: Array1<u8>,
        labels: Array2<u8>,
        task_names: Vec<String>,
    ) -> Result<Self> {
        let d = Dataset {
            features,
            protected,
            labels,
            task_names,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.labels.ncols()
    }

    /// Checks the structural invariants: consistent sample counts, binary
    /// protected and label values, and both protected groups present.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.protected.len() != n || self.labels.nrows() != n {
            return Err(Error::Shape(format!(
                "rows disagree: features {}, protected {}, labels {}",
                n,
                self.protected.len(),
                self.labels.nrows()
            )));
        }
        if self.task_names.len() != self.labels.ncols() {
            return Err(Error::Shape(format!(
                "{} task names for {} label columns",
                self.task_names.len(),
                self.labels.ncols()
            )));
        }
        if self.protected.iter().any(|&s| s > 1) {
            return Err(Error::Schema("protected values must be 0 or 1".into()));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Schema("label values must be 0 or 1".into()));
        }
        let g0 = self.protected.iter().any(|&s| s == 0);
        let g1 = self.protected.iter().any(|&s| s == 1);
        if !g0 || !g1 {
            return Err(Error::Schema(
                "both protected groups must be present".into(),
            ));
        }
        Ok(())
    }

    /// Row subset by index. Does not re-check group presence; split halves
    /// may legitimately hold a single group in tiny datasets.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let features = select_rows(&self.features, idx);
        let protected = Array1::from_iter(idx.iter().map(|&i| self.protected[i]));
        let labels = select_rows_u8(&self.labels, idx);
        Dataset {
            features,
            protected,
            labels,
            task_names: self.task_names.clone(),
        }
    }

    /// Copy of this dataset keeping a single label column.
    pub fn single_task(&self, task: usize) -> Result<Dataset> {
        if task >= self.n_tasks() {
            return Err(Error::Config(format!(
                "task {} out of range (T = {})",
                task,
                self.n_tasks()
            )));
        }
        let labels = self
            .labels
            .column(task)
            .to_owned()
            .insert_axis(ndarray::Axis(1));
        Ok(Dataset {
            features: self.features.clone(),
            protected: self.protected.clone(),
            labels,
            task_names: vec![self.task_names[task].clone()],
        })
    }
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

fn select_rows_u8(a: &Array2<u8>, idx: &[usize]) -> Array2<u8> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

/// Per-column zero-mean unit-variance transform fitted on the training
/// split only. Columns with near-zero spread are centered but not scaled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>) -> Standardizer {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut std = Vec::with_capacity(features.ncols());
        for col in features.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s < 1e-12 { 1.0 } else { s });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = features.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// Recipe for a synthetic dataset with planted task families.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_tasks: usize,
    /// Number of latent task families; tasks are assigned round-robin.
    pub n_families: usize,
    /// Extra flip-to-negative probability for positive labels of group 1
    /// on bias-flagged (odd-indexed) tasks.
    pub bias_strength: f64,
    /// Uniform label-flip probability.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if self.n_features == 0 || self.n_tasks == 0 {
            return Err(Error::Config("n_features and n_tasks must be positive".into()));
        }
        if self.n_families == 0 || self.n_families > self.n_tasks {
            return Err(Error::Config(format!(
                "n_families must be in 1..={} (got {})",
                self.n_tasks, self.n_families
            )));
        }
        if self.bias_strength < 0.0 {
            return Err(Error::Config("bias_strength must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 1)".into()));
        }
        if self.bias_strength + self.noise >= 0.5 {
            return Err(Error::Config(
                "bias_strength + noise must stay below 0.5 so labels remain learnable".into(),
            ));
        }
        Ok(())
    }
}

/// Planted provenance of one synthetic task, written as a JSON sidecar so
/// grouping behaviour can be checked against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub family: usize,
    pub biased: bool,
}

pub type TaskMetaMap = BTreeMap<String, TaskMeta>;

/// Generates a dataset where task t belongs to family `t % n_families`,
/// all tasks in a family share one latent linear labeler (up to a small
/// per-task perturbation), and odd-indexed tasks carry injected group bias.
///
/// Identical specs produce bit-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, TaskMetaMap)> {
    spec.validate()?;
    let (n, m, t_count) = (spec.n_samples, spec.n_features, spec.n_tasks);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Fixed draw order: features, family weights, per-task perturbations,
    // protected attribute, then per-(task, sample) flip variates.
    let mut feat = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        feat.push(rng.sample::<f64, _>(StandardNormal));
    }
    let features = Array2::from_shape_vec((n, m), feat)
        .map_err(|e| Error::Internal(e.to_string()))?;

    let mut family_w: Vec<Array1<f64>> = Vec::with_capacity(spec.n_families);
    for _ in 0..spec.n_families {
        let w: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        family_w.push(Array1::from_vec(w));
    }

    let mut task_delta: Vec<Array1<f64>> = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        let d: Vec<f64> = (0..m)
            .map(|_| TASK_PERTURBATION * rng.sample::<f64, _>(StandardNormal))
            .collect();
        task_delta.push(Array1::from_vec(d));
    }

    let mut protected = Array1::<u8>::zeros(n);
    for s in protected.iter_mut() {
        *s = rng.random_bool(0.5) as u8;
    }
    // Guarantee both groups exist even for tiny n.
    if protected.iter().all(|&s| s == 1) {
        protected[0] = 0;
    }
    if protected.iter().all(|&s| s == 0) {
        protected[n - 1] = 1;
    }

    let mut labels = Array2::<u8>::zeros((n, t_count));
    let mut meta = TaskMetaMap::new();
    let mut task_names = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let family = t % spec.n_families;
        let biased = t % 2 == 1;
        let w = &family_w[family] + &task_delta[t];
        let scores = features.dot(&w);
        for i in 0..n {
            let mut y = scores[i] > 0.0;
            let noise_u: f64 = rng.random();
            let bias_u: f64 = rng.random();
            if noise_u < spec.noise {
                y = !y;
            }
            if biased && protected[i] == 1 && y && bias_u < spec.bias_strength {
                y = false;
            }
            labels[[i, t]] = y as u8;
        }
        let name = format!("task{t}");
        meta.insert(name.clone(), TaskMeta { family, biased });
        task_names.push(name);
    }

    let dataset = Dataset::new(features, protected, labels, task_names)?;
    Ok((dataset, meta))
}

/// Default column name used when writing the protected attribute.
pub const PROTECTED_COLUMN: &str = "protected";

/// Writes a dataset as UTF-8 CSV with a header row. Feature values use the
/// shortest decimal form that parses back to the identical f64.
pub fn save_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d.n_features()).map(|j| format!("f{j}")).collect();
    header.push(PROTECTED_COLUMN.to_string());
    header.extend(d.task_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..d.n_samples() {
        let mut rec: Vec<String> = d.features.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", d.protected[i]));
        rec.extend(d.labels.row(i).iter().map(|y| format!("{y}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_meta(meta: &TaskMetaMap, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<TaskMetaMap> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_binary(field: &str, row: usize, column: &str) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            row,
            msg: format!("column '{column}' must be 0 or 1, got '{other}'"),
        }),
    }
}

/// Loads a dataset from CSV. Every column that is neither the protected
/// column nor a task column becomes a feature, in header order.
pub fn load_csv(path: &Path, protected_column: &str, task_columns: &[String]) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();

    let protected_idx = headers
        .iter()
        .position(|h| h == protected_column)
        .ok_or_else(|| Error::Schema(format!("missing protected column '{protected_column}'")))?;
    let mut task_idx = Vec::with_capacity(task_columns.len());
    for name in task_columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing task column '{name}'")))?;
        task_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|j| *j != protected_idx && !task_idx.contains(j))
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Schema("no feature columns left".into()));
    }

    let mut feat = Vec::new();
    let mut prot = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for &j in &feature_idx {
            let field = &record[j];
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                msg: format!("column '{}' must be numeric, got '{field}'", headers[j]),
            })?;
            feat.push(v);
        }
        prot.push(parse_binary(&record[protected_idx], row, protected_column)?);
        for &j in &task_idx {
            labels.push(parse_binary(&record[j], row, &headers[j])?);
        }
        n += 1;
    }

    let features = Array2::from_shape_vec((n, feature_idx.len()), feat)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let labels = Array2::from_shape_vec((n, task_idx.len()), labels)
        .map_err(|e| Error::Internal(e.to_string()))?;
    Dataset::new(
        features,
        Array1::from_vec(prot),
        labels,
        task_columns.to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyOn {
    Protected,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratify_on: StratifyOn,
    pub seed: u64,
}

/// Deterministic train/test split. Overall train size is
/// `floor(train_fraction * n)`; per-stratum counts use largest-remainder
/// rounding so group proportions are preserved within one sample.
pub fn stratified_split(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {}",
            s.train_fraction
        )));
    }
    let n = d.n_samples();
    let strata: Vec<Vec<usize>> = match s.stratify_on {
        StratifyOn::None => vec![(0..n).collect()],
        StratifyOn::Protected => {
            let g0: Vec<usize> = (0..n).filter(|&i| d.protected[i] == 0).collect();
            let g1: Vec<usize> = (0..n).filter(|&i| d.protected[i] == 1).collect();
            for (g, idx) in [(0, &g0), (1, &g1)] {
                if idx.len() < 2 {
                    return Err(Error::Split(format!(
                        "protected group {g} has {} samples; need at least 2 to stratify",
                        idx.len()
                    )));
                }
            }
            vec![g0, g1]
        }
    };

    let total_train = (s.train_fraction * n as f64).floor() as usize;
    let mut quota: Vec<usize> = strata
        .iter()
        .map(|idx| (s.train_fraction * idx.len() as f64).floor() as usize)
        .collect();
    let mut remainder = total_train.saturating_sub(quota.iter().sum());
    // Distribute leftovers by largest fractional remainder, ties to the
    // lower stratum index.
    let mut frac: Vec<(usize, f64)> = strata
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let exact = s.train_fraction * idx.len() as f64;
            (k, exact - exact.floor())
        })
        .collect();
    frac.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in frac {
        if remainder == 0 {
            break;
        }
        if quota[k] < strata[k].len().saturating_sub(1) {
            quota[k] += 1;
            remainder -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut train_idx = Vec::with_capacity(total_train);
    let mut test_idx = Vec::with_capacity(n - total_train);
    for (k, idx) in strata.iter().enumerate() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..quota[k]]);
        test_idx.extend_from_slice(&shuffled[quota[k]..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((d.subset(&train_idx), d.subset(&test_idx)))
}

/// Seeded permutation of all row indices, re-derived from `(seed, epoch)`,
/// chunked into batches. The last batch may be short.
pub fn batch_iter(
    d: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..d.n_samples()).collect();
    order.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    chunks.into_iter()
}
