//! Group-fairness violations, transfer scores against single-task
//! baselines, and the conflict/heatmap exporters.

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::conflict::{ConflictKind, ConflictRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{forward, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// |TPR gap|.
    Ep,
    /// |TPR gap| + |FPR gap| (standard equalized odds).
    Eo,
    /// The redundant printed form |TPR gap| + |FNR gap| ≡ 2·EP, kept as a
    /// labeled variant for comparison.
    EoLiteral,
}

/// P(ŷ=1 | y=cls, s=g); errors name the empty conditioning cell.
fn positive_rate(
    pred: ArrayView1<u8>,
    y: ArrayView1<u8>,
    s: ArrayView1<u8>,
    cls: u8,
    g: u8,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..pred.len() {
        if y[i] == cls && s[i] == g {
            total += 1;
            hits += (pred[i] == 1) as usize;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric {
            cell: format!("y={cls}, s={g}"),
        });
    }
    Ok(hits as f64 / total as f64)
}

pub fn fairness_violation(
    pred: ArrayView1<u8>,
    y: ArrayView1<u8>,
    s: ArrayView1<u8>,
    kind: ViolationKind,
) -> Result<f64> {
    if pred.len() != y.len() || pred.len() != s.len() {
        return Err(Error::Shape(format!(
            "length mismatch: pred {}, y {}, s {}",
            pred.len(),
            y.len(),
            s.len()
        )));
    }
    let tpr_gap = (positive_rate(pred, y, s, 1, 0)? - positive_rate(pred, y, s, 1, 1)?).abs();
    match kind {
        ViolationKind::Ep => Ok(tpr_gap),
        ViolationKind::Eo => {
            let fpr_gap =
                (positive_rate(pred, y, s, 0, 0)? - positive_rate(pred, y, s, 0, 1)?).abs();
            Ok(tpr_gap + fpr_gap)
        }
        ViolationKind::EoLiteral => {
            let neg = |g| positive_rate(pred, y, s, 1, g).map(|r| 1.0 - r);
            let fnr_gap = (neg(0)? - neg(1)?).abs();
            Ok(tpr_gap + fnr_gap)
        }
    }
}

/// MTL minus STL accuracy; negative means negative transfer.
pub fn knowledge_gain(mtl_acc: f64, stl_acc: f64) -> f64 {
    mtl_acc - stl_acc
}

/// MTL minus STL fairness violation; positive means bias transfer.
pub fn discrimination_gain(mtl_viol: f64, stl_viol: f64) -> f64 {
    mtl_viol - stl_viol
}

/// One task's single-task reference scores on the evaluation set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StlBaseline {
    pub accuracy: f64,
    pub ep_viol: f64,
    pub eo_viol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub accuracy: f64,
    pub ep_viol: f64,
    pub eo_viol: f64,
    pub kg: f64,
    pub dg_ep: f64,
    pub dg_eo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_task: Vec<TaskEval>,
    pub mean_accuracy: f64,
    pub mean_ep_viol: f64,
    pub mean_eo_viol: f64,
    pub mean_kg: f64,
    pub mean_dg_ep: f64,
    pub mean_dg_eo: f64,
}

/// Thresholded predictions (p > 0.5) for every task, chunked.
pub fn predict(top: &Topology, data: &Dataset) -> Result<ndarray::Array2<u8>> {
    let n = data.n_samples();
    let mut preds = ndarray::Array2::zeros((n, data.n_tasks()));
    let chunk = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.subset(&idx);
        let fwd = forward(top, &sub.features)?;
        for t in 0..data.n_tasks() {
            for k in 0..sub.n_samples() {
                preds[[start + k, t]] = (fwd.probs[[k, t]] > 0.5) as u8;
            }
        }
        start = end;
    }
    Ok(preds)
}

/// Per-task accuracy, EP/EO violations, and gains against the baselines.
pub fn evaluate(top: &Topology, data: &Dataset, stl: &[StlBaseline]) -> Result<EvalResult> {
    let t_count = data.n_tasks();
    if stl.len() != t_count {
        return Err(Error::Config(format!(
            "{} baselines for {t_count} tasks",
            stl.len()
        )));
    }
    let preds = predict(top, data)?;
    let s = data.protected.view();
    let mut per_task = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let pred = preds.column(t);
        let y = data.labels.column(t);
        let accuracy = pred
            .iter()
            .zip(y.iter())
            .filter(|(p, y)| p == y)
            .count() as f64
            / data.n_samples() as f64;
        let ep_viol = fairness_violation(pred, y, s, ViolationKind::Ep)?;
        let eo_viol = fairness_violation(pred, y, s, ViolationKind::Eo)?;
        per_task.push(TaskEval {
            accuracy,
            ep_viol,
            eo_viol,
            kg: knowledge_gain(accuracy, stl[t].accuracy),
            dg_ep: discrimination_gain(ep_viol, stl[t].ep_viol),
            dg_eo: discrimination_gain(eo_viol, stl[t].eo_viol),
        });
    }
    let mean = |f: fn(&TaskEval) -> f64| per_task.iter().map(f).sum::<f64>() / t_count as f64;
    Ok(EvalResult {
        mean_accuracy: mean(|t| t.accuracy),
        mean_ep_viol: mean(|t| t.ep_viol),
        mean_eo_viol: mean(|t| t.eo_viol),
        mean_kg: mean(|t| t.kg),
        mean_dg_ep: mean(|t| t.dg_ep),
        mean_dg_eo: mean(|t| t.dg_eo),
        per_task,
    })
}

fn kind_name(kind: ConflictKind) -> &'static str {
    match kind {
        ConflictKind::Accuracy => "accuracy",
        ConflictKind::Fairness => "fairness",
    }
}

/// Quartiles by linear interpolation on the sorted sample.
fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Writes `conflicts.csv` (raw records), `angles.csv` (per-epoch arccos
/// quartiles per kind), and the two T×T cumulative pair-count heatmaps.
/// All files carry headers even when the log is empty.
pub fn conflict_report(records: &[ConflictRecord], n_tasks: usize, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("conflicts.csv"))?;
    w.write_record(["epoch", "depth", "task_a", "task_b", "kind", "cosine", "corrected"])?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.depth.to_string(),
            r.task_a.to_string(),
            r.task_b.to_string(),
            kind_name(r.kind).to_string(),
            format!("{}", r.cosine),
            r.corrected.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("angles.csv"))?;
    w.write_record(["epoch", "kind", "q1", "median", "q3", "count"])?;
    let mut keys: Vec<(usize, ConflictKind)> = records
        .iter()
        .map(|r| (r.epoch, r.kind))
        .collect();
    keys.sort_by_key(|&(e, k)| (e, k != ConflictKind::Accuracy));
    keys.dedup();
    for (epoch, kind) in keys {
        let mut angles: Vec<f64> = records
            .iter()
            .filter(|r| r.epoch == epoch && r.kind == kind)
            .map(|r| r.cosine.acos())
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, median, q3) = quartiles(&angles);
        w.write_record([
            epoch.to_string(),
            kind_name(kind).to_string(),
            format!("{q1}"),
            format!("{median}"),
            format!("{q3}"),
            angles.len().to_string(),
        ])?;
    }
    w.flush()?;

    for kind in [ConflictKind::Accuracy, ConflictKind::Fairness] {
        let mut counts = vec![vec![0u64; n_tasks]; n_tasks];
        for r in records.iter().filter(|r| r.kind == kind) {
            counts[r.task_a][r.task_b] += 1;
            counts[r.task_b][r.task_a] += 1;
        }
        let name = format!("heatmap_{}.csv", kind_name(kind));
        let mut w = csv::Writer::from_path(dir.join(name))?;
        let mut header = vec!["task".to_string()];
        header.extend((0..n_tasks).map(|t| format!("task_{t}")));
        w.write_record(&header)?;
        for (t, row) in counts.iter().enumerate() {
            let mut rec = vec![format!("task_{t}")];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}
