//! Accuracy and fairness losses plus the per-task fairness weight gate.
//!
//! The fairness loss for a task is, per label class, the worst
//! group-conditional mean NLL among protected groups present in that
//! class, summed over both classes. Its subgradient flows only through
//! the samples of the selected (argmax) group per class.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::network::{GradientSet, ParamId};

/// Mean negative log likelihood in nats.
pub fn nll_loss(p: ArrayView1<f64>, y: ArrayView1<u8>) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "probability/label length mismatch: {} vs {}",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::UndefinedLoss("empty batch".into()));
    }
    let sum: f64 = p
        .iter()
        .zip(y.iter())
        .map(|(&pi, &yi)| {
            if yi == 1 {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            }
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Mean NLL and sample count per (protected group, label class) cell.
/// `loss[g][y]` is `None` when the cell is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupClassLosses {
    pub loss: [[Option<f64>; 2]; 2],
    pub count: [[usize; 2]; 2],
}

pub fn group_class_losses(
    p: ArrayView1<f64>,
    y: ArrayView1<u8>,
    s: ArrayView1<u8>,
) -> Result<GroupClassLosses> {
    if p.len() != y.len() || p.len() != s.len() {
        return Err(Error::Shape(format!(
            "length mismatch: p {}, y {}, s {}",
            p.len(),
            y.len(),
            s.len()
        )));
    }
    let mut sum = [[0.0f64; 2]; 2];
    let mut count = [[0usize; 2]; 2];
    for i in 0..p.len() {
        let (g, c) = (s[i] as usize, y[i] as usize);
        let nll = if y[i] == 1 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        sum[g][c] += nll;
        count[g][c] += 1;
    }
    let mut loss = [[None; 2]; 2];
    for g in 0..2 {
        for c in 0..2 {
            if count[g][c] > 0 {
                loss[g][c] = Some(sum[g][c] / count[g][c] as f64);
            }
        }
    }
    Ok(GroupClassLosses { loss, count })
}

/// Folds the cell table into the robust loss: per class, the worst
/// present group's mean NLL; a class with a single group uses that group;
/// an empty class adds 0.
pub fn compose_robust(cells: &GroupClassLosses) -> f64 {
    let mut f = 0.0;
    for c in 0..2 {
        match (cells.loss[0][c], cells.loss[1][c]) {
            (Some(a), Some(b)) => f += a.max(b),
            (Some(a), None) => f += a,
            (None, Some(b)) => f += b,
            (None, None) => {}
        }
    }
    f
}

/// Sum over classes of the worst present group's conditional mean NLL.
pub fn robust_fairness_loss(
    p: ArrayView1<f64>,
    y: ArrayView1<u8>,
    s: ArrayView1<u8>,
) -> Result<(f64, GroupClassLosses)> {
    let cells = group_class_losses(p, y, s)?;
    Ok((compose_robust(&cells), cells))
}

/// Per class, the group whose samples carry the fairness gradient.
/// Exact ties go to group 0; `None` marks an empty class.
pub fn fairness_backprop_selector(cells: &GroupClassLosses) -> [Option<usize>; 2] {
    let mut sel = [None; 2];
    for c in 0..2 {
        sel[c] = match (cells.loss[0][c], cells.loss[1][c]) {
            (Some(a), Some(b)) => Some(if b > a { 1 } else { 0 }),
            (Some(_), None) => Some(0),
            (None, Some(_)) => Some(1),
            (None, None) => None,
        };
    }
    sel
}

/// Losses of one task on one batch.
#[derive(Debug, Clone, Copy)]
pub struct TaskLosses {
    pub acc: f64,
    pub fair: f64,
    pub cells: GroupClassLosses,
}

#[derive(Debug, Clone)]
pub struct BatchLosses {
    pub per_task: Vec<TaskLosses>,
}

impl BatchLosses {
    /// Σ_t (L_t + F_t); the quantity watched for convergence.
    pub fn total(&self) -> f64 {
        self.per_task.iter().map(|t| t.acc + t.fair).sum()
    }
}

pub fn batch_losses(
    probs: &Array2<f64>,
    labels: &Array2<u8>,
    protected: &Array1<u8>,
) -> Result<BatchLosses> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "probs {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    let s = protected.view();
    let mut per_task = Vec::with_capacity(probs.ncols());
    for t in 0..probs.ncols() {
        let p = probs.column(t);
        let y = labels.column(t);
        let acc = nll_loss(p, y)?;
        let (fair, cells) = robust_fairness_loss(p, y, s)?;
        per_task.push(TaskLosses { acc, fair, cells });
    }
    Ok(BatchLosses { per_task })
}

/// Zero when the task's head-layer accuracy and fairness gradients point
/// against each other, otherwise `lambda_default`.
pub fn intra_task_lambda(grads: &GradientSet, t: usize, lambda_default: f64) -> f64 {
    let tg = &grads.per_task[t];
    let id = ParamId::Head { task: t };
    let (acc, fair) = match (tg.acc.get(&id), tg.fair.get(&id)) {
        (Some(a), Some(f)) => (a, f),
        _ => return lambda_default,
    };
    let dot = acc.flat().dot(&fair.flat());
    if dot < 0.0 {
        0.0
    } else {
        lambda_default
    }
}
