//! Gradient-conflict detection, the fairness-gradient projection, and the
//! branch-scoped correction pass.
//!
//! A conflict is a negative dot product between two tasks' flattened
//! gradients at one shared parameter. Fairness gradients on branch layers
//! get the conflicting component projected out against each opponent's
//! pre-pass snapshot; accuracy gradients are observed but never modified.

use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GradientSet, ParamId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictKind {
    Accuracy,
    Fairness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub epoch: usize,
    pub depth: usize,
    pub task_a: usize,
    pub task_b: usize,
    pub kind: ConflictKind,
    pub cosine: f64,
    pub corrected: bool,
}

impl ConflictRecord {
    fn new(
        epoch: usize,
        depth: usize,
        t: usize,
        u: usize,
        kind: ConflictKind,
        cosine: f64,
        corrected: bool,
    ) -> ConflictRecord {
        ConflictRecord {
            epoch,
            depth,
            task_a: t.min(u),
            task_b: t.max(u),
            kind,
            cosine,
            corrected,
        }
    }
}

/// True iff the flattened gradients point against each other (dot < 0).
pub fn detect_conflict(g1: &Array1<f64>, g2: &Array1<f64>) -> Result<bool> {
    if g1.len() != g2.len() {
        return Err(Error::Internal(format!(
            "gradient lengths differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    Ok(g1.dot(g2) < 0.0)
}

/// Cosine clamped to [−1,1]; `None` when either norm is zero, in which
/// case no record is written (a zero gradient cannot conflict).
pub fn conflict_cosine(g1: &Array1<f64>, g2: &Array1<f64>) -> Option<f64> {
    let n1 = g1.dot(g1).sqrt();
    let n2 = g2.dot(g2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some((g1.dot(g2) / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Removes from g1 its component along g2: g1 − (g1·g2/‖g2‖²)·g2.
/// Callers must have established a conflict first.
pub fn fbgrad_project(g1: &Array1<f64>, g2: &Array1<f64>) -> Array1<f64> {
    let dot = g1.dot(g2);
    assert!(dot < 0.0, "projection requires a detected conflict");
    let n2 = g2.dot(g2);
    g1 - &(g2 * (dot / n2))
}

/// Order in which conflicting tasks are visited during correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrder {
    /// Seeded random shuffle per parameter (default).
    Seeded,
    /// Ascending task ids; for debugging.
    Fixed,
}

fn order_tasks(tasks: &[usize], order: PairOrder, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = tasks.to_vec();
    if order == PairOrder::Seeded {
        out.shuffle(rng);
    }
    out
}

fn depth_of(id: ParamId) -> usize {
    match id {
        ParamId::Shared { depth } | ParamId::Branch { depth, .. } => depth,
        ParamId::Head { .. } => unreachable!("heads are single-task"),
    }
}

/// One conflict pass over a batch's gradients.
///
/// Accuracy conflicts are detected and logged at every parameter shared
/// by ≥ 2 tasks. Fairness gradients are corrected only on branch layers,
/// only among tasks whose λ is positive this step, each task projected
/// against the others' pre-pass snapshots in seeded order. With `correct`
/// off (the vanilla baseline) detection still logs, nothing is modified.
pub fn fbgrad_pass(
    top: &Topology,
    grads: &mut GradientSet,
    lambdas: &[f64],
    epoch: usize,
    rng: &mut ChaCha8Rng,
    order: PairOrder,
    correct: bool,
) -> Result<Vec<ConflictRecord>> {
    let mut records = Vec::new();

    for id in top.multi_task_params() {
        let tasks: Vec<usize> = top.tasks_of(id).into_iter().collect();
        for i in 0..tasks.len() {
            for j in (i + 1)..tasks.len() {
                let (t, u) = (tasks[i], tasks[j]);
                let gt = grads.per_task[t].acc[&id].flat();
                let gu = grads.per_task[u].acc[&id].flat();
                if detect_conflict(&gt, &gu)? {
                    if let Some(cos) = conflict_cosine(&gt, &gu) {
                        records.push(ConflictRecord::new(
                            epoch,
                            depth_of(id),
                            t,
                            u,
                            ConflictKind::Accuracy,
                            cos,
                            false,
                        ));
                    }
                }
            }
        }
    }

    for (&depth, layers) in &top.branches {
        for (slot, layer) in layers.iter().enumerate() {
            let id = ParamId::Branch { depth, slot };
            let eligible: Vec<usize> = layer
                .tasks
                .iter()
                .copied()
                .filter(|&t| lambdas[t] > 0.0)
                .collect();
            if eligible.len() < 2 {
                continue;
            }
            let originals: Vec<Array1<f64>> = eligible
                .iter()
                .map(|&t| grads.per_task[t].fair[&id].flat())
                .collect();

            if !correct {
                for i in 0..eligible.len() {
                    for j in (i + 1)..eligible.len() {
                        if detect_conflict(&originals[i], &originals[j])? {
                            if let Some(cos) = conflict_cosine(&originals[i], &originals[j]) {
                                records.push(ConflictRecord::new(
                                    epoch,
                                    depth,
                                    eligible[i],
                                    eligible[j],
                                    ConflictKind::Fairness,
                                    cos,
                                    false,
                                ));
                            }
                        }
                    }
                }
                continue;
            }

            let mut working = originals.clone();
            let visit = order_tasks(&(0..eligible.len()).collect::<Vec<_>>(), order, rng);
            for &i in &visit {
                let opponents: Vec<usize> =
                    visit.iter().copied().filter(|&j| j != i).collect();
                let opponents = order_tasks(&opponents, order, rng);
                for j in opponents {
                    if detect_conflict(&working[i], &originals[j])? {
                        if let Some(cos) = conflict_cosine(&working[i], &originals[j]) {
                            records.push(ConflictRecord::new(
                                epoch,
                                depth,
                                eligible[i],
                                eligible[j],
                                ConflictKind::Fairness,
                                cos,
                                true,
                            ));
                        }
                        working[i] = fbgrad_project(&working[i], &originals[j]);
                    }
                }
            }
            for (k, &t) in eligible.iter().enumerate() {
                grads.per_task[t]
                    .fair
                    .get_mut(&id)
                    .expect("fair grad present on path")
                    .assign_flat(&working[k]);
            }
        }
    }
    Ok(records)
}
