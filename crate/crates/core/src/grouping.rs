//! Parameter-similarity measurement via centered linear kernel alignment
//! and greedy single-linkage pairing of task groups.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A set of tasks sharing one branch tower, with its merge history.
#[derive(Debug, Clone)]
pub struct TaskGroup {
    pub members: BTreeSet<usize>,
    pub children: Option<Box<(TaskGroup, TaskGroup)>>,
    /// d_c of the branching event that created this group; `None` for the
    /// initial singletons.
    pub formed_at_depth: Option<usize>,
}

impl TaskGroup {
    pub fn singleton(t: usize) -> TaskGroup {
        TaskGroup {
            members: std::iter::once(t).collect(),
            children: None,
            formed_at_depth: None,
        }
    }

    pub fn min_task(&self) -> usize {
        *self.members.iter().next().expect("empty group")
    }
}

/// Disjoint task groups covering {0..T−1}, ordered by smallest member.
#[derive(Debug, Clone)]
pub struct TaskGrouping {
    pub groups: Vec<TaskGroup>,
}

impl TaskGrouping {
    pub fn singletons(t_count: usize) -> TaskGrouping {
        TaskGrouping {
            groups: (0..t_count).map(TaskGroup::singleton).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn validate(&self, t_count: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if g.members.is_empty() {
                return Err(Error::Internal("empty task group".into()));
            }
            for &t in &g.members {
                if t >= t_count || !seen.insert(t) {
                    return Err(Error::Internal(format!(
                        "task {t} repeated or out of range in grouping"
                    )));
                }
            }
        }
        if seen.len() != t_count {
            return Err(Error::Internal(format!(
                "grouping covers {} of {t_count} tasks",
                seen.len()
            )));
        }
        for w in self.groups.windows(2) {
            if w[0].min_task() >= w[1].min_task() {
                return Err(Error::Internal("groups not ordered by smallest member".into()));
            }
        }
        Ok(())
    }
}

/// Double-centering H·K·H with H = I − (1/n)·11ᵀ.
pub fn center_gram(k: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = k.dim();
    if n != m {
        return Err(Error::Shape(format!("gram matrix must be square, got {n}×{m}")));
    }
    let nf = n as f64;
    let row_means: Vec<f64> = k.rows().into_iter().map(|r| r.sum() / nf).collect();
    let col_means: Vec<f64> = k.columns().into_iter().map(|c| c.sum() / nf).collect();
    let total = row_means.iter().sum::<f64>() / nf;
    let mut out = k.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = *v - row_means[i] - col_means[j] + total;
    }
    Ok(out)
}

/// Centered linear kernel alignment of two weight matrices sharing their
/// row (incoming) dimension. Degenerate inputs whose centered Gram has
/// trace below 1e-12 score 0 and are never paired.
pub fn linear_cka(theta_a: &Array2<f64>, theta_b: &Array2<f64>) -> Result<f64> {
    if theta_a.nrows() != theta_b.nrows() {
        return Err(Error::Shape(format!(
            "row dimensions differ: {} vs {}",
            theta_a.nrows(),
            theta_b.nrows()
        )));
    }
    let ka = center_gram(&theta_a.dot(&theta_a.t()))?;
    let kb = center_gram(&theta_b.dot(&theta_b.t()))?;
    // Centered Grams are PSD, so the trace is their trace norm.
    let tr = |k: &Array2<f64>| k.diag().sum();
    if tr(&ka) < 1e-12 || tr(&kb) < 1e-12 {
        return Ok(0.0);
    }
    let frob = |x: &Array2<f64>, y: &Array2<f64>| x.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
    let num = frob(&ka, &kb);
    let denom = (frob(&ka, &ka) * frob(&kb, &kb)).sqrt();
    Ok((num / denom).clamp(0.0, 1.0))
}

/// One similarity entry between two groups, indexed into the grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityEntry {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

/// All group pairs whose similarity clears tau.
#[derive(Debug, Clone)]
pub struct AffinityTable {
    pub entries: Vec<AffinityEntry>,
    pub tau: f64,
}

/// Pairwise CKA between each group's layer matrix at the depth about to
/// branch; keeps only pairs with similarity ≥ tau.
pub fn affinity_set(tg: &TaskGrouping, params: &[Array2<f64>], tau: f64) -> Result<AffinityTable> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must be in (0,1], got {tau}")));
    }
    if params.len() != tg.len() {
        return Err(Error::Internal(format!(
            "{} parameter matrices for {} groups",
            params.len(),
            tg.len()
        )));
    }
    let mut entries = Vec::new();
    for a in 0..tg.len() {
        for b in (a + 1)..tg.len() {
            let v = linear_cka(&params[a], &params[b])?;
            if v >= tau {
                entries.push(AffinityEntry { a, b, value: v });
            }
        }
    }
    Ok(AffinityTable { entries, tau })
}

/// Greedy max-affinity matching: repeatedly take the highest entry, then
/// drop every entry touching either endpoint. Ties go to the pair with
/// the lexicographically smallest group indices, which (groups being
/// ordered by smallest member) is the smallest (min task, min task) key.
pub fn slhc_pair(table: &AffinityTable) -> Vec<(usize, usize)> {
    let mut live: Vec<AffinityEntry> = table.entries.clone();
    let mut pairs = Vec::new();
    while !live.is_empty() {
        let best = live
            .iter()
            .copied()
            .max_by(|x, y| {
                x.value
                    .partial_cmp(&y.value)
                    .expect("non-finite affinity")
                    .then_with(|| (y.a, y.b).cmp(&(x.a, x.b)))
            })
            .unwrap();
        pairs.push((best.a, best.b));
        live.retain(|e| e.a != best.a && e.a != best.b && e.b != best.a && e.b != best.b);
    }
    pairs.sort_unstable();
    pairs
}

/// Merges each pair into a new group recording its children; unpaired
/// groups carry over. `formed_at_depth` tags newly created groups.
pub fn update_task_groups(
    tg: &TaskGrouping,
    pairs: &[(usize, usize)],
    formed_at_depth: usize,
) -> Result<TaskGrouping> {
    let mut used = BTreeSet::new();
    for &(a, b) in pairs {
        if a >= tg.len() || b >= tg.len() || a == b || !used.insert(a) || !used.insert(b) {
            return Err(Error::Internal(format!(
                "pairs are not a matching over the grouping: ({a},{b})"
            )));
        }
    }
    let mut groups = Vec::new();
    for &(a, b) in pairs {
        let (ga, gb) = (tg.groups[a].clone(), tg.groups[b].clone());
        groups.push(TaskGroup {
            members: ga.members.union(&gb.members).copied().collect(),
            children: Some(Box::new((ga, gb))),
            formed_at_depth: Some(formed_at_depth),
        });
    }
    for (i, g) in tg.groups.iter().enumerate() {
        if !used.contains(&i) {
            groups.push(g.clone());
        }
    }
    groups.sort_by_key(TaskGroup::min_task);
    Ok(TaskGrouping { groups })
}
