//! The structural rewrite at a branching event: replicate the shared
//! layer at depth d_c into one branch per task group and rewire.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::TaskGrouping;
use crate::network::{BranchLayer, Topology};

/// When branching events are admitted. Read literally, the source
/// algorithm branches every epoch, which exhausts all depths before the
/// heads differentiate; the default waits `warm_up` completed epochs and
/// then fires every `interval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warm_up: usize,
    pub interval: usize,
    /// Admit every epoch, ignoring warm_up/interval.
    pub literal_mode: bool,
    /// Skip events where pairing produced no merge.
    pub branch_only_on_merge: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warm_up: 5,
            interval: 5,
            literal_mode: false,
            branch_only_on_merge: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.literal_mode && self.interval == 0 {
            return Err(Error::Config("schedule interval must be at least 1".into()));
        }
        Ok(())
    }

    /// `epoch` is the 0-based index of the epoch that just finished.
    fn admits(&self, epoch: usize) -> bool {
        if self.literal_mode {
            return true;
        }
        let completed = epoch + 1;
        completed >= self.warm_up && (completed - self.warm_up) % self.interval == 0
    }
}

/// True iff clustering can still produce structure (≥ 2 groups), a depth
/// remains to branch (d_c > 1), and the schedule admits this epoch.
pub fn branch_condition(tg: &TaskGrouping, d_c: usize, epoch: usize, s: &ScheduleConfig) -> bool {
    tg.len() >= 2 && d_c > 1 && s.admits(epoch)
}

/// Affinity value behind one merge, by member lists.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EventAffinity {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub value: f64,
}

/// One branching event as recorded in `groups.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchEvent {
    pub epoch: usize,
    pub d_c_before: usize,
    /// Post-event grouping, member lists ordered by smallest task.
    pub groups: Vec<Vec<usize>>,
    /// The merges performed at this event.
    pub pairs: Vec<EventAffinity>,
    /// Every affinity entry that cleared tau, merged or not.
    pub affinities: Vec<EventAffinity>,
}

/// Replaces the shared layer at depth d_c with one bit-exact replica per
/// group in `tg`, then decrements d_c. Outputs are unchanged: every task
/// still computes through identical parameters.
pub fn form_branches(top: &mut Topology, tg: &TaskGrouping) -> Result<()> {
    if top.d_c == 0 {
        return Err(Error::Internal("no shared depth left to branch".into()));
    }
    tg.validate(top.n_tasks())?;
    let template = top
        .shared
        .pop()
        .ok_or_else(|| Error::Internal("shared stack empty at branching".into()))?;
    let depth = top.d_c;
    if template.depth != depth {
        return Err(Error::Internal(format!(
            "popped layer has depth {}, expected {depth}",
            template.depth
        )));
    }
    let layers: Vec<BranchLayer> = tg
        .groups
        .iter()
        .map(|g| BranchLayer {
            params: template.clone(),
            tasks: g.members.clone(),
        })
        .collect();
    top.branches.insert(depth, layers);
    top.d_c -= 1;
    top.validate()
}
