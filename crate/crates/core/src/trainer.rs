//! Training orchestration: the branching fair trainer, the vanilla
//! fair-MTL baseline (detection on, correction and branching off), and
//! per-task STL baselines, all bit-reproducible from a single seed.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branching::{branch_condition, form_branches, BranchEvent, EventAffinity, ScheduleConfig};
use crate::conflict::{fbgrad_pass, ConflictKind, ConflictRecord, PairOrder};
use crate::data::{batch_iter, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::grouping::{affinity_set, slhc_pair, update_task_groups, TaskGrouping};
use crate::network::{
    apply_update, forward, init_model, per_task_gradients, relative_parameters, Topology,
};
use crate::objectives::{compose_robust, intra_task_lambda, GroupClassLosses};

/// When the per-task λ gate is re-evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaCheck {
    PerBatch,
    /// Gate from the first batch of each epoch, reused for the rest.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    FairBranch,
    Vanilla,
    Stl { task: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hidden_widths: Vec<usize>,
    pub tau: f64,
    pub lambda_default: f64,
    pub schedule: ScheduleConfig,
    pub rel_tol: f64,
    pub patience: usize,
    pub seed: u64,
    pub standardize: bool,
    pub lambda_check: LambdaCheck,
    pub pair_order: PairOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.05,
            batch_size: 256,
            max_epochs: 200,
            hidden_widths: vec![32, 32, 16],
            tau: 0.7,
            lambda_default: 1.0,
            schedule: ScheduleConfig::default(),
            rel_tol: 1e-4,
            patience: 10,
            seed: 0,
            standardize: true,
            lambda_check: LambdaCheck::PerBatch,
            pair_order: PairOrder::Seeded,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.lambda_default < 0.0 {
            return Err(Error::Config("lambda_default must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.rel_tol < 0.0 {
            return Err(Error::Config("rel_tol must be >= 0".into()));
        }
        self.schedule.validate()
    }
}

/// splitmix64 finalizer; derives independent stream seeds from one seed.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_MODEL: u64 = 1;
const SALT_BATCH: u64 = 2;
const SALT_PASS: u64 = 3;
const SALT_STL: u64 = 0x5717_0000;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossPair {
    pub acc: f64,
    pub fair: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train: Vec<LossPair>,
    pub val: Vec<LossPair>,
    /// Mean over tasks of validation (L_t + F_t); convergence watches it.
    pub val_mean_total: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConflictCounts {
    pub accuracy: usize,
    pub fairness: usize,
    pub corrected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub task_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub branch_events: Vec<BranchEvent>,
    pub epochs_run: usize,
    pub converged: bool,
    pub relative_parameters: f64,
    pub conflict_counts: ConflictCounts,
    #[serde(skip_serializing)]
    pub topology: Topology,
    #[serde(skip_serializing)]
    pub standardizer: Option<Standardizer>,
    #[serde(skip_serializing)]
    pub conflicts: Vec<ConflictRecord>,
}

/// True when the best value has gone `patience` consecutive entries
/// without a relative improvement of at least `rel_tol`.
pub fn convergence_check(history: &[f64], rel_tol: f64, patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for &v in history {
        if v < best * (1.0 - rel_tol) {
            stall = 0;
        } else {
            stall += 1;
        }
        best = best.min(v);
    }
    stall >= patience
}

/// Mean accuracy and fairness losses over a full dataset, computed in
/// chunks with exact whole-set cell statistics.
pub fn full_losses(top: &Topology, data: &Dataset) -> Result<Vec<LossPair>> {
    let n = data.n_samples();
    let t_count = data.n_tasks();
    let mut acc_sum = vec![0.0f64; t_count];
    let mut cell_sum = vec![[[0.0f64; 2]; 2]; t_count];
    let mut cell_cnt = vec![[[0usize; 2]; 2]; t_count];

    let chunk = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.subset(&idx);
        let fwd = forward(top, &sub.features)?;
        for t in 0..t_count {
            let probs = fwd.probs.column(t);
            for k in 0..sub.n_samples() {
                let y = sub.labels[[k, t]];
                let p = probs[k];
                let nll = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
                acc_sum[t] += nll;
                let g = sub.protected[k] as usize;
                cell_sum[t][g][y as usize] += nll;
                cell_cnt[t][g][y as usize] += 1;
            }
        }
        start = end;
    }

    let mut out = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut loss = [[None; 2]; 2];
        for g in 0..2 {
            for c in 0..2 {
                if cell_cnt[t][g][c] > 0 {
                    loss[g][c] = Some(cell_sum[t][g][c] / cell_cnt[t][g][c] as f64);
                }
            }
        }
        let cells = GroupClassLosses {
            loss,
            count: cell_cnt[t],
        };
        out.push(LossPair {
            acc: acc_sum[t] / n as f64,
            fair: compose_robust(&cells),
        });
    }
    Ok(out)
}

pub fn train_fairbranch(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    run_training(TrainMode::FairBranch, train, val, cfg)
}

pub fn train_vanilla_mtl(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    run_training(TrainMode::Vanilla, train, val, cfg)
}

pub fn train_stl(train: &Dataset, val: &Dataset, task: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    let train1 = train.single_task(task)?;
    let val1 = val.single_task(task)?;
    run_training(TrainMode::Stl { task }, &train1, &val1, cfg)
}

/// Parameter matrix each group owns at the depth about to branch: the
/// task heads before the first event, that group's branch layer after.
fn group_matrices(top: &Topology, tg: &TaskGrouping) -> Result<Vec<Array2<f64>>> {
    if top.d_c == top.d {
        return tg
            .groups
            .iter()
            .map(|g| {
                if g.members.len() != 1 {
                    return Err(Error::Internal(
                        "merged group before any branching event".into(),
                    ));
                }
                Ok(top.heads[g.min_task()].weights.clone())
            })
            .collect();
    }
    let layers = &top.branches[&(top.d_c + 1)];
    tg.groups
        .iter()
        .map(|g| {
            layers
                .iter()
                .find(|l| l.tasks == g.members)
                .map(|l| l.params.weights.clone())
                .ok_or_else(|| {
                    Error::Internal(format!("no branch layer for group {:?}", g.members))
                })
        })
        .collect()
}

fn members_of(tg: &TaskGrouping, idx: usize) -> Vec<usize> {
    tg.groups[idx].members.iter().copied().collect()
}

pub fn run_training(
    mode: TrainMode,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.n_features() != val.n_features() || train.n_tasks() != val.n_tasks() {
        return Err(Error::Config(
            "train and validation sets disagree on features or tasks".into(),
        ));
    }
    if let TrainMode::Stl { .. } = mode {
        if train.n_tasks() != 1 {
            return Err(Error::Config(
                "single-task training takes a single-task dataset".into(),
            ));
        }
    }

    let eff_seed = match mode {
        TrainMode::Stl { task } => mix_seed(cfg.seed, SALT_STL + task as u64),
        _ => cfg.seed,
    };

    let standardizer = cfg.standardize.then(|| Standardizer::fit(&train.features));
    let (train, val) = match &standardizer {
        Some(st) => {
            let mut tr = train.clone();
            tr.features = st.apply(&train.features);
            let mut va = val.clone();
            va.features = st.apply(&val.features);
            (tr, va)
        }
        None => (train.clone(), val.clone()),
    };

    let t_count = train.n_tasks();
    let mut top = init_model(
        train.n_features(),
        &cfg.hidden_widths,
        t_count,
        mix_seed(eff_seed, SALT_MODEL),
    )?;
    let batch_seed = mix_seed(eff_seed, SALT_BATCH);
    let mut pass_rng = ChaCha8Rng::seed_from_u64(mix_seed(eff_seed, SALT_PASS));

    let mut tg = TaskGrouping::singletons(t_count);
    let mut events: Vec<BranchEvent> = Vec::new();
    let mut conflicts: Vec<ConflictRecord> = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut totals: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut epochs_run = 0;

    let with_context = |e: Error, epoch: usize, batch: usize| match e {
        Error::Numeric { depth, msg } => Error::Numeric {
            depth,
            msg: format!("epoch {epoch}, batch {batch}: {msg}"),
        },
        other => other,
    };

    for epoch in 0..cfg.max_epochs {
        let mut epoch_lambdas: Option<Vec<f64>> = None;
        for (batch_no, idx) in batch_iter(&train, cfg.batch_size, batch_seed, epoch as u64).enumerate()
        {
            let batch = train.subset(&idx);
            let fwd = forward(&top, &batch.features)
                .map_err(|e| with_context(e, epoch, batch_no))?;
            let mut grads = per_task_gradients(&top, &fwd, &batch.labels, &batch.protected)
                .map_err(|e| with_context(e, epoch, batch_no))?;

            let lambdas: Vec<f64> = match cfg.lambda_check {
                LambdaCheck::PerBatch => (0..t_count)
                    .map(|t| intra_task_lambda(&grads, t, cfg.lambda_default))
                    .collect(),
                LambdaCheck::PerEpoch => epoch_lambdas
                    .get_or_insert_with(|| {
                        (0..t_count)
                            .map(|t| intra_task_lambda(&grads, t, cfg.lambda_default))
                            .collect()
                    })
                    .clone(),
            };

            let records = fbgrad_pass(
                &top,
                &mut grads,
                &lambdas,
                epoch,
                &mut pass_rng,
                cfg.pair_order,
                mode == TrainMode::FairBranch,
            )?;
            conflicts.extend(records);

            apply_update(&mut top, &grads, &lambdas, cfg.eta)
                .map_err(|e| with_context(e, epoch, batch_no))?;
        }

        let train_losses = full_losses(&top, &train)?;
        let val_losses = full_losses(&top, &val)?;
        let val_mean_total = val_losses.iter().map(|l| l.acc + l.fair).sum::<f64>() / t_count as f64;
        epochs.push(EpochRecord {
            train: train_losses,
            val: val_losses,
            val_mean_total,
        });
        totals.push(val_mean_total);
        epochs_run = epoch + 1;

        if mode == TrainMode::FairBranch && branch_condition(&tg, top.d_c, epoch, &cfg.schedule) {
            let matrices = group_matrices(&top, &tg)?;
            let table = affinity_set(&tg, &matrices, cfg.tau)?;
            let pairs = slhc_pair(&table);
            if !(cfg.schedule.branch_only_on_merge && pairs.is_empty()) {
                let affinities: Vec<EventAffinity> = table
                    .entries
                    .iter()
                    .map(|e| EventAffinity {
                        a: members_of(&tg, e.a),
                        b: members_of(&tg, e.b),
                        value: e.value,
                    })
                    .collect();
                let pair_records: Vec<EventAffinity> = pairs
                    .iter()
                    .map(|&(a, b)| EventAffinity {
                        a: members_of(&tg, a),
                        b: members_of(&tg, b),
                        value: table
                            .entries
                            .iter()
                            .find(|e| (e.a, e.b) == (a, b))
                            .map(|e| e.value)
                            .unwrap_or(f64::NAN),
                    })
                    .collect();
                let d_c_before = top.d_c;
                let tg_new = update_task_groups(&tg, &pairs, d_c_before)?;
                form_branches(&mut top, &tg_new)?;
                events.push(BranchEvent {
                    epoch,
                    d_c_before,
                    groups: tg_new.groups.iter().map(|g| g.members.iter().copied().collect()).collect(),
                    pairs: pair_records,
                    affinities,
                });
                tg = tg_new;
            }
        }

        if convergence_check(&totals, cfg.rel_tol, cfg.patience) {
            converged = true;
            break;
        }
    }

    top.validate()?;
    let mut counts = ConflictCounts::default();
    for r in &conflicts {
        match r.kind {
            ConflictKind::Accuracy => counts.accuracy += 1,
            ConflictKind::Fairness => counts.fairness += 1,
        }
        if r.corrected {
            counts.corrected += 1;
        }
    }

    Ok(TrainReport {
        mode,
        config: cfg.clone(),
        task_names: train.task_names.clone(),
        epochs,
        branch_events: events,
        epochs_run,
        converged,
        relative_parameters: relative_parameters(&top),
        conflict_counts: counts,
        topology: top,
        standardizer,
        conflicts,
    })
}

/// Writes every run artifact: `report.json`, `groups.json`, the conflict
/// exports, and the checkpoint pair. Output bytes depend only on the
/// report contents.
pub fn save_run(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let groups = serde_json::to_string_pretty(&report.branch_events)?;
    std::fs::write(dir.join("groups.json"), groups + "\n")?;
    crate::metrics::conflict_report(&report.conflicts, report.task_names.len(), dir)?;
    crate::checkpoint::save_checkpoint(
        &report.topology,
        report.standardizer.as_ref(),
        &report.branch_events,
        dir,
    )?;
    Ok(())
}
