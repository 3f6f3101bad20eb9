//! The branched multi-head feed-forward model: topology, forward pass,
//! per-task analytic backprop, SGD update, and parameter accounting.
//!
//! Depths are 1-based: hidden layers sit at 1..=d, heads at d+1. Depths
//! 1..=d_c hold a single shared layer each; every depth above d_c holds
//! one branch layer per task group. Weights are stored in_dim×out_dim so
//! the Gram matrix θθᵀ of any two layers at one depth has equal shape.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::fairness_backprop_selector;

/// Head probabilities are clamped to [PROB_CLAMP, 1 − PROB_CLAMP].
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// in_dim×out_dim; rows indexed by the incoming dimension.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub depth: usize,
}

impl LayerParams {
    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Address of one parameter tensor in a topology. Ordering is the
/// canonical checkpoint order: shared stack, then branches, then heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamId {
    Shared { depth: usize },
    Branch { depth: usize, slot: usize },
    Head { task: usize },
}

/// A replica of a formerly shared layer owned by one task group.
#[derive(Debug, Clone)]
pub struct BranchLayer {
    pub params: LayerParams,
    pub tasks: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub in_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Depths 1..=d_c, index i holds depth i+1.
    pub shared: Vec<LayerParams>,
    /// Depth → branch layers, slots ordered by smallest member task.
    pub branches: BTreeMap<usize, Vec<BranchLayer>>,
    /// One sigmoid head per task at depth d+1, out_dim 1.
    pub heads: Vec<LayerParams>,
    /// Hidden depth at initialization.
    pub d: usize,
    /// Current un-branched depth; training never lowers it past 1, but 0
    /// is representable so a fully branched tower stack can be accounted.
    pub d_c: usize,
}

/// Output width of hidden depth b (b = 0 is the input).
fn width_at(in_dim: usize, widths: &[usize], b: usize) -> usize {
    if b == 0 {
        in_dim
    } else {
        widths[b - 1]
    }
}

/// Seeded He-style uniform init: d shared ReLU layers, T sigmoid heads,
/// zero biases, d_c = d.
pub fn init_model(m: usize, hidden_widths: &[usize], t_count: usize, seed: u64) -> Result<Topology> {
    let d = hidden_widths.len();
    if d < 2 {
        return Err(Error::Config(format!(
            "need at least 2 hidden layers for branching, got {d}"
        )));
    }
    if d == 2 {
        log::warn!("2 hidden layers allow only a single branching event");
    }
    if m == 0 || t_count == 0 || hidden_widths.iter().any(|&w| w == 0) {
        return Err(Error::Config(
            "feature count, task count, and widths must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he_layer = |in_dim: usize, out_dim: usize, depth: usize| {
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut w = Array2::zeros((in_dim, out_dim));
        for v in w.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
        LayerParams {
            weights: w,
            bias: Array1::zeros(out_dim),
            depth,
        }
    };

    let mut shared = Vec::with_capacity(d);
    for b in 1..=d {
        shared.push(he_layer(
            width_at(m, hidden_widths, b - 1),
            hidden_widths[b - 1],
            b,
        ));
    }
    let heads = (0..t_count)
        .map(|_| he_layer(hidden_widths[d - 1], 1, d + 1))
        .collect();

    let top = Topology {
        in_dim: m,
        hidden_widths: hidden_widths.to_vec(),
        shared,
        branches: BTreeMap::new(),
        heads,
        d,
        d_c: d,
    };
    top.validate()?;
    Ok(top)
}

impl Topology {
    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Slot of the branch layer at `depth` serving task `t`.
    pub fn slot_of(&self, depth: usize, t: usize) -> Option<usize> {
        self.branches
            .get(&depth)?
            .iter()
            .position(|b| b.tasks.contains(&t))
    }

    /// Root-to-head parameter addresses for one task, depths 1..=d+1.
    pub fn path_of(&self, t: usize) -> Vec<ParamId> {
        let mut path = Vec::with_capacity(self.d + 1);
        for b in 1..=self.d {
            if b <= self.d_c {
                path.push(ParamId::Shared { depth: b });
            } else {
                let slot = self
                    .slot_of(b, t)
                    .unwrap_or_else(|| panic!("task {t} unserved at depth {b}"));
                path.push(ParamId::Branch { depth: b, slot });
            }
        }
        path.push(ParamId::Head { task: t });
        path
    }

    /// Tasks whose paths traverse the given parameter.
    pub fn tasks_of(&self, id: ParamId) -> BTreeSet<usize> {
        match id {
            ParamId::Shared { .. } => (0..self.n_tasks()).collect(),
            ParamId::Branch { depth, slot } => self.branches[&depth][slot].tasks.clone(),
            ParamId::Head { task } => std::iter::once(task).collect(),
        }
    }

    /// All parameter addresses in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (1..=self.d_c).map(|depth| ParamId::Shared { depth }).collect();
        for (&depth, layers) in &self.branches {
            for slot in 0..layers.len() {
                ids.push(ParamId::Branch { depth, slot });
            }
        }
        ids.extend((0..self.n_tasks()).map(|task| ParamId::Head { task }));
        ids
    }

    /// Addresses shared by at least two task paths; conflict detection
    /// only makes sense at these.
    pub fn multi_task_params(&self) -> Vec<ParamId> {
        self.param_ids()
            .into_iter()
            .filter(|&id| self.tasks_of(id).len() >= 2)
            .collect()
    }

    pub fn param(&self, id: ParamId) -> &LayerParams {
        match id {
            ParamId::Shared { depth } => &self.shared[depth - 1],
            ParamId::Branch { depth, slot } => &self.branches[&depth][slot].params,
            ParamId::Head { task } => &self.heads[task],
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut LayerParams {
        match id {
            ParamId::Shared { depth } => &mut self.shared[depth - 1],
            ParamId::Branch { depth, slot } => {
                &mut self.branches.get_mut(&depth).expect("no branches at depth")[slot]
                    .params
            }
            ParamId::Head { task } => &mut self.heads[task],
        }
    }

    pub fn parameter_count(&self) -> usize {
        let shared: usize = self.shared.iter().map(LayerParams::n_params).sum();
        let branch: usize = self
            .branches
            .values()
            .flatten()
            .map(|b| b.params.n_params())
            .sum();
        let heads: usize = self.heads.iter().map(LayerParams::n_params).sum();
        shared + branch + heads
    }

    /// Structural invariants; called after init, update, and branching.
    pub fn validate(&self) -> Result<()> {
        let t_count = self.n_tasks();
        if self.hidden_widths.len() != self.d || self.d_c > self.d {
            return Err(Error::Internal(format!(
                "depth bookkeeping broken: d={} d_c={} widths={}",
                self.d,
                self.d_c,
                self.hidden_widths.len()
            )));
        }
        if self.shared.len() != self.d_c {
            return Err(Error::Internal(format!(
                "{} shared layers for d_c={}",
                self.shared.len(),
                self.d_c
            )));
        }
        let check_shape = |p: &LayerParams, depth: usize| -> Result<()> {
            let (want_in, want_out) = if depth == self.d + 1 {
                (width_at(self.in_dim, &self.hidden_widths, self.d), 1)
            } else {
                (
                    width_at(self.in_dim, &self.hidden_widths, depth - 1),
                    self.hidden_widths[depth - 1],
                )
            };
            if p.depth != depth || p.weights.dim() != (want_in, want_out) || p.bias.len() != want_out
            {
                return Err(Error::Internal(format!(
                    "layer at depth {depth}: got depth {} shape {:?}, want ({want_in},{want_out})",
                    p.depth,
                    p.weights.dim()
                )));
            }
            if p.weights.iter().chain(p.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    depth,
                    msg: "non-finite parameter".into(),
                });
            }
            Ok(())
        };

        for (i, layer) in self.shared.iter().enumerate() {
            check_shape(layer, i + 1)?;
        }
        let expected_depths: Vec<usize> = (self.d_c + 1..=self.d).collect();
        let actual_depths: Vec<usize> = self.branches.keys().copied().collect();
        if actual_depths != expected_depths {
            return Err(Error::Internal(format!(
                "branch depths {actual_depths:?}, expected {expected_depths:?}"
            )));
        }
        for (&depth, layers) in &self.branches {
            let mut seen = BTreeSet::new();
            let mut prev_min = None;
            for layer in layers {
                check_shape(&layer.params, depth)?;
                if layer.tasks.is_empty() {
                    return Err(Error::Internal(format!("empty group at depth {depth}")));
                }
                let min = *layer.tasks.iter().next().unwrap();
                if prev_min.is_some_and(|p| p >= min) {
                    return Err(Error::Internal(format!(
                        "slots at depth {depth} not ordered by smallest task"
                    )));
                }
                prev_min = Some(min);
                for &t in &layer.tasks {
                    if t >= t_count || !seen.insert(t) {
                        return Err(Error::Internal(format!(
                            "task {t} repeated or out of range at depth {depth}"
                        )));
                    }
                }
            }
            if seen.len() != t_count {
                return Err(Error::Internal(format!(
                    "depth {depth} serves {} of {t_count} tasks",
                    seen.len()
                )));
            }
            // Path consistency: each group one level up must sit inside a
            // single group here.
            if let Some(above) = self.branches.get(&(depth + 1)) {
                for upper in above {
                    let host = layers.iter().filter(|l| {
                        upper.tasks.iter().all(|t| l.tasks.contains(t))
                    });
                    if host.count() != 1 {
                        return Err(Error::Internal(format!(
                            "group {:?} at depth {} has no single host at depth {depth}",
                            upper.tasks,
                            depth + 1
                        )));
                    }
                }
            }
        }
        for (t, head) in self.heads.iter().enumerate() {
            check_shape(head, self.d + 1)?;
            let _ = t;
        }
        Ok(())
    }
}

/// Parameter count of one single-task model with the same trunk widths.
pub fn stl_parameter_count(in_dim: usize, hidden_widths: &[usize]) -> usize {
    let mut total = 0;
    for b in 1..=hidden_widths.len() {
        let w_in = width_at(in_dim, hidden_widths, b - 1);
        total += w_in * hidden_widths[b - 1] + hidden_widths[b - 1];
    }
    total + hidden_widths[hidden_widths.len() - 1] + 1
}

/// Parameter count relative to T independent single-task models.
pub fn relative_parameters(top: &Topology) -> f64 {
    let stl = stl_parameter_count(top.in_dim, &top.hidden_widths) * top.n_tasks();
    top.parameter_count() as f64 / stl as f64
}

/// Activations retained by `forward` for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Array2<f64>,
    /// Post-ReLU activations for shared depths 1..=d_c.
    pub shared_acts: Vec<Array2<f64>>,
    /// Post-ReLU activations keyed by (depth, slot).
    pub branch_acts: BTreeMap<(usize, usize), Array2<f64>>,
    /// batch×T clamped sigmoid outputs.
    pub probs: Array2<f64>,
}

impl ForwardPass {
    /// Activation feeding the layer at `depth` on task t's path.
    fn input_to(&self, top: &Topology, depth: usize, t: usize) -> &Array2<f64> {
        if depth == 1 {
            &self.input
        } else if depth - 1 <= top.d_c {
            &self.shared_acts[depth - 2]
        } else {
            let slot = top.slot_of(depth - 1, t).expect("path broken");
            &self.branch_acts[&(depth - 1, slot)]
        }
    }
}

fn affine(x: &Array2<f64>, p: &LayerParams) -> Array2<f64> {
    let mut z = x.dot(&p.weights);
    z += &p.bias;
    z
}

fn check_finite(a: &Array2<f64>, depth: usize) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            depth,
            msg: "non-finite activation".into(),
        });
    }
    Ok(())
}

/// Pure given (topology, batch); probabilities in [1e-7, 1−1e-7].
pub fn forward(top: &Topology, x: &Array2<f64>) -> Result<ForwardPass> {
    if x.ncols() != top.in_dim {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            x.ncols(),
            top.in_dim
        )));
    }
    let n = x.nrows();
    let mut shared_acts = Vec::with_capacity(top.d_c);
    let mut cur = x.clone();
    for layer in &top.shared {
        let mut a = affine(&cur, layer);
        a.mapv_inplace(|v| v.max(0.0));
        check_finite(&a, layer.depth)?;
        shared_acts.push(a.clone());
        cur = a;
    }

    let mut branch_acts: BTreeMap<(usize, usize), Array2<f64>> = BTreeMap::new();
    for (&depth, layers) in &top.branches {
        for (slot, layer) in layers.iter().enumerate() {
            let t = *layer.tasks.iter().next().unwrap();
            let input = if depth == 1 {
                x
            } else if depth - 1 <= top.d_c {
                &shared_acts[depth - 2]
            } else {
                let below = top.slot_of(depth - 1, t).expect("path broken");
                &branch_acts[&(depth - 1, below)]
            };
            let mut a = affine(input, &layer.params);
            a.mapv_inplace(|v| v.max(0.0));
            check_finite(&a, depth)?;
            branch_acts.insert((depth, slot), a);
        }
    }

    let mut probs = Array2::zeros((n, top.n_tasks()));
    for (t, head) in top.heads.iter().enumerate() {
        let input = if top.d_c == top.d {
            shared_acts.last().unwrap_or(x)
        } else {
            let slot = top.slot_of(top.d, t).expect("path broken");
            &branch_acts[&(top.d, slot)]
        };
        let z = affine(input, head);
        check_finite(&z, top.d + 1)?;
        for i in 0..n {
            let p = 1.0 / (1.0 + (-z[[i, 0]]).exp());
            probs[[i, t]] = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        }
    }

    let fwd = ForwardPass {
        input: x.clone(),
        shared_acts,
        branch_acts,
        probs,
    };
    Ok(fwd)
}

/// Gradient of one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(p: &LayerParams) -> LayerGrad {
        LayerGrad {
            weights: Array2::zeros(p.weights.dim()),
            bias: Array1::zeros(p.bias.len()),
        }
    }

    /// Weights row-major, then bias.
    pub fn flat(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + self.bias.len());
        v.extend(self.weights.iter().copied());
        v.extend(self.bias.iter().copied());
        Array1::from_vec(v)
    }

    pub fn assign_flat(&mut self, flat: &Array1<f64>) {
        assert_eq!(flat.len(), self.weights.len() + self.bias.len());
        let nw = self.weights.len();
        for (dst, src) in self.weights.iter_mut().zip(flat.iter()) {
            *dst = *src;
        }
        for (i, dst) in self.bias.iter_mut().enumerate() {
            *dst = flat[nw + i];
        }
    }
}

/// Gradients of one task's accuracy and fairness losses, keyed by the
/// parameters on that task's path only. Fairness gradients are unscaled;
/// λ_t is applied at update time.
#[derive(Debug, Clone)]
pub struct TaskGrads {
    pub acc: BTreeMap<ParamId, LayerGrad>,
    pub fair: BTreeMap<ParamId, LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub per_task: Vec<TaskGrads>,
}

/// Backpropagates one head-level delta (batch×1) down task t's path.
fn backprop_path(
    top: &Topology,
    fwd: &ForwardPass,
    t: usize,
    head_dz: &Array2<f64>,
) -> BTreeMap<ParamId, LayerGrad> {
    let mut grads = BTreeMap::new();
    let path = top.path_of(t);

    let head_id = *path.last().unwrap();
    let head_in = fwd.input_to(top, top.d + 1, t);
    grads.insert(
        head_id,
        LayerGrad {
            weights: head_in.t().dot(head_dz),
            bias: head_dz.sum_axis(Axis(0)),
        },
    );

    let mut delta = head_dz.dot(&top.heads[t].weights.t());
    for depth in (1..=top.d).rev() {
        let id = path[depth - 1];
        let act = match id {
            ParamId::Shared { .. } => &fwd.shared_acts[depth - 1],
            ParamId::Branch { depth, slot } => &fwd.branch_acts[&(depth, slot)],
            ParamId::Head { .. } => unreachable!(),
        };
        // ReLU gate: activation > 0 iff pre-activation > 0.
        let dz = &delta * &act.mapv(|a| (a > 0.0) as u8 as f64);
        let input = fwd.input_to(top, depth, t);
        grads.insert(
            id,
            LayerGrad {
                weights: input.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            },
        );
        if depth > 1 {
            delta = dz.dot(&top.param(id).weights.t());
        }
    }
    grads
}

/// Analytic gradients of L_t and F_t for every task, at every parameter
/// on that task's path. The fairness delta flows only through the argmax
/// group per class.
pub fn per_task_gradients(
    top: &Topology,
    fwd: &ForwardPass,
    labels: &Array2<u8>,
    protected: &Array1<u8>,
) -> Result<GradientSet> {
    let n = fwd.input.nrows();
    if n == 0 {
        return Err(Error::UndefinedLoss("empty batch".into()));
    }
    if labels.nrows() != n || labels.ncols() != top.n_tasks() || protected.len() != n {
        return Err(Error::Shape(format!(
            "labels {:?} / protected {} vs batch {n}×{}",
            labels.dim(),
            protected.len(),
            top.n_tasks()
        )));
    }

    let mut per_task = Vec::with_capacity(top.n_tasks());
    for t in 0..top.n_tasks() {
        let p = fwd.probs.column(t);
        let y = labels.column(t);

        let mut acc_dz = Array2::zeros((n, 1));
        for i in 0..n {
            acc_dz[[i, 0]] = (p[i] - y[i] as f64) / n as f64;
        }

        let cells = crate::objectives::group_class_losses(p, y, protected.view())?;
        let sel = fairness_backprop_selector(&cells);
        let mut fair_dz = Array2::zeros((n, 1));
        for i in 0..n {
            let (g, c) = (protected[i] as usize, y[i] as usize);
            if sel[c] == Some(g) {
                fair_dz[[i, 0]] = (p[i] - y[i] as f64) / cells.count[g][c] as f64;
            }
        }

        per_task.push(TaskGrads {
            acc: backprop_path(top, fwd, t, &acc_dz),
            fair: backprop_path(top, fwd, t, &fair_dz),
        });
    }
    Ok(GradientSet { per_task })
}

/// θ_α ← θ_α − η·Σ_{t on path}(acc_t + λ_t·fair_t). Contributions are
/// summed per parameter before a single subtraction so equal-and-opposite
/// task gradients cancel exactly.
pub fn apply_update(
    top: &mut Topology,
    grads: &GradientSet,
    lambdas: &[f64],
    eta: f64,
) -> Result<()> {
    if grads.per_task.len() != top.n_tasks() || lambdas.len() != top.n_tasks() {
        return Err(Error::Internal(format!(
            "gradients for {} tasks, lambdas for {}, model has {}",
            grads.per_task.len(),
            lambdas.len(),
            top.n_tasks()
        )));
    }
    let mut total: BTreeMap<ParamId, LayerGrad> = BTreeMap::new();
    for (t, tg) in grads.per_task.iter().enumerate() {
        for (source, scale) in [(&tg.acc, 1.0), (&tg.fair, lambdas[t])] {
            if scale == 0.0 {
                continue;
            }
            for (id, g) in source {
                let entry = total
                    .entry(*id)
                    .or_insert_with(|| LayerGrad::zeros_like(top.param(*id)));
                if entry.weights.dim() != g.weights.dim() {
                    return Err(Error::Internal(format!(
                        "gradient shape {:?} vs parameter {:?} at {id:?}",
                        g.weights.dim(),
                        entry.weights.dim()
                    )));
                }
                if scale == 1.0 {
                    entry.weights += &g.weights;
                    entry.bias += &g.bias;
                } else {
                    entry.weights.scaled_add(scale, &g.weights);
                    entry.bias.scaled_add(scale, &g.bias);
                }
            }
        }
    }
    for (id, g) in &total {
        let p = top.param_mut(*id);
        p.weights.scaled_add(-eta, &g.weights);
        p.bias.scaled_add(-eta, &g.bias);
    }
    Ok(())
}
