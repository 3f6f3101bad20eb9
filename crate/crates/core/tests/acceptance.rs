//! End-to-end acceptance checks. One test per criterion, each printing a
//! single PASS line (visible with `--nocapture`); failures panic with the
//! measured numbers. Tolerances and time budgets are pinned as constants
//! beside each check.

use std::time::{Duration, Instant};

use fairbranch_core::branching::{form_branches, ScheduleConfig};
use fairbranch_core::conflict::{fbgrad_pass, fbgrad_project, PairOrder};
use fairbranch_core::data::{
    generate_synthetic, stratified_split, Dataset, SplitSpec, StratifyOn, SyntheticSpec,
};
use fairbranch_core::grouping::{
    linear_cka, slhc_pair, update_task_groups, AffinityEntry, AffinityTable, TaskGrouping,
};
use fairbranch_core::metrics::{
    evaluate, fairness_violation, predict, EvalResult, StlBaseline, ViolationKind,
};
use fairbranch_core::network::{
    forward, init_model, per_task_gradients, relative_parameters, stl_parameter_count,
    ForwardPass, ParamId, Topology, PROB_CLAMP,
};
use fairbranch_core::objectives::{batch_losses, BatchLosses};
use fairbranch_core::trainer::{
    train_fairbranch, train_stl, train_vanilla_mtl, TrainConfig, TrainReport,
};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- criterion 1

const FD_H: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Below this scale the check degrades to an absolute tolerance, keeping
/// finite-difference roundoff out of the comparison.
const FD_DENOM_FLOOR: f64 = 1e-4;
/// Minimum gap between group cell losses; a ±h probe moves them by ~1e-4
/// at most, so the argmax selector cannot flip mid-probe.
const CELL_MARGIN: f64 = 1e-3;
/// Minimum |pre-activation|; keeps every ReLU off its corner for all probes.
const KINK_MARGIN: f64 = 1e-3;
const PROB_MARGIN: f64 = 1e-3;

fn random_topology(i: u64) -> (Topology, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(41_000 + i);
    let in_dim: usize = rng.random_range(3..=6);
    let d: usize = rng.random_range(2..=4);
    let widths: Vec<usize> = (0..d).map(|_| rng.random_range(4..=8)).collect();
    let t_count: usize = rng.random_range(2..=4);
    let mut top = init_model(in_dim, &widths, t_count, 41_100 + i).unwrap();
    let mut tg = TaskGrouping::singletons(t_count);
    if i >= 10 {
        let events: usize = rng.random_range(1..=(top.d_c - 1).min(2).max(1));
        for _ in 0..events {
            let pairs: Vec<(usize, usize)> = if tg.len() >= 2 && rng.random_bool(0.7) {
                vec![(0, 1)]
            } else {
                vec![]
            };
            tg = update_task_groups(&tg, &pairs, top.d_c).unwrap();
            form_branches(&mut top, &tg).unwrap();
        }
    }
    // Shake every parameter so replicas differ and biases leave zero.
    let mut noise = ChaCha8Rng::seed_from_u64(41_200 + i);
    for id in top.param_ids() {
        let p = top.param_mut(id);
        p.weights.mapv_inplace(|v| v + 0.1 * noise.random_range(-1.0..1.0));
        p.bias.mapv_inplace(|v| v + 0.2 * noise.random_range(-1.0..1.0));
    }
    (top, t_count)
}

/// Activation matrix feeding the layer at `depth` on task t's path.
fn act_feeding<'a>(top: &Topology, fwd: &'a ForwardPass, depth: usize, t: usize) -> &'a Array2<f64> {
    if depth == 1 {
        &fwd.input
    } else if depth - 1 <= top.d_c {
        &fwd.shared_acts[depth - 2]
    } else {
        &fwd.branch_acts[&(depth - 1, top.slot_of(depth - 1, t).unwrap())]
    }
}

fn probes_stay_differentiable(top: &Topology, fwd: &ForwardPass) -> bool {
    for id in top.param_ids() {
        let depth = match id {
            ParamId::Shared { depth } | ParamId::Branch { depth, .. } => depth,
            ParamId::Head { .. } => continue,
        };
        let t = *top.tasks_of(id).iter().next().unwrap();
        let p = top.param(id);
        let mut z = act_feeding(top, fwd, depth, t).dot(&p.weights);
        z += &p.bias;
        if z.iter().any(|v| v.abs() < KINK_MARGIN) {
            return false;
        }
    }
    fwd.probs
        .iter()
        .all(|p| *p > PROB_CLAMP.max(PROB_MARGIN) && *p < 1.0 - PROB_CLAMP.max(PROB_MARGIN))
}

fn cells_clear_of_ties(bl: &BatchLosses) -> bool {
    bl.per_task.iter().all(|t| {
        (0..2).all(|cls| match (t.cells.loss[0][cls], t.cells.loss[1][cls]) {
            (Some(a), Some(b)) => (a - b).abs() > CELL_MARGIN,
            _ => true,
        })
    })
}

fn screened_batch(
    top: &Topology,
    t_count: usize,
    base_seed: u64,
) -> (Array2<f64>, Array2<u8>, Array1<u8>, ForwardPass) {
    for attempt in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + attempt);
        let n = 40;
        let x = Array2::from_shape_fn((n, top.in_dim), |_| rng.random_range(-1.5..1.5));
        let labels = Array2::from_shape_fn((n, t_count), |_| rng.random_bool(0.5) as u8);
        let protected = Array1::from_shape_fn(n, |_| rng.random_bool(0.5) as u8);
        let fwd = forward(top, &x).unwrap();
        let bl = batch_losses(&fwd.probs, &labels, &protected).unwrap();
        if probes_stay_differentiable(top, &fwd) && cells_clear_of_ties(&bl) {
            return (x, labels, protected, fwd);
        }
    }
    panic!("no probe-safe batch found in 50 draws");
}

fn perturb(top: &mut Topology, id: ParamId, comp: usize, delta: f64) {
    let p = top.param_mut(id);
    let nw = p.weights.len();
    if comp < nw {
        *p.weights.iter_mut().nth(comp).unwrap() += delta;
    } else {
        p.bias[comp - nw] += delta;
    }
}

#[test]
fn criterion_01_gradients_match_central_differences() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (mut top, t_count) = random_topology(i);
        let (x, labels, protected, fwd) = screened_batch(&top, t_count, 42_000 + 97 * i);
        let analytic = per_task_gradients(&top, &fwd, &labels, &protected).unwrap();
        for id in top.param_ids() {
            for comp in 0..top.param(id).n_params() {
                perturb(&mut top, id, comp, FD_H);
                let plus =
                    batch_losses(&forward(&top, &x).unwrap().probs, &labels, &protected).unwrap();
                perturb(&mut top, id, comp, -2.0 * FD_H);
                let minus =
                    batch_losses(&forward(&top, &x).unwrap().probs, &labels, &protected).unwrap();
                perturb(&mut top, id, comp, FD_H);
                for t in 0..t_count {
                    let fd_acc = (plus.per_task[t].acc - minus.per_task[t].acc) / (2.0 * FD_H);
                    let fd_fair = (plus.per_task[t].fair - minus.per_task[t].fair) / (2.0 * FD_H);
                    let an_acc = analytic.per_task[t]
                        .acc
                        .get(&id)
                        .map_or(0.0, |g| g.flat()[comp]);
                    let an_fair = analytic.per_task[t]
                        .fair
                        .get(&id)
                        .map_or(0.0, |g| g.flat()[comp]);
                    for (kind, an, fd) in [("acc", an_acc, fd_acc), ("fair", an_fair, fd_fair)] {
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_DENOM_FLOOR);
                        worst = worst.max(rel);
                        assert!(
                            rel < FD_REL_TOL,
                            "topology {i} {id:?}[{comp}] task {t} {kind}: analytic {an:e}, fd {fd:e}, rel {rel:e}"
                        );
                    }
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 analytic gradients vs central differences on 20 topologies \
         (h={FD_H:e}, rel tol {FD_REL_TOL:e}, worst {worst:.2e}, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_branching_preserves_forward_outputs() {
    const INVARIANCE_TOL: f64 = 1e-12;
    let t0 = Instant::now();
    let mut top = init_model(6, &[8, 7, 6, 5], 4, 77).unwrap();
    let mut tg = TaskGrouping::singletons(4);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let x = Array2::from_shape_fn((256, 6), |_| rng.random_range(-2.0..2.0));
    let script: [Vec<(usize, usize)>; 3] = [vec![(0, 1), (2, 3)], vec![(0, 1)], vec![]];
    for (k, pairs) in script.iter().enumerate() {
        let before = forward(&top, &x).unwrap().probs;
        tg = update_task_groups(&tg, pairs, top.d_c).unwrap();
        form_branches(&mut top, &tg).unwrap();
        let after = forward(&top, &x).unwrap().probs;
        let drift = (&before - &after)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(drift < INVARIANCE_TOL, "event {k}: max output drift {drift:e}");
    }
    assert_eq!(top.d_c, 1);
    top.validate().unwrap();
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 2 three scripted branch events, 256-sample forward drift < {INVARIANCE_TOL:e} \
         ({elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_projection_orthogonality_and_untouched_accuracy_gradients() {
    const ORTHO_TOL: f64 = 1e-9;
    let t0 = Instant::now();
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + i);
        let dim: usize = rng.random_range(2..=512);
        let g1 = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
        let mut g2 = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
        if g1.dot(&g2) >= 0.0 {
            g2.mapv_inplace(|v| -v);
        }
        assert!(g1.dot(&g2) < 0.0, "degenerate draw {i}");
        let corrected = fbgrad_project(&g1, &g2);
        let residual = corrected.dot(&g2).abs();
        let bound = ORTHO_TOL * corrected.dot(&corrected).sqrt() * g2.dot(&g2).sqrt();
        assert!(residual <= bound, "pair {i} dim {dim}: residual {residual:e} > {bound:e}");
    }

    // A full pass must leave every accuracy gradient bit-identical.
    let mut top = init_model(5, &[6, 6], 3, 301).unwrap();
    let tg = update_task_groups(&TaskGrouping::singletons(3), &[(0, 1)], top.d_c).unwrap();
    form_branches(&mut top, &tg).unwrap();
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_500 + s);
        let x = Array2::from_shape_fn((64, 5), |_| rng.random_range(-1.0..1.0));
        let labels = Array2::from_shape_fn((64, 3), |_| rng.random_bool(0.5) as u8);
        let protected = Array1::from_shape_fn(64, |_| rng.random_bool(0.5) as u8);
        let fwd = forward(&top, &x).unwrap();
        let mut grads = per_task_gradients(&top, &fwd, &labels, &protected).unwrap();
        let acc_before: Vec<_> = grads.per_task.iter().map(|t| t.acc.clone()).collect();
        let mut pass_rng = ChaCha8Rng::seed_from_u64(30_600 + s);
        fbgrad_pass(
            &top,
            &mut grads,
            &[1.0, 1.0, 1.0],
            0,
            &mut pass_rng,
            PairOrder::Seeded,
            true,
        )
        .unwrap();
        for (t, before) in acc_before.iter().enumerate() {
            for (id, g) in before {
                assert_eq!(g.weights, grads.per_task[t].acc[id].weights, "task {t} {id:?}");
                assert_eq!(g.bias, grads.per_task[t].acc[id].bias);
            }
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 projection residual ≤ {ORTHO_TOL:e}·‖·‖‖·‖ on 1000 conflicting pairs, \
         accuracy gradients untouched ({elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------- criterion 4

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn center_columns(mut m: Array2<f64>) -> Array2<f64> {
    for mut col in m.columns_mut() {
        let mean = col.sum() / col.len() as f64;
        col.mapv_inplace(|v| v - mean);
    }
    m
}

fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'draw: loop {
        let mut q: Array2<f64> = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        for j in 0..n {
            // Two classical Gram-Schmidt sweeps keep QᵀQ−I near 1e-15.
            for _ in 0..2 {
                for k in 0..j {
                    let qk = q.column(k).to_owned();
                    let proj = q.column(j).dot(&qk);
                    q.column_mut(j).scaled_add(-proj, &qk);
                }
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-6 {
                continue 'draw;
            }
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        return q;
    }
}

#[test]
fn criterion_04_cka_invariances_and_closed_form() {
    const EXACT_TOL: f64 = 1e-9;
    const CLOSED_FORM_TOL: f64 = 1e-8;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + i);
        let r: usize = rng.random_range(2..=10);
        let c: usize = rng.random_range(1..=8);
        let m = Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let v = linear_cka(&m, &m).unwrap();
        assert!((v - 1.0).abs() <= EXACT_TOL, "self similarity {v} at {i}");
    }
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_200 + i);
        let r: usize = rng.random_range(3..=10);
        let c1: usize = rng.random_range(2..=6);
        let c2: usize = rng.random_range(1..=6);
        let a = Array2::from_shape_fn((r, c1), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((r, c2), |_| rng.random_range(-1.0..1.0));
        let base = linear_cka(&a, &b).unwrap();
        for scale in [1e-3, 0.5, 3.7, 1e3] {
            let v = linear_cka(&a.mapv(|x| scale * x), &b).unwrap();
            assert!((v - base).abs() <= EXACT_TOL, "scale {scale}: {v} vs {base}");
        }
        let q = random_orthogonal(c1, 40_400 + i);
        let v = linear_cka(&a.dot(&q), &b).unwrap();
        assert!((v - base).abs() <= EXACT_TOL, "rotation {i}: {v} vs {base}");
    }
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_600 + i);
        let r: usize = rng.random_range(3..=12);
        let c1: usize = rng.random_range(1..=6);
        let c2: usize = rng.random_range(1..=6);
        let a = center_columns(Array2::from_shape_fn((r, c1), |_| rng.random_range(-1.0..1.0)));
        let b = center_columns(Array2::from_shape_fn((r, c2), |_| rng.random_range(-1.0..1.0)));
        let closed = frob_sq(&b.t().dot(&a))
            / (frob_sq(&a.t().dot(&a)).sqrt() * frob_sq(&b.t().dot(&b)).sqrt());
        let v = linear_cka(&a, &b).unwrap();
        assert!(
            (v - closed).abs() <= CLOSED_FORM_TOL,
            "matrix pair {i}: {v} vs closed form {closed}"
        );
    }
    let flat = Array2::from_elem((5, 3), 2.5);
    let zero = Array2::<f64>::zeros((5, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(40_900);
    let live = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
    assert_eq!(linear_cka(&flat, &flat).unwrap(), 0.0);
    assert_eq!(linear_cka(&zero, &live).unwrap(), 0.0);
    assert_eq!(linear_cka(&live, &flat).unwrap(), 0.0);
    println!(
        "ACCEPTANCE 4 similarity self=1±1e-9, scaling/rotation invariance ±1e-9, \
         closed form ±1e-8 on 100 centered pairs, degenerate→0: PASS"
    );
}

// ---------------------------------------------------------------- criterion 5

fn oracle_greedy(entries: &[AffinityEntry]) -> Vec<(usize, usize)> {
    let mut live: Vec<AffinityEntry> = entries.to_vec();
    let mut out = Vec::new();
    while !live.is_empty() {
        let mut best = live[0];
        for e in &live[1..] {
            if e.value > best.value || (e.value == best.value && (e.a, e.b) < (best.a, best.b)) {
                best = *e;
            }
        }
        out.push((best.a, best.b));
        live.retain(|e| e.a != best.a && e.a != best.b && e.b != best.a && e.b != best.b);
    }
    out.sort_unstable();
    out
}

#[test]
fn criterion_05_greedy_pairing_matches_bruteforce_oracle() {
    for i in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + i);
        let n: usize = rng.random_range(2..=8);
        let mut entries = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(0.65) {
                    // Coarse value grid so ties are common.
                    let value = rng.random_range(1..=10) as f64 / 10.0;
                    entries.push(AffinityEntry { a, b, value });
                }
            }
        }
        let table = AffinityTable {
            entries: entries.clone(),
            tau: 0.05,
        };
        assert_eq!(slhc_pair(&table), oracle_greedy(&entries), "table {i}: {entries:?}");
    }
    println!("ACCEPTANCE 5 greedy pairing equals brute-force oracle on 500 tables with ties: PASS");
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_first_branch_recovers_planted_families() {
    const N_SEEDS: u64 = 10;
    const REQUIRED: usize = 9;
    let t0 = Instant::now();
    let mut hits = 0usize;
    for s in 0..N_SEEDS {
        let spec = SyntheticSpec {
            n_samples: 20_000,
            n_features: 10,
            n_tasks: 6,
            n_families: 3,
            bias_strength: 0.0,
            noise: 0.05,
            seed: 6_000 + s,
        };
        let (data, meta) = generate_synthetic(&spec).unwrap();
        let (train, val) = stratified_split(
            &data,
            &SplitSpec {
                train_fraction: 0.8,
                stratify_on: StratifyOn::Protected,
                seed: 61,
            },
        )
        .unwrap();
        // Eight warm-up epochs put the first admitted event at the end of
        // epoch 7, by which point same-family heads have aligned.
        let cfg = TrainConfig {
            eta: 0.1,
            batch_size: 256,
            max_epochs: 8,
            hidden_widths: vec![16, 8],
            tau: 0.7,
            seed: 6_100 + s,
            schedule: ScheduleConfig {
                warm_up: 8,
                ..ScheduleConfig::default()
            },
            ..TrainConfig::default()
        };
        let report = train_fairbranch(&train, &val, &cfg).unwrap();
        let family = |t: usize| meta[&format!("task{t}")].family;
        let ok = report.branch_events.first().is_some_and(|e| {
            !e.pairs.is_empty()
                && e.pairs.iter().all(|p| {
                    let f = family(p.a[0]);
                    p.a.iter().chain(p.b.iter()).all(|&t| family(t) == f)
                })
        });
        hits += ok as usize;
    }
    let elapsed = t0.elapsed();
    assert!(
        hits >= REQUIRED,
        "family-consistent first events in only {hits}/{N_SEEDS} seeds"
    );
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 6 planted family recovery at the first branch event \
         ({hits}/{N_SEEDS} seeds, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------- criterion 7

fn eval_with(report: &TrainReport, data: &Dataset, stl: &[StlBaseline]) -> EvalResult {
    let features = match &report.standardizer {
        Some(st) => st.apply(&data.features),
        None => data.features.clone(),
    };
    let standardized = Dataset {
        features,
        protected: data.protected.clone(),
        labels: data.labels.clone(),
        task_names: data.task_names.clone(),
    };
    evaluate(&report.topology, &standardized, stl).unwrap()
}

#[test]
fn criterion_07_biased_data_transfer_direction() {
    const SEEDS: u64 = 5;
    const KG_FLOOR: f64 = -0.01;
    let t0 = Instant::now();
    let (mut kg_sum, mut dg_fb_sum, mut dg_vn_sum) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..SEEDS {
        let spec = SyntheticSpec {
            n_samples: 12_000,
            n_features: 10,
            n_tasks: 4,
            n_families: 2,
            bias_strength: 0.3,
            noise: 0.05,
            seed: 7_000 + s,
        };
        let (data, _) = generate_synthetic(&spec).unwrap();
        let (train_full, test) = stratified_split(
            &data,
            &SplitSpec {
                train_fraction: 0.8,
                stratify_on: StratifyOn::Protected,
                seed: 71,
            },
        )
        .unwrap();
        let (train, val) = stratified_split(
            &train_full,
            &SplitSpec {
                train_fraction: 0.85,
                stratify_on: StratifyOn::Protected,
                seed: 72,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            eta: 0.1,
            batch_size: 256,
            max_epochs: 30,
            hidden_widths: vec![16, 8],
            tau: 0.5,
            patience: 8,
            seed: 7_100 + s,
            ..TrainConfig::default()
        };
        let dummy = [StlBaseline {
            accuracy: 0.0,
            ep_viol: 0.0,
            eo_viol: 0.0,
        }];
        let mut baselines = Vec::new();
        for t in 0..4 {
            let r = train_stl(&train, &val, t, &cfg).unwrap();
            let single = test.single_task(t).unwrap();
            let e = eval_with(&r, &single, &dummy);
            baselines.push(StlBaseline {
                accuracy: e.per_task[0].accuracy,
                ep_viol: e.per_task[0].ep_viol,
                eo_viol: e.per_task[0].eo_viol,
            });
        }
        let fb = train_fairbranch(&train, &val, &cfg).unwrap();
        let vn = train_vanilla_mtl(&train, &val, &cfg).unwrap();
        let fb_eval = eval_with(&fb, &test, &baselines);
        let vn_eval = eval_with(&vn, &test, &baselines);
        kg_sum += fb_eval.mean_kg;
        dg_fb_sum += fb_eval.mean_dg_ep;
        dg_vn_sum += vn_eval.mean_dg_ep;
    }
    let kg = kg_sum / SEEDS as f64;
    let dg_fb = dg_fb_sum / SEEDS as f64;
    let dg_vn = dg_vn_sum / SEEDS as f64;
    let elapsed = t0.elapsed();
    assert!(kg >= KG_FLOOR, "mean knowledge gain {kg}");
    assert!(
        dg_fb <= dg_vn,
        "mean EP discrimination gain {dg_fb} vs vanilla {dg_vn}"
    );
    assert!(elapsed < Duration::from_secs(900), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 7 biased-data transfer over {SEEDS} seeds: mean KG {kg:.4} ≥ {KG_FLOOR}, \
         mean DG(EP) {dg_fb:.4} ≤ vanilla {dg_vn:.4} ({elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_evaluation_matches_bruteforce_counting() {
    const TOL: f64 = 1e-12;
    for i in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(80_000 + i);
        let n: usize = rng.random_range(50..=1000);
        let t_count: usize = rng.random_range(1..=3);
        let top = init_model(3, &[4, 3], t_count, 80_500 + i).unwrap();
        let mut found = None;
        for _ in 0..50 {
            let features = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let labels = Array2::from_shape_fn((n, t_count), |_| rng.random_bool(0.5) as u8);
            let protected = Array1::from_shape_fn(n, |_| rng.random_bool(0.5) as u8);
            let full = (0..t_count).all(|t| {
                let mut seen = [[false; 2]; 2];
                for (y, s) in labels.column(t).iter().zip(protected.iter()) {
                    seen[*s as usize][*y as usize] = true;
                }
                seen.iter().flatten().all(|&b| b)
            });
            if full {
                let names = (0..t_count).map(|t| format!("task{t}")).collect();
                found = Some(Dataset::new(features, protected, labels, names).unwrap());
                break;
            }
        }
        let data = found.expect("no fully populated draw in 50 tries");
        let preds = predict(&top, &data).unwrap();
        let stl = vec![
            StlBaseline {
                accuracy: 0.5,
                ep_viol: 0.1,
                eo_viol: 0.2,
            };
            t_count
        ];
        let got = evaluate(&top, &data, &stl).unwrap();
        for t in 0..t_count {
            let (mut tp, mut fp, mut fnn, mut tn) = ([0u32; 2], [0u32; 2], [0u32; 2], [0u32; 2]);
            let mut correct = 0usize;
            for r in 0..n {
                let (p, y) = (preds[(r, t)], data.labels[(r, t)]);
                let s = data.protected[r] as usize;
                correct += (p == y) as usize;
                match (y, p) {
                    (1, 1) => tp[s] += 1,
                    (1, 0) => fnn[s] += 1,
                    (0, 1) => fp[s] += 1,
                    _ => tn[s] += 1,
                }
            }
            let tpr = |g: usize| tp[g] as f64 / (tp[g] + fnn[g]) as f64;
            let fpr = |g: usize| fp[g] as f64 / (fp[g] + tn[g]) as f64;
            let acc = correct as f64 / n as f64;
            let ep = (tpr(0) - tpr(1)).abs();
            let eo = ep + (fpr(0) - fpr(1)).abs();
            assert!((got.per_task[t].accuracy - acc).abs() <= TOL, "instance {i} task {t} acc");
            assert!((got.per_task[t].ep_viol - ep).abs() <= TOL, "instance {i} task {t} ep");
            assert!((got.per_task[t].eo_viol - eo).abs() <= TOL, "instance {i} task {t} eo");
            assert!((got.per_task[t].kg - (acc - 0.5)).abs() <= TOL);
            assert!((got.per_task[t].dg_ep - (ep - 0.1)).abs() <= TOL);
            assert!((got.per_task[t].dg_eo - (eo - 0.2)).abs() <= TOL);
            let literal = fairness_violation(
                preds.column(t),
                data.labels.column(t),
                data.protected.view(),
                ViolationKind::EoLiteral,
            )
            .unwrap();
            assert!(
                (literal - 2.0 * ep).abs() <= TOL,
                "literal reading {literal} vs doubled opportunity gap {}",
                2.0 * ep
            );
        }
    }
    println!(
        "ACCEPTANCE 8 evaluation equals brute-force confusion counting on 200 instances \
         (tol 1e-12), literal equalized odds = 2·opportunity gap: PASS"
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_relative_parameter_accounting() {
    for (in_dim, widths, t_count) in [
        (4usize, vec![5usize, 4], 3usize),
        (6, vec![8, 7, 6], 4),
        (3, vec![4, 4, 4, 4], 2),
    ] {
        let mut top = init_model(in_dim, &widths, t_count, 900).unwrap();
        let tg = TaskGrouping::singletons(t_count);
        while top.d_c > 0 {
            form_branches(&mut top, &tg).unwrap();
        }
        top.validate().unwrap();
        assert_eq!(
            top.parameter_count(),
            t_count * stl_parameter_count(in_dim, &widths)
        );
        assert_eq!(relative_parameters(&top), 1.0);
    }
    // One merge anywhere keeps the model strictly below T single-task nets,
    // however far branching continues afterwards.
    for events in 1..=3usize {
        let mut top = init_model(5, &[6, 6, 6], 3, 901).unwrap();
        let mut tg = update_task_groups(&TaskGrouping::singletons(3), &[(0, 1)], top.d_c).unwrap();
        form_branches(&mut top, &tg).unwrap();
        for _ in 1..events {
            tg = update_task_groups(&tg, &[], top.d_c).unwrap();
            form_branches(&mut top, &tg).unwrap();
        }
        let rp = relative_parameters(&top);
        assert!(rp < 1.0, "{events} events: relative parameters {rp}");
    }
    println!(
        "ACCEPTANCE 9 fully branched everywhere gives relative parameters exactly 1.0, \
         any merge keeps it below 1.0: PASS"
    );
}

// Criterion 10 (byte-identical reports from two identical command-line
// training runs) lives in the command-line crate's acceptance tests, next
// to the binary it exercises.
