//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p fedprune --test acceptance`; pass
//! criterion numbers after `--` to run a subset.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use fedprune::data::{generate_synthetic, SyntheticSpec};
use fedprune::experiment::{pooled_std, run_on, sweep_clients, sweep_k, ExperimentConfig, RunMode, RunResult, DEFAULT_KS};
use fedprune::federation::{fedavg, FederatedRun, FederationConfig, ServerPruner, Stage};
use fedprune::metrics::{cumulative_cost, round_bytes};
use fedprune::nn::{build_architecture, count_params, init_weights, ArchitectureSpec, Family, ModelGraph};
use fedprune::ops::{ConvGeometry, Padding, PoolSpec};
use fedprune::pruning::{score_filters, select_keep_set, PruneConfig, PruneReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(DESK).expect("desk config parses")
}

fn desk_with_widths(widths: &[usize]) -> ExperimentConfig {
    let mut cfg = desk();
    cfg.model.widths = Some(widths.to_vec());
    cfg
}

fn keep(w: &fedprune::Tensor, k: f64) -> Vec<usize> {
    let cfg = PruneConfig { k, ..Default::default() };
    select_keep_set(&score_filters(w).unwrap(), &cfg).0
}

fn subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut compared, mut skipped, mut mismatches) = (0, 0, 0);
    for case in 0..1000 {
        let n = r.random_range(1..=64);
        let c = r.random_range(1..=16);
        let k = [3, 5][r.random_range(0..2)];
        let w = random_layer_weights(&mut r, n, c, k, DISTS[case % 3]);
        let kk = [2.0, 2.5, 3.0, r.random_range(0.5..3.5)][case % 4];
        let (want, margin) = exact_keep_set(&w, kk, 1);
        if margin <= 1e-9 {
            skipped += 1;
            continue;
        }
        compared += 1;
        if keep(&w, kk) != want {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && t < Duration::from_secs(60),
        format!("{compared} layers compared, {skipped} within 1e-9 of a bound, {mismatches} mismatches, {t:.1?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut models = 0;
    for family in FAMILIES {
        let mut done = 0;
        while done < 50 {
            let model = random_model(family, &mut r);
            let prunable: Vec<usize> = model.conv_layers().iter().filter(|c| c.prunable).map(|c| c.filters()).collect();
            let li = r.random_range(0..prunable.len());
            if prunable[li] < 2 {
                continue;
            }
            let fi = r.random_range(0..prunable[li]);
            let (zeroed, pruned) = zero_and_prune(&model, li, fi);
            assert!(count_params(&pruned) < count_params(&zeroed));
            let [c, h, w] = model.input_shape;
            for _ in 0..100 {
                let x = random_tensor(&mut r, &[2, c, h, w], 1.0);
                worst = worst.max(zeroed.forward(&x).unwrap().max_abs_diff(&pruned.forward(&x).unwrap()));
            }
            done += 1;
            models += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && t < Duration::from_secs(300),
        format!("{models} models x 100 batches, max output gap {worst:.2e}, {t:.1?}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let x = random_tensor(&mut r, &[2, 3, 7, 7], 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], 0.5);
    let b = random_tensor(&mut r, &[4], 0.5);
    let ins = [x.clone(), w.clone(), b.clone()];
    errors.push(("conv same", op_grad_error(&ins, 30, |t, v| t.conv2d(v[0], v[1], v[2], ConvGeometry::default()))));
    let valid = ConvGeometry { padding: Padding::Valid, stride: 2 };
    errors.push(("conv valid/2", op_grad_error(&ins, 31, |t, v| t.conv2d(v[0], v[1], v[2], valid))));
    let dx = random_tensor(&mut r, &[3, 9], 1.0);
    let dw = random_tensor(&mut r, &[9, 4], 0.5);
    let db = random_tensor(&mut r, &[4], 0.5);
    errors.push(("dense", op_grad_error(&[dx, dw, db], 32, |t, v| t.dense(v[0], v[1], v[2]))));
    let spaced = spaced_tensor(&mut r, &[2, 2, 6, 6], 0.01);
    errors.push(("relu", op_grad_error(&[spaced.clone()], 33, |t, v| Ok(t.relu(v[0])))));
    errors.push(("maxpool 2x2", op_grad_error(&[spaced.clone()], 34, |t, v| t.maxpool(v[0], PoolSpec::halve()))));
    errors.push(("maxpool 3x3 same", op_grad_error(&[spaced.clone()], 35, |t, v| t.maxpool(v[0], PoolSpec::same3()))));
    errors.push(("flatten", op_grad_error(&[x.clone()], 36, |t, v| t.flatten(v[0]))));
    let y = random_tensor(&mut r, &[2, 3, 7, 7], 1.0);
    errors.push(("residual add", op_grad_error(&[x.clone(), y.clone()], 37, |t, v| t.add(v[0], v[1]))));
    let z = random_tensor(&mut r, &[2, 1, 7, 7], 1.0);
    errors.push(("concat", op_grad_error(&[x, z, y], 38, |t, v| t.concat_channels(v))));
    let logits = random_tensor(&mut r, &[5, 4], 2.0);
    errors.push(("cross-entropy", op_grad_error(&[logits], 39, |t, v| t.cross_entropy(v[0], &[0, 3, 1, 1, 2]))));
    for family in FAMILIES {
        let name = match family {
            Family::Conv => "conv model",
            Family::Resnet => "resnet model",
            Family::Inception => "inception model",
        };
        let worst = (0..3)
            .map(|_| {
                let model = random_model(family, &mut r);
                let [c, h, w] = model.input_shape;
                let batch = random_tensor(&mut r, &[3, c, h, w], 1.0);
                let labels: Vec<usize> = (0..3).map(|i| i % model.classes).collect();
                model_grad_error(&model, &batch, &labels)
            })
            .fold(0.0, f64::max);
        errors.push((name, worst));
    }
    let t = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let failing: Vec<&str> = errors.iter().filter(|e| e.1 >= 1e-4).map(|e| e.0).collect();
    outcome(
        failing.is_empty() && t < Duration::from_secs(120),
        format!("{} checks, max relative error {worst:.2e}, failing {failing:?}, {t:.1?}", errors.len()),
    )
}

fn criterion_4() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut identity_ok = true;
    for case in 0..200 {
        let mut locals = random_fedavg_case(&mut r);
        match case % 4 {
            0 => locals.truncate(1),
            1 => {
                let first = locals[0].0.clone();
                locals.iter_mut().for_each(|l| l.0 = first.clone());
            }
            _ => {}
        }
        let avg = fedavg(&locals).unwrap();
        worst = worst.max(max_abs_gap(&avg, &fedavg_oracle(&locals)));
        if case % 4 <= 1 {
            let src = &locals[0].0;
            let gap = max_abs_gap(&avg, &src.params().iter().map(|p| p.data().to_vec()).collect::<Vec<_>>());
            worst = worst.max(gap);
            if case % 4 == 0 {
                identity_ok &= avg
                    .params()
                    .iter()
                    .zip(src.params())
                    .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
    outcome(
        worst <= 1e-12 && identity_ok,
        format!("200 cases (50 single-client, 50 consensus), max deviation {worst:.2e}, single-client bitwise {identity_ok}"),
    )
}

struct DeskRuns {
    pruned: RunResult,
    baseline: RunResult,
    elapsed: Duration,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: std::sync::OnceLock<DeskRuns> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let cfg = desk();
        let data = cfg.build_dataset().unwrap();
        let pruned = run_on(&cfg, &data, RunMode::Pruned).unwrap();
        let rounds = pruned.stage1_rounds + pruned.stage2_rounds;
        let baseline = run_on(&cfg, &data, RunMode::Baseline { rounds }).unwrap();
        DeskRuns { pruned, baseline, elapsed: start.elapsed() }
    })
}

fn criterion_5() -> Outcome {
    let cfg = desk();
    let d = desk_runs();
    let p = &d.pruned;
    let history: Vec<u64> = p.ledger.rows.iter().filter(|r| r.stage == Stage::Search).map(|r| r.params).collect();
    let c = cfg.pruning.patience;
    let tail_flat = history.len() > c && history[history.len() - c - 1..].windows(2).all(|w| w[1] >= w[0]);
    let halted = p.stage1_rounds < cfg.federation.stage1_cap && tail_flat;
    let ratio = p.final_params() as f64 / p.initial_params as f64;
    let gap = d.baseline.best_accuracy - p.best_accuracy;
    let ok = halted && ratio <= 0.60 && gap <= 0.05 && d.elapsed < Duration::from_secs(1800);
    outcome(
        ok,
        format!(
            "(a) search halted after {} rounds by the c={c} rule: {halted}; (b) params {} -> {} ({:.1}% kept); \
             (c) best accuracy {:.4} vs baseline {:.4} (final-round {:.4} vs {:.4}); (d) {:.1?}",
            p.stage1_rounds,
            p.initial_params,
            p.final_params(),
            100.0 * ratio,
            p.best_accuracy,
            d.baseline.best_accuracy,
            p.final_accuracy,
            d.baseline.final_accuracy,
            d.elapsed
        ),
    )
}

fn criterion_6() -> Outcome {
    let d = desk_runs();
    let pruned = cumulative_cost(&d.pruned.ledger).unwrap();
    let base = cumulative_cost(&d.baseline.ledger).unwrap();
    let rows_exact = [&d.pruned.ledger, &d.baseline.ledger].iter().all(|l| {
        let mut running = 0u64;
        l.rows.iter().all(|r| {
            running += r.bytes_down + r.bytes_up;
            r.bytes_down + r.bytes_up == r.params_broadcast * 4 * r.selected * 2
                && r.bytes_down + r.bytes_up == round_bytes(r.params_broadcast, r.selected, 4)
                && r.cumulative_bytes == running
        })
    });
    let same_rounds = d.pruned.ledger.len() == d.baseline.ledger.len();
    outcome(
        pruned < base && rows_exact && same_rounds,
        format!(
            "pruned {pruned} B vs baseline {base} B over {} rounds ({:.1}% saved); per-round bytes exact: {rows_exact}",
            d.pruned.ledger.len(),
            100.0 * (1.0 - pruned as f64 / base as f64)
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut nested = 0;
    for case in 0..100 {
        let n = r.random_range(1..=64);
        let c = r.random_range(1..=16);
        let w = random_layer_weights(&mut r, n, c, 3, DISTS[case % 3]);
        let sets: Vec<Vec<usize>> = DEFAULT_KS.iter().map(|&k| keep(&w, k)).collect();
        if subset(&sets[0], &sets[1]) && subset(&sets[1], &sets[2]) {
            nested += 1;
        }
    }
    let cfg = desk_with_widths(&[32, 64]);
    let entries = sweep_k(&cfg, &DEFAULT_KS, None).unwrap();
    let retained: Vec<usize> = entries.iter().map(|e| e.snapshot_retained).collect();
    let monotone = retained.windows(2).all(|w| w[0] <= w[1]);
    let finals: Vec<usize> = entries.iter().map(|e| e.final_params).collect();
    outcome(
        nested == 100 && monotone && entries.len() == 3,
        format!(
            "{nested}/100 snapshots nested; sweep snapshot {} -> retained {retained:?} for k {DEFAULT_KS:?} (final params {finals:?})",
            entries[0].snapshot_params
        ),
    )
}

struct Scripted {
    history: Vec<usize>,
    calls: usize,
}

impl ServerPruner for Scripted {
    fn prune(&mut self, model: &ModelGraph) -> fedprune::Result<(ModelGraph, PruneReport)> {
        let after = self.history[self.calls.min(self.history.len() - 1)];
        self.calls += 1;
        Ok((
            model.clone(),
            PruneReport {
                layers: vec![],
                params_before: count_params(model),
                params_after: after,
                flops_before: 0,
                flops_after: 0,
            },
        ))
    }
}

fn criterion_8() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        classes: 3,
        clients: 4,
        samples_per_client: 6,
        test_samples: 6,
        image_shape: [1, 4, 4],
        ..Default::default()
    })
    .unwrap();
    let spec = ArchitectureSpec { widths: vec![2], kernel: 3, ..ArchitectureSpec::default_for(Family::Conv, [1, 4, 4], 3) };
    let model = init_weights(build_architecture(&spec).unwrap(), 0);
    let cfg = FederationConfig { clients: 4, ..Default::default() };
    let mut run = FederatedRun::new(cfg, &data, model).unwrap();
    let mut stub = Scripted { history: vec![100, 90, 90, 90, 90, 80, 70], calls: 0 };
    let rounds = run.run_stage1_with(3, &mut stub).unwrap();
    outcome(
        rounds == 5 && run.param_history == [100, 90, 90, 90, 90] && run.stage == Stage::Train,
        format!("history {:?} halted after round {rounds}", run.param_history),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let cfg = desk_with_widths(&[32, 64]);
    let entries = sweep_clients(&cfg, &[5, 10], 10, None).unwrap();
    let pooled = pooled_std(&entries);
    let diff = (entries[0].mean - entries[1].mean).abs();
    outcome(
        diff < 2.0 * pooled,
        format!(
            "s=5 mean {:.1} std {:.1}; s=10 mean {:.1} std {:.1}; |diff| {diff:.1} vs 2x pooled {:.1}; {:.1?}",
            entries[0].mean,
            entries[0].std,
            entries[1].mean,
            entries[1].std,
            2.0 * pooled,
            start.elapsed()
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut cfg = desk_with_widths(&[16, 32]);
    cfg.federation.stage2_rounds = 10;
    let runs: Vec<RunResult> = (0..2)
        .map(|_| {
            let data = cfg.build_dataset().unwrap();
            run_on(&cfg, &data, RunMode::Pruned).unwrap()
        })
        .collect();
    let same_ledger = runs[0].ledger.without_timing() == runs[1].ledger.without_timing();
    let same_filters = runs[0].model.filter_counts() == runs[1].model.filter_counts();
    let same_weights = runs[0].model == runs[1].model;
    outcome(
        same_ledger && same_filters,
        format!(
            "{} ledger rows identical: {same_ledger}; filters {:?} identical: {same_filters}; weights identical: {same_weights}",
            runs[0].ledger.len(),
            runs[0].model.filter_counts().iter().map(|f| f.1).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("pruning-boundary oracle equivalence", criterion_1),
        ("zero-filter function preservation", criterion_2),
        ("gradient correctness", criterion_3),
        ("fedavg oracle", criterion_4),
        ("two-stage desk-scale run", criterion_5),
        ("communication-cost reduction", criterion_6),
        ("k-monotonicity", criterion_7),
        ("early-stop semantics", criterion_8),
        ("client-count robustness", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let o = f();
        let _ = writeln!(out, "criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = out.flush();
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(out, "failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
