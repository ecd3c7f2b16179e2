//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdiff::diffusion::{
    forward_time, forward_type_marginal, loss_graph, loss_graph_with, loss_type, type_mixture,
    CrossSample, LossNoise, TrainingExample,
};
use cdiff::forecaster::{sample_sequence, SamplerConfig};
use cdiff::hawkes::{generate_dataset, simulate_with_stats, HawkesConfig, HawkesSpec};
use cdiff::metrics::{otd, otd_bruteforce, OTD_COSTS};
use cdiff::neural::{grad_check_report, DenoiseOrder, Graph, ModelConfig};
use cdiff::rng::seeded;
use cdiff::schedule::{cosine_schedule, ddim_subsequence, DiffusionSchedule};
use cdiff::sequences::{split_context_target, EventSequence, Split};
use cdiff::trainer::{evaluate, train, EvalMode, TrainConfig};
use cdiff::transform::{fit_lambda, TimeCodec};
use cdiff::CDiffModel;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took <= limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.1}s, limit {:.0}s",
            took.as_secs_f64(),
            limit.as_secs_f64()
        ))
    }
}

/// `q(e_{t-1} = j | e_t, e_0)` by Bayes' rule over explicitly chained
/// single-step kernels.
fn bayes_posterior(
    e_t: usize,
    e0: usize,
    k: usize,
    t: usize,
    sched: &DiffusionSchedule,
) -> Vec<f64> {
    let mut prior = vec![0.0; k];
    prior[e0] = 1.0;
    for s in 1..t {
        let b = sched.beta(s);
        prior = (0..k)
            .map(|j| (1.0 - b) * prior[j] + b / k as f64)
            .collect();
    }
    let b = sched.beta(t);
    let joint: Vec<f64> = (0..k)
        .map(|j| {
            let step = if j == e_t { 1.0 - b } else { 0.0 } + b / k as f64;
            step * prior[j]
        })
        .collect();
    let z: f64 = joint.iter().sum();
    joint.into_iter().map(|v| v / z).collect()
}

fn criterion_posterior() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in [2, 3, 5] {
        for steps in [10, 50] {
            let sched = cosine_schedule(steps).map_err(|e| e.to_string())?;
            for t in 2..=steps {
                for e_t in 0..k {
                    for e0 in 0..k {
                        let mut onehot = vec![0.0; k];
                        onehot[e0] = 1.0;
                        let got =
                            type_mixture(e_t, &onehot, t, &sched).map_err(|e| e.to_string())?;
                        let want = bayes_posterior(e_t, e0, k, t, &sched);
                        for (a, b) in got.iter().zip(&want) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
        }
    }
    // The chained kernels also reproduce the closed-form marginal.
    let sched = cosine_schedule(50).map_err(|e| e.to_string())?;
    let closed = forward_type_marginal(1, 5, 50, &sched);
    let chained = {
        let mut p = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        for s in 1..=50 {
            let b = sched.beta(s);
            p = p.iter().map(|v| (1.0 - b) * v + b / 5.0).collect();
        }
        p
    };
    for (a, b) in closed.iter().zip(&chained) {
        worst = worst.max((a - b).abs());
    }
    within(Duration::from_secs(10), start)?;
    if worst < 1e-10 {
        Ok(format!("max |diff| = {worst:.2e}"))
    } else {
        Err(format!("max |diff| = {worst:.2e} >= 1e-10"))
    }
}

fn criterion_forward_gaussian() -> Check {
    let start = Instant::now();
    let steps = 100;
    let sched = cosine_schedule(steps).map_err(|e| e.to_string())?;
    let x0 = [1.7, -0.6];
    let draws = 10_000;
    let mut rng = seeded(2024);
    let mut worst_z: f64 = 0.0;
    for t in [1, steps / 2, steps] {
        let mut samples = vec![Vec::with_capacity(draws); x0.len()];
        for _ in 0..draws {
            let (x_t, _) = forward_time(&x0, t, &sched, &mut rng).map_err(|e| e.to_string())?;
            for (s, v) in samples.iter_mut().zip(x_t) {
                s.push(v);
            }
        }
        let ab = sched.alpha_bar(t);
        let var_true = 1.0 - ab;
        for (s, &x) in samples.iter().zip(&x0) {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let z_mean = (mean - ab.sqrt() * x).abs() / (var_true / n).sqrt();
            let z_var = (var - var_true).abs() / (var_true * (2.0 / (n - 1.0)).sqrt());
            worst_z = worst_z.max(z_mean).max(z_var);
        }
    }
    within(Duration::from_secs(10), start)?;
    if worst_z < 4.0 {
        Ok(format!("worst deviation {worst_z:.2} SE"))
    } else {
        Err(format!("deviation {worst_z:.2} SE >= 4"))
    }
}

fn random_sequence(rng: &mut impl Rng, k: usize) -> EventSequence {
    let len = rng.random_range(0..=4);
    let deltas = (0..len).map(|_| rng.random_range(0.01..3.0)).collect();
    let types = (0..len).map(|_| rng.random_range(0..k)).collect();
    EventSequence::new(deltas, types, k).expect("valid sequence")
}

fn criterion_otd() -> Check {
    let start = Instant::now();
    let mut rng = seeded(31);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=3);
        let a = random_sequence(&mut rng, k);
        let b = random_sequence(&mut rng, k);
        let c = OTD_COSTS[rng.random_range(0..OTD_COSTS.len())];
        let dp = otd(&a, &b, c).map_err(|e| e.to_string())?;
        let bf = otd_bruteforce(&a, &b, c).map_err(|e| e.to_string())?;
        worst = worst.max((dp - bf).abs());
    }
    within(Duration::from_secs(30), start)?;
    if worst < 1e-9 {
        Ok(format!("1000 pairs, max |dp - brute| = {worst:.2e}"))
    } else {
        Err(format!("max |dp - brute| = {worst:.2e}"))
    }
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig {
        embed: 4,
        heads: 2,
        layers: 1,
        ff: 8,
        num_types: 3,
        horizon: 3,
        steps: 20,
        order: DenoiseOrder::TypeFirst,
        seed: 5,
    };
    let codec = TimeCodec::fit(&[0.3, 1.2, 0.5, 2.4, 0.9, 0.15, 0.7]).map_err(|e| e.to_string())?;
    let seq = EventSequence::new(
        vec![0.6, 0.2, 1.1, 0.4, 0.8, 1.9, 0.3],
        vec![2, 0, 1, 1, 2, 0, 1],
        3,
    )
    .map_err(|e| e.to_string())?;
    let task = split_context_target(&seq, 3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for order in DenoiseOrder::ALL {
        let mut model = CDiffModel::new(
            ModelConfig {
                order,
                ..cfg.clone()
            },
            codec,
        )
        .map_err(|e| e.to_string())?;
        let ex = TrainingExample::new(&task, &model.codec).map_err(|e| e.to_string())?;
        let noise = LossNoise::draw_at(10, 3, &mut seeded(8));
        let (net, sched) = (model.net.clone(), model.schedule.clone());
        // The sampled cross-modality input is held fixed, as it is detached.
        let cross: CrossSample = {
            let mut g = Graph::new(&model.params);
            loss_graph(&mut g, &net, &sched, &ex, &noise)
                .map_err(|e| e.to_string())?
                .cross
        };
        let r = grad_check_report(
            |g| Ok(loss_graph_with(g, &net, &sched, &ex, &noise, Some(&cross))?.total),
            &mut model.params,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
    }
    within(Duration::from_secs(300), start)?;
    if worst < 1e-3 {
        Ok(format!("{checked} entries, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-3"))
    }
}

fn criterion_boxcox() -> Check {
    let start = Instant::now();
    let mut rng = seeded(77);
    let dist = LogNormal::new(0.3, 0.8).map_err(|e| e.to_string())?;
    let data: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
    let p = fit_lambda(&data).map_err(|e| e.to_string())?;
    if p.lambda.abs() > 0.05 {
        return Err(format!(
            "fitted lambda {:.4} not within 0.05 of 0",
            p.lambda
        ));
    }
    let mut worst: f64 = 0.0;
    for i in 0..=600 {
        let x = 10f64.powf(-3.0 + i as f64 / 100.0);
        let back = p
            .invert(p.apply(x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max((back - x).abs() / x);
    }
    within(Duration::from_secs(5), start)?;
    if worst < 1e-9 {
        Ok(format!(
            "lambda = {:.4}, roundtrip rel err {worst:.2e} over 1e-3..1e3",
            p.lambda
        ))
    } else {
        Err(format!("roundtrip relative error {worst:.2e}"))
    }
}

fn criterion_hawkes() -> Check {
    let start = Instant::now();
    let mu = vec![0.1, 0.2, 0.05, 0.15, 0.1];
    let total: f64 = mu.iter().sum();
    let spec = HawkesSpec::zero_kernels(mu).map_err(|e| e.to_string())?;
    let (seq, stats) =
        simulate_with_stats(&spec, 10_000, &mut seeded(5)).map_err(|e| e.to_string())?;
    let mut d: Vec<f64> = seq.deltas().to_vec();
    d.sort_by(f64::total_cmp);
    let n = d.len() as f64;
    let ks = d
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-total * x).exp();
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / n.sqrt();
    let excited = HawkesSpec::random(5, 0.1, 0.9, 11).map_err(|e| e.to_string())?;
    let (_, hot) =
        simulate_with_stats(&excited, 10_000, &mut seeded(6)).map_err(|e| e.to_string())?;
    within(Duration::from_secs(30), start)?;
    let ratio = stats.max_ratio.max(hot.max_ratio);
    if ks >= critical {
        return Err(format!("K-S D = {ks:.4} >= {critical:.4}"));
    }
    if ratio > 1.0 {
        return Err(format!(
            "intensity exceeded the thinning bound (ratio {ratio})"
        ));
    }
    Ok(format!(
        "K-S D = {ks:.4} < {critical:.4}; max intensity/bound = {ratio:.4}"
    ))
}

fn desk_corpus(seed: u64) -> cdiff::sequences::Dataset {
    let cfg = HawkesConfig {
        n_train: 300,
        n_val: 50,
        n_test: 50,
        ..HawkesConfig::default()
    };
    generate_dataset(&cfg, seed).expect("corpus").0
}

fn desk_model(order: DenoiseOrder, seed: u64) -> ModelConfig {
    ModelConfig {
        embed: 8,
        num_types: 5,
        horizon: 5,
        steps: 100,
        order,
        seed,
        ..ModelConfig::default()
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_max: 150,
        seed,
        ..TrainConfig::default()
    }
}

fn criterion_end_to_end() -> Check {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = desk_corpus(seed);
        let out = train(
            &data,
            &desk_model(DenoiseOrder::TypeFirst, seed),
            &desk_train(seed),
        )
        .map_err(|e| e.to_string())?;
        let sampler = SamplerConfig::default();
        let mode = EvalMode::NextN(5);
        let c = evaluate(
            "cdiff",
            Some(Arc::new(out.model)),
            &data,
            &sampler,
            mode,
            seed,
        )
        .map_err(|e| e.to_string())?
        .report;
        let p = evaluate("poisson", None, &data, &sampler, mode, seed)
            .map_err(|e| e.to_string())?
            .report;
        let won = c.otd_avg < p.otd_avg && c.rmse_e < p.rmse_e;
        wins += usize::from(won);
        lines.push(format!(
            "seed {seed}: OTD {:.3} vs {:.3}, RMSE_e {:.3} vs {:.3}{}",
            c.otd_avg,
            p.otd_avg,
            c.rmse_e,
            p.rmse_e,
            if won { "" } else { " (lost)" }
        ));
    }
    within(Duration::from_secs(1800), start)?;
    let detail = lines.join("; ");
    if wins >= 2 {
        Ok(format!("CDiff beat Poisson in {wins}/3 seeds [{detail}]"))
    } else {
        Err(format!(
            "CDiff beat Poisson in only {wins}/3 seeds [{detail}]"
        ))
    }
}

fn criterion_independent() -> Check {
    let data = desk_corpus(0);
    let out = train(
        &data,
        &desk_model(DenoiseOrder::Independent, 0),
        &desk_train(0),
    )
    .map_err(|e| e.to_string())?;
    let model = out.model;
    if model.config().order != DenoiseOrder::Independent {
        return Err("trained model lost the independent flag".into());
    }
    let mut compared = 0;
    for (j, seq) in data.split(Split::Test).enumerate() {
        let task = split_context_target(seq, 5).map_err(|e| e.to_string())?;
        let ex = TrainingExample::new(&task, &model.codec).map_err(|e| e.to_string())?;
        let ctx = model
            .embed_context(&task.context)
            .map_err(|e| e.to_string())?;
        for t in [1, 2, 37, 100] {
            let noise = LossNoise::draw_at(t, 5, &mut seeded(j as u64 * 1000 + t as u64));
            let total = |cross: Option<&CrossSample>| -> Result<f64, String> {
                let mut g = Graph::new(&model.params);
                let l = loss_graph_with(&mut g, &model.net, &model.schedule, &ex, &noise, cross)
                    .map_err(|e| e.to_string())?;
                Ok(g.scalar(l.total))
            };
            let drawn = total(None)?;
            let zeroed = total(Some(&CrossSample::Types(vec![0; 5])))?;
            if drawn != zeroed {
                return Err(format!(
                    "task {j}, t={t}: loss {drawn} != {zeroed} with zeroed cross types"
                ));
            }
            if t >= 2 {
                let e_t: Vec<usize> = (0..5).map(|i| (i + j) % 5).collect();
                let x_t: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
                let a = loss_type(&model, task.target.types(), &e_t, &x_t, t, &ctx)
                    .map_err(|e| e.to_string())?;
                let b = loss_type(&model, task.target.types(), &e_t, &[0.0; 5], t, &ctx)
                    .map_err(|e| e.to_string())?;
                if a != b {
                    return Err(format!(
                        "task {j}, t={t}: type loss {a} != {b} with zeroed times"
                    ));
                }
            }
            compared += 1;
        }
    }
    Ok(format!(
        "trained {} epochs (best {}); {compared} loss evaluations identical with cross inputs zeroed",
        out.checkpoint.meta.epochs_run, out.checkpoint.meta.epoch
    ))
}

fn criterion_accelerated() -> Check {
    let cfg = ModelConfig {
        embed: 8,
        num_types: 5,
        horizon: 5,
        steps: 200,
        seed: 3,
        ..ModelConfig::default()
    };
    let codec = TimeCodec::fit(&[0.2, 0.7, 1.5, 0.4, 3.1, 0.9]).map_err(|e| e.to_string())?;
    let model = CDiffModel::new(cfg, codec).map_err(|e| e.to_string())?;
    let ctx_seq = EventSequence::new(
        vec![0.5, 1.1, 0.2, 0.8, 2.0, 0.4],
        vec![0, 3, 1, 4, 2, 0],
        5,
    )
    .map_err(|e| e.to_string())?;
    let ctx = model.embed_context(&ctx_seq).map_err(|e| e.to_string())?;
    let det = SamplerConfig {
        eta_zero: true,
        steps: Some(25),
        ..SamplerConfig::default()
    };
    let runs: Vec<_> = (0..5)
        .map(|_| sample_sequence(&model, &ctx, 5, &det, &mut seeded(42)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if runs.windows(2).any(|w| w[0] != w[1]) {
        return Err("deterministic sampling differed across runs with one seed".into());
    }
    let full = ddim_subsequence(200, 200).map_err(|e| e.to_string())?;
    let fast = ddim_subsequence(200, 25).map_err(|e| e.to_string())?;
    if full.len() != 8 * fast.len() {
        return Err(format!("step counts {} vs {}", full.len(), fast.len()));
    }
    let time = |steps: usize| -> Result<f64, String> {
        let scfg = SamplerConfig {
            steps: Some(steps),
            ..det.clone()
        };
        let t0 = Instant::now();
        for s in 0..6 {
            sample_sequence(&model, &ctx, 5, &scfg, &mut seeded(s)).map_err(|e| e.to_string())?;
        }
        Ok(t0.elapsed().as_secs_f64())
    };
    let slow = time(200)?;
    let quick = time(25)?;
    let speedup = slow / quick;
    if speedup >= 3.0 {
        Ok(format!(
            "zero variance; 200 vs 25 steps (8x fewer): {speedup:.2}x faster"
        ))
    } else {
        Err(format!("speedup {speedup:.2}x < 3x"))
    }
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdiff"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "cdiff {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let common = ["--threads", "1", "--seed", "13"];
    let step = |extra: &[&str]| {
        let mut args = common.to_vec();
        args.extend_from_slice(extra);
        run_cli(dir, &args)
    };
    step(&[
        "gen-data",
        "--out",
        "data.jsonl",
        "--n-train",
        "30",
        "--n-val",
        "10",
        "--n-test",
        "10",
    ])?;
    step(&[
        "train",
        "--data",
        "data.jsonl",
        "--out",
        "model.json",
        "--epochs",
        "4",
        "--embed",
        "4",
        "--horizon",
        "3",
        "--steps",
        "20",
    ])?;
    step(&[
        "evaluate",
        "--checkpoint",
        "model.json",
        "--data",
        "data.jsonl",
        "--baseline",
        "poisson",
        "--out",
        "metrics.csv",
        "--per-position-errors",
        "errors.csv",
    ])?;
    step(&[
        "evaluate",
        "--checkpoint",
        "model.json",
        "--data",
        "data.jsonl",
        "--mode",
        "interval",
        "--t-prime",
        "2",
        "--out",
        "interval.csv",
    ])?;
    [
        "data.jsonl",
        "model.json",
        "metrics.csv",
        "errors.csv",
        "interval.csv",
    ]
    .iter()
    .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
    .collect()
}

fn criterion_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let names = [
        "dataset",
        "checkpoint",
        "metrics CSV",
        "per-position CSV",
        "interval CSV",
    ];
    for ((x, y), name) in first.iter().zip(&second).zip(names) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!(
        "{} files byte-identical across two runs",
        names.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("categorical posterior oracle", criterion_posterior),
        ("gaussian forward marginal", criterion_forward_gaussian),
        ("OTD dynamic program vs brute force", criterion_otd),
        ("gradient fidelity", criterion_gradients),
        ("Box-Cox fit and roundtrip", criterion_boxcox),
        ("Hawkes sanity", criterion_hawkes),
        ("desk-scale end-to-end vs Poisson", criterion_end_to_end),
        ("independent-mode ablation", criterion_independent),
        ("accelerated sampling", criterion_accelerated),
        ("pipeline determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
