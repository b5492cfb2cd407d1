//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! the tests are serialized so the timings are not distorted by each other.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use cjepa_cli::{commands, RunConfigFile};
use cjepa_core::dynamics::{
    build_predictor, coupled_simulate, eigenbasis_loss_equivalence, integrate_mode, DynamicsConfig, Regime,
};
use cjepa_core::gradcheck::{gradient_suite, TOLERANCE};
use cjepa_core::network::ModelConfig;
use cjepa_core::trainer::{generate_synthetic, train, ControlRegime, ScheduleConfig, ScheduleKind, TrainConfig, TrainOutcome};
use cjepa_core::{EmbeddingBatch, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// Written straight to stdout so the lines also show up for passing tests.
fn say(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(id: &str, ok: bool, detail: String) {
    say(format!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" }));
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

#[test]
fn c1_gradients_match_finite_differences() {
    let _g = serial();
    let cfg = ModelConfig::default();
    let start = Instant::now();
    let reports = gradient_suite(&cfg, 6, 0, 20, None).unwrap();
    let elapsed = start.elapsed();
    let expected = [
        "variance", "covariance", "invariance", "vicreg", "cross-block", "jepa", "combined", "context encoder",
        "predictor", "projector", "mask token", "target (stop-grad)",
    ];
    let covered = expected.iter().all(|c| reports.iter().any(|r| r.component == *c));
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    for r in &reports {
        say(format!("  {:<28} {:.3e} ({} entries)", r.component, r.max_rel_error, r.entries));
    }
    let ok = covered && reports.iter().all(|r| r.passed()) && elapsed < Duration::from_secs(60);
    report(
        "1",
        ok,
        format!(
            "{} components over 20 seeds, worst {:.3e} at {} (limit {TOLERANCE:e}), {:.1?}",
            reports.len(),
            worst.max_rel_error,
            worst.worst,
            elapsed
        ),
    );
    assert!(ok);
}

#[test]
fn c2_eigenbasis_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=16);
        let n = rng.random_range(m..=m + 32);
        let alpha = rng.random_range(0.1..2.0);
        let a = gaussian(&mut rng, m + 4, m);
        let corr = a.t_matmul(&a).unwrap().scale(1.0 / (m + 4) as f64);
        let spec = build_predictor(&corr, alpha).unwrap();
        let z = EmbeddingBatch::new(gaussian(&mut rng, n, m)).unwrap();
        let za = EmbeddingBatch::new(gaussian(&mut rng, n, m)).unwrap();
        let (orig, eig) = eigenbasis_loss_equivalence(&z, &za, &spec).unwrap();
        worst = worst.max((orig - eig).abs() / orig.abs().max(f64::MIN_POSITIVE));
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-10 && elapsed < Duration::from_secs(10);
    report("2", ok, format!("1000 instances, worst relative gap {worst:.3e}, {elapsed:.1?}"));
    assert!(ok);
}

fn cfg(regime: Regime, eta: f64, dt: f64, steps: usize) -> DynamicsConfig<f64> {
    DynamicsConfig { eta, dt, steps, regime }
}

#[test]
fn c3_dynamics_laws() {
    let _g = serial();
    let start = Instant::now();
    let eta = 0.1;

    let mut closed = 0.0f64;
    let mut fixed = true;
    let mut sign = true;
    for lambda in [0.05, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0, 1.01, 1.25, 1.5, 2.0, 3.0] {
        for z0 in [1.5, -0.4] {
            let tr = integrate_mode(lambda, &cfg(Regime::StopGradWithPredictor, eta, 0.01, 2000), z0).unwrap();
            let rate = eta * lambda * (1.0 - lambda);
            for (t, v) in tr.times.iter().zip(&tr.values) {
                let exact = z0 * (rate * t).exp();
                closed = closed.max(((v - exact) / exact).abs());
            }
            if lambda == 1.0 {
                fixed &= tr.values.iter().all(|&v| v == z0);
            } else {
                for w in tr.values.windows(2) {
                    let grows = (w[1] - w[0]).signum() == w[0].signum();
                    sign &= grows == (lambda < 1.0);
                }
            }
        }
    }
    let a_ok = closed <= 1e-8 && fixed && sign;

    let mut decay_gap = 0.0f64;
    let mut final_max = 0.0f64;
    for lambda in [0.0, 0.25, 0.5, 0.9, 1.5] {
        let rate: f64 = -eta * (1.0 - lambda) * (1.0 - lambda);
        let dt = 0.01 / rate.abs();
        let steps = ((1e8f64).ln() * 1.05 / 0.01).ceil() as usize;
        let tr = integrate_mode(lambda, &cfg(Regime::NoStopGrad, eta, dt, steps), 1.0).unwrap();
        final_max = final_max.max(tr.values.last().unwrap().abs());
        for (t, v) in tr.times.iter().zip(&tr.values) {
            let exact = (rate * t).exp();
            decay_gap = decay_gap.max(((v - exact) / exact).abs());
        }
    }
    let b_ok = final_max < 1e-8 && decay_gap <= 1e-8;

    let mut c_ok = true;
    for z0 in [0.0, 1.0, -2.5, 1e-300, 7.0e200] {
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let tr = integrate_mode(lambda, &cfg(Regime::NoPredictor, eta, 0.01, 1000), z0).unwrap();
            c_ok &= tr.values.iter().all(|v| v.to_bits() == z0.to_bits());
        }
    }
    let elapsed = start.elapsed();
    let ok = a_ok && b_ok && c_ok && elapsed < Duration::from_secs(5);
    report(
        "3",
        ok,
        format!(
            "(a) closed-form gap {closed:.3e}, fixed point {fixed}, sign law {sign}; (b) final |z| {final_max:.3e}, \
             gap {decay_gap:.3e}; (c) bit-identical {c_ok}; {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

#[test]
fn c4_coupled_eigenvalues_reach_one() {
    let _g = serial();
    let start = Instant::now();
    let mut converged = 0;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = EmbeddingBatch::new(gaussian(&mut rng, 64, 8)).unwrap();
        let run = coupled_simulate(&batch, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 500), false).unwrap();
        let d = run.final_distance_from_one();
        worst = worst.max(d);
        if d < 0.05 {
            converged += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = converged * 100 >= 95 * 50 && elapsed < Duration::from_secs(60);
    report("4", ok, format!("{converged}/50 seeds with max|lambda-1| < 0.05 (worst {worst:.3e}), {elapsed:.1?}"));
    assert!(ok);
}

struct Runs {
    no_stop_grad: TrainOutcome,
    full: TrainOutcome,
    prediction_only: TrainOutcome,
    elapsed: Duration,
}

fn run_with(mutate: impl FnOnce(&mut TrainConfig)) -> TrainOutcome {
    let mut c = TrainConfig::default();
    mutate(&mut c);
    train(&c, generate_synthetic(&c.data).unwrap()).unwrap()
}

fn training_runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let no_stop_grad = run_with(|c| c.run.regime = ControlRegime::NoStopGrad);
        let full = run_with(|_| {});
        let prediction_only = run_with(|c| c.vicreg.beta_vicreg = 0.0);
        Runs { no_stop_grad, full, prediction_only, elapsed: start.elapsed() }
    })
}

#[test]
fn c5_collapse_and_prevention() {
    let _g = serial();
    let c = TrainConfig::default();
    assert_eq!(
        (c.data.grid_h, c.data.grid_w, c.model.encoder.embed_dim, c.run.batch_size, c.schedules.total_steps()),
        (8, 8, 32, 64, 2000)
    );
    let runs = training_runs();
    let (n, f, p) = (&runs.no_stop_grad.report, &runs.full.report, &runs.prediction_only.report);
    let a = n.min_std < 0.01 && n.collapsed;
    let b = f.min_std >= 0.1 && f.effective_rank >= 16.0;
    let cc = p.effective_rank < f.effective_rank;
    let time_ok = runs.elapsed < Duration::from_secs(15 * 60);
    let jepa = |o: &TrainOutcome| (o.log.records.first().unwrap().jepa, o.log.last().unwrap().jepa);
    say(format!("  full run prediction loss {:.4e} -> {:.4e}", jepa(&runs.full).0, jepa(&runs.full).1));
    report("5a", a, format!("no-stop-grad min_std {:.4e}, collapsed {}", n.min_std, n.collapsed));
    report("5b", b, format!("full min_std {:.4e}, effective rank {:.4}", f.min_std, f.effective_rank));
    report(
        "5c",
        cc,
        format!(
            "prediction-only effective rank {:.6} vs full {:.6} (difference {:+.3e})",
            p.effective_rank,
            f.effective_rank,
            p.effective_rank - f.effective_rank
        ),
    );
    report("5 runtime", time_ok, format!("three runs in {:.1?}", runs.elapsed));
    assert!(a && b && cc && time_ok, "5a {a} 5b {b} 5c {cc} runtime {time_ok}");
}

#[test]
fn c6_schedules_exact() {
    let _g = serial();
    let start = Instant::now();
    let s = ScheduleConfig::default();
    let (t, w) = (s.total_steps(), s.warmup_steps());
    let v = |k, i| s.value(k, i).unwrap();
    let mut ok = v(ScheduleKind::Lr, 0) == 1e-4 && v(ScheduleKind::Lr, w) == 1e-3 && v(ScheduleKind::Lr, t) == 1e-6;
    ok &= v(ScheduleKind::Wd, 0) == 0.04 && v(ScheduleKind::Wd, t) == 0.4;
    ok &= v(ScheduleKind::Ema, 0) == 0.996 && v(ScheduleKind::Ema, t) == 1.0;
    let mut linear = 0.0f64;
    for i in 0..=t {
        let x = i as f64 / t as f64;
        linear = linear.max((v(ScheduleKind::Wd, i) - (0.04 + 0.36 * x)).abs());
        linear = linear.max((v(ScheduleKind::Ema, i) - (0.996 + 0.004 * x)).abs());
    }
    ok &= linear <= 1e-15;
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report("6", ok, format!("endpoints exact, max deviation from linear {linear:.1e}, {elapsed:.1?}"));
    assert!(ok);
}

#[test]
fn c7_training_is_deterministic() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let sets = ["schedules.epochs=2".to_string()];
    let config = RunConfigFile::load(None, &sets).unwrap();
    let a = commands::train(&config, &dir.path().join("a"), false).unwrap();
    let b = commands::train(&config, &dir.path().join("b"), false).unwrap();
    let (x, y) = (std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());
    let ok = x == y && !x.is_empty();
    report("7", ok, format!("two {}-step runs, metrics CSVs of {} and {} bytes identical: {}", 200, x.len(), y.len(), x == y));
    assert!(ok);
}

#[test]
fn c8_strong_regularizer_exploratory() {
    let _g = serial();
    let full = &training_runs().full;
    let strong = run_with(|c| c.vicreg.beta_vicreg = 0.1);
    let last = strong.log.last().unwrap();
    let reg_share = (last.loss - last.jepa) / last.loss;
    let r = &strong.report;
    let mut flags = Vec::new();
    if reg_share > 0.5 {
        flags.push("regularizer dominates the loss");
    }
    if r.collapsed {
        flags.push("collapsed");
    }
    if r.effective_rank < full.report.effective_rank {
        flags.push("effective rank below the default run");
    }
    if r.min_std < full.report.min_std {
        flags.push("min_std below the default run");
    }
    say(format!(
        "INFO criterion 8 (not gating): beta_vicreg 0.1 regularizer share {:.3}, min_std {:.4e}, effective rank {:.4} \
         (default run {:.4}); flags: {}",
        reg_share,
        r.min_std,
        r.effective_rank,
        full.report.effective_rank,
        if flags.is_empty() { "none".to_string() } else { flags.join(", ") }
    ));
}
