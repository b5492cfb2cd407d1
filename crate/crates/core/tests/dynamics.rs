use cjepa_core::dynamics::*;
use cjepa_core::{EmbeddingBatch, Error, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let a = gaussian(rng, d + 3, d, 1.0);
    a.t_matmul(&a).unwrap().scale(1.0 / (d + 3) as f64)
}

fn cfg(regime: Regime, eta: f64, dt: f64, steps: usize) -> DynamicsConfig<f64> {
    DynamicsConfig { eta, dt, steps, regime }
}

#[test]
fn predictor_spec_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [1, 2, 5, 8, 16] {
        let c = random_psd(&mut rng, d);
        let spec = build_predictor(&c, 0.5).unwrap();
        let gram = spec.basis.t_matmul(&spec.basis).unwrap();
        assert!(gram.sub(&Matrix::identity(d)).unwrap().max_abs() < 1e-10);
        assert!(spec.predictor().asymmetry() < 1e-12);
        for (l, s) in spec.predictor_eigenvalues.iter().zip(&spec.corr_eigenvalues) {
            assert_eq!(*l, s.powf(0.5));
        }
        assert!(spec.predictor_eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn alpha_one_reconstructs_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = random_psd(&mut rng, 8);
    let spec = build_predictor(&c, 1.0).unwrap();
    assert!(spec.predictor().sub(&c).unwrap().max_abs() < 1e-10);
}

#[test]
fn asymmetric_correlation_rejected() {
    let c = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
    assert!(matches!(build_predictor(&c, 0.5), Err(Error::NonSymmetric { .. })));
}

#[test]
fn eigenbasis_equivalence_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let m = rng.random_range(1..=16);
        let n = rng.random_range(1..=24);
        let alpha = rng.random_range(0.2..2.0);
        let spec = build_predictor(&random_psd(&mut rng, m), alpha).unwrap();
        let z = EmbeddingBatch::new(gaussian(&mut rng, n, m, 1.0)).unwrap();
        let za = EmbeddingBatch::new(gaussian(&mut rng, n, m, 1.0)).unwrap();
        let (a, b) = eigenbasis_loss_equivalence(&z, &za, &spec).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.max(1.0), "m={m} n={n}: {a} vs {b}");
    }
}

#[test]
fn equivalence_shape_mismatch() {
    let spec = build_predictor(&Matrix::identity(3), 1.0).unwrap();
    let z = EmbeddingBatch::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert!(matches!(eigenbasis_loss_equivalence(&z, &z, &spec), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn stop_grad_matches_closed_form() {
    for lambda in [0.05, 0.25, 0.5, 0.75, 0.9, 0.999, 1.001, 1.25, 1.5, 2.0, 3.0] {
        for z0 in [1.0, -0.3] {
            let c = cfg(Regime::StopGradWithPredictor, 0.1, 0.01, 2000);
            let tr = integrate_mode(lambda, &c, z0).unwrap();
            assert_eq!(tr.values.len(), 2001);
            let rate = 0.1 * lambda * (1.0 - lambda);
            for (t, v) in tr.times.iter().zip(&tr.values) {
                let exact = z0 * (rate * t).exp();
                assert!(((v - exact) / exact).abs() <= 1e-8, "lambda {lambda} t {t}");
            }
        }
    }
}

#[test]
fn rk4_step_error_at_stability_limit() {
    // one RK4 step of z' = r z multiplies by the quartic Taylor polynomial of
    // e^x, so the per-step error is the fifth-order remainder
    for x in [0.1f64, -0.1, 0.01, -0.01] {
        // rate 0.25 at lambda 0.5, rate -2 at lambda 2
        let (lambda, rate) = if x > 0.0 { (0.5, 0.25) } else { (2.0, -2.0) };
        let c = cfg(Regime::StopGradWithPredictor, 1.0, x / rate, 1);
        let tr = integrate_mode(lambda, &c, 1.0).unwrap();
        let rel = (tr.values[1] - x.exp()).abs() / x.exp();
        let bound = x.abs().powi(5) / 120.0 * (-x).exp().max(1.0) * 1.01;
        assert!(rel <= bound + 1e-15, "x {x}: {rel:e} > {bound:e}");
    }
    let c = cfg(Regime::StopGradWithPredictor, 1.0, 0.41, 1);
    assert!(matches!(integrate_mode(0.5, &c, 1.0), Err(Error::StepTooLarge { .. })));
}

#[test]
fn lambda_one_is_fixed_point() {
    for regime in [Regime::StopGradWithPredictor, Regime::NoStopGrad] {
        let tr = integrate_mode(1.0, &cfg(regime, 0.3, 0.05, 500), 0.7).unwrap();
        assert!(tr.values.iter().all(|&v| v == 0.7));
    }
}

#[test]
fn sign_law() {
    for lambda in [0.1, 0.5, 0.95, 1.05, 1.5, 2.5] {
        for z0 in [2.0, -2.0] {
            let tr = integrate_mode(lambda, &cfg(Regime::StopGradWithPredictor, 0.1, 0.01, 1000), z0).unwrap();
            for w in tr.values.windows(2) {
                let dz: f64 = w[1] - w[0];
                let want = if lambda < 1.0 { w[0].signum() } else { -w[0].signum() };
                assert_eq!(dz.signum(), want, "lambda {lambda}");
            }
        }
    }
}

#[test]
fn no_stop_grad_decays_to_zero() {
    let eta = 0.1;
    for lambda in [0.0, 0.25, 0.5, 0.9, 1.5] {
        let rate: f64 = -eta * (1.0 - lambda) * (1.0 - lambda);
        let dt = 0.01 / rate.abs();
        let steps = ((1e8f64).ln() * 1.05 / (rate.abs() * dt)).ceil() as usize;
        let tr = integrate_mode(lambda, &cfg(Regime::NoStopGrad, eta, dt, steps), 1.0).unwrap();
        assert!(tr.values.last().unwrap().abs() < 1e-8, "lambda {lambda}");
        for w in tr.values.windows(2) {
            assert!(w[1].abs() <= w[0].abs());
        }
        for (t, v) in tr.times.iter().zip(&tr.values) {
            let exact = (rate * t).exp();
            assert!(((v - exact) / exact).abs() <= 1e-8, "lambda {lambda} t {t}");
        }
    }
}

#[test]
fn no_predictor_is_constant() {
    for z0 in [0.0, 1.0, -3.25, 1e-300, f64::MAX] {
        let tr = integrate_mode(0.3, &cfg(Regime::NoPredictor, 0.1, 0.01, 300), z0).unwrap();
        assert!(tr.values.iter().all(|v| v.to_bits() == z0.to_bits()));
    }
}

#[test]
fn two_variable_form_agrees_on_the_diagonal() {
    for regime in [Regime::StopGradWithPredictor, Regime::NoStopGrad, Regime::NoPredictor] {
        for lambda in [0.2, 0.8, 1.3] {
            let c = cfg(regime, 0.1, 0.01, 500);
            let single = integrate_mode(lambda, &c, 0.9).unwrap();
            let (pair, targets) = integrate_pair(lambda, &c, 0.9, 0.9).unwrap();
            for ((a, b), t) in single.values.iter().zip(&pair.values).zip(&targets) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
                assert_eq!(b, t);
            }
        }
    }
}

#[test]
fn whitened_batch_stays_at_one() {
    // rows ±√n e_k give a correlation of exactly the identity
    let d = 4;
    let mut rows = Vec::new();
    for k in 0..d {
        for s in [1.0, -1.0] {
            let mut r = vec![0.0; d];
            r[k] = s * (d as f64).sqrt();
            rows.push(r);
        }
    }
    let batch = EmbeddingBatch::from_rows(&rows).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 50), false).unwrap();
    for l in &run.lambdas {
        assert!(l.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
    assert!(run.rank_deficient_steps.is_empty());
}

#[test]
fn coupled_stop_grad_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = EmbeddingBatch::new(gaussian(&mut rng, 64, 8, 1.0)).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 500), false).unwrap();
    assert_eq!(run.lambdas.len(), 501);
    assert!(run.lambdas[0].iter().any(|&l| (l - 1.0).abs() > 0.2));
    assert!(run.final_distance_from_one() < 0.05);
}

#[test]
fn coupled_no_stop_grad_collapses() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = EmbeddingBatch::new(gaussian(&mut rng, 64, 8, 0.5)).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::NoStopGrad, 0.2, 0.1, 500), false).unwrap();
    assert!(run.corr_eigenvalues.last().unwrap().iter().all(|&s| s < 1e-6));
    // unscaled, modes starting above s = 1 shrink onto λ = 1 and stop there
    let batch = EmbeddingBatch::new(gaussian(&mut rng, 64, 8, 1.0)).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::NoStopGrad, 0.2, 0.1, 500), false).unwrap();
    let last = run.corr_eigenvalues.last().unwrap();
    assert!(last.iter().any(|&s| s > 0.9) && last.iter().any(|&s| s < 1e-3));
}

#[test]
fn coupled_reports_rank_deficiency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut z = gaussian(&mut rng, 16, 3, 1.0);
    for r in 0..16 {
        z[(r, 2)] = 0.0;
    }
    let batch = EmbeddingBatch::new(z).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 5), false).unwrap();
    assert_eq!(run.rank_deficient_steps, vec![0, 1, 2, 3, 4, 5]);
    let small = EmbeddingBatch::new(gaussian(&mut rng, 3, 3, 1.0)).unwrap();
    assert!(matches!(
        coupled_simulate(&small, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 5), false),
        Err(Error::BatchTooSmall { .. })
    ));
}

#[test]
fn csv_export() {
    let c = cfg(Regime::NoStopGrad, 0.1, 0.5, 2);
    let trs = vec![integrate_mode(0.5, &c, 1.0).unwrap(), integrate_mode(1.0, &c, 2.0).unwrap()];
    let mut buf = Vec::new();
    write_trajectories_csv(&trs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "time,mode,value,lambda");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[4], "0e0,1,2e0,1e0");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = EmbeddingBatch::new(gaussian(&mut rng, 10, 2, 1.0)).unwrap();
    let run = coupled_simulate(&batch, 0.5, &cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 3), true).unwrap();
    let mut buf = Vec::new();
    write_coupled_csv(&run, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 * 2);
}

#[test]
fn single_precision_agrees() {
    let c32 = DynamicsConfig { eta: 0.1f32, dt: 0.01, steps: 200, regime: Regime::StopGradWithPredictor };
    let tr = integrate_mode(0.5f32, &c32, 1.0).unwrap();
    let exact = (0.025f64 * 2.0).exp();
    assert!((tr.values[200] as f64 - exact).abs() / exact < 1e-5);
}

proptest! {
    #[test]
    fn growth_direction_matches_rate(lambda in 0.0f64..3.0, z0 in -5.0f64..5.0) {
        let tr = integrate_mode(lambda, &cfg(Regime::StopGradWithPredictor, 0.1, 0.01, 20), z0).unwrap();
        let rate = 0.1 * lambda * (1.0 - lambda);
        let last = tr.values[20];
        if rate > 0.0 { prop_assert!(last.abs() >= z0.abs()); }
        if rate < 0.0 { prop_assert!(last.abs() <= z0.abs()); }
    }

    #[test]
    fn coupled_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = EmbeddingBatch::new(gaussian(&mut rng, 12, 3, 1.0)).unwrap();
        let c = cfg(Regime::StopGradWithPredictor, 0.2, 0.1, 10);
        let a = coupled_simulate(&batch, 0.5, &c, false).unwrap();
        let b = coupled_simulate(&batch, 0.5, &c, false).unwrap();
        prop_assert_eq!(a, b);
    }
}
