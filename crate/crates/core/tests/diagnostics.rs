use cjepa_core::diagnostics::*;
use cjepa_core::linalg::{batch_variance, effective_rank, symmetric_eigendecompose};
use cjepa_core::trainer::{MetricsLog, MetricsRecord};
use cjepa_core::vicreg::covariance_term;
use cjepa_core::{EmbeddingBatch, Error, Matrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, d, |_, j| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x * (1.0 + j as f64) + j as f64
    })
}

/// Centers the batch and maps it through `C^{-1/2}` so its covariance is the identity.
fn whiten(z: &Matrix) -> Matrix {
    let c = z.centered();
    let cov = c.t_matmul(&c).unwrap().scale(1.0 / (z.rows() - 1) as f64);
    let eig = symmetric_eigendecompose(&cov, 1e-12).unwrap();
    let inv_sqrt: Vec<f64> = eig.eigenvalues.iter().map(|s| 1.0 / s.sqrt()).collect();
    c.matmul(&eig.recompose_with(&inv_sqrt)).unwrap()
}

#[test]
fn constant_batch() {
    let z = EmbeddingBatch::new(Matrix::from_fn(10, 4, |_, j| 3.0 - j as f64)).unwrap();
    for t in [1e-12, 0.01, 5.0] {
        let r = collapse_report(&z, t).unwrap();
        assert_eq!(r.min_std, 0.0);
        assert_eq!(r.effective_rank, 1.0);
        assert!(r.collapsed);
    }
}

#[test]
fn whitened_batch() {
    let z = EmbeddingBatch::new(whiten(&gaussian(1, 200, 6))).unwrap();
    let r = collapse_report(&z, DEFAULT_COLLAPSE_THRESHOLD).unwrap();
    assert!(r.per_dim_std.iter().all(|s| (s - 1.0).abs() < 1e-10));
    assert!(r.offdiag_cov_norm < 1e-20);
    assert!(!r.collapsed);
    assert!((r.effective_rank - 6.0).abs() < 1e-9);
}

#[test]
fn fields_match_direct_calls() {
    let z = EmbeddingBatch::new(gaussian(2, 50, 7)).unwrap();
    let r = collapse_report(&z, 0.01).unwrap();
    let var = batch_variance(&z).unwrap();
    for (s, v) in r.per_dim_std.iter().zip(&var) {
        assert!((s - v.sqrt()).abs() <= 1e-12 * v.sqrt());
    }
    let min = var.iter().map(|v| v.sqrt()).fold(f64::INFINITY, f64::min);
    let mean = var.iter().map(|v| v.sqrt()).sum::<f64>() / 7.0;
    assert!((r.min_std - min).abs() <= 1e-12 * min);
    assert!((r.mean_std - mean).abs() <= 1e-12 * mean);
    let c = covariance_term(&z).unwrap().value;
    assert!((r.offdiag_cov_norm - c).abs() <= 1e-12 * c.max(1.0));
    let e = effective_rank(&z).unwrap();
    assert!((r.effective_rank - e).abs() <= 1e-12 * e);
    assert!(r.min_std <= r.mean_std);
    assert!(r.effective_rank >= 1.0 && r.effective_rank <= 7.0);
}

#[test]
fn too_small() {
    let z = EmbeddingBatch::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    assert!(matches!(collapse_report(&z, 0.01), Err(Error::BatchTooSmall { n: 1, min: 2 })));
}

#[test]
fn json_report() {
    let z = EmbeddingBatch::new(gaussian(3, 8, 2)).unwrap();
    let r = collapse_report_at(&z, 0.01, 42).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert_eq!(v["step"], 42);
    assert_eq!(v["per_dim_std"].as_array().unwrap().len(), 2);
    assert_eq!(v["collapsed"], false);
}

fn log(steps: &[usize], rank: f64) -> MetricsLog {
    let mut l = MetricsLog::new();
    for (i, &s) in steps.iter().enumerate() {
        let snap = i % 2 == 0;
        l.push(MetricsRecord {
            step: s,
            loss: 1.0 / (1.0 + s as f64),
            jepa: 0.5,
            vicreg: 0.25,
            vicreg_sim: 0.1,
            vicreg_std: 0.2,
            vicreg_cov: 0.3,
            lr: 1e-3,
            wd: 0.04,
            ema: 0.996,
            min_std: snap.then_some(0.5),
            mean_std: snap.then_some(0.7),
            offdiag_cov: snap.then_some(0.01),
            effective_rank: snap.then_some(rank + s as f64),
            collapsed: snap.then_some(false),
        })
        .unwrap();
    }
    l
}

#[test]
fn compare_identical_runs() {
    let a = log(&[0, 1, 2, 3, 4], 10.0);
    let cmp = compare_runs(&a, &a).unwrap();
    assert!(cmp.metrics.iter().all(|m| m.delta.iter().all(|&d| d == 0.0)));
    assert_eq!(cmp.get("effective_rank").unwrap().steps, vec![0, 2, 4]);
    assert_eq!(cmp.get("loss").unwrap().steps.len(), 5);
}

#[test]
fn compare_reports_rank_gap() {
    let cmp = compare_runs(&log(&[0, 1, 2], 20.0), &log(&[0, 1, 2], 12.5)).unwrap();
    assert_eq!(cmp.get("effective_rank").unwrap().final_delta(), Some(7.5));
    let finals = cmp.final_deltas();
    assert!(finals.contains(&("effective_rank".to_string(), 22.0, 14.5, 7.5)));
    let mut buf = Vec::new();
    cmp.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,metric,a,b,delta\n"));
    assert!(text.contains("2,effective_rank,22,14.5,7.5\n"));
}

#[test]
fn compare_misaligned() {
    let a = log(&[0, 1, 2], 1.0);
    assert!(matches!(compare_runs(&a, &log(&[0, 1], 1.0)), Err(Error::MisalignedLogs(_))));
    assert!(matches!(compare_runs(&a, &log(&[0, 1, 3], 1.0)), Err(Error::MisalignedLogs(_))));
}

proptest! {
    #[test]
    fn permutation_invariant(seed in 0u64..500, n in 2usize..30, d in 1usize..6) {
        let z = gaussian(seed, n, d);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let p = Matrix::from_fn(n, d, |r, c| z[(order[r], c)]);
        let a = collapse_report(&EmbeddingBatch::new(z).unwrap(), 0.01).unwrap();
        let b = collapse_report(&EmbeddingBatch::new(p).unwrap(), 0.01).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn collapse_flag_monotone(seed in 0u64..500, scale in 1e-4f64..1.0, t1 in 1e-5f64..1.0, t2 in 1e-5f64..1.0) {
        let z = EmbeddingBatch::new(gaussian(seed, 12, 3).scale(scale)).unwrap();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = collapse_report(&z, lo).unwrap();
        let b = collapse_report(&z, hi).unwrap();
        prop_assert!(!a.collapsed || b.collapsed);
        prop_assert_eq!(a.collapsed, a.min_std < lo);
    }
}
