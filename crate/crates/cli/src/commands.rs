use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cjepa_core::diagnostics::{compare_runs, DiagnosticsReport};
use cjepa_core::dynamics::{
    coupled_simulate, integrate_mode, write_coupled_csv, write_trajectories_csv, DynamicsConfig, ModeTrajectory, Regime,
};
use cjepa_core::gradcheck::{gradient_suite, ComponentReport, Perturbation};
use cjepa_core::network::{write_checkpoint, NetworkParams};
use cjepa_core::trainer::{generate_synthetic, MetricsLog, Trainer};
use cjepa_core::{EmbeddingBatch, Error, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::{CliError, RunConfigFile};

pub const SUMMARY_SCHEMA: u32 = 1;
pub const PERTURB_DELTA: f64 = 1e-3;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Failure(format!("cannot read {}: {e}", path.display())))
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn gradcheck(
    config: &RunConfigFile,
    seed: u64,
    trials: usize,
    perturb_grad: Option<&str>,
) -> Result<Vec<ComponentReport>, CliError> {
    let cfg = config.train_config();
    let perturb = match perturb_grad {
        Some(name) => {
            let template = NetworkParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0));
            let names: Vec<String> = template.arrays().into_iter().map(|a| a.name).collect();
            if !names.iter().any(|n| n == name) || name.starts_with("target.") {
                return Err(CliError::Usage(format!(
                    "--perturb-grad: {name:?} is not a trainable array; choose one of {}",
                    names.iter().filter(|n| !n.starts_with("target.")).cloned().collect::<Vec<_>>().join(", ")
                )));
            }
            Some(Perturbation { array: name.to_string(), delta: PERTURB_DELTA })
        }
        None => None,
    };
    let grid = cfg.data.grid_h.min(cfg.data.grid_w);
    let reports = gradient_suite(&cfg.model, grid, seed, trials, perturb.as_ref())?;
    for r in &reports {
        println!(
            "{:<20} max_rel_error {:.3e}  worst {:<32} entries {:>6}  {}",
            r.component,
            r.max_rel_error,
            r.worst,
            r.entries,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&ComponentReport> = reports.iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        println!("all gradients within tolerance over {trials} seeds");
        Ok(reports)
    } else {
        let worst: Vec<String> = failed.iter().map(|r| format!("{} ({:.3e})", r.worst, r.max_rel_error)).collect();
        Err(CliError::Failure(format!("gradient check failed at {}", worst.join(", "))))
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsOptions {
    pub regime: String,
    pub lambdas: Vec<f64>,
    pub coupled: bool,
    pub eta: f64,
    pub alpha: f64,
    pub dt: f64,
    pub steps: usize,
    pub z0: f64,
    pub dim: usize,
    pub batch: usize,
    pub seed: u64,
}

/// `constant` when every sample equals the start bit for bit, otherwise
/// `decays` or `grows` by the final magnitude.
pub fn verdict(t: &ModeTrajectory<f64>) -> &'static str {
    let first = t.values[0];
    let last = *t.values.last().expect("trajectory holds the start");
    if t.values.iter().all(|v| v.to_bits() == first.to_bits()) {
        "constant"
    } else if last.abs() < first.abs() {
        "decays"
    } else {
        "grows"
    }
}

pub fn dynamics(opts: &DynamicsOptions, out: Option<&Path>) -> Result<(), CliError> {
    let regime: Regime = opts.regime.parse()?;
    let cfg = DynamicsConfig { eta: opts.eta, dt: opts.dt, steps: opts.steps, regime };
    if opts.coupled {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let z = Matrix::from_fn(opts.batch, opts.dim, |_, _| StandardNormal.sample(&mut rng));
        let run = coupled_simulate(&EmbeddingBatch::new(z)?, opts.alpha, &cfg, false)?;
        let lambdas: Vec<String> = run.final_lambdas().iter().map(|l| format!("{l:.6}")).collect();
        println!("regime {} alpha {} eta {} dt {} steps {}", regime.name(), opts.alpha, opts.eta, opts.dt, opts.steps);
        println!("final lambdas [{}]", lambdas.join(", "));
        println!("final max|lambda-1| {:.6e}", run.final_distance_from_one());
        if !run.rank_deficient_steps.is_empty() {
            println!("rank deficient at {} steps (first {})", run.rank_deficient_steps.len(), run.rank_deficient_steps[0]);
        }
        if let Some(path) = out {
            write_coupled_csv(&run, create(path)?)?;
        }
        return Ok(());
    }
    let lambdas = if opts.lambdas.is_empty() { vec![0.5] } else { opts.lambdas.clone() };
    let mut trajectories = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let t = integrate_mode(lambda, &cfg, opts.z0)?;
        let last = *t.values.last().expect("trajectory holds the start");
        println!(
            "regime {} lambda {} rate {:.6e} fixed-point distance {:.6e} final {:.6e} {}",
            regime.name(),
            lambda,
            regime.rate(opts.eta, lambda),
            (1.0 - lambda).abs(),
            last,
            verdict(&t)
        );
        trajectories.push(t);
    }
    if let Some(path) = out {
        write_trajectories_csv(&trajectories, create(path)?)?;
    }
    Ok(())
}

/// Paths of the files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
    pub diagnostics: PathBuf,
    pub config: PathBuf,
}

impl TrainArtifacts {
    pub fn under(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            summary: dir.join("summary.json"),
            checkpoint: dir.join("checkpoint.bin"),
            diagnostics: dir.join("diagnostics.json"),
            config: dir.join("config.toml"),
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Failure(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn report_json(r: &DiagnosticsReport<f64>) -> serde_json::Value {
    serde_json::to_value(r).expect("report serializes")
}

pub fn train(config: &RunConfigFile, out: &Path, progress: bool) -> Result<TrainArtifacts, CliError> {
    let cfg = config.train_config();
    std::fs::create_dir_all(out).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", out.display())))?;
    let files = TrainArtifacts::under(out);
    std::fs::write(&files.config, config.to_toml())?;

    let data = generate_synthetic(&cfg.data)?;
    let mut trainer = Trainer::new(cfg, data)?;
    let mut failure = None;
    while !trainer.is_finished() {
        match trainer.step() {
            Ok(Some(rec)) if progress && rec.has_diagnostics() => eprintln!(
                "step {:>6}  loss {:.4e}  min_std {:.4e}  effective_rank {:.3}",
                rec.step,
                rec.loss,
                rec.min_std.unwrap_or(f64::NAN),
                rec.effective_rank.unwrap_or(f64::NAN)
            ),
            Ok(_) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    trainer.log.write_csv(create(&files.metrics)?)?;

    let mut summary = json!({
        "schema": SUMMARY_SCHEMA,
        "timestamp": timestamp(),
        "steps_completed": trainer.log.len(),
        "total_steps": trainer.total_steps(),
        "config": config,
    });
    if let Some(e) = failure {
        let step = match e {
            Error::NonFiniteLoss { step } => Some(step),
            _ => None,
        };
        summary["status"] = json!("failed");
        summary["failed_step"] = json!(step);
        summary["error"] = json!(e.to_string());
        write_json(&files.summary, &summary)?;
        return Err(e.into());
    }

    let step = trainer.total_steps() - 1;
    let report = trainer.diagnostics(step)?;
    write_json(&files.diagnostics, &report_json(&report))?;
    let mut w = create(&files.checkpoint)?;
    write_checkpoint(&trainer.params, &mut w)?;
    w.flush()?;

    let last = trainer.log.last().expect("a finished run logs every step");
    summary["status"] = json!("completed");
    summary["final"] = json!({
        "step": last.step,
        "loss": last.loss,
        "jepa": last.jepa,
        "vicreg": last.vicreg,
        "lr": last.lr,
        "wd": last.wd,
        "ema": last.ema,
    });
    summary["diagnostics"] = json!({
        "min_std": report.min_std,
        "mean_std": report.mean_std,
        "offdiag_cov_norm": report.offdiag_cov_norm,
        "effective_rank": report.effective_rank,
        "collapsed": report.collapsed,
    });
    write_json(&files.summary, &summary)?;
    println!(
        "trained {} steps: loss {:.4e}, min_std {:.4e}, effective_rank {:.3}, collapsed {}",
        trainer.log.len(),
        last.loss,
        report.min_std,
        report.effective_rank,
        report.collapsed
    );
    println!("wrote {}", out.display());
    Ok(files)
}

fn read_log(path: &Path) -> Result<MetricsLog, CliError> {
    MetricsLog::read_csv(open(path)?).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

pub fn diagnose(log: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let a = read_log(log)?;
    let (Some(first), Some(last)) = (a.records.first(), a.last()) else {
        return Err(CliError::Failure(format!("{}: no records", log.display())));
    };
    println!("{}: {} records, steps {}..={}", log.display(), a.len(), first.step, last.step);
    println!("final loss {:.4e} (jepa {:.4e}, vicreg {:.4e})", last.loss, last.jepa, last.vicreg);
    let snaps: Vec<_> = a.records.iter().filter(|r| r.has_diagnostics()).collect();
    if let (Some(s0), Some(s1)) = (snaps.first(), snaps.last()) {
        for name in ["min_std", "mean_std", "offdiag_cov", "effective_rank"] {
            println!(
                "{name:<15} step {}: {:.4e}  step {}: {:.4e}",
                s0.step,
                s0.metric(name).unwrap_or(f64::NAN),
                s1.step,
                s1.metric(name).unwrap_or(f64::NAN)
            );
        }
        println!("collapsed at step {}: {}", s1.step, s1.collapsed.unwrap_or(false));
    } else {
        println!("no diagnostic snapshots in the log");
    }
    if let Some(other) = compare {
        let b = read_log(other)?;
        let cmp = compare_runs(&a, &b)?;
        println!("final deltas (a = {}, b = {}):", log.display(), other.display());
        for (metric, x, y, d) in cmp.final_deltas() {
            println!("  {metric:<15} a {x:.4e}  b {y:.4e}  a-b {d:+.4e}");
        }
        if let Some(path) = out {
            let mut w = create(path)?;
            cmp.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}
