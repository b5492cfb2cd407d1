//! Linear-predictor eigenmode dynamics.
//!
//! A symmetric linear predictor `W = U diag(λ) Uᵀ` built from the correlation
//! of the representations decouples the prediction loss into independent
//! modes. Each mode `ẑ_k` then follows a scalar linear ODE whose rate depends
//! on how gradients reach the target branch:
//!
//! | regime            | `dẑ/dt`            |
//! |-------------------|--------------------|
//! | stop-grad         | `ηλ(1−λ) ẑ`        |
//! | no stop-grad      | `−η(1−λ)² ẑ`       |
//! | no predictor      | `0`                |

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::batch::Embeddings;
use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{symmetric_eigendecompose, DenseMatrix};
use crate::scalar::Scalar;

/// Largest `|rate · dt|` accepted by the integrator.
pub const MAX_STEP_PRODUCT: f64 = 0.1;

/// Eigenvalues of the correlation matrix down to `−PSD_CLAMP` are treated as 0.
pub const PSD_CLAMP: f64 = 1e-10;

/// Correlation eigenvalues below this are reported as rank deficient.
pub const RANK_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    #[serde(rename = "stop-grad", alias = "stop-grad-with-predictor")]
    StopGradWithPredictor,
    NoStopGrad,
    NoPredictor,
}

impl Regime {
    /// Growth rate of a mode with predictor eigenvalue `lambda`.
    pub fn rate<T: Scalar>(self, eta: T, lambda: T) -> T {
        let one = T::one();
        match self {
            Regime::StopGradWithPredictor => eta * lambda * (one - lambda),
            Regime::NoStopGrad => -eta * (one - lambda) * (one - lambda),
            Regime::NoPredictor => T::zero(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::StopGradWithPredictor => "stop-grad",
            Regime::NoStopGrad => "no-stop-grad",
            Regime::NoPredictor => "no-predictor",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stop-grad" | "stop-grad-with-predictor" => Ok(Regime::StopGradWithPredictor),
            "no-stop-grad" => Ok(Regime::NoStopGrad),
            "no-predictor" => Ok(Regime::NoPredictor),
            other => Err(Error::InvalidConfig(format!(
                "unknown regime {other:?} (expected stop-grad, no-stop-grad or no-predictor)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig<T> {
    pub eta: T,
    pub dt: T,
    pub steps: usize,
    pub regime: Regime,
}

impl<T: Scalar> Default for DynamicsConfig<T> {
    fn default() -> Self {
        Self { eta: T::lit(0.1), dt: T::lit(0.01), steps: 1000, regime: Regime::StopGradWithPredictor }
    }
}

impl<T: Scalar> DynamicsConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            return Err(Error::InvalidConfig("dynamics: eta must be > 0".into()));
        }
        if !(self.dt > T::zero() && self.dt.is_finite()) {
            return Err(Error::InvalidConfig("dynamics: dt must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("dynamics: steps must be >= 1".into()));
        }
        Ok(())
    }

    fn check_step(&self, lambda: T) -> Result<T> {
        let x = self.regime.rate(self.eta, lambda) * self.dt;
        if !x.is_finite() || x.abs() > T::lit(MAX_STEP_PRODUCT) {
            return Err(Error::StepTooLarge { product: x.abs().to_f64_lossy(), limit: MAX_STEP_PRODUCT });
        }
        Ok(x)
    }
}

/// Predictor `W = U diag(s^α) Uᵀ` in the eigenbasis of a correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorEigenSpec<T> {
    pub basis: DenseMatrix<T>,
    pub corr_eigenvalues: Vec<T>,
    pub alpha: T,
    pub predictor_eigenvalues: Vec<T>,
}

impl<T: Scalar> PredictorEigenSpec<T> {
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// `U · diag(λ) · Uᵀ`.
    pub fn predictor(&self) -> DenseMatrix<T> {
        let n = self.dim();
        let u = &self.basis;
        DenseMatrix::from_fn(n, n, |i, j| {
            self.predictor_eigenvalues.iter().enumerate().map(|(k, &l)| u[(i, k)] * l * u[(j, k)]).sum()
        })
    }
}

/// Diagonalizes `corr` and raises its eigenvalues to `alpha`.
///
/// Eigenvalues within [`PSD_CLAMP`] below zero are clamped to zero; anything
/// more negative is rejected.
pub fn build_predictor<T: Scalar>(corr: &DenseMatrix<T>, alpha: T) -> Result<PredictorEigenSpec<T>> {
    if !(alpha > T::zero() && alpha.is_finite()) {
        return Err(Error::InvalidConfig("alpha must be > 0".into()));
    }
    let tol = T::lit(1e-10) * corr.max_abs().max(T::one());
    let eig = symmetric_eigendecompose(corr, tol)?;
    let clamp = T::lit(PSD_CLAMP);
    let mut s = eig.eigenvalues;
    for v in s.iter_mut() {
        if *v < -clamp {
            return Err(Error::NegativeEigenvalue { value: v.to_f64_lossy(), tol: PSD_CLAMP });
        }
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let lambda = s.iter().map(|&x| x.powf(alpha)).collect();
    Ok(PredictorEigenSpec { basis: eig.basis, corr_eigenvalues: s, alpha, predictor_eigenvalues: lambda })
}

/// `(1/n) ZᵀZ`, or the centered covariance with `1/n` when `centered`.
pub fn correlation<T: Scalar>(z: &Embeddings<T>, centered: bool) -> DenseMatrix<T> {
    let m = if centered { z.values().centered() } else { z.values().clone() };
    let n = T::from_count(z.n());
    let d = z.d();
    let mut c = DenseMatrix::zeros(d, d);
    for r in 0..z.n() {
        let row = m.row(r);
        for i in 0..d {
            for j in i..d {
                c[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = c[(i, j)] / n;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Prediction loss `(1/n) Σ_i ‖W z_i − zᵃ_i‖²` evaluated directly and in the
/// predictor eigenbasis as `(1/n) Σ_i Σ_k (λ_k ẑ_ik − ẑᵃ_ik)²`.
pub fn eigenbasis_loss_equivalence<T: Scalar>(
    z: &Embeddings<T>,
    za: &Embeddings<T>,
    spec: &PredictorEigenSpec<T>,
) -> Result<(T, T)> {
    let d = spec.dim();
    if z.values().shape() != za.values().shape() || z.d() != d {
        return Err(shape_mismatch(
            format!("two n x {d} batches"),
            format!("{:?} and {:?}", z.values().shape(), za.values().shape()),
        ));
    }
    let n = T::from_count(z.n());
    let w = spec.predictor();
    let mut original = T::zero();
    for i in 0..z.n() {
        let wz = w.matvec(z.values().row(i))?;
        original += wz.iter().zip(za.values().row(i)).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>();
    }
    let zh = z.values().matmul(&spec.basis)?;
    let zah = za.values().matmul(&spec.basis)?;
    let mut eigen = T::zero();
    for i in 0..z.n() {
        for k in 0..d {
            let r = spec.predictor_eigenvalues[k] * zh[(i, k)] - zah[(i, k)];
            eigen += r * r;
        }
    }
    Ok((original / n, eigen / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeTrajectory<T> {
    pub times: Vec<T>,
    pub values: Vec<T>,
    pub regime: Regime,
    pub lambda: T,
}

/// One classical RK4 step of `dz/dt = f(z)`.
fn rk4<T: Scalar>(z: T, dt: T, f: impl Fn(T) -> T) -> T {
    let half = T::lit(0.5);
    let k1 = f(z);
    let k2 = f(z + half * dt * k1);
    let k3 = f(z + half * dt * k2);
    let k4 = f(z + dt * k3);
    z + dt / T::lit(6.0) * (k1 + T::lit(2.0) * k2 + T::lit(2.0) * k3 + k4)
}

/// Integrates one mode from `z0` with RK4.
pub fn integrate_mode<T: Scalar>(lambda: T, config: &DynamicsConfig<T>, z0: T) -> Result<ModeTrajectory<T>> {
    config.validate()?;
    config.check_step(lambda)?;
    let rate = config.regime.rate(config.eta, lambda);
    let mut times = Vec::with_capacity(config.steps + 1);
    let mut values = Vec::with_capacity(config.steps + 1);
    let mut z = z0;
    times.push(T::zero());
    values.push(z);
    for step in 1..=config.steps {
        if config.regime != Regime::NoPredictor {
            z = rk4(z, config.dt, |v| rate * v);
        }
        times.push(T::from_count(step) * config.dt);
        values.push(z);
    }
    Ok(ModeTrajectory { times, values, regime: config.regime, lambda })
}

/// Right-hand side of the two-variable form, `(dẑ/dt, dẑᵃ/dt)`.
///
/// Online and target representations come from the same network, so both
/// move by the same amount. With stop-gradient only the prediction term
/// `ηλ(ẑᵃ − λẑ)` drives them; without it the target-side gradient
/// `η(λẑ − ẑᵃ)` is added.
pub fn pair_rhs<T: Scalar>(regime: Regime, eta: T, lambda: T, z: T, za: T) -> T {
    match regime {
        Regime::StopGradWithPredictor => eta * lambda * (za - lambda * z),
        Regime::NoStopGrad => eta * lambda * (za - lambda * z) + eta * (lambda * z - za),
        Regime::NoPredictor => T::zero(),
    }
}

/// Integrates the two-variable form from `(z0, za0)`; returns both series.
pub fn integrate_pair<T: Scalar>(
    lambda: T,
    config: &DynamicsConfig<T>,
    z0: T,
    za0: T,
) -> Result<(ModeTrajectory<T>, Vec<T>)> {
    config.validate()?;
    config.check_step(lambda)?;
    let (eta, dt) = (config.eta, config.dt);
    let half = T::lit(0.5);
    let f = |z: T, za: T| pair_rhs(config.regime, eta, lambda, z, za);
    let mut times = vec![T::zero()];
    let mut values = vec![z0];
    let mut targets = vec![za0];
    let (mut z, mut za) = (z0, za0);
    for step in 1..=config.steps {
        let k1 = f(z, za);
        let k2 = f(z + half * dt * k1, za + half * dt * k1);
        let k3 = f(z + half * dt * k2, za + half * dt * k2);
        let k4 = f(z + dt * k3, za + dt * k3);
        let inc = dt / T::lit(6.0) * (k1 + T::lit(2.0) * k2 + T::lit(2.0) * k3 + k4);
        z += inc;
        za += inc;
        times.push(T::from_count(step) * dt);
        values.push(z);
        targets.push(za);
    }
    Ok((ModeTrajectory { times, values, regime: config.regime, lambda }, targets))
}

/// Predictor and correlation spectra over a coupled simulation. Row `t` of
/// each series holds one value per tracked mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledRun<T> {
    pub times: Vec<T>,
    pub lambdas: Vec<Vec<T>>,
    pub corr_eigenvalues: Vec<Vec<T>>,
    /// Steps at which the smallest correlation eigenvalue fell below
    /// [`RANK_FLOOR`] in the stop-grad regime.
    pub rank_deficient_steps: Vec<usize>,
    pub regime: Regime,
}

impl<T: Scalar> CoupledRun<T> {
    pub fn final_lambdas(&self) -> &[T] {
        self.lambdas.last().map_or(&[], Vec::as_slice)
    }

    /// `max_k |λ_k − 1|` at the last step.
    pub fn final_distance_from_one(&self) -> T {
        self.final_lambdas().iter().fold(T::zero(), |m, &l| m.max((l - T::one()).abs()))
    }
}

/// Pairs each previous basis column with the new column of largest
/// `|⟨u_old, u_new⟩|`; returns `order[k]` = new column for old mode `k`.
fn match_modes<T: Scalar>(old: &DenseMatrix<T>, new: &DenseMatrix<T>) -> Vec<usize> {
    let d = old.cols();
    let mut overlap: Vec<(T, usize, usize)> = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            let dot: T = (0..old.rows()).map(|r| old[(r, a)] * new[(r, b)]).sum();
            overlap.push((dot.abs(), a, b));
        }
    }
    overlap.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut order = vec![usize::MAX; d];
    let mut taken = vec![false; d];
    for (_, a, b) in overlap {
        if order[a] == usize::MAX && !taken[b] {
            order[a] = b;
            taken[b] = true;
        }
    }
    order
}

/// Evolves a whole batch: every step recomputes the correlation of the
/// current batch, rebuilds the predictor, and advances each eigenmode of
/// every row by one RK4 step.
pub fn coupled_simulate<T: Scalar>(
    batch: &Embeddings<T>,
    alpha: T,
    config: &DynamicsConfig<T>,
    centered: bool,
) -> Result<CoupledRun<T>> {
    config.validate()?;
    let (n, d) = (batch.n(), batch.d());
    if n < d + 1 {
        return Err(Error::BatchTooSmall { n, min: d + 1 });
    }
    let mut z = batch.values().clone();
    let mut run = CoupledRun {
        times: Vec::with_capacity(config.steps + 1),
        lambdas: Vec::with_capacity(config.steps + 1),
        corr_eigenvalues: Vec::with_capacity(config.steps + 1),
        rank_deficient_steps: Vec::new(),
        regime: config.regime,
    };
    let mut tracked: Option<DenseMatrix<T>> = None;
    for step in 0..=config.steps {
        let current = Embeddings::from_matrix_unchecked(z.clone());
        let spec = build_predictor(&correlation(&current, centered), alpha)?;
        let order = match &tracked {
            Some(prev) => match_modes(prev, &spec.basis),
            None => (0..d).collect(),
        };
        tracked = Some(DenseMatrix::from_fn(d, d, |r, k| spec.basis[(r, order[k])]));
        run.times.push(T::from_count(step) * config.dt);
        run.lambdas.push(order.iter().map(|&k| spec.predictor_eigenvalues[k]).collect());
        run.corr_eigenvalues.push(order.iter().map(|&k| spec.corr_eigenvalues[k]).collect());
        if config.regime == Regime::StopGradWithPredictor
            && spec.corr_eigenvalues.iter().any(|&s| s < T::lit(RANK_FLOOR))
        {
            run.rank_deficient_steps.push(step);
        }
        if step == config.steps {
            break;
        }
        if config.regime == Regime::NoPredictor {
            continue;
        }
        // per-mode one-step growth factor of the linear ODE under RK4
        let mut factor = Vec::with_capacity(d);
        for &lambda in &spec.predictor_eigenvalues {
            config.check_step(lambda)?;
            let rate = config.regime.rate(config.eta, lambda);
            factor.push(rk4(T::one(), config.dt, |v| rate * v));
        }
        let mut zh = z.matmul(&spec.basis)?;
        for r in 0..n {
            for (v, &f) in zh.row_mut(r).iter_mut().zip(&factor) {
                *v *= f;
            }
        }
        z = zh.matmul_t(&spec.basis)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("coupled simulation state"));
        }
    }
    Ok(run)
}

fn num<T: Scalar>(x: T) -> String {
    format!("{:e}", x.to_f64_lossy())
}

/// Writes `time,mode,value,lambda` rows, one per sample of each trajectory.
pub fn write_trajectories_csv<T: Scalar, W: Write>(trajectories: &[ModeTrajectory<T>], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["time", "mode", "value", "lambda"])?;
    for (k, tr) in trajectories.iter().enumerate() {
        for (t, v) in tr.times.iter().zip(&tr.values) {
            out.write_record([num(*t), k.to_string(), num(*v), num(tr.lambda)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `time,mode,value,lambda` rows where `value` is the correlation
/// eigenvalue of the tracked mode.
pub fn write_coupled_csv<T: Scalar, W: Write>(run: &CoupledRun<T>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["time", "mode", "value", "lambda"])?;
    for ((t, s), l) in run.times.iter().zip(&run.corr_eigenvalues).zip(&run.lambdas) {
        for (k, (sv, lv)) in s.iter().zip(l).enumerate() {
            out.write_record([num(*t), k.to_string(), num(*sv), num(*lv)])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal_predictors() {
        let spec = build_predictor(&DenseMatrix::<f64>::identity(3), 0.7).unwrap();
        assert_eq!(spec.predictor_eigenvalues, vec![1.0; 3]);
        assert!(spec.predictor().sub(&DenseMatrix::identity(3)).unwrap().max_abs() < 1e-15);

        let spec = build_predictor(&DenseMatrix::diag(&[1.0f64, 4.0]), 0.5).unwrap();
        assert_eq!(spec.predictor_eigenvalues, vec![2.0, 1.0]);
    }

    #[test]
    fn rejects_indefinite_correlation() {
        let c = DenseMatrix::from_rows(&[vec![1.0f64, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(build_predictor(&c, 0.5), Err(Error::NegativeEigenvalue { .. })));
        let tiny = DenseMatrix::diag(&[1.0f64, -1e-12]);
        assert_eq!(build_predictor(&tiny, 0.5).unwrap().corr_eigenvalues, vec![1.0, 0.0]);
    }

    #[test]
    fn loss_equivalence_by_hand() {
        let spec = build_predictor(&DenseMatrix::diag(&[4.0f64, 4.0]), 0.5).unwrap();
        let z = Embeddings::from_rows(&[vec![1.0f64, 0.0]]).unwrap();
        let za = Embeddings::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        assert_eq!(eigenbasis_loss_equivalence(&z, &za, &spec).unwrap(), (4.0, 4.0));

        let spec = build_predictor(&DenseMatrix::<f64>::identity(2), 1.0).unwrap();
        let (a, b) = eigenbasis_loss_equivalence(&z, &z, &spec).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn initial_derivatives() {
        assert!((Regime::StopGradWithPredictor.rate(0.1, 0.5) - 0.025f64).abs() < 1e-17);
        assert!((Regime::NoStopGrad.rate(0.1, 0.5) + 0.025f64).abs() < 1e-17);
        assert_eq!(Regime::NoPredictor.rate(0.1, 0.5), 0.0f64);
        assert_eq!(Regime::StopGradWithPredictor.rate(0.1, 1.0), 0.0f64);
        // the two-variable form reduces to the one-variable rate on the diagonal
        for regime in [Regime::StopGradWithPredictor, Regime::NoStopGrad] {
            assert!((pair_rhs(regime, 0.1, 0.5, 1.0, 1.0) - regime.rate(0.1f64, 0.5)).abs() < 1e-17);
        }
    }

    #[test]
    fn step_guard() {
        let cfg = DynamicsConfig { eta: 1.0, dt: 1.0, steps: 1, regime: Regime::NoStopGrad };
        assert!(matches!(integrate_mode(0.0f64, &cfg, 1.0), Err(Error::StepTooLarge { .. })));
        let cfg = DynamicsConfig { steps: 0, ..DynamicsConfig::<f64>::default() };
        assert!(integrate_mode(0.5, &cfg, 1.0).is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in [Regime::StopGradWithPredictor, Regime::NoStopGrad, Regime::NoPredictor] {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert!("sideways".parse::<Regime>().is_err());
    }
}
