use crate::error::{shape_mismatch, Result};
use crate::network::{GradientSet, NetworkParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for a flat parameter slice.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update of a flat slice at (1-based) step `t`.
///
/// The decoupled decay `p ← p − lr·wd·p` is applied first, then the
/// bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    t: u64,
    lr: f64,
    wd: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(shape_mismatch(
            format!("{n} gradients and moments"),
            format!("{} gradients, {} moments", grad.len(), moments.m.len()),
        ));
    }
    let AdamHyper { beta1, beta2, eps } = *hyper;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        param[i] -= lr * wd * param[i];
        let m = beta1 * moments.m[i] + (1.0 - beta1) * g;
        let v = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        param[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for every array the optimizer owns (everything except
/// the target encoder).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let moments = params
            .arrays()
            .iter()
            .filter(|a| ParamGroup::of(&a.name) != ParamGroup::Target)
            .map(|a| Moments::zeros(a.data.len()))
            .collect();
        Self { step: 0, moments }
    }
}

/// AdamW over the whole model. Matrices get weight decay; biases and the
/// mask token do not; the target encoder is never touched.
pub fn adamw_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    params.check_same_layout(grads)?;
    state.step += 1;
    let grad_arrays = grads.arrays();
    let mut k = 0;
    for (p, g) in params.arrays_mut().into_iter().zip(&grad_arrays) {
        if ParamGroup::of(&p.name) == ParamGroup::Target {
            continue;
        }
        let moments = state
            .moments
            .get_mut(k)
            .ok_or_else(|| shape_mismatch("optimizer state for every array", format!("{k} entries")))?;
        let decay = if p.decays() { wd } else { 0.0 };
        adamw_update(p.data, g.data, moments, state.step, lr, decay, hyper)?;
        k += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_by_hand() {
        let mut w = [1.0];
        let mut m = Moments::zeros(1);
        adamw_update(&mut w, &[1.0], &mut m, 1, 0.1, 0.0, &AdamHyper::default()).unwrap();
        assert!((w[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient() {
        let mut w = [2.0, -3.0];
        let mut m = Moments::zeros(2);
        adamw_update(&mut w, &[0.0, 0.0], &mut m, 1, 0.1, 0.0, &AdamHyper::default()).unwrap();
        assert_eq!(w, [2.0, -3.0]);
        adamw_update(&mut w, &[0.0, 0.0], &mut m, 2, 0.1, 0.1, &AdamHyper::default()).unwrap();
        assert!((w[0] - 2.0 * 0.99).abs() < 1e-15 && (w[1] + 3.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let mut w = [1.0];
        let mut m = Moments::zeros(1);
        assert!(adamw_update(&mut w, &[1.0, 2.0], &mut m, 1, 0.1, 0.0, &AdamHyper::default()).is_err());
    }
}
