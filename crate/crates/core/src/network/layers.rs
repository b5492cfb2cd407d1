use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// GELU, tanh approximation.
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                // 0.5·(1 + tanh u) = σ(2u)
                x * gelu_gate(x)
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let s = gelu_gate(x);
                s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn forward(self, pre: &Matrix) -> Matrix {
        if self == Activation::Identity {
            return pre.clone();
        }
        pre.map(|x| self.apply(x))
    }

    /// `grad_out ⊙ act'(pre)`.
    pub(crate) fn backward(self, pre: &Matrix, grad_out: &Matrix) -> Matrix {
        let mut g = grad_out.clone();
        if self != Activation::Identity {
            for (gi, &x) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *gi *= self.derivative(x);
            }
        }
        g
    }
}

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    pub fn identity(d: usize) -> Self {
        Self { weight: Matrix::identity(d), bias: vec![0.0; d] }
    }

    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Matrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..=bound));
        Self { weight, bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.inputs() {
            return Err(shape_mismatch(format!("{} input columns", self.inputs()), format!("{}", x.cols())));
        }
        let (n, k, m) = (x.rows(), self.inputs(), self.outputs());
        let mut y = Matrix::from_fn(n, m, |_, j| self.bias[j]);
        // y += x · Wᵀ
        gemm(n, k, m, x.as_slice(), (k, 1), self.weight.as_slice(), (1, k), 1.0, y.as_mut_slice());
        Ok(y)
    }

    /// Accumulates `∂W += gᵀx`, `∂b += Σ g` into `grad` and returns `g W`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        self.accumulate(x, grad_out, grad)?;
        let (n, m, k) = (grad_out.rows(), self.outputs(), self.inputs());
        let mut gx = Matrix::zeros(n, k);
        gemm(n, m, k, grad_out.as_slice(), (m, 1), self.weight.as_slice(), (k, 1), 0.0, gx.as_mut_slice());
        Ok(gx)
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &Matrix, grad_out: &Matrix, grad: &mut Linear) -> Result<()> {
        let (n, k, m) = (x.rows(), self.inputs(), self.outputs());
        if x.cols() != k || grad_out.shape() != (n, m) || grad.weight.shape() != (m, k) {
            return Err(shape_mismatch(
                format!("x n x {k}, grad n x {m}"),
                format!("{:?}, {:?}", x.shape(), grad_out.shape()),
            ));
        }
        gemm(m, n, k, grad_out.as_slice(), (1, m), x.as_slice(), (k, 1), 1.0, grad.weight.as_mut_slice());
        for i in 0..n {
            for (b, &g) in grad.bias.iter_mut().zip(grad_out.row(i)) {
                *b += g;
            }
        }
        Ok(())
    }
}

/// `c ← a·b + beta·c` for row-major `c` (`m × n`); `a` is `m × k` and `b` is
/// `k × n`, each given with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(c.len() == m * n && a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fixed 2-D sine/cosine encoding of patch `index` on a grid of width
/// `grid_w`, `dim` entries long. A quarter of the channels each carry
/// `sin`/`cos` of the row and of the column at geometric frequencies; channels
/// beyond `4·⌊dim/4⌋` are zero.
pub fn sincos_position(index: usize, grid_w: usize, dim: usize) -> Vec<f64> {
    let (row, col) = ((index / grid_w) as f64, (index % grid_w) as f64);
    let quarter = dim / 4;
    let mut out = vec![0.0; dim];
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        out[i] = (row * omega).sin();
        out[quarter + i] = (row * omega).cos();
        out[2 * quarter + i] = (col * omega).sin();
        out[3 * quarter + i] = (col * omega).cos();
    }
    out
}
