//! Minimal deterministic dense-network arithmetic.
//!
//! Layer forward/backward with hand-derived gradients, Adam updates and the
//! cosine learning-rate schedule. Everything is 64-bit and pure: the same
//! inputs always produce bitwise the same outputs, which the training loop
//! and the reproducibility tests rely on.

use serde::{Deserialize, Serialize};

use crate::error::{QkiError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(QkiError::Shape(format!(
                    "row {i} has length {}, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: n, cols: d, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transposed(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }
}

/// Element-wise activation applied after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`. The relu gate is 0 at z = 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// `y = activation(W x + b)` with `W` of shape (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradients of one dense layer plus the gradient passed to its input.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.rows != bias.len() {
            return Err(QkiError::Shape(format!(
                "weight rows {} != bias length {}",
                weight.rows,
                bias.len()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(QkiError::Shape(format!(
                "dense layer expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Pre-activation `W x + b`. Accumulation starts at the bias and adds
    /// products in ascending input index, the same order the batch path uses,
    /// so both paths are bitwise identical.
    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut z = Vec::with_capacity(out);
        for o in 0..out {
            let w = &self.weight.data[o * inp..(o + 1) * inp];
            let mut acc = self.bias[o];
            for i in 0..inp {
                acc += w[i] * x[i];
            }
            z.push(acc);
        }
        z
    }
}

/// Forward pass of one dense layer on a single vector.
pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.check_input(x)?;
    let mut z = layer.pre_activation(x);
    for v in &mut z {
        *v = layer.activation.apply(*v);
    }
    Ok(z)
}

/// Forward pass over a whole batch (rows of `x`). Bitwise identical to calling
/// [`dense_forward`] per row; the loop order is arranged so the inner loop runs
/// over contiguous memory.
pub fn dense_forward_batch(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    if x.cols != layer.in_dim() {
        return Err(QkiError::Shape(format!(
            "dense layer expects input of length {}, got {}",
            layer.in_dim(),
            x.cols
        )));
    }
    let out = layer.out_dim();
    let wt = layer.weight.transposed(); // (in x out)
    let mut y = Matrix::zeros(x.rows, out);
    for n in 0..x.rows {
        let xr = x.row(n);
        let yr = y.row_mut(n);
        yr.copy_from_slice(&layer.bias);
        for (i, &xi) in xr.iter().enumerate() {
            let wrow = wt.row(i);
            for o in 0..out {
                yr[o] += xi * wrow[o];
            }
        }
        for v in yr.iter_mut() {
            *v = layer.activation.apply(*v);
        }
    }
    Ok(y)
}

/// Exact analytic gradients of [`dense_forward`] given the layer input and the
/// gradient of the loss with respect to the layer output. The pre-activation
/// is recomputed from `x`, which reproduces the forward value bit for bit.
pub fn dense_backward(layer: &DenseLayer, x: &[f64], grad_out: &[f64]) -> Result<DenseGrads> {
    layer.check_input(x)?;
    if grad_out.len() != layer.out_dim() {
        return Err(QkiError::Shape(format!(
            "grad_out length {} != layer output {}",
            grad_out.len(),
            layer.out_dim()
        )));
    }
    let (out, inp) = (layer.out_dim(), layer.in_dim());
    let z = layer.pre_activation(x);

    let mut grad_w = Matrix::zeros(out, inp);
    let mut grad_b = vec![0.0; out];
    let mut grad_x = vec![0.0; inp];
    for o in 0..out {
        let delta = grad_out[o] * layer.activation.derivative(z[o]);
        grad_b[o] = delta;
        let gw = grad_w.row_mut(o);
        let w = &layer.weight.data[o * inp..(o + 1) * inp];
        for i in 0..inp {
            gw[i] = delta * x[i];
            grad_x[i] += delta * w[i];
        }
    }
    Ok(DenseGrads {
        weight: grad_w,
        bias: grad_b,
        input: grad_x,
    })
}

/// Adam moment estimates for one flattened parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh zeroed state with the given hyperparameters.
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn with_defaults(len: usize) -> Self {
        AdamState::new(len, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam step on a flattened parameter group.
///
/// `group` names the parameter group in error messages when a gradient
/// component is non-finite.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    group: &str,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(QkiError::Shape(format!(
            "adam group '{group}': param {} / grad {} / state {} lengths disagree",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(QkiError::Numeric(format!(
            "non-finite gradient component {i} in parameter group '{group}'"
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Cosine learning-rate decay from `lr0` down to `alpha * lr0` over
/// `total_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: u64,
    pub alpha: f64,
}

/// `lr(t) = lr0 * ((1 - alpha) * 0.5 * (1 + cos(pi * min(t, T) / T)) + alpha)`.
pub fn cosine_lr(sched: &CosineSchedule, t: u64) -> f64 {
    let frac = if t >= sched.total_steps {
        1.0
    } else {
        t as f64 / sched.total_steps as f64
    };
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    sched.lr0 * ((1.0 - sched.alpha) * cosine + sched.alpha)
}
