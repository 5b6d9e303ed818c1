//! One-hidden-layer ReLU MLP with a sigmoid binary output, evaluated on a
//! flat parameter vector.
//!
//! Parameter layout is fixed: `W1` (h x d, row-major), `b1` (h), `w2` (h),
//! `b2` (1). Losses are mean binary cross-entropy over the batch, computed on
//! logits clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.

use std::ops::{Deref, DerefMut};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm, Matrix};
use crate::rng::{rng_from, Rng};

pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    /// Inverted dropout on the hidden layer, applied only in teacher training.
    #[serde(default)]
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_units: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_units,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("mlp needs input_dim >= 1 and hidden_units >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `p = h*d + h + h + 1`
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_units);
        h * d + 2 * h + 1
    }

    fn offsets(&self) -> Layout {
        let (d, h) = (self.input_dim, self.hidden_units);
        Layout {
            d,
            h,
            b1: h * d,
            w2: h * d + h,
            b2: h * d + 2 * h,
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation per layer.
    pub fn init_params(&self, seed: u64) -> Params {
        let l = self.offsets();
        let mut rng = rng_from(seed);
        let mut theta = vec![0.0; self.param_count()];
        let bound1 = 1.0 / (l.d as f64).sqrt();
        let bound2 = 1.0 / (l.h as f64).sqrt();
        for v in &mut theta[..l.w2] {
            *v = rng.random_range(-bound1..bound1);
        }
        for v in &mut theta[l.w2..] {
            *v = rng.random_range(-bound2..bound2);
        }
        Params(theta)
    }

    pub fn flatten(&self, w1: &Matrix, b1: &[f64], w2: &[f64], b2: f64) -> Result<Params> {
        let l = self.offsets();
        if w1.shape() != (l.h, l.d) {
            return Err(Error::invalid(format!(
                "W1 must be {}x{}, got {:?}",
                l.h,
                l.d,
                w1.shape()
            )));
        }
        check_dim(l.h, b1.len())?;
        check_dim(l.h, w2.len())?;
        let mut theta = Vec::with_capacity(self.param_count());
        theta.extend_from_slice(w1.data());
        theta.extend_from_slice(b1);
        theta.extend_from_slice(w2);
        theta.push(b2);
        Ok(Params(theta))
    }

    pub fn unflatten(&self, theta: &[f64]) -> Result<(Matrix, Vec<f64>, Vec<f64>, f64)> {
        check_dim(self.param_count(), theta.len())?;
        let l = self.offsets();
        let w1 = Matrix::new(l.h, l.d, theta[..l.b1].to_vec())?;
        Ok((
            w1,
            theta[l.b1..l.w2].to_vec(),
            theta[l.w2..l.b2].to_vec(),
            theta[l.b2],
        ))
    }
}

#[derive(Clone, Copy)]
struct Layout {
    d: usize,
    h: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Flat parameter vector of an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params(pub Vec<f64>);

impl Params {
    pub fn zeros(p: usize) -> Self {
        Params(vec![0.0; p])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Params {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Params {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Params {
    fn from(v: Vec<f64>) -> Self {
        Params(v)
    }
}

/// Features with hard binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        check_dim(x.rows(), y.len())?;
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("labels must be exactly 0 or 1"));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Copies the listed rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
            y.push(self.y[r]);
        }
        Batch {
            x: Matrix::new(rows.len(), d, data).expect("rows copied from a finite matrix"),
            y,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn clamp_logit(z: f64) -> f64 {
    z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// How [`Mlp::mixed_grad`] differentiates the gradient inner product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixedGradStrategy {
    /// Symmetric difference of input gradients at `theta +- eps * v/|v|`,
    /// with the ReLU pattern held at `theta`.
    #[default]
    ParameterShift,
    /// Closed form for the ReLU network (exact away from ReLU kinks).
    Analytic,
}

/// Per-sample forward quantities.
struct Forward {
    /// pre-activations, `h`
    pre: Vec<f64>,
    /// post-activations (after dropout mask when present), `h`
    act: Vec<f64>,
    logit: f64,
}

/// Stateless evaluator bound to one architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Mlp { config })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn check(&self, theta: &[f64], batch: &Batch) -> Result<()> {
        check_dim(self.param_count(), theta.len())?;
        check_dim(self.config.input_dim, batch.x.cols())?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    fn scratch(&self) -> Forward {
        Forward {
            pre: vec![0.0; self.config.hidden_units],
            act: vec![0.0; self.config.hidden_units],
            logit: 0.0,
        }
    }

    fn forward(&self, theta: &[f64], x: &[f64], mask: Option<&[f64]>) -> Forward {
        let mut f = self.scratch();
        self.forward_into(theta, x, mask, &mut f);
        f
    }

    /// [`Mlp::forward`] into caller-owned buffers of length `h`.
    fn forward_into(&self, theta: &[f64], x: &[f64], mask: Option<&[f64]>, f: &mut Forward) {
        let l = self.config.offsets();
        for (k, (p, a)) in f.pre.iter_mut().zip(f.act.iter_mut()).enumerate() {
            let u = theta[l.b1 + k] + dot(&theta[k * l.d..(k + 1) * l.d], x);
            *p = u;
            *a = if u > 0.0 { u } else { 0.0 };
            if let Some(m) = mask {
                *a *= m[k];
            }
        }
        f.logit = dot(&theta[l.w2..l.b2], &f.act) + theta[l.b2];
    }

    /// Raw (unclamped) logits for every row of `x`.
    pub fn logits(&self, theta: &[f64], x: &Matrix) -> Result<Vec<f64>> {
        check_dim(self.param_count(), theta.len())?;
        check_dim(self.config.input_dim, x.cols())?;
        let mut f = self.scratch();
        Ok((0..x.rows())
            .map(|i| {
                self.forward_into(theta, x.row(i), None, &mut f);
                f.logit
            })
            .collect())
    }

    /// Positive-class probabilities.
    pub fn predict(&self, theta: &[f64], x: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .logits(theta, x)?
            .into_iter()
            .map(|z| sigmoid(clamp_logit(z)))
            .collect())
    }

    /// Mean binary cross-entropy.
    pub fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        self.check(theta, batch)?;
        let mut f = self.scratch();
        let total: f64 = (0..batch.len())
            .map(|i| {
                self.forward_into(theta, batch.x.row(i), None, &mut f);
                let z = clamp_logit(f.logit);
                softplus(z) - batch.y[i] * z
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// Gradient of [`Mlp::loss`] with respect to the flat parameters.
    ///
    /// The clamp is passed through: `dL/dz = sigmoid(clamp(z)) - y`.
    pub fn grad_params(&self, theta: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.check(theta, batch)?;
        Ok(self.grad_params_masked(theta, batch, None).1)
    }

    /// Loss and parameter gradient in one pass.
    pub fn loss_and_grad(&self, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check(theta, batch)?;
        Ok(self.grad_params_masked(theta, batch, None))
    }

    /// Training-mode gradient with inverted dropout on the hidden layer.
    pub fn grad_params_dropout(
        &self,
        theta: &[f64],
        batch: &Batch,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(theta, batch)?;
        let rate = self.config.dropout_rate;
        if rate == 0.0 {
            return Ok(self.grad_params_masked(theta, batch, None));
        }
        let h = self.config.hidden_units;
        let keep = 1.0 - rate;
        let masks: Vec<f64> = (0..batch.len() * h)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(self.grad_params_masked(theta, batch, Some(&masks)))
    }

    fn grad_params_masked(
        &self,
        theta: &[f64],
        batch: &Batch,
        masks: Option<&[f64]>,
    ) -> (f64, Vec<f64>) {
        let l = self.config.offsets();
        let n = batch.len() as f64;
        let mut grad = vec![0.0; theta.len()];
        let mut loss = 0.0;
        let w2 = &theta[l.w2..l.b2];
        let mut f = self.scratch();
        for i in 0..batch.len() {
            let x = batch.x.row(i);
            let mask = masks.map(|m| &m[i * l.h..(i + 1) * l.h]);
            self.forward_into(theta, x, mask, &mut f);
            let z = clamp_logit(f.logit);
            let y = batch.y[i];
            loss += softplus(z) - y * z;
            let delta = (sigmoid(z) - y) / n;
            axpy(delta, &f.act, &mut grad[l.w2..l.b2]);
            grad[l.b2] += delta;
            for k in 0..l.h {
                if f.pre[k] <= 0.0 {
                    continue;
                }
                let du = delta * w2[k] * mask.map_or(1.0, |m| m[k]);
                if du == 0.0 {
                    continue;
                }
                axpy(du, x, &mut grad[k * l.d..(k + 1) * l.d]);
                grad[l.b1 + k] += du;
            }
        }
        (loss / n, grad)
    }

    /// `b x d` matrix of `dL/dx` per sample (including the `1/b` of the mean).
    pub fn grad_inputs(&self, theta: &[f64], batch: &Batch) -> Result<Matrix> {
        self.check(theta, batch)?;
        let l = self.config.offsets();
        let n = batch.len() as f64;
        let w2 = &theta[l.w2..l.b2];
        let mut out = Matrix::zeros(batch.len(), l.d);
        for i in 0..batch.len() {
            let f = self.forward(theta, batch.x.row(i), None);
            let delta = (sigmoid(clamp_logit(f.logit)) - batch.y[i]) / n;
            let row = out.row_mut(i);
            for k in 0..l.h {
                if f.pre[k] > 0.0 && w2[k] != 0.0 {
                    axpy(delta * w2[k], &theta[k * l.d..(k + 1) * l.d], row);
                }
            }
        }
        Ok(out)
    }

    /// `grad_x <grad_theta L(theta; x, y), v>` as a `b x d` matrix.
    ///
    /// Returns the zero matrix when `v = 0`.
    pub fn mixed_grad(
        &self,
        theta: &[f64],
        batch: &Batch,
        v: &[f64],
        strategy: MixedGradStrategy,
    ) -> Result<Matrix> {
        self.check(theta, batch)?;
        check_dim(self.param_count(), v.len())?;
        if !all_finite(v) {
            return Err(Error::invalid("mixed_grad direction is not finite"));
        }
        let vn = norm(v);
        if vn == 0.0 {
            return Ok(Matrix::zeros(batch.len(), self.config.input_dim));
        }
        match strategy {
            MixedGradStrategy::ParameterShift => self.mixed_grad_shift(theta, batch, v),
            MixedGradStrategy::Analytic => Ok(self.mixed_grad_analytic(theta, batch, v)),
        }
    }

    /// The shifted input gradients keep the ReLU pattern of the unshifted
    /// point, so a shift that crosses a kink does not leak the jump of the
    /// subgradient into the difference quotient.
    fn mixed_grad_shift(&self, theta: &[f64], batch: &Batch, v: &[f64]) -> Result<Matrix> {
        let h = self.config.hidden_units;
        let active: Vec<bool> = (0..batch.len())
            .flat_map(|i| {
                let f = self.forward(theta, batch.x.row(i), None);
                (0..h).map(move |k| f.pre[k] > 0.0)
            })
            .collect();
        parameter_shift(theta, v, |t| Ok(self.grad_inputs_with_pattern(t, batch, &active)))
    }

    /// `grad_inputs` of the network whose ReLUs are fixed to `active`
    /// (`b x h`, row-major) instead of the signs of their pre-activations.
    fn grad_inputs_with_pattern(&self, theta: &[f64], batch: &Batch, active: &[bool]) -> Matrix {
        let l = self.config.offsets();
        let n = batch.len() as f64;
        let w2 = &theta[l.w2..l.b2];
        let mut out = Matrix::zeros(batch.len(), l.d);
        for i in 0..batch.len() {
            let x = batch.x.row(i);
            let on = &active[i * l.h..(i + 1) * l.h];
            let mut logit = theta[l.b2];
            for k in 0..l.h {
                if on[k] {
                    let u = dot(&theta[k * l.d..(k + 1) * l.d], x) + theta[l.b1 + k];
                    logit += w2[k] * u;
                }
            }
            let delta = (sigmoid(clamp_logit(logit)) - batch.y[i]) / n;
            let row = out.row_mut(i);
            for k in 0..l.h {
                if on[k] && w2[k] != 0.0 {
                    axpy(delta * w2[k], &theta[k * l.d..(k + 1) * l.d], row);
                }
            }
        }
        out
    }

    fn mixed_grad_analytic(&self, theta: &[f64], batch: &Batch, v: &[f64]) -> Matrix {
        let l = self.config.offsets();
        let n = batch.len() as f64;
        let w2 = &theta[l.w2..l.b2];
        let dw2 = &v[l.w2..l.b2];
        let db2 = v[l.b2];
        let mut out = Matrix::zeros(batch.len(), l.d);
        for i in 0..batch.len() {
            let x = batch.x.row(i);
            let f = self.forward(theta, x, None);
            let z = f.logit;
            let p = sigmoid(clamp_logit(z));
            let resid = p - batch.y[i];
            let slope = if z.abs() < LOGIT_CLAMP { p * (1.0 - p) } else { 0.0 };

            // directional derivative of the logit along v
            let mut zdot = dot(dw2, &f.act) + db2;
            for k in 0..l.h {
                if f.pre[k] > 0.0 {
                    let du = dot(&v[k * l.d..(k + 1) * l.d], x) + v[l.b1 + k];
                    zdot += w2[k] * du;
                }
            }

            // grad_x z = W1^T (w2 . m),  grad_x zdot = W1^T (dw2 . m) + dW1^T (w2 . m)
            let row = out.row_mut(i);
            for k in 0..l.h {
                if f.pre[k] <= 0.0 {
                    continue;
                }
                let w1k = &theta[k * l.d..(k + 1) * l.d];
                let dw1k = &v[k * l.d..(k + 1) * l.d];
                axpy((slope * zdot * w2[k] + resid * dw2[k]) / n, w1k, row);
                axpy(resid * w2[k] / n, dw1k, row);
            }
        }
        out
    }
}

/// Symmetric parameter-shift estimate of `d/ds grad_x L(theta + s v)` at
/// `s = 0`, which equals `grad_x <grad_theta L, v>`.
///
/// Uses `eps = 1e-4 (1 + |theta|) / (1 + |v_hat|)` along `v_hat = v / |v|`.
pub fn parameter_shift<F>(theta: &[f64], v: &[f64], grad_inputs_at: F) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Matrix>,
{
    let vn = norm(v);
    let eps = 1e-4 * (1.0 + norm(theta)) / 2.0;
    let step = eps / vn;
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    axpy(step, v, &mut plus);
    axpy(-step, v, &mut minus);
    let gp = grad_inputs_at(&plus)?;
    let gm = grad_inputs_at(&minus)?;
    check_dim(gp.rows() * gp.cols(), gm.rows() * gm.cols())?;
    let factor = vn / (2.0 * eps);
    let data = gp
        .data()
        .iter()
        .zip(gm.data())
        .map(|(a, b)| (a - b) * factor)
        .collect();
    Matrix::new(gp.rows(), gp.cols(), data)
}
