//! Linear layers with hand-written backward passes, the Adam optimizer and a
//! central-difference gradient checker.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcnError, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, DenseMatrix};
use crate::rng::{stream_rng, Stream};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn forward(self, x: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Gradient w.r.t. the pre-activation `x`, given the upstream gradient.
    pub fn backward(self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Activation::Relu => relu_backward(x, upstream),
            Activation::Tanh => {
                check_same("tanh_backward", x, upstream)?;
                let mut out = upstream.clone();
                for (g, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    let t = v.tanh();
                    *g *= 1.0 - t * t;
                }
                Ok(out)
            }
        }
    }
}

fn check_same(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HcnError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn relu_forward(x: &DenseMatrix) -> DenseMatrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`, zero elsewhere.
pub fn relu_backward(x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    check_same("relu_backward", x, upstream)?;
    let mut out = upstream.clone();
    for (g, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Anything holding trainable tensors with matching gradient buffers.
///
/// Visiting order is fixed; flattening, checkpoints and optimizer state all rely on it.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p, _| out.extend_from_slice(p));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, g| out.extend_from_slice(g));
        out
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(HcnError::InvalidArgument(format!(
                "expected {expected} parameters, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |p, _| {
            p.copy_from_slice(&values[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, g| g.iter_mut().for_each(|v| *v = 0.0));
    }
}

/// Affine map `x·W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub grad_weight: DenseMatrix,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearLayer {
            weight: DenseMatrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
            grad_weight: DenseMatrix::zeros(d_in, d_out),
            grad_bias: vec![0.0; d_out],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (d_in + d_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(d_in, d_out);
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    pub fn from_parts(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(HcnError::InvalidArgument(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        let (r, c) = weight.shape();
        Ok(LinearLayer {
            weight,
            bias,
            grad_weight: DenseMatrix::zeros(r, c),
            grad_bias: vec![0.0; c],
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.d_in() {
            return Err(HcnError::ShapeMismatch {
                op: "linear_forward",
                left: x.shape(),
                right: self.weight.shape(),
            });
        }
        let mut out = matmul(x, &self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Accumulates `xᵀ·upstream` and the column sums of `upstream` into the
    /// gradient buffers and returns `upstream·Wᵀ`.
    pub fn backward(&mut self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        self.accumulate_grads(x, upstream)?;
        matmul_nt(upstream, &self.weight)
    }

    fn accumulate_grads(&mut self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<()> {
        if x.rows() != upstream.rows() || x.cols() != self.d_in() || upstream.cols() != self.d_out() {
            return Err(HcnError::ShapeMismatch {
                op: "linear_backward",
                left: x.shape(),
                right: upstream.shape(),
            });
        }
        let gw = matmul_tn(x, upstream)?;
        self.grad_weight.add_assign(&gw)?;
        for (g, s) in self.grad_bias.iter_mut().zip(upstream.column_sums()) {
            *g += s;
        }
        Ok(())
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(self.weight.as_slice(), self.grad_weight.as_slice());
        f(&self.bias, &self.grad_bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.weight.as_mut_slice(), self.grad_weight.as_mut_slice());
        f(&mut self.bias, &mut self.grad_bias);
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &DenseMatrix) -> Result<DenseMatrix> {
    layer.forward(x)
}

pub fn linear_backward(layer: &mut LinearLayer, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    layer.backward(x, upstream)
}

/// Stack of linear layers with a nonlinearity between them and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

/// Everything the backward pass of one [`Mlp::forward`] call needs.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<DenseMatrix>,
    pre_activations: Vec<DenseMatrix>,
    output: DenseMatrix,
}

impl MlpTrace {
    pub fn output(&self) -> &DenseMatrix {
        &self.output
    }

    pub fn into_output(self) -> DenseMatrix {
        self.output
    }

    /// Pre-activations of the hidden layers, in order.
    pub fn pre_activations(&self) -> &[DenseMatrix] {
        &self.pre_activations
    }
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]`, Glorot-initialized.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HcnError::InvalidArgument(format!(
                "invalid layer dims {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::glorot(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(HcnError::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].d_out() != w[1].d_in() {
                return Err(HcnError::InvalidArgument(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].d_out(),
                    i + 1,
                    w[1].d_in()
                )));
            }
        }
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(LinearLayer::d_out));
        d
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<MlpTrace> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&current)?;
            inputs.push(current);
            if i == last {
                return Ok(MlpTrace {
                    inputs,
                    pre_activations,
                    output: out,
                });
            }
            current = self.activation.forward(&out);
            pre_activations.push(out);
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Output only; no trace is kept.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut current = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            current = layer.forward(&self.activation.forward(&current))?;
        }
        Ok(current)
    }

    /// Accumulates parameter gradients for one traced pass. Returns the
    /// gradient w.r.t. the input when `input_grad` is set.
    pub fn backward(&mut self, trace: &MlpTrace, upstream: &DenseMatrix, input_grad: bool) -> Result<Option<DenseMatrix>> {
        if upstream.shape() != trace.output.shape() {
            return Err(HcnError::ShapeMismatch {
                op: "mlp_backward",
                left: trace.output.shape(),
                right: upstream.shape(),
            });
        }
        let mut grad = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                grad = self.activation.backward(&trace.pre_activations[i], &grad)?;
            }
            if i == 0 && !input_grad {
                self.layers[0].accumulate_grads(&trace.inputs[0], &grad)?;
                return Ok(None);
            }
            grad = self.layers[i].backward(&trace.inputs[i], &grad)?;
        }
        Ok(Some(grad))
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one model, in visiting order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.second_moment.iter().flatten()
    }

    /// One bias-corrected update of every tensor the model exposes.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P) {
        self.step_count += 1;
        let mut slot = 0;
        model.visit_params_mut(&mut |p, g| {
            self.update_tensor(slot, p, g);
            slot += 1;
        });
    }

    /// Same update over explicit `(param, grad)` slices.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(HcnError::InvalidArgument(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(HcnError::InvalidArgument(format!(
                    "tensor {slot}: {} parameters, {} gradients",
                    p.len(),
                    g.len()
                )));
            }
            self.update_tensor(slot, p, g);
        }
        Ok(())
    }

    fn update_tensor(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        if slot == self.first_moment.len() {
            self.first_moment.push(vec![0.0; params.len()]);
            self.second_moment.push(vec![0.0; params.len()]);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = &mut self.first_moment[slot];
        let v = &mut self.second_moment[slot];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates to probe; all of them when the parameter count is smaller.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// judged on absolute error instead.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 200,
            scale_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordinateError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the analytic gradient returned by `loss_and_grad` against central
/// differences on a seeded random subset of coordinates.
pub fn grad_check<F>(mut loss_and_grad: F, params: &[f64], config: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameter count");
    let mut rng = stream_rng(config.seed, Stream::GradCheck, 0);
    let coords: Vec<usize> = if params.len() <= config.max_coords {
        (0..params.len()).collect()
    } else {
        let mut picked = sample(&mut rng, params.len(), config.max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut work = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + config.step;
        let (plus, _) = loss_and_grad(&work);
        work[i] = orig - config.step;
        let (minus, _) = loss_and_grad(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(config.scale_floor);
        let rel_error = if (a - numeric).abs() == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
        max_rel_error = max_rel_error.max(rel_error);
        if !(rel_error <= config.tolerance) {
            failures.push(CoordinateError {
                index: i,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_error,
        failures,
    }
}
