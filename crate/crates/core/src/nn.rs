//! Dense feed-forward networks with hand-written reverse mode, and Adam.
//!
//! Batches are column-major: an input batch is a `in_dim x batch` matrix and
//! every layer computes `act(W a + b)` column by column. The last layer is
//! always linear.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, m: &mut DMatrix<f64>) {
        match self {
            Activation::Relu => m.apply(|v| *v = v.max(0.0)),
            Activation::Tanh => m.apply(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, grad: &mut DMatrix<f64>, out: &DMatrix<f64>) {
        match self {
            Activation::Relu => grad.zip_apply(out, |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_apply(out, |g, a| *g *= 1.0 - a * a),
        }
    }
}

/// Anything that exposes its trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn same_shape<P: Parameters + ?Sized>(a: &P, b: &P) -> bool {
    let ta = a.tensors();
    let tb = b.tensors();
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.len() == y.len())
}

/// `target <- (1 - rate) * target + rate * live`.
pub fn soft_update<P: Parameters + ?Sized>(target: &mut P, live: &P, rate: f64) -> Result<()> {
    if !same_shape(target, live) {
        return Err(Error::Invalid(
            "soft update between differently shaped parameters".into(),
        ));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Invalid(format!("soft update rate {rate} not in (0, 1]")));
    }
    for (t, l) in target.tensors_mut().into_iter().zip(live.tensors()) {
        if rate == 1.0 {
            t.copy_from_slice(l);
        } else {
            for (tv, lv) in t.iter_mut().zip(l) {
                *tv = (1.0 - rate) * *tv + rate * lv;
            }
        }
    }
    Ok(())
}

/// `acc += scale * other`.
pub fn add_scaled<P: Parameters + ?Sized>(acc: &mut P, other: &P, scale: f64) {
    for (a, o) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        for (av, ov) in a.iter_mut().zip(o) {
            *av += scale * ov;
        }
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Layer activations kept for the backward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    acts: Vec<DMatrix<f64>>,
}

impl MlpParams {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-bound..bound)
            }));
            biases.push(DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)));
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        }
    }

    pub fn from_layers(activation: Activation, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Invalid("weights and biases must be non-empty and paired".into()));
        }
        let mut layer_sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *layer_sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "mlp layer",
                    expected: *layer_sizes.last().unwrap(),
                    actual: w.ncols(),
                });
            }
            layer_sizes.push(w.nrows());
        }
        Ok(Self {
            layer_sizes,
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    /// Multiplies the last layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.weights.len() - 1;
        self.weights[last] *= factor;
        self.biases[last] *= factor;
    }

    fn check_input(&self, input: &DMatrix<f64>) -> Result<()> {
        if input.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                actual: input.nrows(),
            });
        }
        Ok(())
    }

    fn layer(&self, l: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[l] * a;
        let b = &self.biases[l];
        for mut col in z.column_iter_mut() {
            col += b;
        }
        if l + 1 < self.weights.len() {
            self.activation.apply(&mut z);
        }
        z
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(input)?;
        let mut a = self.layer(0, input);
        for l in 1..self.weights.len() {
            a = self.layer(l, &a);
        }
        Ok(a)
    }

    pub fn forward_trace(&self, input: DMatrix<f64>) -> Result<(DMatrix<f64>, MlpTrace)> {
        self.check_input(&input)?;
        let mut acts = Vec::with_capacity(self.weights.len());
        acts.push(input);
        for l in 0..self.weights.len() - 1 {
            let next = self.layer(l, acts.last().unwrap());
            acts.push(next);
        }
        let out = self.layer(self.weights.len() - 1, acts.last().unwrap());
        Ok((out, MlpTrace { acts }))
    }

    /// Accumulates parameter gradients for `d loss / d output = grad_out` into `grads`.
    pub fn backward(&self, trace: &MlpTrace, grad_out: DMatrix<f64>, grads: &mut MlpParams) {
        let mut delta = grad_out;
        for l in (0..self.weights.len()).rev() {
            let a_in = &trace.acts[l];
            grads.weights[l].gemm(1.0, &delta, &a_in.transpose(), 1.0);
            for col in delta.column_iter() {
                grads.biases[l] += col;
            }
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                self.activation.backprop(&mut back, a_in);
                delta = back;
            }
        }
    }

    /// Errors with the first layer holding a non-finite gradient entry.
    pub fn check_finite_grads(&self) -> Result<()> {
        for l in 0..self.weights.len() {
            let finite = self.weights[l].iter().all(|v| v.is_finite()) && self.biases[l].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteGradient { layer: l });
            }
        }
        Ok(())
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
}

/// Single-sample forward pass.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    let out = params.forward(&DMatrix::from_column_slice(input.len(), 1, input))?;
    Ok(out.as_slice().to_vec())
}

/// Gradient of a scalar batch loss. `loss` maps the `out_dim x batch` output to
/// `(loss value, d loss / d output)`; the caller decides the averaging.
pub fn loss_gradient<F>(params: &MlpParams, batch: &DMatrix<f64>, loss: F) -> Result<(f64, MlpParams)>
where
    F: FnOnce(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    let (out, trace) = params.forward_trace(batch.clone())?;
    let (value, grad_out) = loss(&out);
    let mut grads = params.zeros_like();
    params.backward(&trace, grad_out, &mut grads);
    grads.check_finite_grads()?;
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !same_shape(params, grads) || params.tensors().len() != self.first.len() {
            return Err(Error::Invalid("optimizer state does not match parameter shapes".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn optimizer_step<P: Parameters + ?Sized>(state: &mut Adam, params: &mut P, grads: &P) -> Result<()> {
    state.step(params, grads)
}
