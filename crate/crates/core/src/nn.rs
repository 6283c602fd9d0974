//! Dense network substrate: linear layers, activations, a taped MLP with
//! hand-written reverse accumulation, uniform initialization and Adam.
//!
//! Batches are row-major `rows × features` slices. The first layer of an
//! [`Mlp`] can take a *shared* input tail that is identical for every row
//! (expression and latent codes of one frame), which is folded into an
//! effective bias instead of being materialized per row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Parameter sets expose their storage as an ordered list of flat slots.
///
/// Gradient buffers are values of the same type, created by
/// [`ParamSet::zeros_like`], so slot `i` of a gradient always matches slot
/// `i` of the parameters in shape.
pub trait ParamSet<T: Real> {
    fn slots(&self) -> Vec<&[T]>;
    fn slots_mut(&mut self) -> Vec<&mut [T]>;
    fn zeros_like(&self) -> Self;

    fn param_count(&self) -> usize {
        self.slots().iter().map(|s| s.len()).sum()
    }

    fn fill_zero(&mut self) {
        for slot in self.slots_mut() {
            slot.fill(T::zero());
        }
    }

    /// `self += other`, slot by slot.
    fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.slots_mut().into_iter().zip(other.slots()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::contract(format!(
                "layer {inputs}->{outputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::ZeroWidth { inputs, outputs });
        }
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| T::lit((2.0 * rng.gen::<f64>() - 1.0) * bound))
            .collect();
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias: vec![T::zero(); outputs],
        })
    }

    /// `W·x + b` for a single vector.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = self.forward_no_bias(x)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += *b;
        }
        Ok(y)
    }

    pub fn forward_no_bias(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.inputs {
            return Err(Error::contract(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.inputs)
            .map(|row| row.iter().zip(x).map(|(w, v)| *w * *v).sum())
            .collect())
    }

    /// Batched forward where each input row is `[x_row | shared]`.
    ///
    /// `x` is `rows × (inputs - shared.len())`, `out` is `rows × outputs`.
    pub fn forward_batch(&self, x: &[T], shared: &[T], rows: usize, out: &mut [T]) {
        let row_in = self.inputs - shared.len();
        debug_assert_eq!(x.len(), rows * row_in);
        debug_assert_eq!(out.len(), rows * self.outputs);
        let mut eff_bias = self.bias.clone();
        if !shared.is_empty() {
            for (o, b) in eff_bias.iter_mut().enumerate() {
                let w = &self.weights[o * self.inputs + row_in..(o + 1) * self.inputs];
                *b += w.iter().zip(shared).map(|(a, s)| *a * *s).sum::<T>();
            }
        }
        for row in out.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&eff_bias);
        }
        T::gemm(
            rows,
            row_in,
            self.outputs,
            T::one(),
            x,
            row_in as isize,
            1,
            &self.weights,
            1,
            self.inputs as isize,
            T::one(),
            out,
            self.outputs as isize,
            1,
        );
    }

    /// Reverse pass of [`forward_batch`](Self::forward_batch).
    ///
    /// Accumulates into `grad`; writes `dz · W[:, :row_in]` into `dx` when
    /// given and returns the gradient of the shared tail.
    pub fn backward_batch(
        &self,
        x: &[T],
        shared: &[T],
        dz: &[T],
        rows: usize,
        grad: &mut LinearLayer<T>,
        dx: Option<&mut [T]>,
    ) -> Vec<T> {
        let row_in = self.inputs - shared.len();
        debug_assert_eq!(dz.len(), rows * self.outputs);
        // dW[:, :row_in] += dzᵀ · x
        T::gemm(
            self.outputs,
            rows,
            row_in,
            T::one(),
            dz,
            1,
            self.outputs as isize,
            x,
            row_in as isize,
            1,
            T::one(),
            &mut grad.weights,
            self.inputs as isize,
            1,
        );
        let mut col_sum = vec![T::zero(); self.outputs];
        for row in dz.chunks_exact(self.outputs) {
            for (s, v) in col_sum.iter_mut().zip(row) {
                *s += *v;
            }
        }
        for (g, s) in grad.bias.iter_mut().zip(&col_sum) {
            *g += *s;
        }
        let mut d_shared = vec![T::zero(); shared.len()];
        for (o, s) in col_sum.iter().enumerate() {
            let base = o * self.inputs + row_in;
            for (j, sh) in shared.iter().enumerate() {
                grad.weights[base + j] += *s * *sh;
                d_shared[j] += *s * self.weights[base + j];
            }
        }
        if let Some(dx) = dx {
            debug_assert_eq!(dx.len(), rows * row_in);
            T::gemm(
                rows,
                self.outputs,
                row_in,
                T::one(),
                dz,
                self.outputs as isize,
                1,
                &self.weights,
                self.inputs as isize,
                1,
                T::zero(),
                dx,
                row_in as isize,
                1,
            );
        }
        d_shared
    }
}

impl<T: Real> ParamSet<T> for LinearLayer<T> {
    fn slots(&self) -> Vec<&[T]> {
        vec![&self.weights, &self.bias]
    }

    fn slots_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weights, &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }
}

/// A flat vector is a single-slot group (used for latent rows).
impl<T: Real> ParamSet<T> for Vec<T> {
    fn slots(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn slots_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_mut_slice()]
    }

    fn zeros_like(&self) -> Self {
        vec![T::zero(); self.len()]
    }
}

/// `W·x + b`.
pub fn linear_forward<T: Real>(layer: &LinearLayer<T>, x: &[T]) -> Result<Vec<T>> {
    layer.forward(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }

    pub fn apply_inplace<T: Real>(self, xs: &mut [T]) {
        for x in xs {
            *x = self.eval(*x);
        }
    }

    /// `upstream *= f'(·)` given the forward outputs.
    pub fn backprop_inplace<T: Real>(self, outputs: &[T], upstream: &mut [T]) {
        for (g, y) in upstream.iter_mut().zip(outputs) {
            *g *= self.derivative_from_output(*y);
        }
    }
}

pub fn activation<T: Real>(kind: Activation, x: &[T]) -> Vec<T> {
    x.iter().map(|v| kind.eval(*v)).collect()
}

/// Fixed-topology stack of linear layers with one activation between hidden
/// layers and a separate activation on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<LinearLayer<T>>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Forward record needed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    pub rows: usize,
    pub input: Vec<T>,
    pub shared: Vec<T>,
    /// Post-activation output of every layer.
    pub activations: Vec<Vec<T>>,
}

impl<T> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Result of [`Mlp::backward`]: per-row input gradient and shared-tail gradient.
#[derive(Clone, Debug)]
pub struct InputGrads<T> {
    pub rows: Vec<T>,
    pub shared: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, h1, ..., out]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, hidden, output })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[T], shared: &[T], rows: usize) -> Result<()> {
        let first = &self.layers[0];
        if shared.len() > first.inputs || x.len() != rows * (first.inputs - shared.len()) {
            return Err(Error::contract(format!(
                "MLP input of {} values for {rows} rows with {} shared does not fit width {}",
                x.len(),
                shared.len(),
                first.inputs
            )));
        }
        Ok(())
    }

    /// Forward pass recording everything the reverse pass needs.
    pub fn forward_taped(&self, x: Vec<T>, shared: &[T], rows: usize) -> Result<MlpTape<T>> {
        self.check_input(&x, shared, rows)?;
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![T::zero(); rows * layer.outputs];
            match l {
                0 => layer.forward_batch(&x, shared, rows, &mut out),
                _ => layer.forward_batch(&activations[l - 1], &[], rows, &mut out),
            }
            self.activation_of(l).apply_inplace(&mut out);
            activations.push(out);
        }
        Ok(MlpTape {
            rows,
            input: x,
            shared: shared.to_vec(),
            activations,
        })
    }

    pub fn forward(&self, x: &[T], shared: &[T], rows: usize) -> Result<Vec<T>> {
        self.check_input(x, shared, rows)?;
        let mut current: Vec<T> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![T::zero(); rows * layer.outputs];
            match l {
                0 => layer.forward_batch(x, shared, rows, &mut out),
                _ => layer.forward_batch(&current, &[], rows, &mut out),
            }
            self.activation_of(l).apply_inplace(&mut out);
            current = out;
        }
        Ok(current)
    }

    /// Reverse accumulation through a recorded forward pass.
    ///
    /// `upstream` is `∂L/∂output` (`rows × outputs`); parameter gradients are
    /// added into `grads`. The per-row input gradient is only computed when
    /// `want_row_grad` is set.
    pub fn backward(
        &self,
        tape: &MlpTape<T>,
        upstream: &[T],
        grads: &mut Mlp<T>,
        want_row_grad: bool,
    ) -> Result<InputGrads<T>> {
        let rows = tape.rows;
        if tape.activations.len() != self.layers.len() || upstream.len() != rows * self.outputs() {
            return Err(Error::contract("tape or upstream seed does not match this MLP"));
        }
        let mut delta = upstream.to_vec();
        let mut shared_grad = Vec::new();
        let mut row_grad = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            self.activation_of(l).backprop_inplace(&tape.activations[l], &mut delta);
            if l == 0 {
                let row_in = layer.inputs - tape.shared.len();
                let mut dx = vec![T::zero(); if want_row_grad { rows * row_in } else { 0 }];
                shared_grad = layer.backward_batch(
                    &tape.input,
                    &tape.shared,
                    &delta,
                    rows,
                    &mut grads.layers[0],
                    want_row_grad.then_some(dx.as_mut_slice()),
                );
                row_grad = dx;
            } else {
                let mut dx = vec![T::zero(); rows * layer.inputs];
                layer.backward_batch(
                    &tape.activations[l - 1],
                    &[],
                    &delta,
                    rows,
                    &mut grads.layers[l],
                    Some(&mut dx),
                );
                delta = dx;
            }
        }
        Ok(InputGrads {
            rows: row_grad,
            shared: shared_grad,
        })
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn slots(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.slots()).collect()
    }

    fn slots_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.slots_mut()).collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// Moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub group: String,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamSet<T>>(group: impl Into<String>, params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.slots().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self {
            group: group.into(),
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
            lr: T::lit(config.lr),
            beta1: T::lit(config.beta1),
            beta2: T::lit(config.beta2),
            eps: T::lit(config.eps),
        }
    }
}

/// One bias-corrected Adam update.
///
/// Gradients are validated before anything is written, so a non-finite
/// gradient leaves parameters and moments untouched.
pub fn adam_step<T: Real, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    let grad_slots = grads.slots();
    let param_slots = params.slots_mut();
    if grad_slots.len() != param_slots.len()
        || state.first_moment.len() != param_slots.len()
        || grad_slots
            .iter()
            .zip(&param_slots)
            .zip(&state.first_moment)
            .any(|((g, p), m)| g.len() != p.len() || m.len() != p.len())
    {
        return Err(Error::contract(format!(
            "gradient/parameter/moment shapes differ in group `{}`",
            state.group
        )));
    }
    if let Some(slot) = grad_slots.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient {
            group: state.group.clone(),
            slot,
        });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, g), m), v) in param_slots
        .into_iter()
        .zip(grad_slots)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
