//! Model build, forward/backward passes, and plain SGD.
//!
//! Batch norm: the training forward normalizes with the current batch's
//! statistics and backward differentiates through them; the rolling
//! mean/variance buffers track the batch statistics with momentum 0.99
//! and are what inference normalizes with. The rolling buffers carry
//! gradient buffers like every other parameter buffer — their training
//! gradient is genuinely zero (the training pass never reads them), and
//! the finite-difference oracle confirms exactly that. Only weights,
//! biases and scales take SGD steps. Both passes are pure functions of
//! (parameters, batch); the rolling fold happens at the end of backward.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

use super::config::{Activation, LayerSpec, NetConfig};
use crate::rng::SplitMix64;

/// Parameter buffers per parameterized layer: W, b, scale, mean, var.
pub const PARAM_BUFFERS: usize = 5;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;
const LEAKY_SLOPE: f64 = 0.1;
const VAR_FLOOR: f64 = 1e-6;

pub trait Scalar:
    ndarray::LinalgScalar + Float + FromPrimitive + std::fmt::Debug + std::fmt::Display
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant conversion")
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called before forward")]
    ForwardRequired,
    #[error("batch shape mismatch: {0}")]
    BatchShape(String),
}

/// One training batch: dense inputs and one-hot labels.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub inputs: Vec<F>,
    pub labels: Vec<F>,
    pub batch: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl<F: Scalar> Batch<F> {
    pub fn new(
        inputs: Vec<F>,
        labels: Vec<F>,
        batch: usize,
        input_dim: usize,
        classes: usize,
    ) -> Result<Batch<F>, NnError> {
        if inputs.len() != batch * input_dim || labels.len() != batch * classes {
            return Err(NnError::BatchShape(format!(
                "inputs {} labels {} for batch {batch} x ({input_dim}, {classes})",
                inputs.len(),
                labels.len()
            )));
        }
        let tol = c::<F>(1e-4);
        for row in labels.chunks(classes) {
            let sum = row.iter().fold(F::zero(), |a, &b| a + b);
            if (sum - F::one()).abs() > tol {
                return Err(NnError::BatchShape("label row does not sum to 1".into()));
            }
        }
        Ok(Batch {
            inputs,
            labels,
            batch,
            input_dim,
            classes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub scale: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> ParamSet<F> {
    fn zeros_like(other: &ParamSet<F>) -> ParamSet<F> {
        ParamSet {
            w: vec![F::zero(); other.w.len()],
            b: vec![F::zero(); other.b.len()],
            scale: vec![F::zero(); other.scale.len()],
            mean: vec![F::zero(); other.mean.len()],
            var: vec![F::zero(); other.var.len()],
        }
    }

    pub fn buffers(&self) -> [&[F]; PARAM_BUFFERS] {
        [&self.w, &self.b, &self.scale, &self.mean, &self.var]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<F>; PARAM_BUFFERS] {
        [
            &mut self.w,
            &mut self.b,
            &mut self.scale,
            &mut self.mean,
            &mut self.var,
        ]
    }
}

/// Shape as (channels, height, width).
type Shape = (usize, usize, usize);

fn volume(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

pub struct Layer<F> {
    pub spec: LayerSpec,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub params: Option<ParamSet<F>>,
    pub grads: Option<ParamSet<F>>,
    // Forward/backward workspaces, sized on first use for a batch.
    out: Vec<F>,
    xhat: Vec<F>,
    cols: Vec<F>,
    pool_idx: Vec<u32>,
    delta_in: Vec<F>,
    // Per-channel batch statistics of the last training forward.
    bn_mu: Vec<F>,
    bn_s: Vec<F>,
}

impl<F: Scalar> Layer<F> {
    pub fn output(&self) -> &[F] {
        &self.out
    }

    pub fn param_buffer_count(&self) -> usize {
        if self.params.is_some() {
            PARAM_BUFFERS
        } else {
            0
        }
    }
}

pub struct Model<F> {
    pub input: Shape,
    pub classes: usize,
    layers: Vec<Layer<F>>,
    ws_batch: usize,
    forward_done: bool,
}

fn mat<F: Scalar>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn mat_mut<F: Scalar>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn activate<F: Scalar>(a: F, kind: Activation) -> F {
    match kind {
        Activation::Leaky => {
            if a > F::zero() {
                a
            } else {
                a * c(LEAKY_SLOPE)
            }
        }
        Activation::Relu => {
            if a > F::zero() {
                a
            } else {
                F::zero()
            }
        }
        Activation::Linear => a,
    }
}

/// Activation gradient recovered from the output value (all three kinds
/// preserve the sign of their pre-activation).
fn activation_grad<F: Scalar>(out: F, kind: Activation) -> F {
    match kind {
        Activation::Leaky => {
            if out > F::zero() {
                F::one()
            } else {
                c(LEAKY_SLOPE)
            }
        }
        Activation::Relu => {
            if out > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
        Activation::Linear => F::one(),
    }
}

impl<F: Scalar> Model<F> {
    /// Build a model from a validated config, parameters initialized
    /// deterministically from the seed: weights uniform in ±sqrt(2/fan_in),
    /// biases 0, batch-norm scales 1, means 0, variances 1.
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Model<F>, NnError> {
        let mut rng = SplitMix64::new(seed);
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut shape = cfg.input;
        for spec in &cfg.layers {
            let (out_shape, params) = match *spec {
                LayerSpec::Convolutional {
                    filters,
                    size,
                    stride,
                    ..
                } => {
                    let (ci, h, w) = shape;
                    if size > h || size > w {
                        return Err(NnError::Shape(format!(
                            "conv kernel {size} exceeds input {h}x{w}"
                        )));
                    }
                    let oh = (h - size) / stride + 1;
                    let ow = (w - size) / stride + 1;
                    let fan_in = ci * size * size;
                    let params = init_params(&mut rng, filters * fan_in, filters, fan_in);
                    ((filters, oh, ow), Some(params))
                }
                LayerSpec::Maxpool { size, stride } => {
                    let (ci, h, w) = shape;
                    if size > h || size > w {
                        return Err(NnError::Shape(format!(
                            "maxpool size {size} exceeds input {h}x{w}"
                        )));
                    }
                    let oh = (h - size) / stride + 1;
                    let ow = (w - size) / stride + 1;
                    ((ci, oh, ow), None)
                }
                LayerSpec::Connected { outputs, .. } => {
                    let fan_in = volume(shape);
                    let params = init_params(&mut rng, outputs * fan_in, outputs, fan_in);
                    ((outputs, 1, 1), Some(params))
                }
                LayerSpec::Softmax => (shape, None),
            };
            let grads = params.as_ref().map(ParamSet::zeros_like);
            layers.push(Layer {
                spec: *spec,
                in_shape: shape,
                out_shape,
                params,
                grads,
                out: Vec::new(),
                xhat: Vec::new(),
                cols: Vec::new(),
                pool_idx: Vec::new(),
                delta_in: Vec::new(),
                bn_mu: Vec::new(),
                bn_s: Vec::new(),
            });
            shape = out_shape;
        }
        let classes = volume(shape);
        Ok(Model {
            input: cfg.input,
            classes,
            layers,
            ws_batch: 0,
            forward_done: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.params.is_some()).count()
    }

    /// Total parameter bytes across all buffers, at 4 bytes per value.
    pub fn param_bytes(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.buffers().iter().map(|b| b.len() * 4).sum::<usize>())
            .sum()
    }

    fn ensure_ws(&mut self, batch: usize) {
        if self.ws_batch == batch {
            return;
        }
        for layer in &mut self.layers {
            let out_dim = volume(layer.out_shape);
            layer.out = vec![F::zero(); batch * out_dim];
            layer.delta_in = vec![F::zero(); batch * volume(layer.in_shape)];
            match layer.spec {
                LayerSpec::Convolutional { size, .. } => {
                    let (ci, _, _) = layer.in_shape;
                    let (_, oh, ow) = layer.out_shape;
                    layer.cols = vec![F::zero(); batch * ci * size * size * oh * ow];
                    layer.xhat = vec![F::zero(); batch * out_dim];
                    layer.bn_mu = vec![F::zero(); layer.out_shape.0];
                    layer.bn_s = vec![F::zero(); layer.out_shape.0];
                }
                LayerSpec::Connected { .. } => {
                    layer.xhat = vec![F::zero(); batch * out_dim];
                    layer.bn_mu = vec![F::zero(); layer.out_shape.0];
                    layer.bn_s = vec![F::zero(); layer.out_shape.0];
                }
                LayerSpec::Maxpool { .. } => {
                    layer.pool_idx = vec![0; batch * out_dim];
                }
                LayerSpec::Softmax => {}
            }
        }
        self.ws_batch = batch;
    }

    fn run_layers(&mut self, inputs: &[F], batch: usize, training: bool) -> Result<(), NnError> {
        let in_dim = volume(self.input);
        if inputs.len() != batch * in_dim {
            return Err(NnError::BatchShape(format!(
                "{} inputs for batch {batch} x {in_dim}",
                inputs.len()
            )));
        }
        self.ensure_ws(batch);
        for i in 0..self.layers.len() {
            let (before, rest) = self.layers.split_at_mut(i);
            let input: &[F] = if i == 0 { inputs } else { &before[i - 1].out };
            rest[0].forward(input, batch, training);
        }
        Ok(())
    }

    /// Run the layers in inference mode (rolling batch-norm statistics)
    /// and return the softmax probabilities, batch-major.
    pub fn infer_batch(&mut self, inputs: &[F], batch: usize) -> Result<&[F], NnError> {
        self.run_layers(inputs, batch, false)?;
        Ok(&self.layers.last().expect("validated config").out)
    }

    /// Forward pass: returns the mean cross-entropy loss over the batch.
    /// Output probabilities stay available via `outputs()`.
    pub fn forward(&mut self, batch: &Batch<F>) -> Result<F, NnError> {
        if batch.input_dim != volume(self.input) || batch.classes != self.classes {
            return Err(NnError::BatchShape(format!(
                "batch ({}, {}) vs model ({}, {})",
                batch.input_dim,
                batch.classes,
                volume(self.input),
                self.classes
            )));
        }
        self.run_layers(&batch.inputs, batch.batch, true)?;
        let probs = &self.layers.last().unwrap().out;
        let mut loss = F::zero();
        let floor = F::min_positive_value();
        for (row, labels) in probs
            .chunks(self.classes)
            .zip(batch.labels.chunks(self.classes))
        {
            for (p, y) in row.iter().zip(labels) {
                if *y > F::zero() {
                    loss = loss - *y * p.max(floor).ln();
                }
            }
        }
        self.forward_done = true;
        Ok(loss / c(batch.batch as f64))
    }

    pub fn outputs(&self) -> &[F] {
        &self.layers.last().expect("validated config").out
    }

    /// Backward pass: populates the gradient buffers of every
    /// parameterized layer and folds the batch statistics into the
    /// rolling batch-norm estimates.
    pub fn backward(&mut self, batch: &Batch<F>) -> Result<(), NnError> {
        if !self.forward_done || self.ws_batch != batch.batch {
            return Err(NnError::ForwardRequired);
        }
        let n = self.layers.len();
        // Softmax + cross-entropy: delta on the logits is (p - y)/batch.
        {
            let softmax = &mut self.layers[n - 1];
            let scale = F::one() / c(batch.batch as f64);
            for (d, (p, y)) in softmax
                .delta_in
                .iter_mut()
                .zip(softmax.out.iter().zip(batch.labels.iter()))
            {
                *d = (*p - *y) * scale;
            }
        }
        for i in (0..n - 1).rev() {
            let (left, right) = self.layers.split_at_mut(i + 1);
            let delta_out = &right[0].delta_in;
            let (before, at) = left.split_at_mut(i);
            let input: &[F] = if i == 0 {
                &batch.inputs
            } else {
                &before[i - 1].out
            };
            at[0].backward(input, delta_out, batch.batch);
        }
        Ok(())
    }

    /// Plain SGD step on the learned buffers (weights, biases, scales),
    /// p ← p − lr·∇p; every gradient buffer is cleared afterwards. The
    /// rolling mean/variance buffers are untouched here — backward's
    /// momentum fold is their only updater.
    pub fn sgd_update(&mut self, lr: F) {
        for layer in &mut self.layers {
            let (Some(params), Some(grads)) = (layer.params.as_mut(), layer.grads.as_mut()) else {
                continue;
            };
            for (pv, gv) in params.w.iter_mut().zip(grads.w.iter()) {
                *pv = *pv - lr * *gv;
            }
            for (pv, gv) in params.b.iter_mut().zip(grads.b.iter()) {
                *pv = *pv - lr * *gv;
            }
            for (pv, gv) in params.scale.iter_mut().zip(grads.scale.iter()) {
                *pv = *pv - lr * *gv;
            }
            for g in grads.buffers_mut() {
                g.iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    /// forward + backward + sgd_update; returns the pre-update loss.
    pub fn train_iteration(&mut self, batch: &Batch<F>, lr: F) -> Result<F, NnError> {
        let loss = self.forward(batch)?;
        self.backward(batch)?;
        self.sgd_update(lr);
        Ok(loss)
    }

    /// Class of a single sample; ties break to the lowest index.
    pub fn predict(&mut self, sample: &[F]) -> Result<usize, NnError> {
        let probs = self.infer_batch(sample, 1)?;
        Ok(argmax(probs))
    }
}

fn init_params<F: Scalar>(
    rng: &mut SplitMix64,
    w_len: usize,
    channels: usize,
    fan_in: usize,
) -> ParamSet<F> {
    let limit = (2.0 / fan_in as f64).sqrt();
    let w = (0..w_len)
        .map(|_| c(rng.range_f64(-limit, limit)))
        .collect();
    ParamSet {
        w,
        b: vec![F::zero(); channels],
        scale: vec![F::one(); channels],
        mean: vec![F::zero(); channels],
        var: vec![F::one(); channels],
    }
}

impl<F: Scalar> Layer<F> {
    fn forward(&mut self, input: &[F], batch: usize, training: bool) {
        match self.spec {
            LayerSpec::Convolutional {
                filters,
                size,
                stride,
                activation,
                batch_norm,
            } => self.forward_conv(
                input, batch, filters, size, stride, activation, batch_norm, training,
            ),
            LayerSpec::Maxpool { size, stride } => self.forward_maxpool(input, batch, size, stride),
            LayerSpec::Connected {
                outputs,
                activation,
                batch_norm,
            } => self.forward_connected(input, batch, outputs, activation, batch_norm, training),
            LayerSpec::Softmax => self.forward_softmax(input, batch),
        }
    }

    fn backward(&mut self, input: &[F], delta_out: &[F], batch: usize) {
        match self.spec {
            LayerSpec::Convolutional {
                filters,
                size,
                stride,
                activation,
                batch_norm,
            } => self.backward_conv(
                input, delta_out, batch, filters, size, stride, activation, batch_norm,
            ),
            LayerSpec::Maxpool { size, stride } => {
                self.backward_maxpool(delta_out, batch, size, stride)
            }
            LayerSpec::Connected {
                outputs,
                activation,
                batch_norm,
            } => self.backward_connected(input, delta_out, batch, outputs, activation, batch_norm),
            LayerSpec::Softmax => unreachable!("softmax delta is seeded by the model"),
        }
    }

    // ------------------------------------------------------------------
    // convolutional
    // ------------------------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn forward_conv(
        &mut self,
        input: &[F],
        batch: usize,
        filters: usize,
        size: usize,
        stride: usize,
        activation: Activation,
        batch_norm: bool,
        training: bool,
    ) {
        let (ci, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let ckk = ci * size * size;
        let hw = oh * ow;
        let params = self.params.as_ref().expect("conv has params");

        for b in 0..batch {
            let in_b = &input[b * ci * h * w..(b + 1) * ci * h * w];
            let cols_b = &mut self.cols[b * ckk * hw..(b + 1) * ckk * hw];
            im2col(in_b, ci, h, w, size, stride, oh, ow, cols_b);
            let wmat = mat(&params.w, filters, ckk);
            let cmat = mat(cols_b, ckk, hw);
            let mut zmat = mat_mut(
                &mut self.out[b * filters * hw..(b + 1) * filters * hw],
                filters,
                hw,
            );
            general_mat_mul(F::one(), &wmat, &cmat, F::zero(), &mut zmat);
        }

        if !batch_norm {
            // Plain affine path: bias and activation only.
            for f in 0..filters {
                let beta = params.b[f];
                for b in 0..batch {
                    let base = b * filters * hw + f * hw;
                    for i in 0..hw {
                        self.out[base + i] = activate(self.out[base + i] + beta, activation);
                    }
                }
            }
            return;
        }

        // Batch norm per filter: batch statistics while training (cached
        // for backward), rolling statistics at inference. Then bias and
        // activation.
        let count = c::<F>((batch * hw) as f64);
        for f in 0..filters {
            let (mean, s) = if training {
                let mut sum = F::zero();
                let mut sum2 = F::zero();
                for b in 0..batch {
                    let base = b * filters * hw + f * hw;
                    for i in 0..hw {
                        let z = self.out[base + i];
                        sum = sum + z;
                        sum2 = sum2 + z * z;
                    }
                }
                let mean = sum / count;
                let var = (sum2 / count - mean * mean).max(F::zero());
                let s = (var + c(BN_EPS)).sqrt();
                self.bn_mu[f] = mean;
                self.bn_s[f] = s;
                (mean, s)
            } else {
                (params.mean[f], (params.var[f] + c(BN_EPS)).sqrt())
            };
            let inv = s.recip();
            let gamma = params.scale[f];
            let beta = params.b[f];
            for b in 0..batch {
                let base = b * filters * hw + f * hw;
                for i in 0..hw {
                    let xh = (self.out[base + i] - mean) * inv;
                    self.xhat[base + i] = xh;
                    self.out[base + i] = activate(gamma * xh + beta, activation);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &mut self,
        _input: &[F], // columns were cached by the forward pass
        delta_out: &[F],
        batch: usize,
        filters: usize,
        size: usize,
        stride: usize,
        activation: Activation,
        batch_norm: bool,
    ) {
        let (ci, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let ckk = ci * size * size;
        let hw = oh * ow;
        let params = self.params.as_mut().expect("conv has params");
        let grads = self.grads.as_mut().expect("conv has grads");

        // Deltas through activation and batch norm (batch statistics, so
        // mean and variance carry gradient back into every element), then
        // the rolling-estimate fold. The rolling buffers themselves have
        // zero training gradient: the training pass never reads them.
        let mut delta_z = vec![F::zero(); batch * filters * hw];
        let count = c::<F>((batch * hw) as f64);
        let m = c::<F>(BN_MOMENTUM);
        if !batch_norm {
            for f in 0..filters {
                let mut sum_d = F::zero();
                for b in 0..batch {
                    let base = b * filters * hw + f * hw;
                    for i in 0..hw {
                        let d =
                            delta_out[base + i] * activation_grad(self.out[base + i], activation);
                        sum_d = sum_d + d;
                        delta_z[base + i] = d;
                    }
                }
                grads.b[f] = sum_d;
                grads.scale[f] = F::zero();
                grads.mean[f] = F::zero();
                grads.var[f] = F::zero();
            }
        } else {
            for f in 0..filters {
                let s = self.bn_s[f];
                let gamma = params.scale[f];
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for b in 0..batch {
                    let base = b * filters * hw + f * hw;
                    for i in 0..hw {
                        let d =
                            delta_out[base + i] * activation_grad(self.out[base + i], activation);
                        let xh = self.xhat[base + i];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh;
                        delta_z[base + i] = d;
                    }
                }
                grads.scale[f] = sum_dx;
                grads.b[f] = sum_d;
                grads.mean[f] = F::zero();
                grads.var[f] = F::zero();
                let k = gamma / (count * s);
                for b in 0..batch {
                    let base = b * filters * hw + f * hw;
                    for i in 0..hw {
                        let d = delta_z[base + i];
                        delta_z[base + i] = k * (d * count - sum_d - self.xhat[base + i] * sum_dx);
                    }
                }

                let batch_var = (s * s - c(BN_EPS)).max(F::zero());
                params.mean[f] = m * params.mean[f] + (F::one() - m) * self.bn_mu[f];
                params.var[f] = (m * params.var[f] + (F::one() - m) * batch_var).max(c(VAR_FLOOR));
            }
        }

        // Weight gradients and input deltas via the cached columns.
        self.delta_in.iter_mut().for_each(|d| *d = F::zero());
        let mut dcols = vec![F::zero(); ckk * hw];
        for b in 0..batch {
            let cols_b = &self.cols[b * ckk * hw..(b + 1) * ckk * hw];
            let dz = mat(
                &delta_z[b * filters * hw..(b + 1) * filters * hw],
                filters,
                hw,
            );
            // dW += dz · colsᵀ
            let mut dw = mat_mut(&mut grads.w, filters, ckk);
            general_mat_mul(
                F::one(),
                &dz,
                &mat(cols_b, ckk, hw).reversed_axes(),
                F::one(),
                &mut dw,
            );
            // dcols = Wᵀ · dz
            let wmat = mat(&params.w, filters, ckk);
            let mut dc = mat_mut(&mut dcols, ckk, hw);
            general_mat_mul(F::one(), &wmat.reversed_axes(), &dz, F::zero(), &mut dc);
            col2im(
                &dcols,
                ci,
                h,
                w,
                size,
                stride,
                oh,
                ow,
                &mut self.delta_in[b * ci * h * w..(b + 1) * ci * h * w],
            );
        }
    }

    // ------------------------------------------------------------------
    // maxpool
    // ------------------------------------------------------------------

    fn forward_maxpool(&mut self, input: &[F], batch: usize, size: usize, stride: usize) {
        let (ci, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        for b in 0..batch {
            for chan in 0..ci {
                let in_base = b * ci * h * w + chan * h * w;
                let out_base = b * ci * oh * ow + chan * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_at = 0u32;
                        for ky in 0..size {
                            for kx in 0..size {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let v = input[in_base + iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_at = (iy * w + ix) as u32;
                                }
                            }
                        }
                        self.out[out_base + oy * ow + ox] = best;
                        self.pool_idx[out_base + oy * ow + ox] = best_at;
                    }
                }
            }
        }
    }

    fn backward_maxpool(&mut self, delta_out: &[F], batch: usize, _size: usize, _stride: usize) {
        let (ci, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        self.delta_in.iter_mut().for_each(|d| *d = F::zero());
        for b in 0..batch {
            for chan in 0..ci {
                let in_base = b * ci * h * w + chan * h * w;
                let out_base = b * ci * oh * ow + chan * oh * ow;
                for i in 0..oh * ow {
                    let src = self.pool_idx[out_base + i] as usize;
                    self.delta_in[in_base + src] =
                        self.delta_in[in_base + src] + delta_out[out_base + i];
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // connected
    // ------------------------------------------------------------------

    fn forward_connected(
        &mut self,
        input: &[F],
        batch: usize,
        outputs: usize,
        activation: Activation,
        batch_norm: bool,
        training: bool,
    ) {
        let n = volume(self.in_shape);
        let params = self.params.as_ref().expect("connected has params");
        // z = X(bs×n) · Wᵀ(n×m)
        let x = mat(input, batch, n);
        let wt = mat(&params.w, outputs, n).reversed_axes();
        let mut z = mat_mut(&mut self.out, batch, outputs);
        general_mat_mul(F::one(), &x, &wt, F::zero(), &mut z);

        if !batch_norm {
            for j in 0..outputs {
                let beta = params.b[j];
                for b in 0..batch {
                    let at = b * outputs + j;
                    self.out[at] = activate(self.out[at] + beta, activation);
                }
            }
            return;
        }

        let count = c::<F>(batch as f64);
        for j in 0..outputs {
            let (mean, s) = if training {
                let mut sum = F::zero();
                let mut sum2 = F::zero();
                for b in 0..batch {
                    let v = self.out[b * outputs + j];
                    sum = sum + v;
                    sum2 = sum2 + v * v;
                }
                let mean = sum / count;
                let var = (sum2 / count - mean * mean).max(F::zero());
                let s = (var + c(BN_EPS)).sqrt();
                self.bn_mu[j] = mean;
                self.bn_s[j] = s;
                (mean, s)
            } else {
                (params.mean[j], (params.var[j] + c(BN_EPS)).sqrt())
            };
            let inv = s.recip();
            let gamma = params.scale[j];
            let beta = params.b[j];
            for b in 0..batch {
                let at = b * outputs + j;
                let xh = (self.out[at] - mean) * inv;
                self.xhat[at] = xh;
                self.out[at] = activate(gamma * xh + beta, activation);
            }
        }
    }

    fn backward_connected(
        &mut self,
        input: &[F],
        delta_out: &[F],
        batch: usize,
        outputs: usize,
        activation: Activation,
        batch_norm: bool,
    ) {
        let n = volume(self.in_shape);
        let params = self.params.as_mut().expect("connected has params");
        let grads = self.grads.as_mut().expect("connected has grads");

        let mut delta_z = vec![F::zero(); batch * outputs];
        let count = c::<F>(batch as f64);
        let m = c::<F>(BN_MOMENTUM);
        if !batch_norm {
            for j in 0..outputs {
                let mut sum_d = F::zero();
                for b in 0..batch {
                    let at = b * outputs + j;
                    let d = delta_out[at] * activation_grad(self.out[at], activation);
                    sum_d = sum_d + d;
                    delta_z[at] = d;
                }
                grads.b[j] = sum_d;
                grads.scale[j] = F::zero();
                grads.mean[j] = F::zero();
                grads.var[j] = F::zero();
            }
        } else {
            for j in 0..outputs {
                let s = self.bn_s[j];
                let gamma = params.scale[j];
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for b in 0..batch {
                    let at = b * outputs + j;
                    let d = delta_out[at] * activation_grad(self.out[at], activation);
                    sum_d = sum_d + d;
                    sum_dx = sum_dx + d * self.xhat[at];
                    delta_z[at] = d;
                }
                grads.scale[j] = sum_dx;
                grads.b[j] = sum_d;
                grads.mean[j] = F::zero();
                grads.var[j] = F::zero();
                let k = gamma / (count * s);
                for b in 0..batch {
                    let at = b * outputs + j;
                    delta_z[at] = k * (delta_z[at] * count - sum_d - self.xhat[at] * sum_dx);
                }

                let batch_var = (s * s - c(BN_EPS)).max(F::zero());
                params.mean[j] = m * params.mean[j] + (F::one() - m) * self.bn_mu[j];
                params.var[j] = (m * params.var[j] + (F::one() - m) * batch_var).max(c(VAR_FLOOR));
            }
        }

        // dW = δᵀ(m×bs) · X(bs×n); δX = δ(bs×m) · W(m×n)
        let dz = mat(&delta_z, batch, outputs);
        let x = mat(input, batch, n);
        let mut dw = mat_mut(&mut grads.w, outputs, n);
        general_mat_mul(F::one(), &dz.reversed_axes(), &x, F::one(), &mut dw);
        let wmat = mat(&params.w, outputs, n);
        let mut dx = mat_mut(&mut self.delta_in, batch, n);
        general_mat_mul(F::one(), &dz, &wmat, F::zero(), &mut dx);
    }

    // ------------------------------------------------------------------
    // softmax
    // ------------------------------------------------------------------

    fn forward_softmax(&mut self, input: &[F], batch: usize) {
        let dim = volume(self.in_shape);
        for b in 0..batch {
            let row_in = &input[b * dim..(b + 1) * dim];
            let row_out = &mut self.out[b * dim..(b + 1) * dim];
            let max = row_in.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let mut sum = F::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    input: &[F],
    ci: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    let hw = oh * ow;
    let mut row = 0;
    for chan in 0..ci {
        for ky in 0..size {
            for kx in 0..size {
                let base = chan * h * w + ky * w + kx;
                for oy in 0..oh {
                    let src = base + oy * stride * w;
                    let dst = row * hw + oy * ow;
                    for ox in 0..ow {
                        cols[dst + ox] = input[src + ox * stride];
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    ci: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    out: &mut [F],
) {
    let hw = oh * ow;
    let mut row = 0;
    for chan in 0..ci {
        for ky in 0..size {
            for kx in 0..size {
                let base = chan * h * w + ky * w + kx;
                for oy in 0..oh {
                    let dst = base + oy * stride * w;
                    let src = row * hw + oy * ow;
                    for ox in 0..ow {
                        out[dst + ox * stride] = out[dst + ox * stride] + cols[src + ox];
                    }
                }
                row += 1;
            }
        }
    }
}
