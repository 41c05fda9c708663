//! Layer pipelines with hand-written forward and backward passes.
//!
//! Activations travel as tensors of shape `[batch, features]` (flat) or
//! `[batch, channels, length]` (sequence). A `conv1d` with one input channel
//! accepts a flat `[batch, d]` input as a single-channel sequence.

use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Default batchnorm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default batchnorm variance floor.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm1d {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    Relu,
    Maxpool1d {
        window: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

/// Shape of one sample's activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Flat(usize),
    Seq { channels: usize, length: usize },
}

impl ActShape {
    fn width(self) -> usize {
        match self {
            ActShape::Flat(f) => f,
            ActShape::Seq { channels, length } => channels * length,
        }
    }

    fn dims(self, batch: usize) -> Vec<usize> {
        match self {
            ActShape::Flat(f) => vec![batch, f],
            ActShape::Seq { channels, length } => vec![batch, channels, length],
        }
    }
}

impl LayerSpec {
    /// Output shape for a given input shape, or why the two do not compose.
    fn output_shape(&self, input: ActShape) -> std::result::Result<ActShape, String> {
        use ActShape::*;
        match (*self, input) {
            (LayerSpec::Dense { in_features, out_features }, Flat(f)) => {
                if f != in_features {
                    return Err(format!("dense expects {in_features} inputs, got {f}"));
                }
                if out_features == 0 {
                    return Err("dense needs out_features > 0".into());
                }
                Ok(Flat(out_features))
            }
            (LayerSpec::Dense { .. }, Seq { .. }) => Err("dense needs a flat input; add flatten".into()),
            (
                LayerSpec::Conv1d { in_channels, out_channels, kernel_size, stride, padding },
                shape,
            ) => {
                let (c, l) = match shape {
                    Flat(d) => (1, d),
                    Seq { channels, length } => (channels, length),
                };
                if c != in_channels {
                    return Err(format!("conv1d expects {in_channels} channels, got {c}"));
                }
                if out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return Err("conv1d needs positive out_channels, kernel_size and stride".into());
                }
                if l + 2 * padding < kernel_size {
                    return Err(format!("conv1d kernel {kernel_size} longer than padded input {l}"));
                }
                Ok(Seq {
                    channels: out_channels,
                    length: (l + 2 * padding - kernel_size) / stride + 1,
                })
            }
            (LayerSpec::Batchnorm1d { channels, momentum, epsilon }, shape) => {
                let c = match shape {
                    Flat(f) => f,
                    Seq { channels, .. } => channels,
                };
                if c != channels {
                    return Err(format!("batchnorm expects {channels} channels, got {c}"));
                }
                if !(0.0..=1.0).contains(&momentum) || epsilon <= 0.0 {
                    return Err("batchnorm needs momentum in [0,1] and epsilon > 0".into());
                }
                Ok(shape)
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Dropout { rate }, s) => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate must lie in [0, 1), got {rate}"));
                }
                Ok(s)
            }
            (LayerSpec::Maxpool1d { window }, Seq { channels, length }) => {
                if window == 0 || length < window {
                    return Err(format!("maxpool window {window} does not fit length {length}"));
                }
                Ok(Seq { channels, length: length / window })
            }
            (LayerSpec::Maxpool1d { .. }, Flat(_)) => Err("maxpool needs a sequence input".into()),
            (LayerSpec::Flatten, s) => Ok(Flat(s.width())),
        }
    }
}

/// Validated layer list with fixed input and output widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
    #[serde(skip)]
    shapes: Vec<ActShape>,
}

#[derive(Deserialize)]
struct RawModelSpec {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(raw.layers, raw.input_dim, raw.output_dim)
    }
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>, input_dim: usize, output_dim: usize) -> Result<Self> {
        ensure!(!layers.is_empty(), "model needs at least one layer");
        ensure!(input_dim > 0 && output_dim > 0, "model dimensions must be positive");
        let mut shapes = vec![ActShape::Flat(input_dim)];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Contract(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        ensure!(
            *shapes.last().unwrap() == ActShape::Flat(output_dim),
            "model ends in {:?}, expected {output_dim} flat outputs",
            shapes.last().unwrap()
        );
        Ok(Self { layers, input_dim, output_dim, shapes })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Input shape of layer `i`; index `layers().len()` is the model output.
    pub fn shape_at(&self, i: usize) -> ActShape {
        self.shapes[i]
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Inserts a dropout layer in front of the final layer.
    pub fn with_dropout_before_head(&self, rate: f64) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.insert(layers.len() - 1, LayerSpec::Dropout { rate });
        Self::new(layers, self.input_dim, self.output_dim)
    }

    pub fn parameter_count(&self) -> usize {
        init_params(self, &mut Rng::new(0)).learnable().iter().map(|t| t.len()).sum()
    }
}

/// Three conv blocks (1→32→16→8 channels, kernel 5, padding 2, pool 2)
/// followed by a flatten and one dense map to `d2` outputs.
pub fn build_default_cnn(d1: usize, d2: usize) -> Result<ModelSpec> {
    ensure!(d1 >= 8, "input length {d1} cannot survive three halvings (need >= 8)");
    ensure!(d2 >= 1, "need at least one target");
    let mut layers = Vec::new();
    let mut in_ch = 1;
    let mut length = d1;
    for out_ch in [32, 16, 8] {
        layers.push(LayerSpec::Conv1d {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel_size: 5,
            stride: 1,
            padding: 2,
        });
        layers.push(LayerSpec::Batchnorm1d { channels: out_ch, momentum: BN_MOMENTUM, epsilon: BN_EPSILON });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Maxpool1d { window: 2 });
        in_ch = out_ch;
        length /= 2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { in_features: in_ch * length, out_features: d2 });
    ModelSpec::new(layers, d1, d2)
}

/// Dense/relu stack over the given widths with a linear last layer.
pub fn build_mlp(widths: &[usize]) -> Result<ModelSpec> {
    ensure!(widths.len() >= 2, "an MLP needs at least two widths, got {}", widths.len());
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        layers.push(LayerSpec::Dense { in_features: pair[0], out_features: pair[1] });
        if i + 2 < widths.len() {
            layers.push(LayerSpec::Relu);
        }
    }
    ModelSpec::new(layers, widths[0], *widths.last().unwrap())
}

/// Values owned by one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// `weight` is `[out, in]`.
    Dense { weight: Tensor, bias: Tensor },
    /// `weight` is `[out_channels, in_channels, kernel]`.
    Conv1d { weight: Tensor, bias: Tensor },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    None,
}

/// Role of a learnable tensor; penalties apply to weights only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

impl ParameterSet {
    /// Learnable tensors in canonical order.
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv1d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv1d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { .. } | LayerParams::Conv1d { .. } => {
                    out.extend([ParamRole::Weight, ParamRole::Bias])
                }
                LayerParams::BatchNorm { .. } => out.extend([ParamRole::Scale, ParamRole::Shift]),
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every stored tensor, learnable or not, with its persistent name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |n: &str, t| out.push((format!("layers.{i}.{n}"), t));
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv1d { weight, bias } => {
                    push("weight", weight);
                    push("bias", bias);
                }
                LayerParams::BatchNorm { scale, shift, running_mean, running_var } => {
                    push("scale", scale);
                    push("shift", shift);
                    push("running_mean", running_mean);
                    push("running_var", running_var);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut push = |n: &str, t| out.push((format!("layers.{i}.{n}"), t));
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv1d { weight, bias } => {
                    push("weight", weight);
                    push("bias", bias);
                }
                LayerParams::BatchNorm { scale, shift, running_mean, running_var } => {
                    push("scale", scale);
                    push("shift", shift);
                    push("running_mean", running_mean);
                    push("running_var", running_var);
                }
                LayerParams::None => {}
            }
        }
        out
    }
}

/// Gradients aligned with [`ParameterSet::learnable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            tensors: params.learnable().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        ensure!(self.tensors.len() == other.tensors.len(), "gradient sets differ in length");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            ensure!(a.shape() == b.shape(), "gradient shapes differ");
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Glorot-uniform weights, zero biases, unit batchnorm scale.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> ParameterSet {
    let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = (2.0 * rng.uniform01() - 1.0) * limit;
        }
        t
    };
    let layers = spec
        .layers
        .iter()
        .map(|layer| match *layer {
            LayerSpec::Dense { in_features, out_features } => LayerParams::Dense {
                weight: glorot(&[out_features, in_features], in_features, out_features),
                bias: Tensor::zeros(&[out_features]),
            },
            LayerSpec::Conv1d { in_channels, out_channels, kernel_size, .. } => LayerParams::Conv1d {
                weight: glorot(
                    &[out_channels, in_channels, kernel_size],
                    in_channels * kernel_size,
                    out_channels * kernel_size,
                ),
                bias: Tensor::zeros(&[out_channels]),
            },
            LayerSpec::Batchnorm1d { channels, .. } => LayerParams::BatchNorm {
                scale: Tensor::filled(&[channels], 1.0),
                shift: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::filled(&[channels], 1.0),
            },
            _ => LayerParams::None,
        })
        .collect();
    ParameterSet { layers }
}

enum LayerCache {
    Dense { input: Tensor },
    Conv { input: Tensor },
    BatchNorm { x_hat: Vec<f64>, inv_std: Vec<f64> },
    Relu { input: Tensor },
    MaxPool { argmax: Vec<usize>, input_len: usize },
    Dropout { mask: Vec<f64> },
    Flatten,
}

/// Saved state of one train-mode forward pass, consumed by [`backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<usize> {
    ensure!(
        batch.shape().len() == 2 && batch.row_len() == spec.input_dim,
        "batch shape {:?} does not match input width {}",
        batch.shape(),
        spec.input_dim
    );
    if !batch.is_finite() {
        return Err(Error::Numeric("input batch contains NaN or infinite values".into()));
    }
    Ok(batch.rows())
}

/// (channels, length) view of a per-sample shape for batchnorm/conv.
fn cl(shape: ActShape, conv: bool) -> (usize, usize) {
    match shape {
        ActShape::Flat(f) if conv => (1, f),
        ActShape::Flat(f) => (f, 1),
        ActShape::Seq { channels, length } => (channels, length),
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, inp) = (x.rows(), x.row_len());
    let out = w.shape()[0];
    let mut y = vec![0.0; n * out];
    for s in 0..n {
        let xs = x.row(s);
        for o in 0..out {
            let wr = &w.data()[o * inp..(o + 1) * inp];
            y[s * out + o] = b.data()[o] + wr.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Tensor::new(vec![n, out], y).unwrap()
}

/// Output positions `t` whose tap `t·stride + k − padding` lands inside `0..len`.
#[inline]
fn conv_range(k: usize, stride: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    len: usize,
    out_len: usize,
}

fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.out_ch * g.out_len];
    for s in 0..g.batch {
        for o in 0..g.out_ch {
            let yr = &mut y[(s * g.out_ch + o) * g.out_len..(s * g.out_ch + o + 1) * g.out_len];
            yr.fill(bias[o]);
            for c in 0..g.in_ch {
                let xr = &x[(s * g.in_ch + c) * g.len..(s * g.in_ch + c + 1) * g.len];
                for k in 0..g.kernel {
                    let wv = w[(o * g.in_ch + c) * g.kernel + k];
                    let (lo, hi) = conv_range(k, g.stride, g.padding, g.len, g.out_len);
                    if g.stride == 1 {
                        let off = lo + k - g.padding;
                        for (yv, xv) in yr[lo..hi].iter_mut().zip(&xr[off..off + hi - lo]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            yr[t] += wv * xr[t * g.stride + k - g.padding];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns (dx, dw, db).
fn conv_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    for s in 0..g.batch {
        for o in 0..g.out_ch {
            let dyr = &dy[(s * g.out_ch + o) * g.out_len..(s * g.out_ch + o + 1) * g.out_len];
            db[o] += dyr.iter().sum::<f64>();
            for c in 0..g.in_ch {
                let base = (s * g.in_ch + c) * g.len;
                let xr = &x[base..base + g.len];
                let dxr = &mut dx[base..base + g.len];
                for k in 0..g.kernel {
                    let widx = (o * g.in_ch + c) * g.kernel + k;
                    let wv = w[widx];
                    let (lo, hi) = conv_range(k, g.stride, g.padding, g.len, g.out_len);
                    let mut acc = 0.0;
                    if g.stride == 1 {
                        let off = lo + k - g.padding;
                        let dys = &dyr[lo..hi];
                        for ((d, xv), dxv) in dys.iter().zip(&xr[off..off + hi - lo]).zip(&mut dxr[off..off + hi - lo]) {
                            acc += d * xv;
                            *dxv += wv * d;
                        }
                    } else {
                        for t in lo..hi {
                            let p = t * g.stride + k - g.padding;
                            acc += dyr[t] * xr[p];
                            dxr[p] += wv * dyr[t];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Train-mode forward: batch statistics, sampled dropout masks, running
/// statistics updated in place.
pub fn forward_train(
    spec: &ModelSpec,
    params: &mut ParameterSet,
    batch: &Tensor,
    mut rng: Option<&mut Rng>,
) -> Result<(Tensor, ForwardCache)> {
    let n = check_batch(spec, batch)?;
    ensure!(params.layers.len() == spec.layers.len(), "parameters do not match model layers");
    ensure!(
        rng.is_some() || !spec.has_dropout(),
        "train-mode forward through dropout needs an rng"
    );
    let mut x = batch.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (i, (layer, lp)) in spec.layers.iter().zip(params.layers.iter_mut()).enumerate() {
        let in_shape = spec.shapes[i];
        let out_shape = spec.shapes[i + 1];
        let (y, cache) = match (layer, lp) {
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                let y = dense_forward(&x, weight, bias);
                (y, LayerCache::Dense { input: x })
            }
            (&LayerSpec::Conv1d { stride, padding, kernel_size, in_channels, out_channels }, LayerParams::Conv1d { weight, bias }) => {
                let (_, len) = cl(in_shape, true);
                let ActShape::Seq { length: out_len, .. } = out_shape else { unreachable!() };
                let g = ConvGeom { batch: n, in_ch: in_channels, out_ch: out_channels, kernel: kernel_size, stride, padding, len, out_len };
                let y = conv_forward(x.data(), weight.data(), bias.data(), &g);
                (Tensor::new(out_shape.dims(n), y)?, LayerCache::Conv { input: x })
            }
            (&LayerSpec::Batchnorm1d { channels, momentum, epsilon }, LayerParams::BatchNorm { scale, shift, running_mean, running_var }) => {
                let (_, len) = cl(in_shape, false);
                let m = (n * len) as f64;
                let mut x_hat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; channels];
                let mut y = vec![0.0; x.len()];
                for c in 0..channels {
                    let idx = |s: usize, t: usize| (s * channels + c) * len + t;
                    let mut mean = 0.0;
                    for s in 0..n {
                        for t in 0..len {
                            mean += x.data()[idx(s, t)];
                        }
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for s in 0..n {
                        for t in 0..len {
                            let dv = x.data()[idx(s, t)] - mean;
                            var += dv * dv;
                        }
                    }
                    var /= m;
                    let is = 1.0 / (var + epsilon).sqrt();
                    inv_std[c] = is;
                    let (gm, bt) = (scale.data()[c], shift.data()[c]);
                    for s in 0..n {
                        for t in 0..len {
                            let j = idx(s, t);
                            let h = (x.data()[j] - mean) * is;
                            x_hat[j] = h;
                            y[j] = gm * h + bt;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let rm = &mut running_mean.data_mut()[c];
                    *rm = (1.0 - momentum) * *rm + momentum * mean;
                    let rv = &mut running_var.data_mut()[c];
                    *rv = (1.0 - momentum) * *rv + momentum * unbiased;
                }
                (Tensor::new(out_shape.dims(n), y)?, LayerCache::BatchNorm { x_hat, inv_std })
            }
            (LayerSpec::Relu, _) => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
                (y, LayerCache::Relu { input: x })
            }
            (&LayerSpec::Maxpool1d { window }, _) => {
                let (channels, len) = cl(in_shape, false);
                let out_len = len / window;
                let mut y = Vec::with_capacity(n * channels * out_len);
                let mut argmax = Vec::with_capacity(n * channels * out_len);
                for row in 0..n * channels {
                    let xr = &x.data()[row * len..(row + 1) * len];
                    for t in 0..out_len {
                        let mut best = t * window;
                        for p in t * window + 1..(t + 1) * window {
                            if xr[p] > xr[best] {
                                best = p;
                            }
                        }
                        y.push(xr[best]);
                        argmax.push(row * len + best);
                    }
                }
                (Tensor::new(out_shape.dims(n), y)?, LayerCache::MaxPool { argmax, input_len: x.len() })
            }
            (&LayerSpec::Dropout { rate }, _) => {
                let mut y = x;
                let mut mask = vec![1.0; y.len()];
                if rate > 0.0 {
                    let r = rng.as_deref_mut().expect("checked above");
                    let keep = 1.0 / (1.0 - rate);
                    for (m, v) in mask.iter_mut().zip(y.data_mut()) {
                        *m = if r.uniform01() < rate { 0.0 } else { keep };
                        *v *= *m;
                    }
                }
                (y, LayerCache::Dropout { mask })
            }
            (LayerSpec::Flatten, _) => (x.reshape(&out_shape.dims(n))?, LayerCache::Flatten),
            _ => return Err(Error::Contract(format!("layer {i}: parameters do not match layer kind"))),
        };
        if !y.is_finite() {
            return Err(Error::Numeric(format!("layer {i} produced non-finite activations")));
        }
        x = y;
        caches.push(cache);
    }
    Ok((x, ForwardCache { layers: caches, batch: n }))
}

/// Eval-mode forward: running statistics, identity dropout, no rng.
pub fn forward_eval(spec: &ModelSpec, params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    let n = check_batch(spec, batch)?;
    ensure!(params.layers.len() == spec.layers.len(), "parameters do not match model layers");
    let mut x = batch.clone();
    for (i, (layer, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let in_shape = spec.shapes[i];
        let out_shape = spec.shapes[i + 1];
        x = match (layer, lp) {
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => dense_forward(&x, weight, bias),
            (&LayerSpec::Conv1d { stride, padding, kernel_size, in_channels, out_channels }, LayerParams::Conv1d { weight, bias }) => {
                let (_, len) = cl(in_shape, true);
                let ActShape::Seq { length: out_len, .. } = out_shape else { unreachable!() };
                let g = ConvGeom { batch: n, in_ch: in_channels, out_ch: out_channels, kernel: kernel_size, stride, padding, len, out_len };
                Tensor::new(out_shape.dims(n), conv_forward(x.data(), weight.data(), bias.data(), &g))?
            }
            (&LayerSpec::Batchnorm1d { channels, epsilon, .. }, LayerParams::BatchNorm { scale, shift, running_mean, running_var }) => {
                let (_, len) = cl(in_shape, false);
                let mut y = x;
                for (j, v) in y.data_mut().iter_mut().enumerate() {
                    let c = (j / len) % channels;
                    let is = 1.0 / (running_var.data()[c] + epsilon).sqrt();
                    *v = scale.data()[c] * (*v - running_mean.data()[c]) * is + shift.data()[c];
                }
                y
            }
            (LayerSpec::Relu, _) => {
                let mut y = x;
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
                y
            }
            (&LayerSpec::Maxpool1d { window }, _) => {
                let (channels, len) = cl(in_shape, false);
                let out_len = len / window;
                let mut y = Vec::with_capacity(n * channels * out_len);
                for row in 0..n * channels {
                    let xr = &x.data()[row * len..(row + 1) * len];
                    for t in 0..out_len {
                        y.push(xr[t * window..(t + 1) * window].iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                    }
                }
                Tensor::new(out_shape.dims(n), y)?
            }
            (LayerSpec::Dropout { .. }, _) => x,
            (LayerSpec::Flatten, _) => x.reshape(&out_shape.dims(n))?,
            _ => return Err(Error::Contract(format!("layer {i}: parameters do not match layer kind"))),
        };
        if !x.is_finite() {
            return Err(Error::Numeric(format!("layer {i} produced non-finite activations")));
        }
    }
    Ok(x)
}

/// Parameter gradients of a scalar loss given its gradient w.r.t. the
/// predictions of the forward pass that produced `cache`.
pub fn backward(spec: &ModelSpec, params: &ParameterSet, cache: ForwardCache, upstream: &Tensor) -> Result<Gradients> {
    ensure!(
        cache.layers.len() == spec.layers.len() && params.layers.len() == spec.layers.len(),
        "forward cache does not belong to this model"
    );
    let n = cache.batch;
    ensure!(
        upstream.shape() == [n, spec.output_dim],
        "upstream gradient shape {:?} does not match forward output [{n}, {}]",
        upstream.shape(),
        spec.output_dim
    );
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); spec.layers.len()];
    let mut dy = upstream.data().to_vec();
    for (i, lc) in cache.layers.into_iter().enumerate().rev() {
        let in_shape = spec.shapes[i];
        let out_shape = spec.shapes[i + 1];
        dy = match (&spec.layers[i], &params.layers[i], lc) {
            (LayerSpec::Dense { in_features, out_features }, LayerParams::Dense { weight, .. }, LayerCache::Dense { input }) => {
                let (inp, out) = (*in_features, *out_features);
                let mut dw = vec![0.0; out * inp];
                let mut db = vec![0.0; out];
                let mut dx = vec![0.0; n * inp];
                for s in 0..n {
                    let xs = input.row(s);
                    for o in 0..out {
                        let g = dy[s * out + o];
                        db[o] += g;
                        let wr = &weight.data()[o * inp..(o + 1) * inp];
                        let dwr = &mut dw[o * inp..(o + 1) * inp];
                        let dxs = &mut dx[s * inp..(s + 1) * inp];
                        for k in 0..inp {
                            dwr[k] += g * xs[k];
                            dxs[k] += g * wr[k];
                        }
                    }
                }
                per_layer[i] = vec![Tensor::new(vec![out, inp], dw)?, Tensor::new(vec![out], db)?];
                dx
            }
            (&LayerSpec::Conv1d { in_channels, out_channels, kernel_size, stride, padding }, LayerParams::Conv1d { weight, .. }, LayerCache::Conv { input }) => {
                let (_, len) = cl(in_shape, true);
                let ActShape::Seq { length: out_len, .. } = out_shape else { unreachable!() };
                let g = ConvGeom { batch: n, in_ch: in_channels, out_ch: out_channels, kernel: kernel_size, stride, padding, len, out_len };
                let (dx, dw, db) = conv_backward(input.data(), weight.data(), &dy, &g);
                per_layer[i] = vec![Tensor::new(weight.shape().to_vec(), dw)?, Tensor::new(vec![out_channels], db)?];
                dx
            }
            (&LayerSpec::Batchnorm1d { channels, .. }, LayerParams::BatchNorm { scale, .. }, LayerCache::BatchNorm { x_hat, inv_std }) => {
                let (_, len) = cl(in_shape, false);
                let m = (n * len) as f64;
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dx = vec![0.0; dy.len()];
                for c in 0..channels {
                    let idx = |s: usize, t: usize| (s * channels + c) * len + t;
                    let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
                    for s in 0..n {
                        for t in 0..len {
                            let j = idx(s, t);
                            sum_dy += dy[j];
                            sum_dy_xh += dy[j] * x_hat[j];
                        }
                    }
                    dgamma[c] = sum_dy_xh;
                    dbeta[c] = sum_dy;
                    let k = scale.data()[c] * inv_std[c] / m;
                    for s in 0..n {
                        for t in 0..len {
                            let j = idx(s, t);
                            dx[j] = k * (m * dy[j] - sum_dy - x_hat[j] * sum_dy_xh);
                        }
                    }
                }
                per_layer[i] = vec![Tensor::new(vec![channels], dgamma)?, Tensor::new(vec![channels], dbeta)?];
                dx
            }
            (LayerSpec::Relu, _, LayerCache::Relu { input }) => {
                dy.iter().zip(input.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect()
            }
            (LayerSpec::Maxpool1d { .. }, _, LayerCache::MaxPool { argmax, input_len }) => {
                let mut dx = vec![0.0; input_len];
                for (g, &j) in dy.iter().zip(&argmax) {
                    dx[j] += g;
                }
                dx
            }
            (LayerSpec::Dropout { .. }, _, LayerCache::Dropout { mask }) => {
                dy.iter().zip(&mask).map(|(g, m)| g * m).collect()
            }
            (LayerSpec::Flatten, _, LayerCache::Flatten) => dy,
            _ => return Err(Error::Contract(format!("layer {i}: stale forward cache"))),
        };
    }
    let tensors: Vec<Tensor> = per_layer.into_iter().flatten().collect();
    let grads = Gradients { tensors };
    if !grads.is_finite() {
        return Err(Error::Numeric("backward produced non-finite gradients".into()));
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    L1,
    L2,
}

/// `strength·Σ|θ|` or `strength·Σθ²` over dense and conv weights; biases
/// and batchnorm parameters are exempt. L1 uses `sign(0) = 0`.
pub fn param_penalty(params: &ParameterSet, kind: PenaltyKind, strength: f64) -> Result<(f64, Gradients)> {
    ensure!(strength >= 0.0 && strength.is_finite(), "penalty strength must be >= 0, got {strength}");
    let mut grads = Gradients::zeros_like(params);
    let mut value = 0.0;
    for ((t, role), g) in params.learnable().into_iter().zip(params.roles()).zip(grads.tensors.iter_mut()) {
        if role != ParamRole::Weight {
            continue;
        }
        for (&w, gv) in t.data().iter().zip(g.data_mut()) {
            match kind {
                PenaltyKind::L1 => {
                    value += w.abs();
                    *gv = if w > 0.0 { strength } else if w < 0.0 { -strength } else { 0.0 };
                }
                PenaltyKind::L2 => {
                    value += w * w;
                    *gv = 2.0 * strength * w;
                }
            }
        }
    }
    Ok((strength * value, grads))
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedModelDoc {
    spec: ModelSpec,
    params: Vec<NamedArray>,
    scaler: Option<Scaler>,
}

/// A model with its parameters and the feature scaler fit during training.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub scaler: Option<Scaler>,
}

impl SavedModel {
    pub fn to_json(&self) -> Result<String> {
        let doc = SavedModelDoc {
            spec: self.spec.clone(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
            scaler: self.scaler.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SavedModelDoc = serde_json::from_str(text)?;
        let mut params = init_params(&doc.spec, &mut Rng::new(0));
        let mut stored: std::collections::HashMap<String, NamedArray> =
            doc.params.into_iter().map(|a| (a.name.clone(), a)).collect();
        for (name, slot) in params.named_mut() {
            let arr = stored
                .remove(&name)
                .ok_or_else(|| Error::Load(format!("model file lacks parameter {name}")))?;
            ensure!(arr.shape == slot.shape(), "parameter {name} has shape {:?}, expected {:?}", arr.shape, slot.shape());
            *slot = Tensor::new(arr.shape, arr.data)?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Load(format!("model file has unknown parameter {extra}")));
        }
        if let Some(s) = &doc.scaler {
            ensure!(s.mean.len() == doc.spec.input_dim(), "scaler width does not match model input");
        }
        Ok(Self { spec: doc.spec, params, scaler: doc.scaler })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Load(format!("{}: {j}", path.display())),
            other => other,
        })
    }
}
