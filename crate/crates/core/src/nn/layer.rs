use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of the smooth leaky activation.
pub const LEAKY_SLOPE: f64 = 0.2;

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;
const PAD: u32 = u32::MAX;

/// Declarative description of a layer. Sparse-gradient kinds are representable
/// so that configuration can name them, but they are rejected at build time.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// 3x3x3 kernel, stride 2, zero padding 1.
    ConvStrided {
        in_channels: usize,
        out_channels: usize,
        in_dims: [usize; 3],
    },
    SmoothLeaky,
    SoftmaxRows { arities: Vec<usize> },
    MaxPool { size: usize },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    ConvStrided,
    Activation,
    SoftmaxRows,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::ConvStrided => "conv-strided",
            LayerKind::Activation => "activation",
            LayerKind::SoftmaxRows => "softmax-row",
        }
    }
}

/// Precomputed receptive-field table for a strided 3-D convolution.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    /// For each output position, the 27 input voxel offsets (or `PAD`).
    taps: Vec<u32>,
}

impl ConvGeometry {
    fn new(in_channels: usize, out_channels: usize, in_dims: [usize; 3]) -> Self {
        let out_dims = in_dims.map(|d| (d - 1) / 2 + 1);
        let [id, ih, iw] = in_dims;
        let positions = out_dims.iter().product::<usize>();
        let mut taps = Vec::with_capacity(positions * TAPS);
        for oz in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[2] {
                    for kz in 0..KERNEL {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let z = (oz * 2 + kz) as isize - 1;
                                let y = (oy * 2 + ky) as isize - 1;
                                let x = (ox * 2 + kx) as isize - 1;
                                let inside = z >= 0
                                    && y >= 0
                                    && x >= 0
                                    && (z as usize) < id
                                    && (y as usize) < ih
                                    && (x as usize) < iw;
                                taps.push(if inside {
                                    ((z as usize * ih + y as usize) * iw + x as usize) as u32
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
        Self {
            in_channels,
            out_channels,
            in_dims,
            out_dims,
            taps,
        }
    }

    pub fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn col_width(&self) -> usize {
        self.in_channels * TAPS
    }

    /// Unfolds one input item into `positions x (in_channels * 27)` columns.
    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let width = self.col_width();
        let vol = self.in_volume();
        for p in 0..self.positions() {
            let taps = &self.taps[p * TAPS..(p + 1) * TAPS];
            let row = &mut cols[p * width..(p + 1) * width];
            for c in 0..self.in_channels {
                let chan = &input[c * vol..(c + 1) * vol];
                for (k, &t) in taps.iter().enumerate() {
                    row[c * TAPS + k] = if t == PAD { T::zero() } else { chan[t as usize] };
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], grad_input: &mut [T]) {
        let width = self.col_width();
        let vol = self.in_volume();
        for p in 0..self.positions() {
            let taps = &self.taps[p * TAPS..(p + 1) * TAPS];
            let row = &cols[p * width..(p + 1) * width];
            for c in 0..self.in_channels {
                for (k, &t) in taps.iter().enumerate() {
                    if t != PAD {
                        grad_input[c * vol + t as usize] += row[c * TAPS + k];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
        grad_weight: Tensor<T>,
        grad_bias: Tensor<T>,
    },
    Conv {
        geom: ConvGeometry,
        weight: Tensor<T>,
        bias: Tensor<T>,
        grad_weight: Tensor<T>,
        grad_bias: Tensor<T>,
    },
    Activation,
    SoftmaxRows {
        arities: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    Cols { cols: Vec<T>, input_shape: Vec<usize> },
    Output(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct Layer<T = f32> {
    op: Op<T>,
    frozen: bool,
    cache: Option<Cache<T>>,
}

fn glorot<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(rng.random_range(-limit..limit));
    }
    t
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `0.2 x + 0.8 (softplus(x) - ln 2)`: slope 0.2 far left, 1 far right, zero at
/// the origin and smooth everywhere.
#[inline]
pub fn smooth_leaky(x: f64) -> f64 {
    LEAKY_SLOPE * x + (1.0 - LEAKY_SLOPE) * (softplus(x) - std::f64::consts::LN_2)
}

#[inline]
pub fn smooth_leaky_grad(x: f64) -> f64 {
    LEAKY_SLOPE + (1.0 - LEAKY_SLOPE) * sigmoid(x)
}

impl<T: Real> Layer<T> {
    pub fn build<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        let op = match spec {
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(Error::config("dense layer needs positive widths"));
                }
                Op::Dense {
                    weight: glorot(vec![*outputs, *inputs], *inputs, *outputs, rng),
                    bias: Tensor::zeros(vec![*outputs]),
                    grad_weight: Tensor::zeros(vec![*outputs, *inputs]),
                    grad_bias: Tensor::zeros(vec![*outputs]),
                }
            }
            LayerSpec::ConvStrided {
                in_channels,
                out_channels,
                in_dims,
            } => {
                if *in_channels == 0 || *out_channels == 0 || in_dims.contains(&0) {
                    return Err(Error::config("convolution needs positive channels and dims"));
                }
                let geom = ConvGeometry::new(*in_channels, *out_channels, *in_dims);
                let width = geom.col_width();
                Op::Conv {
                    weight: glorot(
                        vec![*out_channels, width],
                        width,
                        out_channels * TAPS,
                        rng,
                    ),
                    bias: Tensor::zeros(vec![*out_channels]),
                    grad_weight: Tensor::zeros(vec![*out_channels, width]),
                    grad_bias: Tensor::zeros(vec![*out_channels]),
                    geom,
                }
            }
            LayerSpec::SmoothLeaky => Op::Activation,
            LayerSpec::SoftmaxRows { arities } => {
                if arities.is_empty() || arities.contains(&0) {
                    return Err(Error::config("softmax rows need positive arities"));
                }
                Op::SoftmaxRows {
                    arities: arities.clone(),
                }
            }
            LayerSpec::MaxPool { .. } => return Err(Error::DisallowedLayer("max-pool")),
            LayerSpec::Relu => return Err(Error::DisallowedLayer("relu")),
        };
        Ok(Self {
            op,
            frozen: false,
            cache: None,
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Dense { .. } => LayerKind::Dense,
            Op::Conv { .. } => LayerKind::ConvStrided,
            Op::Activation => LayerKind::Activation,
            Op::SoftmaxRows { .. } => LayerKind::SoftmaxRows,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.op {
            Op::Dense { weight, bias, .. } | Op::Conv { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.op {
            Op::Dense { weight, bias, .. } | Op::Conv { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor<T>> {
        match &self.op {
            Op::Dense {
                grad_weight,
                grad_bias,
                ..
            }
            | Op::Conv {
                grad_weight,
                grad_bias,
                ..
            } => vec![grad_weight, grad_bias],
            _ => Vec::new(),
        }
    }

    /// Parameter tensors paired with their gradient accumulators.
    pub fn params_and_grads(&mut self) -> Vec<(&mut Tensor<T>, &mut Tensor<T>)> {
        match &mut self.op {
            Op::Dense {
                weight,
                bias,
                grad_weight,
                grad_bias,
            }
            | Op::Conv {
                weight,
                bias,
                grad_weight,
                grad_bias,
                ..
            } => vec![(weight, grad_weight), (bias, grad_bias)],
            _ => Vec::new(),
        }
    }

    pub fn zero_grads(&mut self) {
        if let Op::Dense {
            grad_weight,
            grad_bias,
            ..
        }
        | Op::Conv {
            grad_weight,
            grad_bias,
            ..
        } = &mut self.op
        {
            grad_weight.fill(T::zero());
            grad_bias.fill(T::zero());
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Item shape produced for a given item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let len: usize = input.iter().product();
        match &self.op {
            Op::Dense { weight, .. } => {
                let [outputs, inputs] = [weight.shape()[0], weight.shape()[1]];
                if len != inputs {
                    return Err(Error::config(format!(
                        "dense layer expects {inputs} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            Op::Conv { geom, .. } => {
                let expected = [geom.in_channels, geom.in_dims[0], geom.in_dims[1], geom.in_dims[2]];
                if input != expected {
                    return Err(Error::config(format!(
                        "convolution expects item shape {expected:?}, got {input:?}"
                    )));
                }
                Ok(vec![geom.out_channels, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]])
            }
            Op::Activation => Ok(input.to_vec()),
            Op::SoftmaxRows { arities } => {
                let total: usize = arities.iter().sum();
                if len != total {
                    return Err(Error::config(format!(
                        "softmax rows cover {total} values, got shape {input:?}"
                    )));
                }
                Ok(vec![total])
            }
        }
    }

    /// Forward pass without touching any cache.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, false)?.0)
    }

    /// Forward pass that records what backward needs.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, cache) = self.run(input, true)?;
        self.cache = cache;
        Ok(out)
    }

    fn run(&self, input: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let batch = input.batch();
        let item_shape = self.output_shape(&input.shape()[1..])?;
        let item_len: usize = item_shape.iter().product();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&item_shape);
        let mut out = vec![T::zero(); batch * item_len];

        let cache = match &self.op {
            Op::Dense { weight, bias, .. } => {
                let inputs = weight.shape()[1];
                for b in 0..batch {
                    let x = input.item(b);
                    let y = &mut out[b * item_len..(b + 1) * item_len];
                    for (o, yo) in y.iter_mut().enumerate() {
                        *yo = bias.data()[o] + dot(&weight.data()[o * inputs..(o + 1) * inputs], x);
                    }
                }
                keep.then(|| Cache::Input(input.clone()))
            }
            Op::Conv { geom, weight, bias, .. } => {
                let width = geom.col_width();
                let positions = geom.positions();
                let mut cols = vec![T::zero(); batch * positions * width];
                for b in 0..batch {
                    let item_cols = &mut cols[b * positions * width..(b + 1) * positions * width];
                    geom.im2col(input.item(b), item_cols);
                    let y = &mut out[b * item_len..(b + 1) * item_len];
                    for oc in 0..geom.out_channels {
                        let w = &weight.data()[oc * width..(oc + 1) * width];
                        let bo = bias.data()[oc];
                        for p in 0..positions {
                            y[oc * positions + p] = bo + dot(w, &item_cols[p * width..(p + 1) * width]);
                        }
                    }
                }
                keep.then(|| Cache::Cols {
                    cols,
                    input_shape: input.shape().to_vec(),
                })
            }
            Op::Activation => {
                for (y, &x) in out.iter_mut().zip(input.data()) {
                    *y = T::from_f64(smooth_leaky(x.as_f64()));
                }
                keep.then(|| Cache::Input(input.clone()))
            }
            Op::SoftmaxRows { arities } => {
                for b in 0..batch {
                    let x = input.item(b);
                    let y = &mut out[b * item_len..(b + 1) * item_len];
                    let mut start = 0;
                    for &n in arities {
                        softmax(&x[start..start + n], &mut y[start..start + n]);
                        start += n;
                    }
                }
                None
            }
        };
        let out = Tensor::new(out_shape, out)?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!(
                "{} layer produced a non-finite value",
                self.kind().name()
            )));
        }
        let cache = match (&self.op, keep) {
            (Op::SoftmaxRows { .. }, true) => Some(Cache::Output(out.clone())),
            _ => cache,
        };
        Ok((out, cache))
    }

    /// Propagates `grad_out` to the layer input. Parameter gradients are
    /// accumulated unless the layer is frozen.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage(format!("backward on {} layer without forward", self.kind().name())))?;
        let frozen = self.frozen;
        let batch = grad_out.batch();
        let g = grad_out.data();

        let grad_in = match (&mut self.op, &cache) {
            (
                Op::Dense {
                    weight,
                    grad_weight,
                    grad_bias,
                    ..
                },
                Cache::Input(x),
            ) => {
                let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
                let mut dx = vec![T::zero(); batch * inputs];
                for b in 0..batch {
                    let xb = x.item(b);
                    let gb = &g[b * outputs..(b + 1) * outputs];
                    let dxb = &mut dx[b * inputs..(b + 1) * inputs];
                    for o in 0..outputs {
                        let go = gb[o];
                        axpy(go, &weight.data()[o * inputs..(o + 1) * inputs], dxb);
                        if !frozen {
                            axpy(go, xb, &mut grad_weight.data_mut()[o * inputs..(o + 1) * inputs]);
                            grad_bias.data_mut()[o] += go;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), dx)?
            }
            (
                Op::Conv {
                    geom,
                    weight,
                    grad_weight,
                    grad_bias,
                    ..
                },
                Cache::Cols { cols, input_shape },
            ) => {
                let width = geom.col_width();
                let positions = geom.positions();
                let in_len = geom.in_channels * geom.in_volume();
                let out_len = geom.out_channels * positions;
                let mut dx = vec![T::zero(); batch * in_len];
                let mut dcols = vec![T::zero(); positions * width];
                for b in 0..batch {
                    let item_cols = &cols[b * positions * width..(b + 1) * positions * width];
                    let gb = &g[b * out_len..(b + 1) * out_len];
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    for oc in 0..geom.out_channels {
                        let w = &weight.data()[oc * width..(oc + 1) * width];
                        let mut bias_acc = T::zero();
                        for p in 0..positions {
                            let go = gb[oc * positions + p];
                            if go == T::zero() {
                                continue;
                            }
                            bias_acc += go;
                            axpy(go, w, &mut dcols[p * width..(p + 1) * width]);
                            if !frozen {
                                axpy(
                                    go,
                                    &item_cols[p * width..(p + 1) * width],
                                    &mut grad_weight.data_mut()[oc * width..(oc + 1) * width],
                                );
                            }
                        }
                        if !frozen {
                            grad_bias.data_mut()[oc] += bias_acc;
                        }
                    }
                    geom.col2im(&dcols, &mut dx[b * in_len..(b + 1) * in_len]);
                }
                Tensor::new(input_shape.clone(), dx)?
            }
            (Op::Activation, Cache::Input(x)) => {
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| gi * T::from_f64(smooth_leaky_grad(xi.as_f64())))
                    .collect();
                Tensor::new(x.shape().to_vec(), dx)?
            }
            (Op::SoftmaxRows { arities }, Cache::Output(p)) => {
                let item_len = p.item_len();
                let mut dx = vec![T::zero(); p.len()];
                for b in 0..batch {
                    let pb = p.item(b);
                    let gb = &g[b * item_len..(b + 1) * item_len];
                    let mut start = 0;
                    for &n in arities.iter() {
                        let (pr, gr) = (&pb[start..start + n], &gb[start..start + n]);
                        let inner: T = pr.iter().zip(gr).map(|(&a, &c)| a * c).sum();
                        for i in 0..n {
                            dx[b * item_len + start + i] = pr[i] * (gr[i] - inner);
                        }
                        start += n;
                    }
                }
                Tensor::new(p.shape().to_vec(), dx)?
            }
            _ => return Err(Error::Usage("layer cache does not match layer kind".into())),
        };
        if !grad_in.is_finite() {
            return Err(Error::Numeric(format!(
                "{} layer produced a non-finite gradient",
                self.kind().name()
            )));
        }
        Ok(grad_in)
    }
}

fn softmax<T: Real>(x: &[T], y: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = (xi - max).exp();
        sum += *yi;
    }
    for yi in y.iter_mut() {
        *yi = *yi / sum;
    }
}
