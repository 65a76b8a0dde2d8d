use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Scalar};
use crate::tensor::{Parameter, Tensor};

/// Epsilon under the square roots of layer norm and stats pooling.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by the receptive span.
    Valid,
    /// Edge samples repeated so the output keeps the input length (stride 1 only).
    Replicate,
}

/// One layer of a sequential network. All layers act on `[channels, time]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        padding: Padding,
    },
    /// Per-frame affine map (a 1-tap convolution).
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Prelu {
        channels: usize,
    },
    /// Normalizes across channels independently for each frame.
    LayerNorm {
        channels: usize,
    },
    MeanPoolTime,
    /// Mean and standard deviation over time, stacked as `[2C, 1]`.
    StatsPoolTime,
    /// Scales each frame (column) to unit L2 norm; zero columns stay zero.
    L2Normalize,
    Sigmoid,
    /// `bias: false` drops the per-channel offset, for outputs whose loss ignores DC.
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Linear { .. } => "pointwise-linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Prelu { .. } => "prelu",
            LayerSpec::LayerNorm { .. } => "layernorm",
            LayerSpec::MeanPoolTime => "mean-pool-time",
            LayerSpec::StatsPoolTime => "stats-pool-time",
            LayerSpec::L2Normalize => "l2-normalize",
            LayerSpec::Sigmoid => "sigmoid-mask",
            LayerSpec::ConvTranspose1d { .. } => "transposed-conv1d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(format!("{}: {msg}", self.kind())));
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                dilation,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || dilation == 0 || stride == 0
                {
                    return bad("sizes must be positive");
                }
                if padding == Padding::Replicate && stride != 1 {
                    return bad("replicate padding requires stride 1");
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("sizes must be positive");
                }
            }
            LayerSpec::Prelu { channels } | LayerSpec::LayerNorm { channels } => {
                if channels == 0 {
                    return bad("channels must be positive");
                }
            }
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("sizes must be positive");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output `(channels, time)` for a given input, or a description of the mismatch.
    pub fn output_dims(&self, c: usize, t: usize) -> std::result::Result<(usize, usize), String> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                dilation,
                stride,
                padding,
            } => {
                if c != in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                match padding {
                    Padding::Replicate => Ok((out_channels, t)),
                    Padding::Valid => {
                        let span = dilation * (kernel - 1) + 1;
                        if t < span {
                            return Err(format!("input length {t} shorter than receptive span {span}"));
                        }
                        Ok((out_channels, (t - span) / stride + 1))
                    }
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if c != in_features {
                    return Err(format!("expected {in_features} input features, got {c}"));
                }
                Ok((out_features, t))
            }
            LayerSpec::Prelu { channels } | LayerSpec::LayerNorm { channels } => {
                if c != channels {
                    return Err(format!("expected {channels} channels, got {c}"));
                }
                Ok((c, t))
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::L2Normalize => Ok((c, t)),
            LayerSpec::MeanPoolTime => Ok((c, 1)),
            LayerSpec::StatsPoolTime => Ok((2 * c, 1)),
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if c != in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                if t == 0 {
                    return Err("empty input".into());
                }
                Ok((out_channels, (t - 1) * stride + kernel))
            }
        }
    }
}

/// Cached activations of one layer's forward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Conv { cols: Vec<T>, in_len: usize, out_len: usize },
    Input(Tensor<T>),
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    MeanPool { len: usize },
    StatsPool { input: Tensor<T>, mean: Vec<T>, std: Vec<T> },
    L2 { output: Tensor<T>, norms: Vec<T> },
    Output(Tensor<T>),
    None,
}

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<Parameter<T>>,
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

impl<T: Scalar> Layer<T> {
    pub fn new<R: Rng>(spec: LayerSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let name = |p: &str| format!("{prefix}.{p}");
        let params = match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel;
                let b = 1.0 / (fan_in as f64).sqrt();
                vec![
                    Parameter::new(
                        name("weight"),
                        Tensor::from_vec(
                            &[out_channels, in_channels, kernel],
                            uniform(rng, out_channels * fan_in, b),
                        )?,
                        true,
                    ),
                    Parameter::new(name("bias"), Tensor::zeros(&[out_channels]), true),
                ]
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let b = 1.0 / (in_features as f64).sqrt();
                vec![
                    Parameter::new(
                        name("weight"),
                        Tensor::from_vec(
                            &[out_features, in_features],
                            uniform(rng, out_features * in_features, b),
                        )?,
                        true,
                    ),
                    Parameter::new(name("bias"), Tensor::zeros(&[out_features]), true),
                ]
            }
            LayerSpec::Prelu { channels } => {
                let slope = Tensor::from_vec(&[channels], vec![T::from_f64_lossy(0.25); channels])?;
                vec![Parameter::new(name("slope"), slope, false)]
            }
            LayerSpec::LayerNorm { channels } => {
                let gain = Tensor::from_vec(&[channels], vec![T::one(); channels])?;
                vec![
                    Parameter::new(name("gain"), gain, false),
                    Parameter::new(name("offset"), Tensor::zeros(&[channels]), false),
                ]
            }
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let b = 1.0 / ((in_channels * kernel) as f64).sqrt();
                let mut params = vec![Parameter::new(
                    name("weight"),
                    Tensor::from_vec(
                        &[in_channels, out_channels, kernel],
                        uniform(rng, in_channels * out_channels * kernel, b),
                    )?,
                    true,
                )];
                if bias {
                    params.push(Parameter::new(name("bias"), Tensor::zeros(&[out_channels]), true));
                }
                params
            }
            _ => Vec::new(),
        };
        Ok(Self { spec, params })
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, index: usize, keep: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let (c, t) = x.dims2().map_err(|e| Error::LayerShape {
            layer: index,
            kind: self.spec.kind(),
            detail: e.to_string(),
        })?;
        let (oc, ot) = self.spec.output_dims(c, t).map_err(|detail| Error::LayerShape {
            layer: index,
            kind: self.spec.kind(),
            detail,
        })?;
        let xd = x.data();
        let mut out = vec![T::zero(); oc * ot];
        let cache = match self.spec {
            LayerSpec::Conv1d {
                kernel,
                dilation,
                stride,
                padding,
                ..
            } => {
                let cols = conv_im2col(xd, c, t, ot, kernel, dilation, stride, padding);
                let w = self.params[0].value.data();
                let b = self.params[1].value.data();
                for (o, row) in out.chunks_mut(ot).enumerate() {
                    row.fill(b[o]);
                }
                matmul_acc(oc, c * kernel, ot, w, &cols, &mut out);
                if keep {
                    Cache::Conv {
                        cols,
                        in_len: t,
                        out_len: ot,
                    }
                } else {
                    Cache::None
                }
            }
            LayerSpec::Linear { .. } => {
                let w = self.params[0].value.data();
                let b = self.params[1].value.data();
                for (o, row) in out.chunks_mut(ot).enumerate() {
                    row.fill(b[o]);
                }
                matmul_acc(oc, c, t, w, xd, &mut out);
                keep_input(keep, x)
            }
            LayerSpec::Relu => {
                for (y, &v) in out.iter_mut().zip(xd) {
                    *y = v.max(T::zero());
                }
                keep_input(keep, x)
            }
            LayerSpec::Prelu { .. } => {
                let a = self.params[0].value.data();
                for ch in 0..c {
                    for i in ch * t..(ch + 1) * t {
                        let v = xd[i];
                        out[i] = if v > T::zero() { v } else { a[ch] * v };
                    }
                }
                keep_input(keep, x)
            }
            LayerSpec::LayerNorm { .. } => {
                let gain = self.params[0].value.data();
                let offset = self.params[1].value.data();
                let eps = T::from_f64_lossy(NORM_EPS);
                let cf = T::from_usize(c).unwrap();
                let mut xhat = vec![T::zero(); c * t];
                let mut inv_std = vec![T::zero(); t];
                for f in 0..t {
                    let mean = (0..c).map(|ch| xd[ch * t + f]).sum::<T>() / cf;
                    let var = (0..c)
                        .map(|ch| {
                            let d = xd[ch * t + f] - mean;
                            d * d
                        })
                        .sum::<T>()
                        / cf;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std[f] = inv;
                    for ch in 0..c {
                        let h = (xd[ch * t + f] - mean) * inv;
                        xhat[ch * t + f] = h;
                        out[ch * t + f] = gain[ch] * h + offset[ch];
                    }
                }
                if keep {
                    Cache::LayerNorm { xhat, inv_std }
                } else {
                    Cache::None
                }
            }
            LayerSpec::MeanPoolTime => {
                let tf = T::from_usize(t).unwrap();
                for ch in 0..c {
                    out[ch] = xd[ch * t..(ch + 1) * t].iter().copied().sum::<T>() / tf;
                }
                Cache::MeanPool { len: t }
            }
            LayerSpec::StatsPoolTime => {
                let tf = T::from_usize(t).unwrap();
                let eps = T::from_f64_lossy(NORM_EPS);
                let mut mean = vec![T::zero(); c];
                let mut std = vec![T::zero(); c];
                for ch in 0..c {
                    let row = &xd[ch * t..(ch + 1) * t];
                    let m = row.iter().copied().sum::<T>() / tf;
                    let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / tf;
                    mean[ch] = m;
                    std[ch] = (var + eps).sqrt();
                    out[ch] = m;
                    out[c + ch] = std[ch];
                }
                if keep {
                    Cache::StatsPool {
                        input: x.clone(),
                        mean,
                        std,
                    }
                } else {
                    Cache::None
                }
            }
            LayerSpec::L2Normalize => {
                let mut norms = vec![T::zero(); t];
                for (f, norm) in norms.iter_mut().enumerate() {
                    let n = (0..c).map(|ch| xd[ch * t + f] * xd[ch * t + f]).sum::<T>().sqrt();
                    *norm = n;
                    if n > T::zero() {
                        for ch in 0..c {
                            out[ch * t + f] = xd[ch * t + f] / n;
                        }
                    }
                }
                if keep {
                    Cache::L2 {
                        output: Tensor::from_vec(&[oc, ot], out.clone())?,
                        norms,
                    }
                } else {
                    Cache::None
                }
            }
            LayerSpec::Sigmoid => {
                for (y, &v) in out.iter_mut().zip(xd) {
                    *y = sigmoid(v);
                }
                if keep {
                    Cache::Output(Tensor::from_vec(&[oc, ot], out.clone())?)
                } else {
                    Cache::None
                }
            }
            LayerSpec::ConvTranspose1d {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let w = self.params[0].value.data();
                let b = self.params.get(1).map(|p| p.value.data());
                let mut cols = vec![T::zero(); out_channels * kernel * t];
                matmul_at_b_acc(out_channels * kernel, c, t, w, xd, &mut cols);
                for o in 0..out_channels {
                    let row = &mut out[o * ot..(o + 1) * ot];
                    row.fill(b.map_or(T::zero(), |b| b[o]));
                    for j in 0..kernel {
                        let src = &cols[(o * kernel + j) * t..(o * kernel + j + 1) * t];
                        for (s, &v) in src.iter().enumerate() {
                            row[s * stride + j] = row[s * stride + j] + v;
                        }
                    }
                }
                keep_input(keep, x)
            }
        };
        Ok((Tensor::from_vec(&[oc, ot], out)?, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward(&mut self, cache: &Cache<T>, g: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        let (gc, gt) = g.dims2()?;
        let gd = g.data();
        let shape_err = |detail: String| Error::LayerShape {
            layer: index,
            kind: self.spec.kind(),
            detail,
        };
        match (&self.spec, cache) {
            (
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    dilation,
                    stride,
                    padding,
                },
                Cache::Conv {
                    cols,
                    in_len,
                    out_len,
                },
            ) => {
                if gc != *out_channels || gt != *out_len {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                let ck = in_channels * kernel;
                matmul_a_bt_acc(gc, gt, ck, gd, cols, self.params[0].grad.data_mut());
                let db = self.params[1].grad.data_mut();
                for (o, row) in gd.chunks(gt).enumerate() {
                    db[o] = db[o] + row.iter().copied().sum::<T>();
                }
                let mut dcols = vec![T::zero(); ck * gt];
                matmul_at_b_acc(ck, gc, gt, self.params[0].value.data(), gd, &mut dcols);
                let dx = conv_col2im(&dcols, *in_channels, *in_len, gt, *kernel, *dilation, *stride, *padding);
                Tensor::from_vec(&[*in_channels, *in_len], dx)
            }
            (LayerSpec::Linear { in_features, .. }, Cache::Input(x)) => {
                let (_, t) = x.dims2()?;
                if gt != t {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                matmul_a_bt_acc(gc, t, *in_features, gd, x.data(), self.params[0].grad.data_mut());
                let db = self.params[1].grad.data_mut();
                for (o, row) in gd.chunks(gt).enumerate() {
                    db[o] = db[o] + row.iter().copied().sum::<T>();
                }
                let mut dx = vec![T::zero(); in_features * t];
                matmul_at_b_acc(*in_features, gc, t, self.params[0].value.data(), gd, &mut dx);
                Tensor::from_vec(&[*in_features, t], dx)
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                check_same(x, g).map_err(shape_err)?;
                let dx = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                Tensor::from_vec(x.shape(), dx)
            }
            (LayerSpec::Prelu { .. }, Cache::Input(x)) => {
                check_same(x, g).map_err(shape_err)?;
                let (c, t) = x.dims2()?;
                let xd = x.data();
                let mut dx = vec![T::zero(); c * t];
                let a = self.params[0].value.data().to_vec();
                let da = self.params[0].grad.data_mut();
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in ch * t..(ch + 1) * t {
                        if xd[i] > T::zero() {
                            dx[i] = gd[i];
                        } else {
                            dx[i] = a[ch] * gd[i];
                            acc = acc + gd[i] * xd[i];
                        }
                    }
                    da[ch] = da[ch] + acc;
                }
                Tensor::from_vec(&[c, t], dx)
            }
            (LayerSpec::LayerNorm { channels }, Cache::LayerNorm { xhat, inv_std }) => {
                let (c, t) = (*channels, inv_std.len());
                if gc != c || gt != t {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                let gain = self.params[0].value.data().to_vec();
                {
                    let dgain = self.params[0].grad.data_mut();
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for f in 0..t {
                            acc = acc + gd[ch * t + f] * xhat[ch * t + f];
                        }
                        dgain[ch] = dgain[ch] + acc;
                    }
                }
                {
                    let doff = self.params[1].grad.data_mut();
                    for ch in 0..c {
                        doff[ch] = doff[ch] + gd[ch * t..(ch + 1) * t].iter().copied().sum::<T>();
                    }
                }
                let cf = T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); c * t];
                for f in 0..t {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ch in 0..c {
                        let dh = gd[ch * t + f] * gain[ch];
                        m1 = m1 + dh;
                        m2 = m2 + dh * xhat[ch * t + f];
                    }
                    m1 = m1 / cf;
                    m2 = m2 / cf;
                    for ch in 0..c {
                        let dh = gd[ch * t + f] * gain[ch];
                        dx[ch * t + f] = inv_std[f] * (dh - m1 - xhat[ch * t + f] * m2);
                    }
                }
                Tensor::from_vec(&[c, t], dx)
            }
            (LayerSpec::MeanPoolTime, Cache::MeanPool { len }) => {
                if gt != 1 {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                let tf = T::from_usize(*len).unwrap();
                let mut dx = Vec::with_capacity(gc * len);
                for &d in gd {
                    dx.extend(std::iter::repeat_n(d / tf, *len));
                }
                Tensor::from_vec(&[gc, *len], dx)
            }
            (LayerSpec::StatsPoolTime, Cache::StatsPool { input, mean, std }) => {
                let (c, t) = input.dims2()?;
                if gc != 2 * c || gt != 1 {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                let tf = T::from_usize(t).unwrap();
                let xd = input.data();
                let mut dx = vec![T::zero(); c * t];
                for ch in 0..c {
                    let gm = gd[ch] / tf;
                    let gs = gd[c + ch] / (tf * std[ch]);
                    for f in 0..t {
                        dx[ch * t + f] = gm + gs * (xd[ch * t + f] - mean[ch]);
                    }
                }
                Tensor::from_vec(&[c, t], dx)
            }
            (LayerSpec::L2Normalize, Cache::L2 { output, norms }) => {
                check_same(output, g).map_err(shape_err)?;
                let (c, t) = output.dims2()?;
                let yd = output.data();
                let mut dx = vec![T::zero(); c * t];
                for (f, &n) in norms.iter().enumerate() {
                    if n <= T::zero() {
                        continue;
                    }
                    let dot = (0..c).map(|ch| yd[ch * t + f] * gd[ch * t + f]).sum::<T>();
                    for ch in 0..c {
                        dx[ch * t + f] = (gd[ch * t + f] - yd[ch * t + f] * dot) / n;
                    }
                }
                Tensor::from_vec(&[c, t], dx)
            }
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                check_same(y, g).map_err(shape_err)?;
                let dx = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                Tensor::from_vec(y.shape(), dx)
            }
            (
                LayerSpec::ConvTranspose1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                },
                Cache::Input(x),
            ) => {
                let (_, t) = x.dims2()?;
                let ot = (t - 1) * stride + kernel;
                if gc != *out_channels || gt != ot {
                    return Err(shape_err(format!("upstream gradient {gc}x{gt}")));
                }
                let ok = out_channels * kernel;
                let mut dcols = vec![T::zero(); ok * t];
                for o in 0..*out_channels {
                    let row = &gd[o * ot..(o + 1) * ot];
                    for j in 0..*kernel {
                        let dst = &mut dcols[(o * kernel + j) * t..(o * kernel + j + 1) * t];
                        for (s, d) in dst.iter_mut().enumerate() {
                            *d = row[s * stride + j];
                        }
                    }
                }
                matmul_a_bt_acc(*in_channels, t, ok, x.data(), &dcols, self.params[0].grad.data_mut());
                if let Some(bias) = self.params.get_mut(1) {
                    let db = bias.grad.data_mut();
                    for (o, row) in gd.chunks(gt).enumerate() {
                        db[o] = db[o] + row.iter().copied().sum::<T>();
                    }
                }
                let mut dx = vec![T::zero(); in_channels * t];
                matmul_acc(*in_channels, ok, t, self.params[0].value.data(), &dcols, &mut dx);
                Tensor::from_vec(&[*in_channels, t], dx)
            }
            _ => Err(shape_err("trace does not match layer kind".into())),
        }
    }
}

fn keep_input<T: Scalar>(keep: bool, x: &Tensor<T>) -> Cache<T> {
    if keep {
        Cache::Input(x.clone())
    } else {
        Cache::None
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>) -> std::result::Result<(), String> {
    if a.shape() != g.shape() {
        return Err(format!("upstream gradient {:?} vs activation {:?}", g.shape(), a.shape()));
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn pad_left(kernel: usize, dilation: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Replicate => dilation * (kernel - 1) / 2,
    }
}

#[inline]
fn source_index(pos: isize, len: usize) -> usize {
    pos.clamp(0, len as isize - 1) as usize
}

#[allow(clippy::too_many_arguments)]
fn conv_im2col<T: Scalar>(
    x: &[T],
    c: usize,
    t: usize,
    ot: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
    padding: Padding,
) -> Vec<T> {
    let left = pad_left(kernel, dilation, padding) as isize;
    let mut cols = vec![T::zero(); c * kernel * ot];
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        for j in 0..kernel {
            let dst = &mut cols[(ch * kernel + j) * ot..(ch * kernel + j + 1) * ot];
            let off = (j * dilation) as isize - left;
            for (s, d) in dst.iter_mut().enumerate() {
                *d = row[source_index((s * stride) as isize + off, t)];
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv_col2im<T: Scalar>(
    dcols: &[T],
    c: usize,
    t: usize,
    ot: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
    padding: Padding,
) -> Vec<T> {
    let left = pad_left(kernel, dilation, padding) as isize;
    let mut dx = vec![T::zero(); c * t];
    for ch in 0..c {
        let row = &mut dx[ch * t..(ch + 1) * t];
        for j in 0..kernel {
            let src = &dcols[(ch * kernel + j) * ot..(ch * kernel + j + 1) * ot];
            let off = (j * dilation) as isize - left;
            for (s, &v) in src.iter().enumerate() {
                let i = source_index((s * stride) as isize + off, t);
                row[i] = row[i] + v;
            }
        }
    }
    dx
}
