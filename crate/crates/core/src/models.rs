//! Speaker embedders and the speaker-conditioned enhancer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tase_nnet::{read_checkpoint, write_checkpoint, Checkpoint, LayerSpec, Network, Padding, Parameter, Scalar, Tensor, Trace};

use crate::dsp::{stft_features, vad_mask, FeatureMatrix, Waveform, N_BINS};
use crate::error::{invalid, Result, TaseError};

pub const EMBED_DIM: usize = 128;
pub const STUDENT_CHANNELS: usize = 64;
pub const TEACHER_CHANNELS: usize = 256;

const TDNN_KERNELS: [usize; 5] = [5, 3, 3, 1, 1];
const TDNN_DILATIONS: [usize; 5] = [1, 2, 3, 1, 1];
/// Log-magnitude floor relative to the mean magnitude of the input.
const LOG_FLOOR: f64 = 1e-4;
const GAIN_PROBE_SAMPLES: usize = 4000;

/// The unit-norm bias is scaled to unit RMS per entry, matching the layer-normed encoding it joins.
fn bias_scale() -> f64 {
    (EMBED_DIM as f64).sqrt()
}

/// Frames consumed by the TDNN context layers.
pub fn tdnn_receptive_field() -> usize {
    1 + TDNN_KERNELS
        .iter()
        .zip(TDNN_DILATIONS)
        .map(|(k, d)| (k - 1) * d)
        .sum::<usize>()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Five dilated context layers, statistics pooling, a 128-d projection and L2 normalization.
#[derive(Clone, Debug)]
pub struct TdnnEmbedder<T: Scalar> {
    net: Network<T>,
    channels: usize,
    /// Set once the network has been trained against a teacher.
    pub distilled: bool,
}

impl<T: Scalar> TdnnEmbedder<T> {
    pub fn new(name: &str, channels: usize, seed: u64) -> Result<Self> {
        let mut specs = Vec::new();
        let mut inc = N_BINS;
        for (&kernel, &dilation) in TDNN_KERNELS.iter().zip(&TDNN_DILATIONS) {
            specs.push(LayerSpec::Conv1d {
                in_channels: inc,
                out_channels: channels,
                kernel,
                dilation,
                stride: 1,
                padding: Padding::Valid,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::LayerNorm { channels });
            inc = channels;
        }
        specs.push(LayerSpec::StatsPoolTime);
        specs.push(LayerSpec::Linear { in_features: 2 * channels, out_features: EMBED_DIM });
        specs.push(LayerSpec::L2Normalize);
        Ok(TdnnEmbedder { net: Network::new(name, &specs, seed)?, channels, distilled: false })
    }

    pub fn student(seed: u64) -> Result<Self> {
        Self::new("student", STUDENT_CHANNELS, seed)
    }

    pub fn teacher(seed: u64) -> Result<Self> {
        Self::new("teacher", TEACHER_CHANNELS, seed)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    /// Network input for a feature matrix: mean-removed log magnitudes as
    /// `[257, T]`, repeated cyclically up to the receptive field.
    ///
    /// The log floor scales with the input, so the result is invariant to the
    /// overall gain of the waveform.
    pub fn input_tensor(features: &FeatureMatrix) -> Result<Tensor<T>> {
        let t_in = features.frames();
        if t_in == 0 {
            return invalid("empty feature matrix");
        }
        let t = t_in.max(tdnn_receptive_field());
        let data = features.data();
        let mean_mag = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let floor = (LOG_FLOOR * mean_mag).max(f64::MIN_POSITIVE);
        let mut logs = vec![0.0f64; N_BINS * t];
        for f in 0..t {
            let frame = features.frame(f % t_in);
            for (k, &m) in frame.iter().enumerate() {
                logs[k * t + f] = (m as f64 + floor).ln();
            }
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        Ok(Tensor::from_vec(&[N_BINS, t], logs.iter().map(|v| T::from_f64_lossy(v - mean)).collect())?)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Vec<f64>, Trace<T>)> {
        let (y, trace) = self.net.forward(input)?;
        Ok((y.data().iter().map(|v| v.as_f64()).collect(), trace))
    }

    /// Accumulates parameter gradients for an upstream gradient on the embedding.
    pub fn backward(&mut self, trace: &Trace<T>, grad: &[f64]) -> Result<()> {
        let g = Tensor::from_vec(&[EMBED_DIM, 1], grad.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
        self.net.backward(trace, &g)?;
        Ok(())
    }

    pub fn embed_input(&self, input: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(self.net.infer(input)?.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Embedding of the voiced frames of `features`.
    pub fn embed_features(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let voiced = voiced_frames(features)?;
        self.embed_input(&Self::input_tensor(&voiced)?)
    }

    /// Features, VAD crop, full-length network pass.
    pub fn embed(&self, utterance: &Waveform) -> Result<Vec<f64>> {
        self.embed_features(&stft_features(utterance)?)
    }

    pub fn manifest(&self) -> ModelManifest {
        let mut m = ModelManifest::new("tdnn-embedder");
        m.set("name", self.net.name());
        m.set("channels", self.channels);
        m.set("embed_dim", EMBED_DIM);
        m.set("kernels", join(&TDNN_KERNELS));
        m.set("dilations", join(&TDNN_DILATIONS));
        m.set("distilled", self.distilled);
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(path.as_ref(), &self.manifest(), &self.net.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, ckpt) = load_model(path.as_ref(), "tdnn-embedder")?;
        let mut e = Self::new(manifest.get("name")?, manifest.parse("channels")?, 0)?;
        e.distilled = manifest.parse("distilled")?;
        e.net.load_checkpoint(&ckpt)?;
        Ok(e)
    }

    pub fn cast<U: Scalar>(&self) -> TdnnEmbedder<U> {
        TdnnEmbedder { net: self.net.cast(), channels: self.channels, distilled: self.distilled }
    }
}

/// The VAD-selected frames of `features`, or [`TaseError::NoVoicedFrames`].
pub fn voiced_frames(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mask = vad_mask(features);
    if mask.voiced_count() == 0 {
        return Err(TaseError::NoVoicedFrames);
    }
    Ok(features.select(mask.voiced_indices()))
}

/// L2-normalized mean of per-utterance embeddings.
pub fn enroll_bias<T: Scalar>(net: &TdnnEmbedder<T>, utterances: &[Waveform]) -> Result<Vec<f64>> {
    if utterances.is_empty() {
        return invalid("enrollment needs at least one utterance");
    }
    let embs = utterances.iter().map(|u| net.embed(u)).collect::<Result<Vec<_>>>()?;
    Ok(pool_embeddings(&embs))
}

pub fn pool_embeddings(embeddings: &[Vec<f64>]) -> Vec<f64> {
    let d = embeddings[0].len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / embeddings.len() as f64);
    }
    normalized(&mean)
}

/// Gradient of a loss with respect to each pooled embedding, given its gradient on the pooled bias.
pub fn pool_embeddings_backward(embeddings: &[Vec<f64>], grad_bias: &[f64]) -> Vec<Vec<f64>> {
    let d = embeddings[0].len();
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / n);
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![vec![0.0; d]; embeddings.len()];
    }
    let b: Vec<f64> = mean.iter().map(|m| m / norm).collect();
    let proj: f64 = b.iter().zip(grad_bias).map(|(x, g)| x * g).sum();
    let gm: Vec<f64> = grad_bias.iter().zip(&b).map(|(g, x)| (g - proj * x) / (norm * n)).collect();
    vec![gm; embeddings.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancerConfig {
    /// Encoder basis functions.
    pub basis: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Width of the residual path in the mask network.
    pub bottleneck: usize,
    /// Width inside each mask block.
    pub hidden: usize,
    /// One block per dilation.
    pub dilations: Vec<usize>,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig { basis: 128, kernel: 16, stride: 8, bottleneck: 64, hidden: 64, dilations: vec![1, 4, 16, 64] }
    }
}

/// Time-domain masking enhancer conditioned on a 128-d speaker bias.
///
/// encoder → layer norm ‖ bias → projection → residual dilated blocks →
/// sigmoid mask over the encoding → transposed-convolution decoder.
#[derive(Clone, Debug)]
pub struct Enhancer<T: Scalar> {
    config: EnhancerConfig,
    encoder: Network<T>,
    norm: Network<T>,
    project: Network<T>,
    blocks: Vec<Network<T>>,
    head: Network<T>,
    decoder: Network<T>,
}

/// Activations kept for [`Enhancer::backward`].
#[derive(Debug)]
pub struct EnhancerTrace<T> {
    len: usize,
    padded: usize,
    encoded: Tensor<T>,
    mask: Tensor<T>,
    encoder: Trace<T>,
    norm: Trace<T>,
    project: Trace<T>,
    blocks: Vec<Trace<T>>,
    head: Trace<T>,
    decoder: Trace<T>,
}

impl<T> EnhancerTrace<T> {
    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }
}

impl<T: Scalar> Enhancer<T> {
    pub fn new(config: EnhancerConfig, seed: u64) -> Result<Self> {
        let EnhancerConfig { basis, kernel, stride, bottleneck, hidden, .. } = config;
        if kernel < stride || stride == 0 || config.dilations.is_empty() {
            return invalid(format!("bad enhancer config {config:?}"));
        }
        let encoder = Network::new(
            "enh.encoder",
            &[
                LayerSpec::Conv1d { in_channels: 1, out_channels: basis, kernel, dilation: 1, stride, padding: Padding::Valid },
                LayerSpec::Relu,
            ],
            seed,
        )?;
        let norm = Network::new("enh.norm", &[LayerSpec::LayerNorm { channels: basis }], seed + 1)?;
        let project = Network::new(
            "enh.project",
            &[LayerSpec::Linear { in_features: basis + EMBED_DIM, out_features: bottleneck }],
            seed + 2,
        )?;
        let blocks = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| {
                Network::new(
                    &format!("enh.block{i}"),
                    &[
                        LayerSpec::Linear { in_features: bottleneck, out_features: hidden },
                        LayerSpec::Prelu { channels: hidden },
                        LayerSpec::LayerNorm { channels: hidden },
                        LayerSpec::Conv1d {
                            in_channels: hidden,
                            out_channels: hidden,
                            kernel: 3,
                            dilation,
                            stride: 1,
                            padding: Padding::Replicate,
                        },
                        LayerSpec::Prelu { channels: hidden },
                        LayerSpec::LayerNorm { channels: hidden },
                        LayerSpec::Linear { in_features: hidden, out_features: bottleneck },
                    ],
                    seed + 10 + i as u64,
                )
            })
            .collect::<tase_nnet::Result<Vec<_>>>()?;
        let head = Network::new(
            "enh.head",
            &[
                LayerSpec::Prelu { channels: bottleneck },
                LayerSpec::Linear { in_features: bottleneck, out_features: basis },
                LayerSpec::Sigmoid,
            ],
            seed + 3,
        )?;
        let decoder = Network::new(
            "enh.decoder",
            &[LayerSpec::ConvTranspose1d { in_channels: basis, out_channels: 1, kernel, stride, bias: false }],
            seed + 4,
        )?;
        let mut enhancer = Enhancer { config, encoder, norm, project, blocks, head, decoder };
        enhancer.init_identity(seed);
        enhancer.calibrate_gain(seed)?;
        Ok(enhancer)
    }

    /// Encoder rows become ± pairs of orthonormal vectors, the decoder their
    /// transpose, and the mask a constant 0.5. Since w·relu(w·x) − w·relu(−w·x)
    /// = w(w·x), the fresh network passes its input through (up to gain and the
    /// edge frames), and training starts from the mixture instead of noise.
    fn init_identity(&mut self, seed: u64) {
        let (basis, kernel) = (self.config.basis, self.config.kernel);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6672_616d);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(basis);
        let mut block: Vec<Vec<f64>> = Vec::new();
        while rows.len() + 1 < basis {
            if block.len() == kernel {
                block.clear();
            }
            let mut v: Vec<f64> = (0..kernel).map(|_| rng.sample(StandardNormal)).collect();
            for b in &block {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v.clone());
            rows.push(v.iter().map(|x| -x).collect());
            block.push(v);
        }
        let weights: Vec<T> = rows.iter().flatten().map(|&v| T::from_f64_lossy(v)).collect();
        for net in [&mut self.encoder, &mut self.decoder] {
            for p in net.params_mut() {
                if p.name.ends_with("weight") {
                    p.value.data_mut()[..weights.len()].copy_from_slice(&weights);
                } else {
                    p.value.fill(T::zero());
                }
            }
        }
        for p in self.head.params_mut().filter(|p| p.name.contains(".1.")) {
            p.value.fill(T::zero());
        }
    }

    /// Rescales the decoder so the fresh network passes white noise at unit
    /// RMS gain. Losses that are not scale-invariant then start near the
    /// reference's scale instead of tens of dB below it.
    fn calibrate_gain(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_696e);
        let probe: Vec<f64> = (0..GAIN_PROBE_SAMPLES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, _) = self.forward(&probe, &[0.0; EMBED_DIM])?;
        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let gain = (energy(&probe) / energy(&out)).sqrt();
        if gain.is_finite() {
            let g = T::from_f64_lossy(gain);
            for p in self.decoder.params_mut() {
                p.value.data_mut().iter_mut().for_each(|w| *w = *w * g);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.config
    }

    fn networks(&self) -> impl Iterator<Item = &Network<T>> {
        [&self.encoder, &self.norm, &self.project]
            .into_iter()
            .chain(self.blocks.iter())
            .chain([&self.head, &self.decoder])
    }

    fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network<T>> {
        [&mut self.encoder, &mut self.norm, &mut self.project]
            .into_iter()
            .chain(self.blocks.iter_mut())
            .chain([&mut self.head, &mut self.decoder])
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.networks().flat_map(|n| n.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.networks_mut().flat_map(|n| n.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.networks().map(|n| n.num_params()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.networks_mut().for_each(|n| n.zero_grad());
    }

    /// Marks parameters as changed so that earlier traces are rejected.
    pub fn touch(&mut self) {
        self.networks_mut().for_each(|n| n.touch());
    }

    pub fn grad_norm(&self) -> f64 {
        self.params().map(|p| p.grad.sum_squares().as_f64()).sum::<f64>().sqrt()
    }

    /// Smallest accepted input length.
    pub fn min_len(&self) -> usize {
        self.config.kernel
    }

    fn padded_len(&self, len: usize) -> usize {
        let (k, s) = (self.config.kernel, self.config.stride);
        k + (len.max(k) - k).div_ceil(s) * s
    }

    pub fn forward(&self, mixture: &[f64], bias: &[f64]) -> Result<(Vec<f64>, EnhancerTrace<T>)> {
        let len = mixture.len();
        if len < self.min_len() {
            return invalid(format!("{len} samples is shorter than the {}-sample encoder kernel", self.min_len()));
        }
        if bias.len() != EMBED_DIM {
            return invalid(format!("bias has {} dims, expected {EMBED_DIM}", bias.len()));
        }
        let padded = self.padded_len(len);
        let mut x = vec![T::zero(); padded];
        x.iter_mut().zip(mixture).for_each(|(d, &s)| *d = T::from_f64_lossy(s));
        let (encoded, encoder) = self.encoder.forward(&Tensor::from_vec(&[1, padded], x)?)?;
        let frames = encoded.shape()[1];
        let (normed, norm) = self.norm.forward(&encoded)?;
        let mut cat = normed.into_data();
        cat.reserve(EMBED_DIM * frames);
        for &b in bias {
            cat.extend(std::iter::repeat_n(T::from_f64_lossy(b * bias_scale()), frames));
        }
        let cat = Tensor::from_vec(&[self.config.basis + EMBED_DIM, frames], cat)?;
        let (mut h, project) = self.project.forward(&cat)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (r, tr) = block.forward(&h)?;
            h.add_assign(&r)?;
            blocks.push(tr);
        }
        let (mask, head) = self.head.forward(&h)?;
        let mut masked = encoded.clone();
        masked.data_mut().iter_mut().zip(mask.data()).for_each(|(e, &m)| *e = *e * m);
        let (out, decoder) = self.decoder.forward(&masked)?;
        let y = out.data()[..len].iter().map(|v| v.as_f64()).collect();
        Ok((y, EnhancerTrace { len, padded, encoded, mask, encoder, norm, project, blocks, head, decoder }))
    }

    /// Accumulates parameter gradients and returns the gradient on the bias.
    pub fn backward(&mut self, trace: &EnhancerTrace<T>, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != trace.len {
            return invalid(format!("gradient length {} vs output length {}", grad.len(), trace.len));
        }
        let mut g = vec![T::zero(); trace.padded];
        g.iter_mut().zip(grad).for_each(|(d, &s)| *d = T::from_f64_lossy(s));
        let g_masked = self.decoder.backward(&trace.decoder, &Tensor::from_vec(&[1, trace.padded], g)?)?;
        let mut g_encoded = g_masked.clone();
        g_encoded.data_mut().iter_mut().zip(trace.mask.data()).for_each(|(g, &m)| *g = *g * m);
        let mut g_mask = g_masked;
        g_mask.data_mut().iter_mut().zip(trace.encoded.data()).for_each(|(g, &e)| *g = *g * e);
        let mut g_h = self.head.backward(&trace.head, &g_mask)?;
        for (block, tr) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            let g_r = block.backward(tr, &g_h)?;
            g_h.add_assign(&g_r)?;
        }
        let g_cat = self.project.backward(&trace.project, &g_h)?;
        let frames = g_cat.shape()[1];
        let split = self.config.basis * frames;
        let g_bias = g_cat.data()[split..]
            .chunks(frames)
            .map(|row| bias_scale() * row.iter().map(|v| v.as_f64()).sum::<f64>())
            .collect();
        let g_norm = Tensor::from_vec(&[self.config.basis, frames], g_cat.data()[..split].to_vec())?;
        g_encoded.add_assign(&self.norm.backward(&trace.norm, &g_norm)?)?;
        self.encoder.backward(&trace.encoder, &g_encoded)?;
        Ok(g_bias)
    }

    pub fn enhance(&self, mixture: &Waveform, bias: &[f64]) -> Result<Waveform> {
        let (y, _) = self.forward(mixture.samples(), bias)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(TaseError::InvalidInput("enhancer produced non-finite output".into()));
        }
        Waveform::new(y)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.networks().fold(Checkpoint::default(), |c, n| c.merge(n.to_checkpoint()))
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for n in self.networks_mut() {
            n.load_checkpoint(ckpt)?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> ModelManifest {
        let c = &self.config;
        let mut m = ModelManifest::new("enhancer");
        m.set("basis", c.basis);
        m.set("kernel", c.kernel);
        m.set("stride", c.stride);
        m.set("bottleneck", c.bottleneck);
        m.set("hidden", c.hidden);
        m.set("dilations", join(&c.dilations));
        m.set("bias_dim", EMBED_DIM);
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(path.as_ref(), &self.manifest(), &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (m, ckpt) = load_model(path.as_ref(), "enhancer")?;
        let config = EnhancerConfig {
            basis: m.parse("basis")?,
            kernel: m.parse("kernel")?,
            stride: m.parse("stride")?,
            bottleneck: m.parse("bottleneck")?,
            hidden: m.parse("hidden")?,
            dilations: m
                .get("dilations")?
                .split(',')
                .map(|v| v.parse().map_err(|_| TaseError::Format(format!("bad dilation {v:?}"))))
                .collect::<Result<_>>()?,
        };
        let mut e = Self::new(config, 0)?;
        e.load_checkpoint(&ckpt)?;
        Ok(e)
    }

    pub fn cast<U: Scalar>(&self) -> Enhancer<U> {
        Enhancer {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            norm: self.norm.cast(),
            project: self.project.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            head: self.head.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

fn join<D: fmt::Display>(v: &[D]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `key = value` text describing a model's topology, stored next to its checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelManifest {
    entries: BTreeMap<String, String>,
}

impl ModelManifest {
    pub fn new(kind: &str) -> Self {
        let mut m = ModelManifest::default();
        m.set("kind", kind);
        m
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TaseError::Format(format!("model manifest has no {key:?}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| TaseError::Format(format!("model manifest {key} = {raw:?}")))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = ModelManifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TaseError::Format(format!("bad manifest line {line:?}")))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }
}

fn with_ext(path: &Path, ext: &str) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    p.into()
}

/// Writes `<path>.ckpt` and `<path>.manifest`.
fn save_model(path: &Path, manifest: &ModelManifest, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_checkpoint(with_ext(path, ".ckpt"), ckpt)?;
    fs::write(with_ext(path, ".manifest"), manifest.to_text())?;
    Ok(())
}

fn load_model(path: &Path, kind: &str) -> Result<(ModelManifest, Checkpoint)> {
    let manifest = ModelManifest::from_text(&fs::read_to_string(with_ext(path, ".manifest"))?)?;
    if manifest.get("kind")? != kind {
        return Err(TaseError::Format(format!(
            "{}: expected a {kind} model, found {}",
            path.display(),
            manifest.get("kind")?
        )));
    }
    Ok((manifest, read_checkpoint(with_ext(path, ".ckpt"))?))
}
