//! Multi-stage training, enrollment and two-pass verification.
//!
//! Stage 1 pretrains the student and teacher embedders on a labelled speaker
//! corpus, then the student is distilled against the teacher. Stage 2 trains
//! the enhancer from scratch together with embedder 1, which supplies the
//! speaker bias. Stage 3 fine-tunes embedder 2 on enhanced and raw speech while
//! the enhancer stays frozen.
//!
//! Every stage draws its randomness from `(seed, step)`, so a stage is a pure
//! function of its inputs and configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tase_nnet::norm::{normalize_rows, normalize_rows_backward};
use tase_nnet::{clip_grad_norm, Checkpoint, CheckpointRecord, Optimizer, Parameter, Tensor};

use crate::dsp::{random_segment, stft_features, Waveform};
use crate::error::{invalid, Result, TaseError};
use crate::losses::{
    batch_triplet_loss, lmcl, si_snr, si_snr_with_null, student_loss, sv_loss, ts_mse, LossOutput, SiSnrMode,
    SvLossWeights, TaseWeights, LMCL_MARGIN, LMCL_SCALE, TRIPLET_MARGIN,
};
use crate::mixture::{
    add_noise_at_snr, triplet_rng, Label, NontargetRatio, Reference, Speaker, TrainingTriplet, TripletSource, SNR_GRID_DB,
};
use crate::models::{
    cosine, pool_embeddings, pool_embeddings_backward, voiced_frames, Enhancer, TdnnEmbedder, EMBED_DIM,
};
use crate::synth::{pink_noise, speech_shaped_noise};

pub type Embedder = TdnnEmbedder<f32>;
pub type SpeechEnhancer = Enhancer<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    Pretrain,
    TsDistill,
    JointTrain,
    Finetune,
}

impl FromStr for StageId {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(StageId::Pretrain),
            "ts_distill" => Ok(StageId::TsDistill),
            "joint_train" => Ok(StageId::JointTrain),
            "finetune" => Ok(StageId::Finetune),
            other => invalid(format!("unknown stage {other:?}")),
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::Pretrain => "pretrain",
            StageId::TsDistill => "ts_distill",
            StageId::JointTrain => "joint_train",
            StageId::Finetune => "finetune",
        })
    }
}

impl StageId {
    /// Mixed into the seed so stages sharing a seed draw different streams.
    fn salt(self) -> u64 {
        match self {
            StageId::Pretrain => 0x5031,
            StageId::TsDistill => 0x5032,
            StageId::JointTrain => 0x5033,
            StageId::Finetune => 0x5034,
        }
    }
}

/// How the two verification passes are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Mean,
    Pass1,
    Pass2,
}

impl FromStr for Fusion {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Fusion::Mean),
            "pass1" => Ok(Fusion::Pass1),
            "pass2" => Ok(Fusion::Pass2),
            other => invalid(format!("unknown fusion {other:?}")),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Mean => "mean",
            Fusion::Pass1 => "pass1",
            Fusion::Pass2 => "pass2",
        })
    }
}

/// Settings for one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub nontarget_ratio: NontargetRatio,
    pub si_snr_mode: SiSnrMode,
    pub fusion: Fusion,
    /// Enhancer training crop, in samples.
    pub crop_samples: usize,
    /// Joint gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Add pink or speech-shaped noise to half of the embedder training examples.
    pub augment: bool,
    /// Cap on optimizer steps per epoch.
    pub max_steps: Option<usize>,
    pub allow_undistilled: bool,
    /// Joint training: embedder 1 learning rate as a multiple of `lr`.
    pub embedder_lr_scale: f64,
    pub sv_weights: SvLossWeights,
    pub tase_weights: TaseWeights,
    pub corpus: Option<PathBuf>,
}

impl StageConfig {
    pub fn new(stage: StageId) -> Self {
        let (lr, epochs, batch) = match stage {
            StageId::Pretrain => (1e-3, 20, 16),
            StageId::TsDistill => (5e-4, 10, 16),
            StageId::JointTrain => (1e-3, 2, 4),
            StageId::Finetune => (1e-6, 1, 16),
        };
        StageConfig {
            stage,
            lr,
            epochs,
            batch,
            seed: 0,
            nontarget_ratio: NontargetRatio::DEFAULT,
            si_snr_mode: SiSnrMode::Standard,
            fusion: Fusion::Mean,
            crop_samples: 4000,
            clip_norm: 5.0,
            augment: true,
            max_steps: None,
            allow_undistilled: false,
            embedder_lr_scale: 1.0,
            sv_weights: SvLossWeights::default(),
            tase_weights: TaseWeights::default(),
            corpus: None,
        }
    }

    /// Parses a flat `key = value` TOML file; absent keys take the stage defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| TaseError::Format(e.to_string()))?;
        let mut c = StageConfig::new(raw.stage.parse()?);
        if let Some(v) = raw.lr {
            c.lr = v;
        }
        if let Some(v) = raw.epochs {
            c.epochs = v;
        }
        if let Some(v) = raw.batch {
            c.batch = v;
        }
        if let Some(v) = raw.seed {
            c.seed = v;
        }
        if let Some(v) = raw.nontarget_ratio {
            c.nontarget_ratio = v.parse()?;
        }
        if let Some(v) = raw.si_snr_mode {
            c.si_snr_mode = v.parse()?;
        }
        if let Some(v) = raw.fusion {
            c.fusion = v.parse()?;
        }
        if let Some(v) = raw.crop_samples {
            c.crop_samples = v;
        }
        if let Some(v) = raw.clip_norm {
            c.clip_norm = v;
        }
        if let Some(v) = raw.augment {
            c.augment = v;
        }
        c.max_steps = raw.max_steps.or(c.max_steps);
        if let Some(v) = raw.allow_undistilled {
            c.allow_undistilled = v;
        }
        if let Some(v) = raw.embedder_lr_scale {
            c.embedder_lr_scale = v;
        }
        if let Some(v) = raw.omega1 {
            c.sv_weights.omega1 = v;
        }
        if let Some(v) = raw.omega2 {
            c.sv_weights.omega2 = v;
        }
        c.corpus = raw.corpus.or(c.corpus);
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "stage = \"{}\"\nlr = {:e}\nepochs = {}\nbatch = {}\nseed = {}\nnontarget_ratio = \"{}\"\n\
             si_snr_mode = \"{}\"\nfusion = \"{}\"\ncrop_samples = {}\nclip_norm = {:?}\naugment = {}\n\
             allow_undistilled = {}\nembedder_lr_scale = {:?}\nomega1 = {:?}\nomega2 = {:?}\n",
            self.stage,
            self.lr,
            self.epochs,
            self.batch,
            self.seed,
            self.nontarget_ratio,
            self.si_snr_mode,
            self.fusion,
            self.crop_samples,
            self.clip_norm,
            self.augment,
            self.allow_undistilled,
            self.embedder_lr_scale,
            self.sv_weights.omega1,
            self.sv_weights.omega2,
        );
        if let Some(m) = self.max_steps {
            s.push_str(&format!("max_steps = {m}\n"));
        }
        if let Some(p) = &self.corpus {
            s.push_str(&format!("corpus = {:?}\n", p.display().to_string()));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch == 0 {
            return invalid("batch size must be positive");
        }
        if self.crop_samples < 256 {
            return invalid(format!("crop of {} samples is too short", self.crop_samples));
        }
        if self.clip_norm < 0.0 {
            return invalid("clip_norm must be non-negative");
        }
        if !(self.embedder_lr_scale >= 0.0 && self.embedder_lr_scale.is_finite()) {
            return invalid(format!("embedder_lr_scale {} must be non-negative", self.embedder_lr_scale));
        }
        Ok(())
    }

    fn expect_stage(&self, stage: StageId) -> Result<()> {
        if self.stage != stage {
            return invalid(format!("config is for stage {}, not {stage}", self.stage));
        }
        self.validate()
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        triplet_rng(self.seed ^ self.stage.salt(), step)
    }

    fn steps_per_epoch(&self, natural: usize) -> usize {
        let n = natural.max(1);
        self.max_steps.map_or(n, |m| m.min(n))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    stage: String,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    nontarget_ratio: Option<String>,
    si_snr_mode: Option<String>,
    fusion: Option<String>,
    crop_samples: Option<usize>,
    clip_norm: Option<f64>,
    augment: Option<bool>,
    max_steps: Option<usize>,
    allow_undistilled: Option<bool>,
    embedder_lr_scale: Option<f64>,
    omega1: Option<f64>,
    omega2: Option<f64>,
    corpus: Option<PathBuf>,
}

/// Loss after every optimizer step, and per-epoch means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Largest gradient element applied by fine-tuning's SGD steps.
    pub max_abs_grad: f64,
}

impl TrainLog {
    fn close_epoch(&mut self, from: usize) {
        let steps = &self.step_losses[from..];
        self.epoch_losses.push(steps.iter().sum::<f64>() / steps.len().max(1) as f64);
    }
}

/// LMCL class weights, one row per training speaker.
#[derive(Clone, Debug)]
pub struct SpeakerHead {
    pub weights: Parameter<f32>,
}

impl SpeakerHead {
    pub fn random(name: &str, classes: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..classes * EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        SpeakerHead::from_rows(name, classes, data)
    }

    /// Rows initialized at each class's mean embedding.
    pub fn prototypes(name: &str, net: &Embedder, classes: &[Vec<&Waveform>]) -> Result<Self> {
        let mut data = Vec::with_capacity(classes.len() * EMBED_DIM);
        for utts in classes {
            let embs = utts.iter().map(|u| net.embed(u)).collect::<Result<Vec<_>>>()?;
            if embs.is_empty() {
                return Err(TaseError::Insufficient("class without utterances".into()));
            }
            data.extend(pool_embeddings(&embs).iter().map(|&v| v as f32));
        }
        Ok(SpeakerHead::from_rows(name, classes.len(), data))
    }

    fn from_rows(name: &str, classes: usize, data: Vec<f32>) -> Self {
        let value = Tensor::from_vec(&[classes, EMBED_DIM], data).expect("shape matches data");
        SpeakerHead { weights: Parameter::new(format!("{name}.lmcl"), value, false) }
    }

    /// The randomly initialized head `pretrain_embedder` starts from.
    pub fn for_pretraining(net: &Embedder, corpus: &[Speaker], config: &StageConfig) -> Self {
        SpeakerHead::random(net.network().name(), corpus.len(), config.seed)
    }

    pub fn classes(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let w = &self.weights;
        Checkpoint {
            records: vec![CheckpointRecord {
                name: w.name.clone(),
                shape: w.value.shape().to_vec(),
                values: w.value.data().to_vec(),
            }],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let rec = match ckpt.records.as_slice() {
            [r] if r.name.ends_with(".lmcl") && r.shape.len() == 2 && r.shape[1] == EMBED_DIM => r,
            _ => return Err(TaseError::Format("expected a single LMCL weight record".into())),
        };
        let name = rec.name.trim_end_matches(".lmcl");
        Ok(SpeakerHead::from_rows(name, rec.shape[0], rec.values.clone()))
    }

    fn normalized(&self) -> (Vec<f64>, Vec<f64>) {
        let raw: Vec<f64> = self.weights.value.data().iter().map(|&v| v as f64).collect();
        normalize_rows(&raw, EMBED_DIM)
    }

    /// Adds the gradient on the normalized rows to the raw weights.
    fn accumulate(&mut self, normalized: &[f64], norms: &[f64], grad: &[f64]) {
        let g = normalize_rows_backward(normalized, norms, grad, EMBED_DIM);
        for (dst, src) in self.weights.grad.data_mut().iter_mut().zip(g) {
            *dst += src as f32;
        }
    }
}

/// Anything that can supply regression targets for distillation.
pub trait TeacherModel {
    fn embed_dim(&self) -> usize;
    fn teacher_embedding(&self, input: &Tensor<f32>) -> Result<Vec<f64>>;
}

impl TeacherModel for Embedder {
    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    fn teacher_embedding(&self, input: &Tensor<f32>) -> Result<Vec<f64>> {
        self.embed_input(input)
    }
}

/// Network input for a random voiced segment of `utterance`, optionally noise-augmented.
pub fn sv_example<R: Rng + ?Sized>(utterance: &Waveform, augment: bool, rng: &mut R) -> Result<Tensor<f32>> {
    let wave = if augment && rng.random_bool(0.5) {
        let noise = if rng.random_bool(0.5) {
            pink_noise(utterance.len(), 0.05, rng)?
        } else {
            speech_shaped_noise(utterance.len(), 0.05, rng)?
        };
        let snr = *SNR_GRID_DB.choose(rng).expect("grid is nonempty");
        add_noise_at_snr(utterance, &noise, snr)?
    } else {
        utterance.clone()
    };
    let features = stft_features(&wave)?;
    let voiced = match voiced_frames(&features) {
        Ok(v) => v,
        Err(TaseError::NoVoicedFrames) => features,
        Err(e) => return Err(e),
    };
    Embedder::input_tensor(&random_segment(&voiced, rng)?)
}

fn embedding_matrix(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Ok(Tensor::from_vec(&[rows.len(), EMBED_DIM], rows.concat())?)
}

fn row(t: &Tensor<f64>, i: usize) -> &[f64] {
    &t.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM]
}

/// L_SV (plus L_MSE when teacher targets are given) for a batch of forward
/// passes. Accumulates the head and L2 gradients and returns the loss with
/// the gradient on each embedding.
fn sv_objective(
    net: &mut Embedder,
    head: &mut SpeakerHead,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    teacher: Option<&[Vec<f64>]>,
    weights: SvLossWeights,
) -> Result<(f64, Tensor<f64>)> {
    let e = embedding_matrix(embeddings)?;
    let (w, norms) = head.normalized();
    let w_t = Tensor::from_vec(&[head.classes(), EMBED_DIM], w.clone())?;
    let trip = batch_triplet_loss(&e, labels, TRIPLET_MARGIN)?;
    let lm = lmcl(&e, labels, &w_t, LMCL_MARGIN, LMCL_SCALE)?;
    let l2 = LossOutput::scalar(net.network_mut().l2_penalty(weights.omega2 as f32) as f64);
    let sv = sv_loss(&trip, &lm, &l2, weights)?;
    head.accumulate(&w, &norms, sv.grad("class_weights").data());
    let mut grad = sv.grad("embeddings").clone();
    let mut value = sv.value;
    if let Some(targets) = teacher {
        let mse = ts_mse(&embedding_matrix(targets)?, &e)?;
        value = student_loss(&sv, &mse)?.value;
        grad.add_assign(mse.grad("student"))?;
    }
    Ok((value, grad))
}

fn check_corpus(corpus: &[Speaker]) -> Result<()> {
    if corpus.len() < 2 {
        return Err(TaseError::Insufficient(format!("{} speaker classes; at least 2 are needed", corpus.len())));
    }
    if let Some(s) = corpus.iter().find(|s| s.utterances.is_empty()) {
        return Err(TaseError::Insufficient(format!("speaker {} has no utterances", s.id)));
    }
    Ok(())
}

/// Speaker-balanced batch: pairs of utterances from distinct speakers.
fn sample_sv_batch<R: Rng + ?Sized>(corpus: &[Speaker], batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let speakers = (batch / 2).clamp(1, corpus.len());
    let per = batch.div_ceil(speakers).max(2);
    let mut ids: Vec<usize> = (0..corpus.len()).collect();
    ids.shuffle(rng);
    let mut out = Vec::with_capacity(speakers * per);
    for &s in &ids[..speakers] {
        let mut utts: Vec<usize> = (0..corpus[s].utterances.len()).collect();
        utts.shuffle(rng);
        for k in 0..per {
            out.push((s, utts[k % utts.len()]));
        }
    }
    out
}

/// Trains `net` with L_SV, or L_S when a teacher is given.
fn train_embedder(
    net: &mut Embedder,
    head: &mut SpeakerHead,
    corpus: &[Speaker],
    teacher: Option<&dyn TeacherModel>,
    config: &StageConfig,
    from_step: usize,
) -> Result<TrainLog> {
    let total_utts: usize = corpus.iter().map(|s| s.utterances.len()).sum();
    let steps = config.steps_per_epoch(total_utts.div_ceil(config.batch));
    let mut opt = Optimizer::<f32>::adam(config.lr);
    let mut log = TrainLog::default();
    let mut start = 0;
    for step in from_step..config.epochs * steps {
        {
            let mut rng = config.step_rng(step as u64);
            let picks = sample_sv_batch(corpus, config.batch, &mut rng);
            let mut embs = Vec::with_capacity(picks.len());
            let mut traces = Vec::with_capacity(picks.len());
            let mut targets = Vec::new();
            for &(spk, utt) in &picks {
                let input = sv_example(&corpus[spk].utterances[utt], config.augment, &mut rng)?;
                if let Some(t) = teacher {
                    targets.push(t.teacher_embedding(&input)?);
                }
                let (e, tr) = net.forward(&input)?;
                embs.push(e);
                traces.push(tr);
            }
            let labels: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let (value, grad) = sv_objective(
                net,
                head,
                &embs,
                &labels,
                teacher.map(|_| targets.as_slice()),
                config.sv_weights,
            )?;
            for (i, tr) in traces.iter().enumerate() {
                net.backward(tr, row(&grad, i))?;
            }
            step_embedder(net, Some(head), &mut opt, config.clip_norm);
            log.step_losses.push(value);
        }
        if (step + 1) % steps == 0 {
            log.close_epoch(start);
            start = log.step_losses.len();
        }
    }
    Ok(log)
}

fn step_embedder(net: &mut Embedder, head: Option<&mut SpeakerHead>, opt: &mut Optimizer<f32>, clip: f64) {
    let mut head_param = head.map(|h| &mut h.weights);
    if clip > 0.0 {
        clip_grad_norm(net.network_mut().params_mut().chain(head_param.iter_mut().map(|p| &mut **p)), clip);
    }
    opt.step(net.network_mut().params_mut().chain(head_param));
    net.network_mut().touch();
}

/// Pretrains one embedder with L_SV from a randomly initialized LMCL head.
pub fn pretrain_embedder(net: &mut Embedder, corpus: &[Speaker], config: &StageConfig) -> Result<TrainLog> {
    config.expect_stage(StageId::Pretrain)?;
    check_corpus(corpus)?;
    let mut head = SpeakerHead::for_pretraining(net, corpus, config);
    train_embedder(net, &mut head, corpus, None, config, 0)
}

/// Continues pretraining at global step `from_step` with a saved head.
///
/// Optimizer moments restart from zero, so only the first resumed step
/// matches an uninterrupted run exactly.
pub fn pretrain_resume(
    net: &mut Embedder,
    head: &mut SpeakerHead,
    corpus: &[Speaker],
    config: &StageConfig,
    from_step: usize,
) -> Result<TrainLog> {
    config.expect_stage(StageId::Pretrain)?;
    check_corpus(corpus)?;
    if head.classes() != corpus.len() {
        return invalid(format!("head has {} classes for {} speakers", head.classes(), corpus.len()));
    }
    train_embedder(net, head, corpus, None, config, from_step)
}

/// Stage 1: pretrains the student and the teacher on the same corpus.
pub fn stage1_pretrain(
    student: &mut Embedder,
    teacher: &mut Embedder,
    corpus: &[Speaker],
    config: &StageConfig,
) -> Result<(TrainLog, TrainLog)> {
    let s = pretrain_embedder(student, corpus, config)?;
    let t = pretrain_embedder(teacher, corpus, config)?;
    Ok((s, t))
}

fn class_utterances(corpus: &[Speaker], per_class: usize) -> Vec<Vec<&Waveform>> {
    corpus.iter().map(|s| s.utterances.iter().take(per_class).collect()).collect()
}

/// Trains the student with L_S = L_SV + L_MSE against a frozen teacher and marks it distilled.
pub fn ts_distill(
    teacher: &dyn TeacherModel,
    student: &mut Embedder,
    corpus: &[Speaker],
    config: &StageConfig,
) -> Result<TrainLog> {
    config.expect_stage(StageId::TsDistill)?;
    check_corpus(corpus)?;
    if teacher.embed_dim() != EMBED_DIM {
        return invalid(format!("teacher embeds in {} dims, student in {EMBED_DIM}", teacher.embed_dim()));
    }
    let mut head = SpeakerHead::prototypes(student.network().name(), student, &class_utterances(corpus, 4))?;
    let log = train_embedder(student, &mut head, corpus, Some(teacher), config, 0)?;
    student.distilled = true;
    Ok(log)
}

/// Mean cosine between student and teacher embeddings of full utterances.
pub fn mean_teacher_cosine(teacher: &dyn TeacherModel, student: &Embedder, utterances: &[Waveform]) -> Result<f64> {
    if utterances.is_empty() {
        return invalid("no utterances");
    }
    let mut total = 0.0;
    for u in utterances {
        let voiced = voiced_frames(&stft_features(u)?)?;
        let input = Embedder::input_tensor(&voiced)?;
        total += cosine(&teacher.teacher_embedding(&input)?, &student.embed_input(&input)?);
    }
    Ok(total / utterances.len() as f64)
}

/// Picks a crop start where the reference carries a fair share of its energy.
fn crop_start<R: Rng + ?Sized>(reference: Option<&Waveform>, len: usize, crop: usize, rng: &mut R) -> usize {
    if len <= crop {
        return 0;
    }
    let Some(r) = reference else {
        return rng.random_range(0..=len - crop);
    };
    let total: f64 = r.samples().iter().map(|v| v * v).sum();
    let mut best = (f64::NEG_INFINITY, 0);
    for _ in 0..8 {
        let s = rng.random_range(0..=len - crop);
        let e: f64 = r.samples()[s..s + crop].iter().map(|v| v * v).sum();
        if e >= 0.25 * total * crop as f64 / len as f64 {
            return s;
        }
        if e > best.0 {
            best = (e, s);
        }
    }
    best.1
}

fn crop(w: &Waveform, start: usize, len: usize) -> Result<Waveform> {
    w.slice(start, len.min(w.len() - start))
}

/// Stage 2: trains the enhancer and embedder 1 jointly under L_TASE.
///
/// Each triplet contributes −SI-SNR on a random crop of its test mixture (the
/// NULL-reference branch for nontarget triplets); the enrollment embeddings
/// feed both the speaker bias and a batch-level L_SV.
pub fn stage2_joint_train(
    enhancer: &mut SpeechEnhancer,
    net1: &mut Embedder,
    triplets: &dyn TripletSource,
    config: &StageConfig,
) -> Result<TrainLog> {
    config.expect_stage(StageId::JointTrain)?;
    if !net1.distilled && !config.allow_undistilled {
        return Err(TaseError::StageOrder(
            "embedder 1 has not been distilled; set allow_undistilled to train it anyway".into(),
        ));
    }
    if triplets.is_empty() {
        return Err(TaseError::Insufficient("empty triplet corpus".into()));
    }
    if config.nontarget_ratio.probability() > 0.0 && triplets.labels()?.iter().all(|&l| l == Label::Target) {
        warn!("nontarget ratio is {} but the corpus has no nontarget triplets", config.nontarget_ratio);
    }
    let classes = triplets.enrollment_classes(4)?;
    let index: BTreeMap<String, usize> = classes.iter().enumerate().map(|(i, c)| (c.0.clone(), i)).collect();
    let class_utts: Vec<Vec<&Waveform>> = classes.iter().map(|c| c.1.iter().collect()).collect();
    let mut head = SpeakerHead::prototypes(net1.network().name(), net1, &class_utts)?;
    let steps = config.steps_per_epoch(triplets.len().div_ceil(config.batch));
    let mut opt = Optimizer::<f32>::adam(config.lr);
    // A zero scale freezes embedder 1.
    let mut opt_net1 = (config.embedder_lr_scale > 0.0).then(|| Optimizer::<f32>::adam(config.lr * config.embedder_lr_scale));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut config.step_rng(u64::MAX - epoch as u64));
        let start = log.step_losses.len();
        for s in 0..steps {
            let mut rng = config.step_rng((epoch * steps + s) as u64);
            let picks = (0..config.batch)
                .map(|k| triplets.get(order[(s * config.batch + k) % order.len()]))
                .collect::<Result<Vec<_>>>()?;
            let value = joint_step(enhancer, net1, &mut head, &picks, &index, config, &mut rng)?;
            let clip = config.clip_norm;
            if clip > 0.0 {
                clip_grad_norm(enhancer.params_mut(), clip);
            }
            opt.step(enhancer.params_mut());
            enhancer.touch();
            match opt_net1.as_mut() {
                Some(o) => step_embedder(net1, Some(&mut head), o, clip),
                None => {
                    net1.network_mut().zero_grad();
                    head.weights.zero_grad();
                }
            }
            log.step_losses.push(value);
        }
        log.close_epoch(start);
    }
    Ok(log)
}

/// Forward and backward for one batch of triplets; returns the batch L_TASE.
fn joint_step<R: Rng + ?Sized>(
    enhancer: &mut SpeechEnhancer,
    net1: &mut Embedder,
    head: &mut SpeakerHead,
    picks: &[TrainingTriplet],
    index: &BTreeMap<String, usize>,
    config: &StageConfig,
    rng: &mut R,
) -> Result<f64> {
    let n = picks.len() as f64;
    let mut embs = Vec::new();
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    let mut upstream: Vec<Vec<f64>> = Vec::new();
    let mut enh_total = 0.0;
    for t in picks {
        let first = embs.len();
        for u in &t.enrollment {
            let (e, tr) = net1.forward(&sv_example(u, false, rng)?)?;
            embs.push(e);
            traces.push(tr);
            labels.push(*index.get(&t.enrolled_speaker).ok_or_else(|| {
                TaseError::InvalidInput(format!("speaker {} has no enrollment class", t.enrolled_speaker))
            })?);
        }
        let bias = pool_embeddings(&embs[first..]);
        let reference = match &t.reference {
            Reference::Clean(w) => Some(w),
            Reference::Null => None,
        };
        let start = crop_start(reference, t.test_mixture.len(), config.crop_samples, rng);
        let mix = crop(&t.test_mixture, start, config.crop_samples)?;
        let reference = reference.map(|r| crop(r, start, config.crop_samples)).transpose()?;
        let (est, trace) = enhancer.forward(mix.samples(), &bias)?;
        let est = Waveform::new(est)?;
        let snr = si_snr_with_null(&est, t.label, reference.as_ref(), config.si_snr_mode, rng)?;
        enh_total -= snr.value;
        let k = -config.tase_weights.enhancement / n;
        let g: Vec<f64> = snr.grad("estimate").data().iter().map(|v| v * k).collect();
        let g_bias = enhancer.backward(&trace, &g)?;
        upstream.extend(pool_embeddings_backward(&embs[first..], &g_bias));
    }
    let w_sv = config.tase_weights.sv;
    let (sv_value, sv_grad) = sv_objective(net1, head, &embs, &labels, None, config.sv_weights)?;
    for (i, tr) in traces.iter().enumerate() {
        let g: Vec<f64> = upstream[i].iter().zip(row(&sv_grad, i)).map(|(u, s)| u + w_sv * s).collect();
        net1.backward(tr, &g)?;
    }
    Ok(config.tase_weights.enhancement * enh_total / n + w_sv * sv_value)
}

/// Stage 3: fine-tunes embedder 2 with the triplet loss on a 50/50 mix of
/// enhanced target mixtures and raw corpus utterances. The enhancer and
/// embedder 1 are only read.
pub fn stage3_finetune(
    net2: &mut Embedder,
    enhancer: &SpeechEnhancer,
    net1: &Embedder,
    triplets: &dyn TripletSource,
    corpus: &[Speaker],
    config: &StageConfig,
) -> Result<TrainLog> {
    config.expect_stage(StageId::Finetune)?;
    check_corpus(corpus)?;
    let index: BTreeMap<&str, usize> = corpus.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let targets: Vec<usize> = triplets
        .labels()?
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == Label::Target)
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Err(TaseError::Insufficient("no target triplets".into()));
    }
    let half = (config.batch / 2).max(1);
    let steps = config.steps_per_epoch(targets.len().div_ceil(half));
    let mut opt = Optimizer::<f32>::sgd(config.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut config.step_rng(u64::MAX - epoch as u64));
        let start = log.step_losses.len();
        for s in 0..steps {
            let mut rng = config.step_rng((epoch * steps + s) as u64);
            let mut inputs = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for k in 0..half {
                let t = triplets.get(targets[order[(s * half + k) % order.len()]])?;
                let label = *index.get(t.enrolled_speaker.as_str()).ok_or_else(|| {
                    TaseError::InvalidInput(format!("speaker {} is not in the corpus", t.enrolled_speaker))
                })?;
                let bias = enroll_bias_or_err(net1, &t.enrollment)?;
                let enhanced = enhancer.enhance(&t.test_mixture, &bias)?;
                inputs.push(sv_example(&enhanced, false, &mut rng)?);
                labels.push(label);
            }
            for &(spk, utt) in sample_sv_batch(corpus, half, &mut rng).iter().take(half) {
                inputs.push(sv_example(&corpus[spk].utterances[utt], false, &mut rng)?);
                labels.push(spk);
            }
            let mut embs = Vec::with_capacity(inputs.len());
            let mut traces = Vec::with_capacity(inputs.len());
            for input in &inputs {
                let (e, tr) = net2.forward(input)?;
                embs.push(e);
                traces.push(tr);
            }
            let trip = batch_triplet_loss(&embedding_matrix(&embs)?, &labels, TRIPLET_MARGIN)?;
            for (i, tr) in traces.iter().enumerate() {
                net2.backward(tr, row(trip.grad("embeddings"), i))?;
            }
            for p in net2.network().params() {
                for &g in p.grad.data() {
                    log.max_abs_grad = log.max_abs_grad.max(g.abs() as f64);
                }
            }
            step_embedder(net2, None, &mut opt, 0.0);
            log.step_losses.push(trip.value);
        }
        log.close_epoch(start);
    }
    Ok(log)
}

fn enroll_bias_or_err(net: &Embedder, utterances: &[Waveform]) -> Result<Vec<f64>> {
    let embs = utterances.iter().map(|u| net.embed(u)).collect::<Result<Vec<_>>>()?;
    if embs.is_empty() {
        return invalid("enrollment needs at least one utterance");
    }
    Ok(pool_embeddings(&embs))
}

/// Embedding of the voiced part of `w`, or `None` when nothing is voiced.
pub fn embed_if_voiced(net: &Embedder, w: &Waveform) -> Result<Option<Vec<f64>>> {
    match net.embed(w) {
        Ok(e) => Ok(Some(e)),
        Err(TaseError::NoVoicedFrames) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Score assigned when a test signal has no voiced frames left to embed.
pub const SILENT_SCORE: f64 = -1.0;

/// Mean SI-SNR of enhanced target mixtures against their references.
pub fn mean_target_si_snr(
    enhancer: &SpeechEnhancer,
    net1: &Embedder,
    triplets: &[TrainingTriplet],
    mode: SiSnrMode,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in triplets {
        if let Reference::Clean(r) = &t.reference {
            let bias = enroll_bias_or_err(net1, &t.enrollment)?;
            total += si_snr(&enhancer.enhance(&t.test_mixture, &bias)?, r, mode)?.value;
            n += 1;
        }
    }
    if n == 0 {
        return Err(TaseError::Insufficient("no target triplets".into()));
    }
    Ok(total / n as f64)
}

/// Mean power of the enhancer output over the given triplets.
pub fn mean_output_power(enhancer: &SpeechEnhancer, net1: &Embedder, triplets: &[TrainingTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(TaseError::Insufficient("no triplets".into()));
    }
    let mut total = 0.0;
    for t in triplets {
        let bias = enroll_bias_or_err(net1, &t.enrollment)?;
        total += enhancer.enhance(&t.test_mixture, &bias)?.power();
    }
    Ok(total / triplets.len() as f64)
}

/// An enrolled speaker's raw enrollment utterances.
#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub enrollments: Vec<Waveform>,
}

/// Per-speaker quantities shared by every trial against that speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Enrolled {
    pub speaker_id: String,
    /// Embedder-1 bias from the raw enrollments.
    pub raw_bias: Vec<f64>,
    /// Embedder-2 pooled embedding of the raw enrollments.
    pub raw_embedding: Vec<f64>,
    /// Embedder-1 bias from the self-enhanced enrollments.
    pub pass2_bias: Vec<f64>,
    pub pass2_embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationResult {
    pub pass1_score: f64,
    pub pass2_score: f64,
    pub fused_score: f64,
}

/// Trained models for inference. Nothing here mutates them.
#[derive(Clone, Copy)]
pub struct Verifier<'a> {
    pub enhancer: &'a SpeechEnhancer,
    pub net1: &'a Embedder,
    pub net2: &'a Embedder,
    pub fusion: Fusion,
}

impl Verifier<'_> {
    /// Computes both passes' enrollment quantities. In pass 2 each raw
    /// enrollment is enhanced with the raw bias; an enrollment left with no
    /// voiced frames falls back to its raw embedding.
    pub fn enroll(&self, profile: &SpeakerProfile) -> Result<Enrolled> {
        if profile.enrollments.is_empty() {
            return invalid(format!("profile {} has no enrollment utterances", profile.speaker_id));
        }
        let raw1 = profile.enrollments.iter().map(|u| self.net1.embed(u)).collect::<Result<Vec<_>>>()?;
        let raw2 = profile.enrollments.iter().map(|u| self.net2.embed(u)).collect::<Result<Vec<_>>>()?;
        let raw_bias = pool_embeddings(&raw1);
        let mut enh1 = Vec::with_capacity(raw1.len());
        let mut enh2 = Vec::with_capacity(raw2.len());
        for (i, u) in profile.enrollments.iter().enumerate() {
            let enhanced = self.enhancer.enhance(u, &raw_bias)?;
            enh1.push(embed_if_voiced(self.net1, &enhanced)?.unwrap_or_else(|| raw1[i].clone()));
            enh2.push(embed_if_voiced(self.net2, &enhanced)?.unwrap_or_else(|| raw2[i].clone()));
        }
        Ok(Enrolled {
            speaker_id: profile.speaker_id.clone(),
            raw_bias,
            raw_embedding: pool_embeddings(&raw2),
            pass2_bias: pool_embeddings(&enh1),
            pass2_embedding: pool_embeddings(&enh2),
        })
    }

    fn score_pass(&self, test: &Waveform, bias: &[f64], enrolled_embedding: &[f64]) -> Result<f64> {
        let enhanced = self.enhancer.enhance(test, bias)?;
        Ok(match embed_if_voiced(self.net2, &enhanced)? {
            Some(e) => cosine(enrolled_embedding, &e),
            None => SILENT_SCORE,
        })
    }

    pub fn verify_enrolled(&self, enrolled: &Enrolled, test: &Waveform) -> Result<VerificationResult> {
        let pass1_score = self.score_pass(test, &enrolled.raw_bias, &enrolled.raw_embedding)?;
        let pass2_score = self.score_pass(test, &enrolled.pass2_bias, &enrolled.pass2_embedding)?;
        let fused_score = match self.fusion {
            Fusion::Mean => 0.5 * (pass1_score + pass2_score),
            Fusion::Pass1 => pass1_score,
            Fusion::Pass2 => pass2_score,
        };
        Ok(VerificationResult { pass1_score, pass2_score, fused_score })
    }

    /// Enrolls `profile` and scores `test` in two passes.
    pub fn verify_two_pass(&self, profile: &SpeakerProfile, test: &Waveform) -> Result<VerificationResult> {
        self.verify_enrolled(&self.enroll(profile)?, test)
    }
}

/// Cosine between an enrollment embedding and the raw test embedding; no enhancement.
pub fn embedding_only_score(net: &Embedder, enrollment_embedding: &[f64], test: &Waveform) -> Result<f64> {
    Ok(match embed_if_voiced(net, test)? {
        Some(e) => cosine(enrollment_embedding, &e),
        None => SILENT_SCORE,
    })
}
