//! Toy end-to-end experiment: training all stages on synthetic speakers and
//! scoring overlapped trials with every system, once per seed.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tase_core::dsp::Waveform;
use tase_core::eval::{compute_eer, det_curve, far_at_miss, generate_trials, miss_at_threshold, EvalManifest, EvalUtterance, Trial};
use tase_core::mixture::{
    add_noise_at_snr, make_mixture, Label, MixtureSpec, NontargetRatio, SimulatedTriplets, Speaker, TrainingTriplet,
    TripletSource,
};
use tase_core::losses::SiSnrMode;
use tase_core::models::{pool_embeddings, EnhancerConfig};
use tase_core::pipeline::{
    embedding_only_score, mean_output_power, mean_teacher_cosine, pretrain_embedder, stage2_joint_train,
    stage3_finetune, ts_distill, Embedder, Enrolled, SpeakerProfile, SpeechEnhancer, StageConfig, StageId, Verifier,
};
use tase_core::synth::{pink_noise, speech_shaped_noise, synthesize_utterance, VoiceProfile};

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const SPEAKERS: usize = 12;
const TRAIN_UTTS: usize = 10;
/// Exactly three per speaker, so every trial of a speaker shares one enrollment set.
const ENROLL_UTTS: usize = 3;
const TEST_MIX_PER_SPEAKER: usize = 16;
pub const TRIPLETS: usize = 2000;
const N_TARGET: usize = 100;
const N_NONTARGET: usize = 300;
const HELD_OUT_NONTARGET: usize = 40;

pub struct SeedOutcome {
    pub seed: u64,
    pub baseline_eer: f64,
    pub tase_eer: f64,
    /// FAR of each system at the vanilla system's EER-threshold miss rate.
    pub vanilla_far: f64,
    pub nontarget_far: f64,
    pub vanilla_power: f64,
    pub nontarget_power: f64,
    pub cosine_before: f64,
    pub cosine_after: f64,
    pub undistilled_eer: f64,
    pub distilled_eer: f64,
    pub noisy_pass1_eer: f64,
    pub noisy_fused_eer: f64,
}

struct EvalSet {
    manifest: EvalManifest,
    audio: HashMap<String, Waveform>,
    trials: Vec<Trial>,
}

fn speaker_id(i: usize) -> String {
    format!("spk{i:02}")
}

fn noise_for<R: Rng>(len: usize, rng: &mut R) -> Waveform {
    if rng.random_bool(0.5) {
        pink_noise(len, 0.05, rng).unwrap()
    } else {
        speech_shaped_noise(len, 0.05, rng).unwrap()
    }
}

fn build_eval_set(voices: &[VoiceProfile], rng: &mut ChaCha8Rng) -> EvalSet {
    let mut manifest = EvalManifest::default();
    let mut audio = HashMap::new();
    for (i, v) in voices.iter().enumerate() {
        for k in 0..ENROLL_UTTS {
            let id = format!("enr_{}_{k}", speaker_id(i));
            let d = rng.random_range(1.0..=2.0);
            audio.insert(id.clone(), synthesize_utterance(v, d, rng).unwrap());
            manifest.utterances.push(EvalUtterance { id, speakers: vec![speaker_id(i)], snr_db: None });
        }
    }
    for i in 0..voices.len() {
        for k in 0..TEST_MIX_PER_SPEAKER {
            let n = rng.random_range(2..=3);
            let sir = *[0.0, 6.0, 12.0].choose(rng).unwrap();
            let snr = *[6.0, 12.0, 18.0, 24.0, 30.0].choose(rng).unwrap();
            let spec = MixtureSpec::new(n, sir, snr).unwrap();
            let target = synthesize_utterance(&voices[i], rng.random_range(1.0..=1.5), rng).unwrap();
            let mut others: Vec<usize> = (0..voices.len()).filter(|&j| j != i).collect();
            let mut speakers = vec![speaker_id(i)];
            let mut interferers = Vec::new();
            for _ in 1..n {
                let pick = rng.random_range(0..others.len());
                let j = others.swap_remove(pick);
                speakers.push(speaker_id(j));
                interferers.push(synthesize_utterance(&voices[j], rng.random_range(1.0..=1.5), rng).unwrap());
            }
            let noise = noise_for(target.len(), rng);
            let mix = make_mixture(&spec, &target, &interferers, &noise, rng).unwrap();
            let id = format!("mix_{}_{k}", speaker_id(i));
            audio.insert(id.clone(), mix.mixture);
            manifest.utterances.push(EvalUtterance { id, speakers, snr_db: Some(snr) });
        }
    }
    let pool = generate_trials(&manifest, 3 * N_TARGET, 3 * N_NONTARGET, rng).unwrap();
    let overlapped = |t: &&Trial| !t.test_utterance.starts_with("enr_");
    let mut trials: Vec<Trial> =
        pool.iter().filter(|t| t.label == Label::Target).filter(overlapped).take(N_TARGET).cloned().collect();
    trials.extend(pool.iter().filter(|t| t.label == Label::Nontarget).filter(overlapped).take(N_NONTARGET).cloned());
    assert_eq!(trials.len(), N_TARGET + N_NONTARGET, "not enough overlapped trials");
    EvalSet { manifest, audio, trials }
}

fn labels(trials: &[Trial]) -> Vec<bool> {
    trials.iter().map(|t| t.label == Label::Target).collect()
}

fn embedding_only_scores(net: &Embedder, set: &EvalSet) -> Vec<f64> {
    let mut cache: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
    set.trials
        .iter()
        .map(|t| {
            let enr = cache
                .entry(t.enroll_utterances.clone())
                .or_insert_with(|| {
                    let embs: Vec<Vec<f64>> = t.enroll_utterances.iter().map(|u| net.embed(&set.audio[u]).unwrap()).collect();
                    pool_embeddings(&embs)
                })
                .clone();
            embedding_only_score(net, &enr, &set.audio[&t.test_utterance]).unwrap()
        })
        .collect()
}

/// Pass-1, pass-2 and fused scores for every trial.
fn tase_scores(v: &Verifier, set: &EvalSet, noisy_enrollments: Option<&HashMap<String, Waveform>>) -> Vec<(f64, f64, f64)> {
    let mut cache: HashMap<Vec<String>, Enrolled> = HashMap::new();
    set.trials
        .iter()
        .map(|t| {
            let enrolled = cache.entry(t.enroll_utterances.clone()).or_insert_with(|| {
                let source = noisy_enrollments.unwrap_or(&set.audio);
                let profile = SpeakerProfile {
                    speaker_id: t.enroll_speaker.clone(),
                    enrollments: t.enroll_utterances.iter().map(|u| source[u].clone()).collect(),
                };
                v.enroll(&profile).unwrap()
            });
            let r = v.verify_enrolled(enrolled, &set.audio[&t.test_utterance]).unwrap();
            (r.pass1_score, r.pass2_score, r.fused_score)
        })
        .collect()
}

fn eer(scores: &[f64], labels: &[bool]) -> f64 {
    compute_eer(scores, labels).unwrap().0
}

pub fn config(stage: StageId, seed: u64) -> StageConfig {
    let mut c = StageConfig::new(stage);
    c.seed = seed;
    match stage {
        StageId::Pretrain => c.epochs = 20,
        StageId::TsDistill => c.epochs = 10,
        StageId::JointTrain => {
            c.epochs = 2;
            c.batch = 4;
            c.si_snr_mode = SiSnrMode::Literal;
        }
        StageId::Finetune => c.max_steps = Some(10),
    }
    c
}

pub fn run_seed(seed: u64) -> SeedOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voices = VoiceProfile::stratified(SPEAKERS, &mut rng);
    let corpus: Vec<Speaker> = voices
        .iter()
        .enumerate()
        .map(|(i, v)| Speaker {
            id: speaker_id(i),
            utterances: (0..TRAIN_UTTS)
                .map(|_| synthesize_utterance(v, rng.random_range(1.0..=2.0), &mut rng).unwrap())
                .collect(),
        })
        .collect();
    let set = build_eval_set(&voices, &mut rng);
    let y = labels(&set.trials);

    let mut student = Embedder::student(seed).unwrap();
    let mut teacher = Embedder::teacher(seed + 1).unwrap();
    pretrain_embedder(&mut student, &corpus, &config(StageId::Pretrain, seed)).unwrap();
    pretrain_embedder(&mut teacher, &corpus, &config(StageId::Pretrain, seed + 1)).unwrap();

    let held_out: Vec<Waveform> =
        set.manifest.utterances.iter().filter(|u| u.id.starts_with("enr_")).map(|u| set.audio[&u.id].clone()).collect();
    let cosine_before = mean_teacher_cosine(&teacher, &student, &held_out).unwrap();
    let undistilled_eer = eer(&embedding_only_scores(&student, &set), &y);
    let mut distilled = student.clone();
    ts_distill(&teacher, &mut distilled, &corpus, &config(StageId::TsDistill, seed)).unwrap();
    let cosine_after = mean_teacher_cosine(&teacher, &distilled, &held_out).unwrap();
    let baseline_scores = embedding_only_scores(&distilled, &set);
    let distilled_eer = eer(&baseline_scores, &y);
    let baseline_eer = distilled_eer;

    let held_nontarget: Vec<TrainingTriplet> = (0..HELD_OUT_NONTARGET)
        .map(|i| {
            SimulatedTriplets {
                corpus: &corpus,
                count: HELD_OUT_NONTARGET,
                ratio: NontargetRatio { target: 0.0, nontarget: 1.0 },
                seed: seed + 1000,
            }
            .get(i)
            .unwrap()
        })
        .collect();

    let train_system = |ratio: NontargetRatio| -> (SpeechEnhancer, Embedder, Embedder) {
        let mut c = config(StageId::JointTrain, seed);
        c.nontarget_ratio = ratio;
        let triplets = SimulatedTriplets { corpus: &corpus, count: TRIPLETS, ratio, seed: seed + 500 };
        let mut enhancer = SpeechEnhancer::new(EnhancerConfig::default(), seed + 2).unwrap();
        let mut net1 = distilled.clone();
        stage2_joint_train(&mut enhancer, &mut net1, &triplets, &c).unwrap();
        let mut net2 = distilled.clone();
        stage3_finetune(&mut net2, &enhancer, &net1, &triplets, &corpus, &config(StageId::Finetune, seed)).unwrap();
        (enhancer, net1, net2)
    };

    let (v_enh, v_net1, v_net2) = train_system(NontargetRatio::NEVER);
    let (n_enh, n_net1, n_net2) = train_system(NontargetRatio::DEFAULT);
    let vanilla = Verifier { enhancer: &v_enh, net1: &v_net1, net2: &v_net2, fusion: Default::default() };
    let nontarget = Verifier { enhancer: &n_enh, net1: &n_net1, net2: &n_net2, fusion: Default::default() };
    let v_scores: Vec<f64> = tase_scores(&vanilla, &set, None).iter().map(|s| s.2).collect();
    let n_scores: Vec<f64> = tase_scores(&nontarget, &set, None).iter().map(|s| s.2).collect();

    let tase_eer = eer(&n_scores, &y);
    let (_, v_threshold) = compute_eer(&v_scores, &y).unwrap();
    let v_miss = miss_at_threshold(&v_scores, &y, v_threshold).unwrap();
    let vanilla_far = far_at_miss(&det_curve(&v_scores, &y).unwrap(), v_miss);
    let nontarget_far = far_at_miss(&det_curve(&n_scores, &y).unwrap(), v_miss);

    let vanilla_power = mean_output_power(&v_enh, &v_net1, &held_nontarget).unwrap();
    let nontarget_power = mean_output_power(&n_enh, &n_net1, &held_nontarget).unwrap();

    let mut noisy = HashMap::new();
    let mut nrng = ChaCha8Rng::seed_from_u64(seed + 2000);
    for u in set.manifest.utterances.iter().filter(|u| u.id.starts_with("enr_")) {
        let clean = &set.audio[&u.id];
        let noise = noise_for(clean.len(), &mut nrng);
        noisy.insert(u.id.clone(), add_noise_at_snr(clean, &noise, 6.0).unwrap());
    }
    let noisy_scores = tase_scores(&nontarget, &set, Some(&noisy));
    let p1: Vec<f64> = noisy_scores.iter().map(|s| s.0).collect();
    let fused: Vec<f64> = noisy_scores.iter().map(|s| s.2).collect();
    SeedOutcome {
        seed,
        baseline_eer,
        tase_eer,
        vanilla_far,
        nontarget_far,
        vanilla_power,
        nontarget_power,
        cosine_before,
        cosine_after,
        undistilled_eer,
        distilled_eer,
        noisy_pass1_eer: eer(&p1, &y),
        noisy_fused_eer: eer(&fused, &y),
    }
}
