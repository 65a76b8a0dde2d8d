use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tase_core::dsp::{read_wav, write_wav, Waveform};
use tase_core::eval::{
    evaluate, generate_trials, parse_trials, score_trials, trials_to_text, EvalManifest, EvalUtterance, ScoredTrial,
};
use tase_core::mixture::{generate_triplets, write_corpus, DiskTriplets, NontargetRatio, Speaker};
use tase_core::models::{pool_embeddings, EnhancerConfig};
use tase_core::pipeline::{
    embedding_only_score, stage1_pretrain, stage2_joint_train, stage3_finetune, ts_distill, Embedder, Enrolled,
    SpeakerProfile, SpeechEnhancer, StageConfig, StageId, Verifier,
};
use tase_core::synth::toy_speakers;

#[derive(Parser)]
#[command(name = "tase", version, about = "Target speaker enhancement for speaker verification")]
struct Cli {
    /// Flat TOML stage configuration; absent keys take the stage defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a toy speaker corpus as <out>/<speaker>/<utt>.wav plus utterances.tsv.
    SynthSpeakers {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        min_secs: f64,
        #[arg(long, default_value_t = 2.0)]
        max_secs: f64,
    },
    /// Simulate a triplet corpus from a speaker directory.
    Simulate {
        #[arg(long)]
        speakers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// target:nontarget, e.g. 11:1; inf:1 disables nontarget triplets.
        #[arg(long, default_value = "11:1")]
        ratio: String,
    },
    /// Stage 1: pretrain the student and teacher embedders.
    Pretrain {
        #[arg(long)]
        speakers: PathBuf,
        /// Writes <out>/student.* and <out>/teacher.*.
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher/student distillation of the student embedder.
    Distill {
        #[arg(long)]
        speakers: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the enhancer jointly with embedder 1.
    TrainEnhancer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        net1: PathBuf,
        #[arg(long)]
        out_enhancer: PathBuf,
        #[arg(long)]
        out_net1: PathBuf,
        #[arg(long)]
        allow_undistilled: bool,
    },
    /// Stage 3: fine-tune embedder 2 with the enhancer frozen.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        speakers: PathBuf,
        #[arg(long)]
        enhancer: PathBuf,
        #[arg(long)]
        net1: PathBuf,
        #[arg(long)]
        net2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enroll a speaker from WAV files into a JSON profile.
    Enroll {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out: PathBuf,
        wavs: Vec<PathBuf>,
    },
    /// Score one test WAV against an enrolled profile.
    Verify {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        profile: PathBuf,
        test: PathBuf,
    },
    /// Draw trials from an utterance list.
    Trials {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_target: usize,
        #[arg(long, default_value_t = 1000)]
        n_nontarget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial file; utterance <id> is read from <audio>/<id>.wav.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Embedder used for scoring (embedder 2).
        #[arg(long)]
        net2: PathBuf,
        /// Enhancer and embedder 1; omit both for embedding-only scoring.
        #[arg(long, requires = "net1")]
        enhancer: Option<PathBuf>,
        #[arg(long, requires = "enhancer")]
        net1: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and DET from a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        by_snr: bool,
        /// Machine-readable report with per-trial scores and DET points.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(long)]
    enhancer: PathBuf,
    #[arg(long)]
    net1: PathBuf,
    #[arg(long)]
    net2: PathBuf,
}

struct LoadedModels {
    enhancer: SpeechEnhancer,
    net1: Embedder,
    net2: Embedder,
}

impl ModelArgs {
    fn load(&self) -> Result<LoadedModels> {
        Ok(LoadedModels {
            enhancer: SpeechEnhancer::load(&self.enhancer).with_context(|| format!("loading {}", self.enhancer.display()))?,
            net1: Embedder::load(&self.net1).with_context(|| format!("loading {}", self.net1.display()))?,
            net2: Embedder::load(&self.net2).with_context(|| format!("loading {}", self.net2.display()))?,
        })
    }
}

impl LoadedModels {
    fn verifier(&self, config: &StageConfig) -> Verifier<'_> {
        Verifier { enhancer: &self.enhancer, net1: &self.net1, net2: &self.net2, fusion: config.fusion }
    }
}

fn stage_config(cli: &Cli, stage: StageId) -> Result<StageConfig> {
    let mut c = match &cli.config {
        Some(p) => {
            let c = StageConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            if c.stage != stage {
                log::warn!("config {} is for stage {}; using it for {stage}", p.display(), c.stage);
            }
            StageConfig { stage, ..c }
        }
        None => StageConfig::new(stage),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    files.sort();
    Ok(files)
}

/// Speakers from `<dir>/<speaker>/*.wav`, in sorted order.
fn read_speakers(dir: &Path) -> Result<Vec<Speaker>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut speakers = Vec::new();
    for d in dirs {
        let utterances = wav_files(&d)?.iter().map(read_wav).collect::<tase_core::Result<Vec<_>>>()?;
        if !utterances.is_empty() {
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            speakers.push(Speaker { id, utterances });
        }
    }
    if speakers.is_empty() {
        bail!("no speaker directories with WAV files under {}", dir.display());
    }
    Ok(speakers)
}

fn cmd_synth(cli: &Cli, out: &Path, n: usize, utts: usize, min_secs: f64, max_secs: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let speakers = toy_speakers(n, utts, (min_secs, max_secs), &mut rng)?;
    let mut manifest = EvalManifest::default();
    for s in &speakers {
        fs::create_dir_all(out.join(&s.id))?;
        for (k, u) in s.utterances.iter().enumerate() {
            let id = format!("{}/utt{k:03}", s.id);
            write_wav(out.join(format!("{id}.wav")), u)?;
            manifest.utterances.push(EvalUtterance { id, speakers: vec![s.id.clone()], snr_db: None });
        }
    }
    fs::write(out.join("utterances.tsv"), manifest.to_text())?;
    println!("wrote {} speakers x {utts} utterances to {}", speakers.len(), out.display());
    Ok(())
}

fn load_profile(path: &Path) -> Result<Enrolled> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_score(
    cli: &Cli,
    trials_path: &Path,
    audio: &Path,
    net2_path: &Path,
    enhanced: Option<(&PathBuf, &PathBuf)>,
    out: &Path,
) -> Result<()> {
    let trials = parse_trials(&fs::read_to_string(trials_path)?)?;
    let net2 = Embedder::load(net2_path)?;
    let models = match enhanced {
        Some((e, n1)) => Some((SpeechEnhancer::load(e)?, Embedder::load(n1)?)),
        None => None,
    };
    let config = stage_config(cli, StageId::Finetune)?;
    let mut wavs: HashMap<String, Waveform> = HashMap::new();
    let mut load = |id: &str| -> tase_core::Result<Waveform> {
        if let Some(w) = wavs.get(id) {
            return Ok(w.clone());
        }
        let w = read_wav(audio.join(format!("{id}.wav")))?;
        wavs.insert(id.to_string(), w.clone());
        Ok(w)
    };
    let mut profiles: HashMap<Vec<String>, Enrolled> = HashMap::new();
    let scored = score_trials(&trials, |t| {
        let enrollments = t.enroll_utterances.iter().map(|u| load(u)).collect::<tase_core::Result<Vec<_>>>()?;
        let test = load(&t.test_utterance)?;
        match &models {
            None => {
                let embs = enrollments.iter().map(|u| net2.embed(u)).collect::<tase_core::Result<Vec<_>>>()?;
                embedding_only_score(&net2, &pool_embeddings(&embs), &test)
            }
            Some((enhancer, net1)) => {
                let v = Verifier { enhancer, net1, net2: &net2, fusion: config.fusion };
                let key = t.enroll_utterances.clone();
                if !profiles.contains_key(&key) {
                    let profile = SpeakerProfile { speaker_id: t.enroll_speaker.clone(), enrollments };
                    profiles.insert(key.clone(), v.enroll(&profile)?);
                }
                Ok(v.verify_enrolled(&profiles[&key], &test)?.fused_score)
            }
        }
    });
    let text: String = scored.iter().map(|s| s.to_line() + "\n").collect();
    fs::write(out, text)?;
    let failed = scored.iter().filter(|s| s.score.is_err()).count();
    println!("scored {} trials ({failed} failed) -> {}", scored.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthSpeakers { out, speakers, utterances, min_secs, max_secs } => {
            cmd_synth(cli, out, *speakers, *utterances, *min_secs, *max_secs)?
        }
        Command::Simulate { speakers, out, count, ratio } => {
            let corpus = read_speakers(speakers)?;
            let ratio: NontargetRatio = ratio.parse()?;
            let seed = cli.seed.unwrap_or(0);
            let triplets = generate_triplets(&corpus, *count, ratio, seed)?;
            let m = write_corpus(out, &triplets, seed)?;
            println!("wrote {} triplets to {}", m.entries.len(), out.display());
        }
        Command::Pretrain { speakers, out } => {
            let config = stage_config(cli, StageId::Pretrain)?;
            let corpus = read_speakers(speakers)?;
            let mut student = Embedder::student(config.seed)?;
            let mut teacher = Embedder::teacher(config.seed.wrapping_add(1))?;
            let (s, t) = stage1_pretrain(&mut student, &mut teacher, &corpus, &config)?;
            student.save(out.join("student"))?;
            teacher.save(out.join("teacher"))?;
            println!("student epoch losses {:?}", s.epoch_losses);
            println!("teacher epoch losses {:?}", t.epoch_losses);
        }
        Command::Distill { speakers, teacher, student, out } => {
            let config = stage_config(cli, StageId::TsDistill)?;
            let corpus = read_speakers(speakers)?;
            let teacher = Embedder::load(teacher)?;
            let mut student = Embedder::load(student)?;
            let log = ts_distill(&teacher, &mut student, &corpus, &config)?;
            student.save(out)?;
            println!("epoch losses {:?}", log.epoch_losses);
        }
        Command::TrainEnhancer { corpus, net1, out_enhancer, out_net1, allow_undistilled } => {
            let mut config = stage_config(cli, StageId::JointTrain)?;
            config.allow_undistilled |= *allow_undistilled;
            let triplets = DiskTriplets::open(corpus)?;
            let mut net1 = Embedder::load(net1)?;
            let mut enhancer = SpeechEnhancer::new(EnhancerConfig::default(), config.seed)?;
            let log = stage2_joint_train(&mut enhancer, &mut net1, &triplets, &config)?;
            enhancer.save(out_enhancer)?;
            net1.save(out_net1)?;
            println!("epoch losses {:?}", log.epoch_losses);
        }
        Command::Finetune { corpus, speakers, enhancer, net1, net2, out } => {
            let config = stage_config(cli, StageId::Finetune)?;
            let triplets = DiskTriplets::open(corpus)?;
            let speakers = read_speakers(speakers)?;
            let enhancer = SpeechEnhancer::load(enhancer)?;
            let net1 = Embedder::load(net1)?;
            let mut net2 = Embedder::load(net2)?;
            let log = stage3_finetune(&mut net2, &enhancer, &net1, &triplets, &speakers, &config)?;
            net2.save(out)?;
            println!("epoch losses {:?}", log.epoch_losses);
        }
        Command::Enroll { models, speaker, out, wavs } => {
            if wavs.is_empty() {
                bail!("no enrollment WAV files given");
            }
            let m = models.load()?;
            let config = stage_config(cli, StageId::Finetune)?;
            let enrollments = wavs.iter().map(read_wav).collect::<tase_core::Result<Vec<_>>>()?;
            let enrolled = m.verifier(&config).enroll(&SpeakerProfile { speaker_id: speaker.clone(), enrollments })?;
            fs::write(out, serde_json::to_string_pretty(&enrolled)?)?;
            println!("enrolled {speaker} from {} utterances -> {}", wavs.len(), out.display());
        }
        Command::Verify { models, profile, test } => {
            let m = models.load()?;
            let config = stage_config(cli, StageId::Finetune)?;
            let enrolled = load_profile(profile)?;
            let r = m.verifier(&config).verify_enrolled(&enrolled, &read_wav(test)?)?;
            println!("pass1\t{:.6}\npass2\t{:.6}\nfused\t{:.6}", r.pass1_score, r.pass2_score, r.fused_score);
        }
        Command::Trials { manifest, n_target, n_nontarget, out } => {
            let m = EvalManifest::parse(&fs::read_to_string(manifest)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let trials = generate_trials(&m, *n_target, *n_nontarget, &mut rng)?;
            fs::write(out, trials_to_text(&trials))?;
            println!("wrote {} trials to {}", trials.len(), out.display());
        }
        Command::Score { trials, audio, net2, enhancer, net1, out } => {
            cmd_score(cli, trials, audio, net2, enhancer.as_ref().zip(net1.as_ref()), out)?
        }
        Command::Eval { scores, by_snr, report } => {
            let scored = fs::read_to_string(scores)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.parse::<ScoredTrial>())
                .collect::<tase_core::Result<Vec<_>>>()?;
            let r = evaluate(&scored, *by_snr)?;
            print!("{}", r.summary());
            if let Some(p) = report {
                fs::write(p, r.to_json()?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
