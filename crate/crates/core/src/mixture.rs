//! Training-corpus simulation: multi-speaker mixtures at controlled SIR and
//! SNR, and target/nontarget training triplets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{mean_square, read_wav, write_wav, Waveform};
use crate::error::{invalid, Result, TaseError};
use crate::synth::{pink_noise, speech_shaped_noise};

pub const SIR_GRID_DB: [f64; 4] = [0.0, 6.0, 12.0, f64::INFINITY];
pub const SNR_GRID_DB: [f64; 5] = [6.0, 12.0, 18.0, 24.0, 30.0];
pub const NULL_SIGMA: f64 = 1e-6;
/// Enrollment utterances per training triplet.
pub const ENROLL_PER_TRIPLET: usize = 3;

/// Clean single-speaker utterances of one labelled speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<Waveform>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub n_speakers: usize,
    pub sir_db: f64,
    pub snr_db: f64,
}

impl MixtureSpec {
    pub fn new(n_speakers: usize, sir_db: f64, snr_db: f64) -> Result<Self> {
        if !(1..=3).contains(&n_speakers) {
            return invalid(format!("n_speakers {n_speakers} outside 1..=3"));
        }
        if !SIR_GRID_DB.contains(&sir_db) {
            return invalid(format!("sir_db {sir_db} not in {SIR_GRID_DB:?}"));
        }
        if !SNR_GRID_DB.contains(&snr_db) {
            return invalid(format!("snr_db {snr_db} not in {SNR_GRID_DB:?}"));
        }
        Ok(MixtureSpec { n_speakers, sir_db, snr_db })
    }

    /// Uniform draw over the legal grid.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        MixtureSpec {
            n_speakers: rng.random_range(1..=3),
            sir_db: *SIR_GRID_DB.choose(rng).unwrap(),
            snr_db: *SNR_GRID_DB.choose(rng).unwrap(),
        }
    }
}

fn power_db_ratio(a: f64, b: f64) -> f64 {
    10.0 * (a / b).log10()
}

/// Gain that brings an interferer of power `interferer_power` to `sir_db` below `target_power`.
pub fn sir_gain(target_power: f64, interferer_power: f64, sir_db: f64) -> Result<f64> {
    if sir_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !sir_db.is_finite() {
        return invalid(format!("SIR {sir_db} dB"));
    }
    if target_power <= 0.0 {
        return invalid("target has zero power");
    }
    if interferer_power <= 0.0 {
        return invalid("interferer has zero power at finite SIR");
    }
    Ok((target_power / (interferer_power * 10f64.powf(sir_db / 10.0))).sqrt())
}

/// Scales `interferer` so that the power ratio over the common prefix equals `sir_db`.
pub fn scale_to_sir(target: &Waveform, interferer: &Waveform, sir_db: f64) -> Result<Waveform> {
    let n = target.len().min(interferer.len());
    let g = sir_gain(
        mean_square(&target.samples()[..n]),
        mean_square(&interferer.samples()[..n]),
        sir_db,
    )?;
    Ok(interferer.scaled(g))
}

/// Crops (or loops) `noise` to the speech length, scales it to `snr_db` and adds it.
pub fn add_noise_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let scaled = scale_noise(speech, noise, snr_db)?;
    speech.add(&scaled)
}

fn scale_noise(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let fitted = if noise.len() >= speech.len() {
        noise.slice(0, speech.len())?
    } else {
        noise.looped(speech.len())
    };
    let ps = speech.power();
    if ps <= 0.0 {
        return invalid("speech has zero power");
    }
    let pn = fitted.power();
    if pn <= 0.0 {
        return invalid("noise has zero power");
    }
    Ok(fitted.scaled((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt()))
}

/// A generated mixture with its components, kept for re-measurement.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: Waveform,
    /// Clean target, sample-aligned with `mixture`.
    pub reference: Waveform,
    /// Sum of scaled interferers (all zero for one speaker or infinite SIR).
    pub interference: Waveform,
    pub noise: Waveform,
    /// Half-open sample range over which SIR was set.
    pub overlap: (usize, usize),
}

impl Mixture {
    pub fn measured_sir_db(&self) -> f64 {
        let (a, b) = self.overlap;
        power_db_ratio(
            mean_square(&self.reference.samples()[a..b]),
            mean_square(&self.interference.samples()[a..b]),
        )
    }

    pub fn measured_snr_db(&self) -> f64 {
        power_db_ratio(self.reference.power(), self.noise.power())
    }
}

/// Mixes `target` with `spec.n_speakers - 1` interferers and noise.
///
/// Interferers longer than the target are cropped from a random offset; shorter
/// ones are placed at a random offset. Each is first equalized to the target's
/// power, then a common gain sets the SIR of the target against their sum over
/// the span they cover. Noise SNR is measured against the clean target.
pub fn make_mixture<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    target: &Waveform,
    interferers: &[Waveform],
    noise: &Waveform,
    rng: &mut R,
) -> Result<Mixture> {
    if interferers.len() + 1 != spec.n_speakers {
        return invalid(format!(
            "{} interferers for a {}-speaker mixture",
            interferers.len(),
            spec.n_speakers
        ));
    }
    let len = target.len();
    let target_power = target.power();
    let mut sum = vec![0.0; len];
    let mut overlap = (0, len);
    if !interferers.is_empty() {
        overlap = (len, 0);
        for itf in interferers {
            let (placed, start) = if itf.len() >= len {
                (itf.slice(rng.random_range(0..=itf.len() - len), len)?, 0)
            } else {
                (itf.clone(), rng.random_range(0..=len - itf.len()))
            };
            let g = sir_gain(target_power, placed.power(), 0.0)?;
            for (s, &v) in sum[start..start + placed.len()].iter_mut().zip(placed.samples()) {
                *s += g * v;
            }
            overlap = (overlap.0.min(start), overlap.1.max(start + placed.len()));
        }
        let (a, b) = overlap;
        let mut tp = mean_square(&target.samples()[a..b]);
        if tp <= 0.0 {
            // The interferers landed entirely in a pause of the target.
            overlap = (0, len);
            tp = target_power;
        }
        let (a, b) = overlap;
        let g = sir_gain(tp, mean_square(&sum[a..b]), spec.sir_db)?;
        sum.iter_mut().for_each(|v| *v *= g);
    }
    let interference = Waveform::new(sum)?;
    let noise = scale_noise(target, noise, spec.snr_db)?;
    let mixture = target.add(&interference)?.add(&noise)?;
    Ok(Mixture {
        mixture,
        reference: target.clone(),
        interference,
        noise,
        overlap,
    })
}

/// I.i.d. N(0, 1e-12) samples: the reference for nontarget triplets.
pub fn null_reference<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Result<Waveform> {
    if length == 0 {
        return invalid("null reference of length 0");
    }
    let normal = Normal::new(0.0, NULL_SIGMA).expect("valid sigma");
    Waveform::new((0..length).map(|_| normal.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

impl FromStr for Label {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(TaseError::Format(format!("unknown label {other:?}"))),
        }
    }
}

/// Target:nontarget sampling ratio, e.g. `11:1`; `1:0` or `inf:1` disables nontarget triplets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NontargetRatio {
    pub target: f64,
    pub nontarget: f64,
}

impl NontargetRatio {
    pub const DEFAULT: NontargetRatio = NontargetRatio { target: 11.0, nontarget: 1.0 };
    pub const NEVER: NontargetRatio = NontargetRatio { target: 1.0, nontarget: 0.0 };

    /// Per-draw probability of a nontarget triplet.
    pub fn probability(&self) -> f64 {
        if self.target.is_infinite() {
            return 0.0;
        }
        self.nontarget / (self.target + self.nontarget)
    }
}

impl FromStr for NontargetRatio {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TaseError::InvalidInput(format!("ratio {s:?} is not of the form T:N"));
        let (t, n) = s.split_once(':').ok_or_else(bad)?;
        let parse = |v: &str| -> Result<f64> {
            match v.trim() {
                "inf" => Ok(f64::INFINITY),
                x => x.parse::<f64>().map_err(|_| bad()),
            }
        };
        let r = NontargetRatio { target: parse(t)?, nontarget: parse(n)? };
        if r.target < 0.0 || r.nontarget < 0.0 || r.nontarget.is_infinite() || r.target + r.nontarget <= 0.0 {
            return Err(bad());
        }
        Ok(r)
    }
}

impl fmt::Display for NontargetRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target, self.nontarget)
    }
}

#[derive(Clone, Debug)]
pub enum Reference {
    Clean(Waveform),
    /// Drawn afresh from [`null_reference`] each time the loss is evaluated.
    Null,
}

/// Enrollment, mixed test utterance, reference and label: one enhancer training example.
#[derive(Clone, Debug)]
pub struct TrainingTriplet {
    pub enrollment: Vec<Waveform>,
    pub test_mixture: Waveform,
    pub reference: Reference,
    pub label: Label,
    pub spec: MixtureSpec,
    pub enrolled_speaker: String,
    /// Speakers audible in the mixture, dominant one first.
    pub mixture_speakers: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Pink,
    SpeechShaped,
    Babble,
}

const BABBLE_TALKERS: usize = 4;

fn make_noise<R: Rng + ?Sized>(
    kind: NoiseKind,
    len: usize,
    pool: &[&Speaker],
    rng: &mut R,
) -> Result<Waveform> {
    match kind {
        NoiseKind::Pink => pink_noise(len, 0.05, rng),
        NoiseKind::SpeechShaped => speech_shaped_noise(len, 0.05, rng),
        NoiseKind::Babble => {
            let mut acc = Waveform::zeros(len)?;
            for _ in 0..BABBLE_TALKERS {
                let spk = pool.choose(rng).expect("nonempty pool");
                let u = spk.utterances.choose(rng).expect("speaker has utterances");
                let offset = rng.random_range(0..u.len());
                let rotated: Vec<f64> = (0..len).map(|i| u.samples()[(offset + i) % u.len()]).collect();
                acc = acc.add(&Waveform::new(rotated)?)?;
            }
            if acc.power() > 0.0 {
                Ok(acc)
            } else {
                pink_noise(len, 0.05, rng)
            }
        }
    }
}

/// Draws one triplet; a nontarget triplet is emitted with probability `ratio.probability()`.
pub fn sample_triplet<R: Rng + ?Sized>(
    corpus: &[Speaker],
    rng: &mut R,
    ratio: NontargetRatio,
) -> Result<TrainingTriplet> {
    if corpus.len() < 2 {
        return invalid(format!("corpus has {} speakers; at least 2 are needed", corpus.len()));
    }
    if let Some(s) = corpus.iter().find(|s| s.utterances.is_empty()) {
        return invalid(format!("speaker {} has no utterances", s.id));
    }
    let label = if rng.random_bool(ratio.probability()) {
        Label::Nontarget
    } else {
        Label::Target
    };
    let spec = MixtureSpec::sample(rng);
    let enrolled = rng.random_range(0..corpus.len());
    let others: Vec<usize> = (0..corpus.len()).filter(|&i| i != enrolled).collect();

    let mut enrolled_utts: Vec<usize> = (0..corpus[enrolled].utterances.len()).collect();
    enrolled_utts.shuffle(rng);
    let main = match label {
        Label::Target => enrolled,
        Label::Nontarget => *others.choose(rng).unwrap(),
    };
    let main_utt = match label {
        Label::Target if enrolled_utts.len() > 1 => enrolled_utts.pop().unwrap(),
        Label::Target => enrolled_utts[0],
        Label::Nontarget => rng.random_range(0..corpus[main].utterances.len()),
    };
    let enrollment: Vec<Waveform> = (0..ENROLL_PER_TRIPLET)
        .map(|i| corpus[enrolled].utterances[enrolled_utts[i % enrolled_utts.len()]].clone())
        .collect();

    let mut pool: Vec<usize> = others.iter().copied().filter(|&i| i != main).collect();
    if pool.is_empty() {
        pool.push(main);
    }
    let interferer_ids: Vec<usize> = if pool.len() >= spec.n_speakers - 1 {
        pool.choose_multiple(rng, spec.n_speakers - 1).copied().collect()
    } else {
        (1..spec.n_speakers).map(|_| *pool.choose(rng).unwrap()).collect()
    };
    let interferers: Vec<Waveform> = interferer_ids
        .iter()
        .map(|&i| corpus[i].utterances.choose(rng).unwrap().clone())
        .collect();

    let target = &corpus[main].utterances[main_utt];
    let kind = *[NoiseKind::Pink, NoiseKind::SpeechShaped, NoiseKind::Babble].choose(rng).unwrap();
    let babble_pool: Vec<&Speaker> = others.iter().map(|&i| &corpus[i]).collect();
    let noise = make_noise(kind, target.len(), &babble_pool, rng)?;
    let mix = make_mixture(&spec, target, &interferers, &noise, rng)?;

    let mut mixture_speakers = vec![corpus[main].id.clone()];
    if spec.sir_db.is_finite() {
        mixture_speakers.extend(interferer_ids.iter().map(|&i| corpus[i].id.clone()));
    }
    let reference = match label {
        Label::Target => Reference::Clean(mix.reference),
        Label::Nontarget => Reference::Null,
    };
    Ok(TrainingTriplet {
        enrollment,
        test_mixture: mix.mixture,
        reference,
        label,
        spec,
        enrolled_speaker: corpus[enrolled].id.clone(),
        mixture_speakers,
    })
}

/// Independent generator for triplet `id` under `seed`.
pub fn triplet_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Triplets `0..n`, each a deterministic function of `(seed, id)`.
pub fn generate_triplets(
    corpus: &[Speaker],
    n: usize,
    ratio: NontargetRatio,
    seed: u64,
) -> Result<Vec<TrainingTriplet>> {
    (0..n as u64)
        .map(|id| sample_triplet(corpus, &mut triplet_rng(seed, id), ratio))
        .collect()
}

/// Indexed access to a triplet corpus, in memory or simulated on demand.
pub trait TripletSource {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<TrainingTriplet>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Result<Vec<Label>> {
        (0..self.len()).map(|i| Ok(self.get(i)?.label)).collect()
    }

    /// Enrolled speaker ids in sorted order, each with up to `per_class` enrollment utterances.
    fn enrollment_classes(&self, per_class: usize) -> Result<Vec<(String, Vec<Waveform>)>> {
        let mut classes: std::collections::BTreeMap<String, Vec<Waveform>> = Default::default();
        for i in 0..self.len() {
            let t = self.get(i)?;
            let c = classes.entry(t.enrolled_speaker).or_default();
            let room = per_class.saturating_sub(c.len());
            c.extend(t.enrollment.into_iter().take(room));
        }
        Ok(classes.into_iter().collect())
    }
}

impl TripletSource for Vec<TrainingTriplet> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<TrainingTriplet> {
        self.as_slice().get(index).cloned().ok_or_else(|| TaseError::InvalidInput(format!("no triplet {index}")))
    }
}

/// Triplets `0..count` of [`generate_triplets`], drawn when requested.
#[derive(Clone, Copy, Debug)]
pub struct SimulatedTriplets<'a> {
    pub corpus: &'a [Speaker],
    pub count: usize,
    pub ratio: NontargetRatio,
    pub seed: u64,
}

impl TripletSource for SimulatedTriplets<'_> {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<TrainingTriplet> {
        if index >= self.count {
            return invalid(format!("no triplet {index}"));
        }
        sample_triplet(self.corpus, &mut triplet_rng(self.seed, index as u64), self.ratio)
    }

    /// Replays only the label draw, which [`sample_triplet`] makes first.
    fn labels(&self) -> Result<Vec<Label>> {
        let p = self.ratio.probability();
        Ok((0..self.count as u64)
            .map(|id| if triplet_rng(self.seed, id).random_bool(p) { Label::Nontarget } else { Label::Target })
            .collect())
    }

    fn enrollment_classes(&self, per_class: usize) -> Result<Vec<(String, Vec<Waveform>)>> {
        let mut classes: Vec<(String, Vec<Waveform>)> = self
            .corpus
            .iter()
            .map(|s| (s.id.clone(), s.utterances.iter().take(per_class).cloned().collect()))
            .collect();
        classes.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(classes)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub enroll_paths: Vec<PathBuf>,
    pub mix_path: PathBuf,
    /// `None` for the NULL reference.
    pub ref_path: Option<PathBuf>,
    pub spec: MixtureSpec,
    pub speaker_ids: Vec<String>,
}

/// Line-oriented corpus index. Paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

fn parse_db(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        x => x.parse().map_err(|_| TaseError::Format(format!("bad dB value {x:?}"))),
    }
}

fn join_paths(p: &[PathBuf]) -> String {
    p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

impl CorpusManifest {
    pub const FILE_NAME: &'static str = "manifest.tsv";

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.label,
                join_paths(&e.enroll_paths),
                e.mix_path.display(),
                e.ref_path.as_ref().map_or("NULL".to_string(), |p| p.display().to_string()),
                e.spec.n_speakers,
                fmt_db(e.spec.sir_db),
                fmt_db(e.spec.snr_db),
                e.speaker_ids.join(","),
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# seed=") {
                seed = Some(rest.trim().parse().map_err(|_| TaseError::Format(format!("line {}: bad seed", n + 1)))?);
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(TaseError::Format(format!("line {}: expected 9 fields, found {}", n + 1, f.len())));
            }
            let n_spk = f[5].parse().map_err(|_| TaseError::Format(format!("line {}: bad n_spk", n + 1)))?;
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                label: f[1].parse()?,
                enroll_paths: f[2].split(',').map(PathBuf::from).collect(),
                mix_path: PathBuf::from(f[3]),
                ref_path: (f[4] != "NULL").then(|| PathBuf::from(f[4])),
                spec: MixtureSpec::new(n_spk, parse_db(f[6])?, parse_db(f[7])?)?,
                speaker_ids: f[8].split(',').map(str::to_string).collect(),
            });
        }
        let seed = seed.ok_or_else(|| TaseError::Format("manifest has no seed line".into()))?;
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TaseError::Format("duplicate triplet ids".into()));
        }
        Ok(CorpusManifest { seed, entries })
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Self::parse(&fs::read_to_string(dir.join(Self::FILE_NAME))?)?;
        for e in &m.entries {
            for p in e.enroll_paths.iter().chain([&e.mix_path]).chain(e.ref_path.as_ref()) {
                if !dir.join(p).is_file() {
                    return Err(TaseError::Format(format!("{}: missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(m)
    }

    /// Reads the audio of every entry back into triplets.
    pub fn read_triplets(&self, dir: impl AsRef<Path>) -> Result<Vec<TrainingTriplet>> {
        (0..self.entries.len()).map(|i| self.read_triplet(dir.as_ref(), i)).collect()
    }

    pub fn read_triplet(&self, dir: impl AsRef<Path>, index: usize) -> Result<TrainingTriplet> {
        let dir = dir.as_ref();
        let e = self.entries.get(index).ok_or_else(|| TaseError::InvalidInput(format!("no entry {index}")))?;
        Ok(TrainingTriplet {
            enrollment: e.enroll_paths.iter().map(|p| read_wav(dir.join(p))).collect::<Result<_>>()?,
            test_mixture: read_wav(dir.join(&e.mix_path))?,
            reference: match &e.ref_path {
                Some(p) => Reference::Clean(read_wav(dir.join(p))?),
                None => Reference::Null,
            },
            label: e.label,
            spec: e.spec,
            enrolled_speaker: e.speaker_ids[0].clone(),
            mixture_speakers: e.speaker_ids[1..].to_vec(),
        })
    }
}

/// A written corpus, read one triplet at a time.
#[derive(Clone, Debug)]
pub struct DiskTriplets {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl DiskTriplets {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = CorpusManifest::load(&dir)?;
        Ok(DiskTriplets { dir, manifest })
    }
}

impl TripletSource for DiskTriplets {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn get(&self, index: usize) -> Result<TrainingTriplet> {
        self.manifest.read_triplet(&self.dir, index)
    }

    fn labels(&self) -> Result<Vec<Label>> {
        Ok(self.manifest.entries.iter().map(|e| e.label).collect())
    }
}

/// Writes triplets as WAV files plus `manifest.tsv` under `dir`.
///
/// Speaker ids are stored enrolled speaker first, then the mixture speakers.
pub fn write_corpus(dir: impl AsRef<Path>, triplets: &[TrainingTriplet], seed: u64) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("audio"))?;
    let mut entries = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let id = format!("t{i:06}");
        let rel = |suffix: &str| PathBuf::from("audio").join(format!("{id}_{suffix}.wav"));
        let mut enroll_paths = Vec::new();
        for (k, e) in t.enrollment.iter().enumerate() {
            let p = rel(&format!("enr{k}"));
            write_wav(dir.join(&p), e)?;
            enroll_paths.push(p);
        }
        let mix_path = rel("mix");
        write_wav(dir.join(&mix_path), &t.test_mixture)?;
        let ref_path = match &t.reference {
            Reference::Clean(w) => {
                let p = rel("ref");
                write_wav(dir.join(&p), w)?;
                Some(p)
            }
            Reference::Null => None,
        };
        let mut speaker_ids = vec![t.enrolled_speaker.clone()];
        speaker_ids.extend(t.mixture_speakers.iter().cloned());
        entries.push(ManifestEntry {
            id,
            label: t.label,
            enroll_paths,
            mix_path,
            ref_path,
            spec: t.spec,
            speaker_ids,
        });
    }
    let manifest = CorpusManifest { seed, entries };
    fs::write(dir.join(CorpusManifest::FILE_NAME), manifest.to_text())?;
    Ok(manifest)
}
