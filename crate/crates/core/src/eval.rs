//! Trials, scoring and error-rate metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Result, TaseError};
use crate::mixture::{Label, ENROLL_PER_TRIPLET};

/// One utterance of an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalUtterance {
    pub id: String,
    /// Audible speakers, dominant first.
    pub speakers: Vec<String>,
    pub snr_db: Option<f64>,
}

impl EvalUtterance {
    pub fn is_single_speaker(&self) -> bool {
        self.speakers.len() == 1
    }
}

/// Utterance list: `id<TAB>speakers(comma)<TAB>snr_db`, with `-` for a missing SNR.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalManifest {
    pub utterances: Vec<EvalUtterance>,
}

fn format_snr(snr: Option<f64>) -> String {
    match snr {
        Some(v) => format!("{v:?}"),
        None => "-".into(),
    }
}

fn parse_snr(field: &str) -> Result<Option<f64>> {
    match field {
        "-" | "" => Ok(None),
        v => v.parse().map(Some).map_err(|_| TaseError::Format(format!("bad snr_db {v:?}"))),
    }
}

impl EvalManifest {
    pub fn to_text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| format!("{}\t{}\t{}\n", u.id, u.speakers.join(","), format_snr(u.snr_db)))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut utterances = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(TaseError::Format(format!("line {}: expected 3 fields, got {}", n + 1, f.len())));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(TaseError::Format(format!("line {}: duplicate utterance {}", n + 1, f[0])));
            }
            utterances.push(EvalUtterance {
                id: f[0].into(),
                speakers: f[1].split(',').map(String::from).collect(),
                snr_db: parse_snr(f[2])?,
            });
        }
        Ok(EvalManifest { utterances })
    }
}

/// Enrolled speaker with its enrollment utterances versus one test utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub enroll_speaker: String,
    pub enroll_utterances: Vec<String>,
    pub test_utterance: String,
    pub label: Label,
    pub snr_db: Option<f64>,
}

impl Trial {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.enroll_speaker,
            self.enroll_utterances.join(","),
            self.test_utterance,
            self.label,
            format_snr(self.snr_db)
        )
    }
}

impl FromStr for Trial {
    type Err = TaseError;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(TaseError::Format(format!("trial line has {} fields, expected 5", f.len())));
        }
        Ok(Trial {
            enroll_speaker: f[0].into(),
            enroll_utterances: f[1].split(',').map(String::from).collect(),
            test_utterance: f[2].into(),
            label: f[3].parse()?,
            snr_db: parse_snr(f[4])?,
        })
    }
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    trials.iter().map(|t| t.to_line() + "\n").collect()
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| l.parse().map_err(|e| TaseError::Format(format!("line {}: {e}", n + 1))))
        .collect()
}

/// Draws exactly `n_target` and `n_nontarget` trials.
///
/// Enrollments use single-speaker utterances only and never include the test
/// utterance. Target trials enroll the dominant speaker of the test utterance;
/// nontarget trials enroll a speaker absent from it.
pub fn generate_trials<R: Rng + ?Sized>(
    manifest: &EvalManifest,
    n_target: usize,
    n_nontarget: usize,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    let mut singles: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in manifest.utterances.iter().enumerate() {
        if u.is_single_speaker() {
            singles.entry(u.speakers[0].as_str()).or_default().push(i);
        }
    }
    let all_speakers: BTreeSet<&str> = manifest.utterances.iter().flat_map(|u| u.speakers.iter().map(String::as_str)).collect();
    if all_speakers.len() < 2 {
        return Err(TaseError::Insufficient(format!("{} speakers; at least 2 are needed", all_speakers.len())));
    }
    let can_enroll = |spk: &str, test: usize| {
        singles.get(spk).is_some_and(|v| v.iter().filter(|&&i| i != test).count() >= ENROLL_PER_TRIPLET)
    };
    let mut target_pool = Vec::new();
    let mut nontarget_pool = Vec::new();
    for (i, u) in manifest.utterances.iter().enumerate() {
        if can_enroll(&u.speakers[0], i) {
            target_pool.push(i);
        }
        if singles.keys().any(|s| !u.speakers.iter().any(|x| x == s) && can_enroll(s, i)) {
            nontarget_pool.push(i);
        }
    }
    if (n_target > 0 && target_pool.is_empty()) || (n_nontarget > 0 && nontarget_pool.is_empty()) {
        return Err(TaseError::Insufficient(format!(
            "{} utterances usable for target trials and {} for nontarget trials ({} target and {} nontarget requested)",
            target_pool.len(),
            nontarget_pool.len(),
            n_target,
            n_nontarget
        )));
    }
    let enroll = |spk: &str, test: usize, rng: &mut R| -> Vec<String> {
        let mut cands: Vec<usize> = singles[spk].iter().copied().filter(|&i| i != test).collect();
        cands.shuffle(rng);
        cands[..ENROLL_PER_TRIPLET].iter().map(|&i| manifest.utterances[i].id.clone()).collect()
    };
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for _ in 0..n_target {
        let test = *target_pool.choose(rng).expect("nonempty pool");
        let u = &manifest.utterances[test];
        trials.push(Trial {
            enroll_speaker: u.speakers[0].clone(),
            enroll_utterances: enroll(&u.speakers[0], test, rng),
            test_utterance: u.id.clone(),
            label: Label::Target,
            snr_db: u.snr_db,
        });
    }
    for _ in 0..n_nontarget {
        let test = *nontarget_pool.choose(rng).expect("nonempty pool");
        let u = &manifest.utterances[test];
        let absent: Vec<&str> =
            singles.keys().copied().filter(|s| !u.speakers.iter().any(|x| x == s) && can_enroll(s, test)).collect();
        let spk = *absent.choose(rng).expect("pool membership guarantees a candidate");
        trials.push(Trial {
            enroll_speaker: spk.into(),
            enroll_utterances: enroll(spk, test, rng),
            test_utterance: u.id.clone(),
            label: Label::Nontarget,
            snr_db: u.snr_db,
        });
    }
    Ok(trials)
}

/// A trial with its score, or the reason it could not be scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: std::result::Result<f64, String>,
}

impl ScoredTrial {
    /// Trial line plus a score column; failures are written as `error:<message>`.
    pub fn to_line(&self) -> String {
        match &self.score {
            Ok(s) => format!("{}\t{s:?}", self.trial.to_line()),
            Err(e) => format!("{}\terror:{}", self.trial.to_line(), e.replace(['\t', '\n'], " ")),
        }
    }
}

impl FromStr for ScoredTrial {
    type Err = TaseError;

    fn from_str(line: &str) -> Result<Self> {
        let (head, last) = line.rsplit_once('\t').ok_or_else(|| TaseError::Format("score line without score".into()))?;
        let score = match last.strip_prefix("error:") {
            Some(msg) => Err(msg.to_string()),
            None => Ok(last.parse::<f64>().map_err(|_| TaseError::Format(format!("bad score {last:?}")))?),
        };
        Ok(ScoredTrial { trial: head.parse()?, score })
    }
}

/// Scores every trial in order; a failing trial is recorded and the run continues.
pub fn score_trials<F>(trials: &[Trial], mut scorer: F) -> Vec<ScoredTrial>
where
    F: FnMut(&Trial) -> Result<f64>,
{
    trials
        .iter()
        .map(|t| {
            let score = scorer(t).map_err(|e| e.to_string());
            if let Err(e) = &score {
                warn!("trial {} vs {}: {e}", t.enroll_speaker, t.test_utterance);
            }
            ScoredTrial { trial: t.clone(), score }
        })
        .collect()
}

/// Operating point: trials scoring at or above `threshold` are accepted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    /// Fraction of nontarget trials accepted.
    pub far: f64,
    /// Fraction of target trials rejected.
    pub miss: f64,
}

fn check_scores(scores: &[f64], is_target: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_target.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), is_target.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("NaN score");
    }
    let nt = is_target.iter().filter(|&&t| t).count();
    let nn = scores.len() - nt;
    if nt == 0 || nn == 0 {
        return invalid(format!("need both classes; got {nt} target and {nn} nontarget scores"));
    }
    Ok((nt, nn))
}

/// One point per distinct score, in increasing threshold order, plus a final
/// point at +∞ where everything is rejected.
pub fn det_curve(scores: &[f64], is_target: &[bool]) -> Result<Vec<DetPoint>> {
    let (nt, nn) = check_scores(scores, is_target)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    // Counts of trials strictly below the current threshold.
    let (mut t_below, mut n_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(DetPoint {
            threshold,
            far: (nn - n_below) as f64 / nn as f64,
            miss: t_below as f64 / nt as f64,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if is_target[order[i]] {
                t_below += 1;
            } else {
                n_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, far: 0.0, miss: 1.0 });
    Ok(points)
}

/// Equal error rate and its threshold.
///
/// Walks the DET points in increasing threshold order to the first adjacent
/// pair whose FAR − miss changes sign (from ≥ 0 to ≤ 0) and interpolates
/// linearly to the crossing. Between a finite threshold and +∞ the
/// threshold stays at the finite end.
pub fn compute_eer(scores: &[f64], is_target: &[bool]) -> Result<(f64, f64)> {
    let det = det_curve(scores, is_target)?;
    Ok(eer_from_det(&det))
}

pub fn eer_from_det(det: &[DetPoint]) -> (f64, f64) {
    for w in det.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.far - a.miss, b.far - b.miss);
        if da >= 0.0 && db <= 0.0 {
            if db == 0.0 && da != 0.0 {
                return (b.far, b.threshold);
            }
            let alpha = if da == db { 0.0 } else { da / (da - db) };
            let eer = a.far + alpha * (b.far - a.far);
            let threshold = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return (eer, threshold);
        }
    }
    unreachable!("a DET curve runs from far − miss = 1 to −1")
}

/// Miss rate of the operating point at `threshold`.
pub fn miss_at_threshold(scores: &[f64], is_target: &[bool], threshold: f64) -> Result<f64> {
    let (nt, _) = check_scores(scores, is_target)?;
    let missed = scores.iter().zip(is_target).filter(|(s, t)| **t && **s < threshold).count();
    Ok(missed as f64 / nt as f64)
}

/// FAR where the curve reaches miss rate `miss`, interpolated linearly between DET points.
pub fn far_at_miss(det: &[DetPoint], miss: f64) -> f64 {
    let miss = miss.clamp(0.0, 1.0);
    for w in det.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.miss <= miss && miss <= b.miss {
            if b.miss == a.miss {
                return a.far;
            }
            let alpha = (miss - a.miss) / (b.miss - a.miss);
            return a.far + alpha * (b.far - a.far);
        }
    }
    0.0
}

/// Test-SNR bands, half-open: A below 3 dB, B to 15, C to 20, D from 20 up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SnrBand {
    A,
    B,
    C,
    D,
}

impl SnrBand {
    pub const ALL: [SnrBand; 4] = [SnrBand::A, SnrBand::B, SnrBand::C, SnrBand::D];

    pub fn of(snr_db: f64) -> SnrBand {
        if snr_db < 3.0 {
            SnrBand::A
        } else if snr_db < 15.0 {
            SnrBand::B
        } else if snr_db < 20.0 {
            SnrBand::C
        } else {
            SnrBand::D
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            SnrBand::A => (f64::NEG_INFINITY, 3.0),
            SnrBand::B => (3.0, 15.0),
            SnrBand::C => (15.0, 20.0),
            SnrBand::D => (20.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for SnrBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self.range();
        write!(f, "{self:?}=[{lo},{hi})")
    }
}

/// Indices of `trials` per band. Trials without an SNR go to band D with a warning.
pub fn split_by_snr(trials: &[Trial]) -> BTreeMap<SnrBand, Vec<usize>> {
    let mut out: BTreeMap<SnrBand, Vec<usize>> = SnrBand::ALL.iter().map(|&b| (b, Vec::new())).collect();
    let mut missing = 0usize;
    for (i, t) in trials.iter().enumerate() {
        let band = match t.snr_db {
            Some(v) if !v.is_nan() => SnrBand::of(v),
            _ => {
                missing += 1;
                SnrBand::D
            }
        };
        out.get_mut(&band).expect("all bands present").push(i);
    }
    if missing > 0 {
        warn!("{missing} trials have no snr_db annotation; counted in band D");
    }
    out
}

/// Metrics over one subset of scored trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetMetrics {
    pub name: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Absent when the subset lacks one of the classes.
    pub eer: Option<f64>,
    pub threshold: Option<f64>,
    pub det: Vec<DetPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub enroll_speaker: String,
    pub test_utterance: String,
    pub label: String,
    pub snr_db: Option<f64>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Machine-readable evaluation results. Non-finite thresholds serialize as null.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: SubsetMetrics,
    pub bands: Vec<SubsetMetrics>,
    pub failed_trials: usize,
    pub trials: Vec<TrialRecord>,
}

fn subset_metrics(name: String, scored: &[&ScoredTrial]) -> Result<SubsetMetrics> {
    let ok: Vec<(f64, bool)> = scored
        .iter()
        .filter_map(|s| s.score.as_ref().ok().map(|&v| (v, s.trial.label == Label::Target)))
        .collect();
    let n_target = ok.iter().filter(|p| p.1).count();
    let n_nontarget = ok.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Ok(SubsetMetrics { name, n_target, n_nontarget, eer: None, threshold: None, det: Vec::new() });
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = ok.into_iter().unzip();
    let det = det_curve(&scores, &labels)?;
    let (eer, threshold) = eer_from_det(&det);
    Ok(SubsetMetrics { name, n_target, n_nontarget, eer: Some(eer), threshold: Some(threshold), det })
}

/// Pooled metrics, plus per-band metrics when `by_snr` is set.
pub fn evaluate(scored: &[ScoredTrial], by_snr: bool) -> Result<EvalReport> {
    let all: Vec<&ScoredTrial> = scored.iter().collect();
    let overall = subset_metrics("all".into(), &all)?;
    let mut bands = Vec::new();
    if by_snr {
        let trials: Vec<Trial> = scored.iter().map(|s| s.trial.clone()).collect();
        for (band, idx) in split_by_snr(&trials) {
            let subset: Vec<&ScoredTrial> = idx.iter().map(|&i| &scored[i]).collect();
            bands.push(subset_metrics(band.to_string(), &subset)?);
        }
    }
    let trials = scored
        .iter()
        .map(|s| TrialRecord {
            enroll_speaker: s.trial.enroll_speaker.clone(),
            test_utterance: s.trial.test_utterance.clone(),
            label: s.trial.label.to_string(),
            snr_db: s.trial.snr_db,
            score: s.score.as_ref().ok().copied(),
            error: s.score.as_ref().err().cloned(),
        })
        .collect();
    Ok(EvalReport {
        overall,
        bands,
        failed_trials: scored.iter().filter(|s| s.score.is_err()).count(),
        trials,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| TaseError::Format(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let line = |m: &SubsetMetrics| match m.eer {
            Some(e) => format!(
                "{:<16} target {:>5}  nontarget {:>5}  EER {:>6.2}%  threshold {:.4}\n",
                m.name,
                m.n_target,
                m.n_nontarget,
                100.0 * e,
                m.threshold.unwrap_or(f64::NAN)
            ),
            None => format!("{:<16} target {:>5}  nontarget {:>5}  EER n/a\n", m.name, m.n_target, m.n_nontarget),
        };
        let mut s = line(&self.overall);
        for b in &self.bands {
            s.push_str(&line(b));
        }
        if self.failed_trials > 0 {
            s.push_str(&format!("{} trials failed to score\n", self.failed_trials));
        }
        s
    }
}
