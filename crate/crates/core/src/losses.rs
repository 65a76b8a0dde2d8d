//! Training objectives with analytic gradients.
//!
//! Every function returns a [`LossOutput`] whose gradients are keyed by input
//! name. [`si_snr`] and [`si_snr_with_null`] report the SI-SNR itself (higher is
//! better) with gradients of that value; use [`LossOutput::negated`] to obtain a
//! loss. All other functions return losses directly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use tase_nnet::Tensor;

use crate::dsp::Waveform;
use crate::error::{invalid, Result, TaseError};
use crate::mixture::{null_reference, Label};

pub const SI_SNR_EPS: f64 = 1e-8;
pub const SI_SNR_CLAMP_DB: f64 = 60.0;
pub const LMCL_MARGIN: f64 = 0.2;
pub const LMCL_SCALE: f64 = 30.0;
pub const TRIPLET_MARGIN: f64 = 0.2;

const DB_PER_NEPER_POWER: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradients: BTreeMap<String, Tensor<f64>>,
}

impl LossOutput {
    pub fn scalar(value: f64) -> Self {
        LossOutput { value, gradients: BTreeMap::new() }
    }

    fn with(value: f64, grads: impl IntoIterator<Item = (&'static str, Tensor<f64>)>) -> Self {
        LossOutput {
            value,
            gradients: grads.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Gradient for `name`; panics if the loss has no such input.
    pub fn grad(&self, name: &str) -> &Tensor<f64> {
        self.gradients
            .get(name)
            .unwrap_or_else(|| panic!("loss has no gradient named {name:?}"))
    }

    pub fn negated(&self) -> LossOutput {
        self.scaled(-1.0)
    }

    pub fn scaled(&self, k: f64) -> LossOutput {
        let mut out = self.clone();
        out.value *= k;
        out.gradients.values_mut().for_each(|g| g.scale(k));
        out
    }

    /// Σ wᵢ·termᵢ; gradients sharing a name are summed with the same weights.
    pub fn weighted_sum(terms: &[(f64, &LossOutput)]) -> Result<LossOutput> {
        let mut out = LossOutput::default();
        for &(w, term) in terms {
            out.value += w * term.value;
            for (name, g) in &term.gradients {
                let mut scaled = g.clone();
                scaled.scale(w);
                match out.gradients.get_mut(name) {
                    Some(acc) => acc.add_assign(&scaled)?,
                    None => {
                        out.gradients.insert(name.clone(), scaled);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SiSnrMode {
    /// 20·log10(‖α·s_t‖ / ‖s_e − α·s_t‖), the scale-invariant projection form.
    #[default]
    Standard,
    /// 20·log10(‖α·s_e‖ / ‖s_t − α·s_e‖), with the same α = ⟨s_e, s_t⟩ / ⟨s_t, s_t⟩.
    Literal,
}

impl FromStr for SiSnrMode {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SiSnrMode::Standard),
            "literal" => Ok(SiSnrMode::Literal),
            other => Err(TaseError::InvalidInput(format!("unknown SI-SNR mode {other:?}"))),
        }
    }
}

impl fmt::Display for SiSnrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiSnrMode::Standard => "standard",
            SiSnrMode::Literal => "literal",
        })
    }
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of a function of zero-meaned inputs, mapped back to the raw input.
fn through_centering(mut g: Vec<f64>) -> Tensor<f64> {
    let m = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= m);
    Tensor::column(g)
}

/// Value and partials (∂/∂a, ∂/∂b, ∂/∂ss) of one of the two SI-SNR forms,
/// where a = ⟨e,t⟩, b = ⟨t,t⟩, ss = ⟨e,e⟩ on zero-mean signals.
///
/// Returns `None` for the partials when the value is clamped or the
/// denominator is floored (zero gradient there).
fn si_snr_core(e: &[f64], t: &[f64], mode: SiSnrMode) -> (f64, Option<[f64; 3]>) {
    let a = dot(e, t);
    let b = dot(t, t);
    let ss = dot(e, e);
    let alpha = a / b;
    let (num, den, dnum, dden) = match mode {
        SiSnrMode::Standard => {
            let num = a * a / b;
            let den: f64 = e.iter().zip(t).map(|(e, t)| (e - alpha * t).powi(2)).sum();
            (num, den, [2.0 * a / b, -a * a / (b * b), 0.0], [-2.0 * a / b, a * a / (b * b), 1.0])
        }
        SiSnrMode::Literal => {
            let num = alpha * alpha * ss;
            let den: f64 = e.iter().zip(t).map(|(e, t)| (t - alpha * e).powi(2)).sum();
            let dnum = [2.0 * a * ss / (b * b), -2.0 * a * a * ss / (b * b * b), a * a / (b * b)];
            let dden = [
                -4.0 * a / b + 2.0 * a * ss / (b * b),
                1.0 + 2.0 * a * a / (b * b) - 2.0 * a * a * ss / (b * b * b),
                a * a / (b * b),
            ];
            (num, den, dnum, dden)
        }
    };
    let floored = den < SI_SNR_EPS * SI_SNR_EPS;
    let den = den.max(SI_SNR_EPS * SI_SNR_EPS);
    if num <= 0.0 {
        return (-SI_SNR_CLAMP_DB, None);
    }
    let value = DB_PER_NEPER_POWER * (num.ln() - den.ln());
    if value.abs() >= SI_SNR_CLAMP_DB {
        return (value.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB), None);
    }
    let partial = |i: usize| {
        let d = if floored { 0.0 } else { dden[i] / den };
        DB_PER_NEPER_POWER * (dnum[i] / num - d)
    };
    (value, Some([partial(0), partial(1), partial(2)]))
}

/// SI-SNR in dB of `estimate` against `target`, with gradients `"estimate"` and `"target"`.
///
/// Both inputs are zero-mean normalized internally. The residual norm is
/// floored at 1e-8 and the value clamped to ±60 dB; gradients are zero when
/// clamped.
pub fn si_snr(estimate: &Waveform, target: &Waveform, mode: SiSnrMode) -> Result<LossOutput> {
    si_snr_slices(estimate.samples(), target.samples(), mode)
}

pub fn si_snr_slices(estimate: &[f64], target: &[f64], mode: SiSnrMode) -> Result<LossOutput> {
    if estimate.len() != target.len() {
        return invalid(format!("length mismatch: {} vs {}", estimate.len(), target.len()));
    }
    let e = centered(estimate);
    let t = centered(target);
    // A constant target leaves only rounding residue after mean removal.
    if dot(&t, &t) <= 1e-20 * dot(target, target).max(f64::MIN_POSITIVE) {
        return invalid("target has zero power after mean removal");
    }
    let (value, partials) = si_snr_core(&e, &t, mode);
    let n = e.len();
    let (ge, gt) = match partials {
        None => (vec![0.0; n], vec![0.0; n]),
        Some([va, vb, vss]) => (
            (0..n).map(|i| va * t[i] + 2.0 * vss * e[i]).collect(),
            (0..n).map(|i| va * e[i] + 2.0 * vb * t[i]).collect(),
        ),
    };
    Ok(LossOutput::with(
        value,
        [("estimate", through_centering(ge)), ("target", through_centering(gt))],
    ))
}

/// Enhancement objective for one triplet, in dB, with gradient `"estimate"`.
///
/// Target triplets give exactly [`si_snr`] against `reference`. Nontarget
/// triplets draw a fresh NULL reference n ~ N(0, 1e-12) and score
/// 10·log10(‖n‖² / ‖n − ŝ_e‖²) on the zero-mean estimate ŝ_e, capped at
/// +60 dB only: maximizing it drives the output toward silence with a pull
/// that does not vanish for loud outputs.
pub fn si_snr_with_null<R: Rng + ?Sized>(
    estimate: &Waveform,
    label: Label,
    reference: Option<&Waveform>,
    mode: SiSnrMode,
    rng: &mut R,
) -> Result<LossOutput> {
    match label {
        Label::Target => {
            let r = reference.ok_or_else(|| TaseError::InvalidInput("target triplet without a reference".into()))?;
            let mut out = si_snr(estimate, r, mode)?;
            out.gradients.remove("target");
            Ok(out)
        }
        Label::Nontarget => {
            let null = null_reference(estimate.len(), rng)?;
            Ok(null_snr(estimate.samples(), null.samples()))
        }
    }
}

/// 10·log10(‖n‖² / ‖n − ê‖²) with ê the zero-mean estimate, capped at +60 dB.
pub fn null_snr(estimate: &[f64], null: &[f64]) -> LossOutput {
    let e = centered(estimate);
    let num = dot(null, null).max(f64::MIN_POSITIVE);
    let resid: Vec<f64> = null.iter().zip(&e).map(|(n, e)| n - e).collect();
    let den = dot(&resid, &resid);
    let floored = den < SI_SNR_EPS * SI_SNR_EPS;
    let value = DB_PER_NEPER_POWER * (num.ln() - den.max(SI_SNR_EPS * SI_SNR_EPS).ln());
    let grad = if value >= SI_SNR_CLAMP_DB || floored {
        vec![0.0; e.len()]
    } else {
        resid.iter().map(|r| DB_PER_NEPER_POWER * 2.0 * r / den).collect()
    };
    LossOutput::with(value.min(SI_SNR_CLAMP_DB), [("estimate", through_centering(grad))])
}

fn rows(t: &Tensor<f64>) -> Result<(usize, usize)> {
    t.dims2().map_err(TaseError::from)
}

/// Large-margin cosine loss over a batch, with gradients `"embeddings"` and `"class_weights"`.
///
/// `embeddings` is N×D and `class_weights` C×D, both with unit rows; the
/// cosines are their plain dot products.
pub fn lmcl(
    embeddings: &Tensor<f64>,
    labels: &[usize],
    class_weights: &Tensor<f64>,
    margin: f64,
    scale: f64,
) -> Result<LossOutput> {
    let (n, d) = rows(embeddings)?;
    let (c, dw) = rows(class_weights)?;
    if d != dw {
        return invalid(format!("embedding dim {d} vs class weight dim {dw}"));
    }
    if labels.len() != n {
        return invalid(format!("{} labels for {n} embeddings", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return invalid(format!("label {bad} out of range for {c} classes"));
    }
    if !(0.0..1.0).contains(&margin) || scale <= 0.0 {
        return invalid(format!("margin {margin} / scale {scale} out of range"));
    }
    let e = embeddings.data();
    let w = class_weights.data();
    let mut ge = vec![0.0; n * d];
    let mut gw = vec![0.0; c * d];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ei = &e[i * d..(i + 1) * d];
        let logits: Vec<f64> = (0..c)
            .map(|j| {
                let cos = dot(ei, &w[j * d..(j + 1) * d]);
                scale * (cos - if j == y { margin } else { 0.0 })
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        total += -(logits[y] - max - z.ln());
        for j in 0..c {
            let p = (logits[j] - max).exp() / z;
            let dcos = scale * (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            for k in 0..d {
                ge[i * d + k] += dcos * w[j * d + k];
                gw[j * d + k] += dcos * ei[k];
            }
        }
    }
    Ok(LossOutput::with(
        total / n as f64,
        [
            ("embeddings", Tensor::from_vec(&[n, d], ge)?),
            ("class_weights", Tensor::from_vec(&[c, d], gw)?),
        ],
    ))
}

/// max(0, margin + d(a,p) − d(a,n)) with cosine distance d = 1 − ⟨·,·⟩ on unit vectors.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<LossOutput> {
    let d = anchor.len();
    if positive.len() != d || negative.len() != d {
        return invalid("triplet vectors differ in length");
    }
    let raw = margin - dot(anchor, positive) + dot(anchor, negative);
    let (value, ga, gp, gn) = if raw > 0.0 {
        (
            raw,
            negative.iter().zip(positive).map(|(n, p)| n - p).collect(),
            anchor.iter().map(|a| -a).collect(),
            anchor.to_vec(),
        )
    } else {
        (0.0, vec![0.0; d], vec![0.0; d], vec![0.0; d])
    };
    Ok(LossOutput::with(
        value,
        [
            ("anchor", Tensor::column(ga)),
            ("positive", Tensor::column(gp)),
            ("negative", Tensor::column(gn)),
        ],
    ))
}

/// Mean triplet loss over all anchor–positive pairs in a labelled batch.
///
/// For each pair the negative is semi-hard (farther than the positive but
/// within the margin), the closest such; when none exists the hardest negative
/// is used. Mining is treated as constant when differentiating. Returns zero
/// when the batch has no valid triplet. Gradient key: `"embeddings"`.
pub fn batch_triplet_loss(embeddings: &Tensor<f64>, labels: &[usize], margin: f64) -> Result<LossOutput> {
    let (n, d) = rows(embeddings)?;
    if labels.len() != n {
        return invalid(format!("{} labels for {n} embeddings", labels.len()));
    }
    let e = embeddings.data();
    let row = |i: usize| &e[i * d..(i + 1) * d];
    let mut g = vec![0.0; n * d];
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = 1.0 - dot(row(a), row(p));
            let mut semi: Option<(f64, usize)> = None;
            let mut hardest: Option<(f64, usize)> = None;
            for k in (0..n).filter(|&k| labels[k] != labels[a]) {
                let dan = 1.0 - dot(row(a), row(k));
                if dan > dap && dan < dap + margin && semi.is_none_or(|(best, _)| dan < best) {
                    semi = Some((dan, k));
                }
                if hardest.is_none_or(|(best, _)| dan < best) {
                    hardest = Some((dan, k));
                }
            }
            let Some((_, neg)) = semi.or(hardest) else { continue };
            count += 1;
            let t = triplet_loss(row(a), row(p), row(neg), margin)?;
            total += t.value;
            for (idx, key) in [(a, "anchor"), (p, "positive"), (neg, "negative")] {
                for (dst, src) in g[idx * d..(idx + 1) * d].iter_mut().zip(t.grad(key).data()) {
                    *dst += src;
                }
            }
        }
    }
    if count == 0 {
        return Ok(LossOutput::with(0.0, [("embeddings", Tensor::zeros(&[n, d]))]));
    }
    let k = 1.0 / count as f64;
    g.iter_mut().for_each(|v| *v *= k);
    Ok(LossOutput::with(total * k, [("embeddings", Tensor::from_vec(&[n, d], g)?)]))
}

/// Σ‖w‖² over the given weights; gradient 2w under each weight's own name.
pub fn l2_regularizer<'a>(weights: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>) -> LossOutput {
    let mut out = LossOutput::default();
    for (name, w) in weights {
        out.value += w.sum_squares();
        let mut g = w.clone();
        g.scale(2.0);
        out.gradients.insert(name.to_string(), g);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvLossWeights {
    pub omega1: f64,
    pub omega2: f64,
}

impl Default for SvLossWeights {
    fn default() -> Self {
        SvLossWeights { omega1: 0.2, omega2: 0.001 }
    }
}

/// L_SV = L_triplet + ω1·L_lmc + ω2·L_r.
pub fn sv_loss(triplet: &LossOutput, lmcl: &LossOutput, l2: &LossOutput, w: SvLossWeights) -> Result<LossOutput> {
    if w.omega1 < 0.0 || w.omega2 < 0.0 {
        return invalid("negative SV loss weight");
    }
    LossOutput::weighted_sum(&[(1.0, triplet), (w.omega1, lmcl), (w.omega2, l2)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaseWeights {
    pub enhancement: f64,
    pub sv: f64,
}

impl Default for TaseWeights {
    fn default() -> Self {
        TaseWeights { enhancement: 1.0, sv: 1.0 }
    }
}

/// L_TASE = w_e·(−SI-SNR) + w_sv·L_SV; `si_snr_loss` is already negated.
pub fn tase_loss(si_snr_loss: &LossOutput, sv: &LossOutput, w: TaseWeights) -> Result<LossOutput> {
    LossOutput::weighted_sum(&[(w.enhancement, si_snr_loss), (w.sv, sv)])
}

/// (1/(N·D)) Σ (Y_t − Y_s)², with gradients `"student"` and `"teacher"`.
pub fn ts_mse(teacher: &Tensor<f64>, student: &Tensor<f64>) -> Result<LossOutput> {
    if teacher.shape() != student.shape() {
        return invalid(format!("teacher {:?} vs student {:?}", teacher.shape(), student.shape()));
    }
    let (n, d) = rows(teacher)?;
    let k = 1.0 / (n * d) as f64;
    let diff: Vec<f64> = teacher.data().iter().zip(student.data()).map(|(t, s)| t - s).collect();
    let value = diff.iter().map(|v| v * v).sum::<f64>() * k;
    Ok(LossOutput::with(
        value,
        [
            ("student", Tensor::from_vec(&[n, d], diff.iter().map(|v| -2.0 * v * k).collect())?),
            ("teacher", Tensor::from_vec(&[n, d], diff.iter().map(|v| 2.0 * v * k).collect())?),
        ],
    ))
}

/// L_S = L_SV + L_MSE.
pub fn student_loss(sv: &LossOutput, mse: &LossOutput) -> Result<LossOutput> {
    LossOutput::weighted_sum(&[(1.0, sv), (1.0, mse)])
}
