//! Synthetic voices and noise for desk-scale corpora.
//!
//! Each toy speaker is a source-filter voice: a harmonic source with a
//! speaker-specific pitch and jitter, shaped by vowel formants scaled by the
//! speaker's vocal-tract factor and spectral tilt. Utterances are syllable
//! sequences with short pauses between them.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::{mean_square, Waveform, SAMPLE_RATE_HZ};
use crate::error::Result;
use crate::mixture::Speaker;

/// Canonical (F1, F2, F3) of five vowels in Hz.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 120.0, 180.0];
const MAX_HARMONIC_HZ: f64 = 7600.0;
/// Target RMS of voiced speech.
pub const SPEECH_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    /// Multiplies all formant frequencies.
    pub tract_scale: f64,
    /// Spectral slope above 500 Hz, dB per octave (negative).
    pub tilt_db_per_octave: f64,
    /// Relative level of aspiration noise.
    pub breathiness: f64,
    /// Fractional pitch excursion within a syllable.
    pub intonation: f64,
}

impl VoiceProfile {
    /// Voices stratified over pitch and tract length so that `count` speakers stay distinct.
    pub fn stratified<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<VoiceProfile> {
        let mut pitch_slots: Vec<usize> = (0..count).collect();
        let mut tract_slots: Vec<usize> = (0..count).collect();
        pitch_slots.shuffle(rng);
        tract_slots.shuffle(rng);
        (0..count)
            .map(|i| {
                let u = (pitch_slots[i] as f64 + rng.random_range(0.2..0.8)) / count as f64;
                let v = (tract_slots[i] as f64 + rng.random_range(0.2..0.8)) / count as f64;
                VoiceProfile {
                    f0_hz: 85.0 * (290.0f64 / 85.0).powf(u),
                    tract_scale: 0.78 * (1.3f64 / 0.78).powf(v),
                    tilt_db_per_octave: rng.random_range(-9.0..-4.0),
                    breathiness: rng.random_range(0.02..0.12),
                    intonation: rng.random_range(0.03..0.10),
                }
            })
            .collect()
    }

    fn envelope(&self, f: f64, formants: &[f64; 3]) -> f64 {
        let mut a = 0.0;
        for (i, &fc) in formants.iter().enumerate() {
            let bw = FORMANT_BANDWIDTHS[i] * self.tract_scale;
            let x = (f - fc) / bw;
            a += [1.0, 0.7, 0.4][i] / (1.0 + x * x);
        }
        let octaves = (f.max(500.0) / 500.0).log2();
        a * 10f64.powf(self.tilt_db_per_octave * octaves / 20.0) + 0.01
    }
}

/// Synthesizes one utterance of roughly `duration_secs` seconds.
pub fn synthesize_utterance<R: Rng + ?Sized>(
    voice: &VoiceProfile,
    duration_secs: f64,
    rng: &mut R,
) -> Result<Waveform> {
    let fs = SAMPLE_RATE_HZ as f64;
    let total = (duration_secs * fs).round().max(1.0) as usize;
    let mut out = vec![0.0; total];
    let mut pos = (rng.random_range(0.0..0.05) * fs) as usize;
    while pos < total {
        let syl_len = ((rng.random_range(0.12..0.30)) * fs) as usize;
        let end = (pos + syl_len).min(total);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let formants = [
            vowel[0] * voice.tract_scale * rng.random_range(0.95..1.05),
            vowel[1] * voice.tract_scale * rng.random_range(0.95..1.05),
            vowel[2] * voice.tract_scale * rng.random_range(0.95..1.05),
        ];
        let f0_start = voice.f0_hz * (1.0 + voice.intonation * rng.random_range(-1.0..1.0));
        let f0_end = voice.f0_hz * (1.0 + voice.intonation * rng.random_range(-1.0..1.0));
        let f0_mid = 0.5 * (f0_start + f0_end);
        let harmonics = (MAX_HARMONIC_HZ / f0_mid).floor() as usize;
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| voice.envelope(h as f64 * f0_mid, &formants))
            .collect();
        let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let n = end - pos;
        let ramp = (0.02 * fs) as usize;
        let mut noise_state = 0.0;
        for i in 0..n {
            let frac = i as f64 / n.max(1) as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            let step = 2.0 * PI * f0 / fs;
            let mut s = 0.0;
            for (h, (ph, &a)) in phases.iter_mut().zip(&amps).enumerate() {
                *ph += step * (h + 1) as f64;
                if *ph > 2.0 * PI {
                    *ph -= 2.0 * PI;
                }
                s += a * ph.sin();
            }
            let white: f64 = StandardNormal.sample(rng);
            noise_state = 0.7 * noise_state + 0.3 * white;
            s += voice.breathiness * 4.0 * noise_state;
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if n - i < ramp {
                0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            out[pos + i] = s * env;
        }
        pos = end + (rng.random_range(0.03..0.12) * fs) as usize;
    }
    let voiced: Vec<f64> = out.iter().copied().filter(|v| *v != 0.0).collect();
    let rms = mean_square(&voiced).sqrt();
    if rms > 0.0 {
        let level = SPEECH_RMS * 10f64.powf(rng.random_range(-2.0..2.0) / 20.0) / rms;
        out.iter_mut().for_each(|v| *v *= level);
    }
    Waveform::new(out)
}

/// White Gaussian noise shaped by `gain(freq_hz)` in the frequency domain, scaled to `rms`.
fn shaped_noise<R: Rng + ?Sized>(len: usize, rms: f64, rng: &mut R, gain: impl Fn(f64) -> f64) -> Result<Waveform> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let fs = SAMPLE_RATE_HZ as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let f = bin as f64 * fs / len as f64;
        *c *= gain(f);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / len as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    let p = mean_square(&x).sqrt();
    if p > 0.0 {
        x.iter_mut().for_each(|v| *v *= rms / p);
    }
    Waveform::new(x)
}

/// Noise with a 1/f power spectrum (DC removed).
pub fn pink_noise<R: Rng + ?Sized>(len: usize, rms: f64, rng: &mut R) -> Result<Waveform> {
    shaped_noise(len, rms, rng, |f| if f < 20.0 { 0.0 } else { 1.0 / f.sqrt() })
}

/// Stationary noise with a long-term speech-like spectrum.
pub fn speech_shaped_noise<R: Rng + ?Sized>(len: usize, rms: f64, rng: &mut R) -> Result<Waveform> {
    shaped_noise(len, rms, rng, |f| {
        if f < 60.0 {
            return 0.0;
        }
        let hump = 1.0 / (1.0 + ((f - 500.0) / 300.0).powi(2)) + 0.6 / (1.0 + ((f - 1500.0) / 500.0).powi(2));
        let tilt = 10f64.powf(-8.0 * (f.max(500.0) / 500.0).log2() / 20.0);
        hump * tilt + 0.002
    })
}

/// Builds `n_speakers` synthetic speakers (ids `spk00`, `spk01`, ...) with `utterances` clean utterances each.
pub fn toy_speakers<R: Rng + ?Sized>(
    n_speakers: usize,
    utterances: usize,
    duration_secs: (f64, f64),
    rng: &mut R,
) -> Result<Vec<Speaker>> {
    VoiceProfile::stratified(n_speakers, rng)
        .into_iter()
        .enumerate()
        .map(|(i, voice)| {
            let utts = (0..utterances)
                .map(|_| {
                    let d = rng.random_range(duration_secs.0..=duration_secs.1);
                    synthesize_utterance(&voice, d, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Speaker {
                id: format!("spk{i:02}"),
                utterances: utts,
            })
        })
        .collect()
}
