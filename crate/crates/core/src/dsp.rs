//! Waveforms, STFT magnitude features, voice activity detection and audio I/O.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result, TaseError};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// 32 ms analysis window.
pub const WINDOW_SAMPLES: usize = 512;
/// 16 ms frame shift.
pub const HOP_SAMPLES: usize = 256;
pub const N_BINS: usize = WINDOW_SAMPLES / 2 + 1;

pub const SEGMENT_MIN_FRAMES: usize = 100;
pub const SEGMENT_MAX_FRAMES: usize = 200;

/// Mono signal at [`SAMPLE_RATE_HZ`], nominal amplitude range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return invalid("waveform must contain at least one sample");
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        SAMPLE_RATE_HZ
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE_HZ as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * gain).collect(),
        }
    }

    /// Sample-wise sum; `other` must have the same length.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if other.len() != self.len() {
            return invalid(format!("length mismatch {} vs {}", self.len(), other.len()));
        }
        Ok(Waveform {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
        })
    }

    /// Sub-range `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        if len == 0 || start + len > self.len() {
            return invalid(format!("slice {start}+{len} out of range {}", self.len()));
        }
        Ok(Waveform {
            samples: self.samples[start..start + len].to_vec(),
        })
    }

    /// Cycles the signal until it has exactly `len` samples.
    pub fn looped(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples.iter().copied().cycle().take(len).collect(),
        }
    }
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Subtracts the sample mean.
pub fn zero_mean_normalize(w: &Waveform) -> Result<Waveform> {
    if w.is_empty() {
        return invalid("empty waveform");
    }
    let mean = w.samples.iter().sum::<f64>() / w.len() as f64;
    Ok(Waveform {
        samples: w.samples.iter().map(|v| v - mean).collect(),
    })
}

/// `T × 257` STFT magnitudes, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * N_BINS {
            return invalid(format!(
                "feature data has {} values, expected {frames} x {N_BINS}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("features must be finite and nonnegative");
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_BINS..(t + 1) * N_BINS]
    }

    /// Frames at the given indices, in order.
    pub fn select(&self, indices: impl IntoIterator<Item = usize>) -> FeatureMatrix {
        let mut data = Vec::new();
        let mut frames = 0;
        for t in indices {
            data.extend_from_slice(self.frame(t));
            frames += 1;
        }
        FeatureMatrix { frames, data }
    }

    pub fn total_energy(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Writes the `TASEFEAT` container: magic, `u32` T, `u32` 257, `f32` row-major (little-endian).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(N_BINS as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(TaseError::Format("bad feature container magic".into()));
        }
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let frames = u32::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let bins = u32::from_le_bytes(b) as usize;
        if bins != N_BINS {
            return Err(TaseError::Format(format!("expected {N_BINS} bins, found {bins}")));
        }
        let mut buf = vec![0u8; frames * N_BINS * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureMatrix::new(frames, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub const FEATURE_MAGIC: &[u8; 8] = b"TASEFEAT";

/// Frame count for a signal of `len` samples (no padding).
pub fn frame_count(len: usize) -> usize {
    if len < WINDOW_SAMPLES {
        0
    } else {
        (len - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// Periodic Hann window.
pub fn hann_window() -> Vec<f64> {
    (0..WINDOW_SAMPLES)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos())
        .collect()
}

struct StftPlan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

thread_local! {
    static STFT_PLAN: RefCell<Option<StftPlan>> = const { RefCell::new(None) };
}

/// One-sided magnitudes of Hann-windowed 512-point frames with a 256-sample hop.
pub fn stft_features(w: &Waveform) -> Result<FeatureMatrix> {
    let frames = frame_count(w.len());
    if frames == 0 {
        return invalid(format!(
            "{} samples is shorter than one {WINDOW_SAMPLES}-sample window",
            w.len()
        ));
    }
    STFT_PLAN.with(|cell| {
        let mut slot = cell.borrow_mut();
        let plan = slot.get_or_insert_with(|| StftPlan {
            fft: FftPlanner::new().plan_fft_forward(WINDOW_SAMPLES),
            window: hann_window(),
        });
        let mut data = Vec::with_capacity(frames * N_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); WINDOW_SAMPLES];
        for t in 0..frames {
            let frame = &w.samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES];
            for ((b, &x), &h) in buf.iter_mut().zip(frame).zip(&plan.window) {
                *b = Complex::new(x * h, 0.0);
            }
            plan.fft.process(&mut buf);
            data.extend(buf[..N_BINS].iter().map(|c| c.norm() as f32));
        }
        FeatureMatrix::new(frames, data)
    })
}

/// Per-frame voice activity decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VadMask(pub Vec<bool>);

impl VadMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn voiced_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }
}

pub const VAD_BANDS: usize = 20;
/// Frames quieter than this (dB relative to full-scale mean square) are never voiced.
pub const VAD_ENERGY_GATE_DB: f64 = -70.0;
/// Upper bound on the band-variance noise floor estimate (dB²).
pub const VAD_FLOOR_CEILING: f64 = 10.0;
/// Margin above the noise floor (dB²).
pub const VAD_MARGIN: f64 = 10.0;
pub const VAD_MEDIAN_FRAMES: usize = 5;
const VAD_FLOOR_PERCENTILE: f64 = 0.1;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Bin boundaries of the mel-spaced bands: band `b` covers `edges[b]..edges[b + 1]`.
pub fn mel_band_edges(bands: usize) -> Vec<usize> {
    let nyquist = SAMPLE_RATE_HZ as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let mut edges: Vec<usize> = (0..=bands)
        .map(|i| {
            let f = mel_to_hz(top * i as f64 / bands as f64);
            ((f / nyquist) * (N_BINS - 1) as f64).round() as usize
        })
        .collect();
    edges[bands] = N_BINS;
    for i in 1..=bands {
        if edges[i] <= edges[i - 1] {
            edges[i] = edges[i - 1] + 1;
        }
    }
    edges
}

/// Per-frame (energy dB, log band-power variance dB²).
pub fn band_variance_statistics(f: &FeatureMatrix) -> Vec<(f64, f64)> {
    let edges = mel_band_edges(VAD_BANDS);
    let window_energy: f64 = hann_window().iter().map(|w| w * w).sum();
    let norm = 1.0 / (WINDOW_SAMPLES as f64 * window_energy);
    (0..f.frames())
        .map(|t| {
            let frame = f.frame(t);
            let power: Vec<f64> = frame.iter().map(|&m| (m as f64) * (m as f64) * norm).collect();
            let energy = power[0] + power[N_BINS - 1] + 2.0 * power[1..N_BINS - 1].iter().sum::<f64>();
            let logs: Vec<f64> = edges
                .windows(2)
                .map(|e| {
                    let band = &power[e[0]..e[1]];
                    10.0 * (band.iter().sum::<f64>() / band.len() as f64 + 1e-12).log10()
                })
                .collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
            (10.0 * (energy + 1e-12).log10(), var)
        })
        .collect()
}

/// Band-power variance voice activity detector.
///
/// A frame is voiced when its energy clears [`VAD_ENERGY_GATE_DB`] and the
/// variance of its log mel-band powers exceeds the noise floor estimate (10th
/// percentile over frames, capped at [`VAD_FLOOR_CEILING`]) by [`VAD_MARGIN`].
/// Decisions are then median-smoothed over [`VAD_MEDIAN_FRAMES`] frames.
pub fn vad_mask(f: &FeatureMatrix) -> VadMask {
    let stats = band_variance_statistics(f);
    if stats.is_empty() {
        return VadMask(Vec::new());
    }
    let mut variances: Vec<f64> = stats.iter().map(|s| s.1).collect();
    variances.sort_by(|a, b| a.total_cmp(b));
    let idx = ((variances.len() - 1) as f64 * VAD_FLOOR_PERCENTILE).floor() as usize;
    let floor = variances[idx].min(VAD_FLOOR_CEILING);
    let threshold = floor + VAD_MARGIN;
    let raw: Vec<bool> = stats
        .iter()
        .map(|&(e, v)| e > VAD_ENERGY_GATE_DB && v > threshold)
        .collect();
    VadMask(median_smooth(&raw, VAD_MEDIAN_FRAMES))
}

fn median_smooth(x: &[bool], width: usize) -> Vec<bool> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            let on = x[lo..hi].iter().filter(|&&v| v).count();
            2 * on > hi - lo
        })
        .collect()
}

/// Random contiguous slice of 100–200 frames, wrapping around when the input is shorter.
pub fn random_segment<R: Rng + ?Sized>(f: &FeatureMatrix, rng: &mut R) -> Result<FeatureMatrix> {
    if f.frames() == 0 {
        return invalid("cannot segment an empty feature matrix");
    }
    let len = rng.random_range(SEGMENT_MIN_FRAMES..=SEGMENT_MAX_FRAMES);
    Ok(segment_with_length(f, len, rng))
}

pub(crate) fn segment_with_length<R: Rng + ?Sized>(f: &FeatureMatrix, len: usize, rng: &mut R) -> FeatureMatrix {
    let t = f.frames();
    let start = if t >= len {
        rng.random_range(0..=t - len)
    } else {
        rng.random_range(0..t)
    };
    f.select((0..len).map(|i| (start + i) % t))
}

/// Reads a 16-bit PCM mono 16 kHz WAV file; samples are divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE_HZ || spec.bits_per_sample != 16 {
        return Err(TaseError::Format(format!(
            "{}: expected 16-bit mono {SAMPLE_RATE_HZ} Hz, found {}-bit {}ch {} Hz",
            path.as_ref().display(),
            spec.bits_per_sample,
            spec.channels,
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples)
}

/// Writes 16-bit PCM mono; samples are scaled by 32768, rounded and clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample(quantize_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mean_examples() {
        let w = zero_mean_normalize(&Waveform::new(vec![1.0; 4]).unwrap()).unwrap();
        assert_eq!(w.samples(), &[0.0; 4]);
        let w = zero_mean_normalize(&Waveform::new(vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(w.samples(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_mean_random_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Waveform::new((0..1000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let z = zero_mean_normalize(&w).unwrap();
        let mean = z.samples().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-9);
        assert!(mean.abs() <= 1e-9 * z.peak());
        let twice = zero_mean_normalize(&z).unwrap();
        for (a, b) in z.samples().iter().zip(twice.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(Waveform::new(vec![]).is_err());
        assert!(Waveform::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn one_second_has_61_frames() {
        let f = stft_features(&Waveform::zeros(16_000).unwrap()).unwrap();
        assert_eq!(f.frames(), 61);
    }

    #[test]
    fn silence_gives_zero_features_and_no_voice() {
        let f = stft_features(&Waveform::zeros(1024).unwrap()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(vad_mask(&f).0.iter().all(|&v| !v));
    }

    #[test]
    fn short_input_rejected() {
        assert!(stft_features(&Waveform::zeros(511).unwrap()).is_err());
    }

    #[test]
    fn band_edges_are_strictly_increasing() {
        let e = mel_band_edges(VAD_BANDS);
        assert_eq!(e.len(), VAD_BANDS + 1);
        assert_eq!(e[0], 0);
        assert_eq!(e[VAD_BANDS], N_BINS);
        assert!(e.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn segment_lengths_in_range() {
        let f = FeatureMatrix::new(500, vec![1.0; 500 * N_BINS]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = random_segment(&f, &mut rng).unwrap();
            assert!((SEGMENT_MIN_FRAMES..=SEGMENT_MAX_FRAMES).contains(&s.frames()));
        }
    }

    #[test]
    fn pcm_quantization_clips() {
        assert_eq!(quantize_pcm16(1.0), 32767);
        assert_eq!(quantize_pcm16(-1.0), -32768);
        assert_eq!(quantize_pcm16(0.5), 16384);
    }
}
