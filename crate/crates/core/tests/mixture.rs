use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use tase_core::dsp::{mean_square, Waveform};
use tase_core::mixture::*;
use tase_core::synth::toy_speakers;

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn chi2_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2)
}

/// Central 99% interval of Binomial(n, p).
fn binomial_99(n: u64, p: f64) -> (u64, u64) {
    let b = Binomial::new(p, n).unwrap();
    (b.inverse_cdf(0.005), b.inverse_cdf(0.995))
}

fn small_corpus(seed: u64) -> Vec<Speaker> {
    toy_speakers(6, 5, (0.25, 0.4), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn sir_gain_examples() {
    let t = noise(4000, 1);
    let i = t.clone();
    let g0 = scale_to_sir(&t, &i, 0.0).unwrap();
    assert!((g0.samples()[7] / i.samples()[7] - 1.0).abs() < 1e-12);
    let g6 = scale_to_sir(&t, &i, 6.0).unwrap();
    assert!((g6.samples()[7] / i.samples()[7] - 10f64.powf(-6.0 / 20.0)).abs() < 1e-12);
    assert!((10f64.powf(-6.0 / 20.0) - 0.50119).abs() < 1e-5);
    let measured = 10.0 * (t.power() / g6.power()).log10();
    assert!((measured - 6.0).abs() < 0.01);
    let ginf = scale_to_sir(&t, &i, f64::INFINITY).unwrap();
    assert!(ginf.samples().iter().all(|&v| v == 0.0));
    let silent = Waveform::zeros(4000).unwrap();
    assert!(scale_to_sir(&t, &silent, 6.0).is_err());
    assert!(scale_to_sir(&t, &silent, f64::INFINITY).is_ok());
}

#[test]
fn noise_gain_examples() {
    let s = noise(4000, 2);
    let out = add_noise_at_snr(&s, &s, 30.0).unwrap();
    let g = (out.samples()[5] - s.samples()[5]) / s.samples()[5];
    assert!((g - 0.031_62).abs() < 1e-5);

    let sine: Vec<f64> = (0..1600).map(|n| (0.1 * n as f64).sin()).collect();
    let w = Waveform::new(sine).unwrap();
    let doubled = add_noise_at_snr(&w, &w, 0.0).unwrap();
    for (a, b) in doubled.samples().iter().zip(w.samples()) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
    assert!(add_noise_at_snr(&s, &Waveform::zeros(10).unwrap(), 6.0).is_err());
}

#[test]
fn short_noise_is_looped() {
    let s = noise(5000, 3);
    let n = noise(700, 4);
    let out = add_noise_at_snr(&s, &n, 12.0).unwrap();
    let scaled: Vec<f64> = out.samples().iter().zip(s.samples()).map(|(o, s)| o - s).collect();
    let measured = 10.0 * (s.power() / mean_square(&scaled)).log10();
    assert!((measured - 12.0).abs() < 0.01);
    assert!((scaled[0] - scaled[700]).abs() < 1e-12);
}

#[test]
fn random_mixtures_re_measure_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..500 {
        let spec = MixtureSpec::sample(&mut rng);
        let len = rng.random_range(2000..6000);
        let target = noise(len, 1000 + k);
        let interferers: Vec<Waveform> = (1..spec.n_speakers)
            .map(|j| noise(rng.random_range(500..9000), 5000 + 10 * k + j as u64))
            .collect();
        let nz = noise(rng.random_range(300..9000), 9000 + k);
        let m = make_mixture(&spec, &target, &interferers, &nz, &mut rng).unwrap();
        assert_eq!(m.mixture.len(), len);
        assert!((m.measured_snr_db() - spec.snr_db).abs() < 0.01);
        if spec.n_speakers > 1 && spec.sir_db.is_finite() {
            assert!((m.measured_sir_db() - spec.sir_db).abs() < 0.01, "{spec:?}");
        } else {
            assert!(m.interference.samples().iter().all(|&v| v == 0.0));
        }
        for i in 0..len {
            let sum = m.reference.samples()[i] + m.interference.samples()[i] + m.noise.samples()[i];
            assert!((m.mixture.samples()[i] - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn three_speakers_at_zero_sir_have_equal_power() {
    let spec = MixtureSpec::new(3, 0.0, 30.0).unwrap();
    let target = noise(4000, 6);
    let itfs = [noise(4000, 7).scaled(3.0), noise(4000, 8).scaled(0.2)];
    let m = make_mixture(&spec, &target, &itfs, &noise(4000, 9), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(m.overlap, (0, 4000));
    let db = 10.0 * (m.interference.power() / target.power()).log10();
    assert!(db.abs() < 0.01);
}

#[test]
fn single_speaker_mixture_is_target_plus_faint_noise() {
    let spec = MixtureSpec::new(1, 6.0, 30.0).unwrap();
    let target = noise(3000, 10);
    let m = make_mixture(&spec, &target, &[], &noise(3000, 11), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let resid: Vec<f64> = m.mixture.samples().iter().zip(target.samples()).map(|(a, b)| a - b).collect();
    assert!((10.0 * (target.power() / mean_square(&resid)).log10() - 30.0).abs() < 0.01);
    assert!(make_mixture(&spec, &target, &[target.clone()], &target, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn mixture_is_deterministic() {
    let spec = MixtureSpec::new(2, 6.0, 12.0).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        make_mixture(&spec, &noise(3000, 1), &[noise(1200, 2)], &noise(3000, 3), &mut rng)
            .unwrap()
            .mixture
    };
    assert_eq!(run(), run());
}

#[test]
fn spec_validation() {
    assert!(MixtureSpec::new(0, 0.0, 6.0).is_err());
    assert!(MixtureSpec::new(4, 0.0, 6.0).is_err());
    assert!(MixtureSpec::new(2, 3.0, 6.0).is_err());
    assert!(MixtureSpec::new(2, 0.0, 7.0).is_err());
    assert!(MixtureSpec::new(2, f64::INFINITY, 30.0).is_ok());
}

#[test]
fn spec_grid_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut n = [0usize; 3];
    let mut sir = [0usize; 4];
    let mut snr = [0usize; 5];
    for _ in 0..6000 {
        let s = MixtureSpec::sample(&mut rng);
        n[s.n_speakers - 1] += 1;
        sir[SIR_GRID_DB.iter().position(|&v| v == s.sir_db).unwrap()] += 1;
        snr[SNR_GRID_DB.iter().position(|&v| v == s.snr_db).unwrap()] += 1;
    }
    assert!(chi2_p(&n) > 0.01);
    assert!(chi2_p(&sir) > 0.01);
    assert!(chi2_p(&snr) > 0.01);
}

#[test]
fn null_reference_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = null_reference(100_000, &mut rng).unwrap();
    let mean = n.samples().iter().sum::<f64>() / n.len() as f64;
    let sd = (n.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
    assert!((0.9e-6..=1.1e-6).contains(&sd), "{sd}");
    assert!(mean.abs() < 1e-7);
    let a = null_reference(100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = null_reference(100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let c = null_reference(100, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(null_reference(0, &mut rng).is_err());
}

#[test]
fn ratio_parsing() {
    let r: NontargetRatio = "11:1".parse().unwrap();
    assert!((r.probability() - 1.0 / 12.0).abs() < 1e-15);
    assert_eq!("inf:1".parse::<NontargetRatio>().unwrap().probability(), 0.0);
    assert_eq!("1:0".parse::<NontargetRatio>().unwrap().probability(), 0.0);
    assert!("11".parse::<NontargetRatio>().is_err());
    assert!("0:0".parse::<NontargetRatio>().is_err());
}

#[test]
fn triplet_definitions_hold() {
    let corpus = small_corpus(20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ratio: NontargetRatio = "1:1".parse().unwrap();
    let (mut nt, mut t) = (0, 0);
    for _ in 0..200 {
        let tr = sample_triplet(&corpus, &mut rng, ratio).unwrap();
        assert_eq!(tr.enrollment.len(), ENROLL_PER_TRIPLET);
        let enrolled = corpus.iter().find(|s| s.id == tr.enrolled_speaker).unwrap();
        for e in &tr.enrollment {
            assert!(enrolled.utterances.contains(e));
        }
        match (&tr.label, &tr.reference) {
            (Label::Nontarget, Reference::Null) => {
                nt += 1;
                assert!(!tr.mixture_speakers.contains(&tr.enrolled_speaker));
            }
            (Label::Target, Reference::Clean(r)) => {
                t += 1;
                assert_eq!(tr.mixture_speakers[0], tr.enrolled_speaker);
                assert!(enrolled.utterances.contains(r));
                assert!(!tr.enrollment.contains(r));
                assert_eq!(r.len(), tr.test_mixture.len());
            }
            other => panic!("inconsistent triplet {other:?}"),
        }
    }
    assert!(nt > 0 && t > 0);
    assert!(sample_triplet(&corpus[..1], &mut rng, ratio).is_err());
}

#[test]
fn nontarget_rate_matches_binomial_band() {
    let corpus = small_corpus(22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let nt = (0..12_000)
        .filter(|_| sample_triplet(&corpus, &mut rng, NontargetRatio::DEFAULT).unwrap().label == Label::Nontarget)
        .count();
    let (lo, hi) = binomial_99(12_000, NontargetRatio::DEFAULT.probability());
    assert!((lo..=hi).contains(&(nt as u64)), "{nt} outside [{lo}, {hi}]");
}

#[test]
fn triplets_depend_only_on_seed_and_id() {
    let corpus = small_corpus(24);
    let all = generate_triplets(&corpus, 6, NontargetRatio::DEFAULT, 99).unwrap();
    let again = sample_triplet(&corpus, &mut triplet_rng(99, 4), NontargetRatio::DEFAULT).unwrap();
    assert_eq!(all[4].test_mixture, again.test_mixture);
    assert_ne!(all[3].test_mixture, all[4].test_mixture);
}

#[test]
fn manifest_round_trip() {
    let corpus = small_corpus(25);
    let triplets = generate_triplets(&corpus, 8, "1:1".parse().unwrap(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(dir.path(), &triplets, 7).unwrap();
    let loaded = CorpusManifest::load(dir.path()).unwrap();
    assert_eq!(m, loaded);
    assert_eq!(CorpusManifest::parse(&m.to_text()).unwrap().to_text(), m.to_text());
    let back = loaded.read_triplets(dir.path()).unwrap();
    for (a, b) in triplets.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.enrolled_speaker, b.enrolled_speaker);
        assert_eq!(a.test_mixture.len(), b.test_mixture.len());
        let err = a.test_mixture.samples().iter().zip(b.test_mixture.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0 || a.test_mixture.peak() > 1.0);
    }
    std::fs::remove_file(dir.path().join(&m.entries[0].mix_path)).unwrap();
    assert!(CorpusManifest::load(dir.path()).is_err());
}
