//! Property suites for losses, layers, the mixer, EER and reproducibility.
//! Each returns a short detail string on success or a reason on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use tase_core::dsp::Waveform;
use tase_core::eval::{compute_eer, det_curve, generate_trials, parse_trials, trials_to_text, EvalManifest, EvalUtterance};
use tase_core::losses::*;
use tase_core::mixture::*;
use tase_core::models::EnhancerConfig;
use tase_core::pipeline::{pretrain_embedder, stage2_joint_train, Embedder, SpeechEnhancer, StageConfig, StageId};
use tase_core::synth::toy_speakers;
use tase_nnet::norm::{normalize_rows, normalize_rows_backward};
use tase_nnet::{grad_check, read_checkpoint, write_checkpoint, LayerSpec, Network, Padding, Tensor};

use crate::sweep::sweep_eer;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gauss(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = gauss(n, rng);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn zero_mean_unit_power(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    let p = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| x / p).collect()
}

/// Zero-mean, unit-power vector orthogonal to zero-mean `t`.
fn orthogonal_to(t: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut n = zero_mean_unit_power(gauss(t.len(), rng));
    let k = n.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / t.iter().map(|v| v * v).sum::<f64>();
    n.iter_mut().zip(t).for_each(|(a, b)| *a -= k * b);
    zero_mean_unit_power(n)
}

fn wave(x: Vec<f64>) -> Waveform {
    Waveform::new(x).unwrap()
}

pub fn si_snr_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = gauss(2000, &mut rng);
    let e: Vec<f64> = t.iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let base = si_snr(&wave(e.clone()), &wave(t.clone()), SiSnrMode::Standard).map_err(|x| x.to_string())?.value;
    let mut worst: f64 = 0.0;
    for c in [0.1, 3.0, 10.0] {
        let v = si_snr(&wave(e.iter().map(|x| c * x).collect()), &wave(t.clone()), SiSnrMode::Standard).unwrap().value;
        worst = worst.max((v - base).abs());
    }
    ensure(worst < 1e-6, || format!("scale drift {worst:e} dB"))?;

    let t = zero_mean_unit_power(gauss(1000, &mut rng));
    let same = si_snr(&wave(t.clone()), &wave(t.clone()), SiSnrMode::Standard).unwrap().value;
    let orth = si_snr(&wave(orthogonal_to(&t, &mut rng)), &wave(t.clone()), SiSnrMode::Standard).unwrap().value;
    ensure(same == 60.0 && (orth + 60.0).abs() < 1e-9, || format!("clamps {same} / {orth}"))?;

    let t = zero_mean_unit_power(gauss(4000, &mut rng));
    let n = orthogonal_to(&t, &mut rng);
    let e: Vec<f64> = t.iter().zip(&n).map(|(t, n)| t + 0.1 * n).collect();
    let v = si_snr(&wave(e), &wave(t), SiSnrMode::Standard).unwrap().value;
    ensure((v - 20.0).abs() < 1e-6, || format!("closed form {v} dB"))?;
    Ok(format!("scale drift {worst:.1e} dB, clamps {same}/{orth:.1}, closed form {v:.9} dB"))
}

const FD_STEP: f64 = 1e-5;

/// Max relative error between `analytic` and central differences of `f` at `x`.
fn fd_error(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + FD_STEP;
        let hi = f(&y);
        y[i] = x[i] - FD_STEP;
        let lo = f(&y);
        y[i] = x[i];
        let numeric = (hi - lo) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn loss_gradients() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();
    for (name, mode) in [("si_snr standard", SiSnrMode::Standard), ("si_snr literal", SiSnrMode::Literal)] {
        let t = gauss(64, &mut rng);
        let e: Vec<f64> = t.iter().map(|v| 0.7 * v + 0.4 * rng.sample::<f64, _>(StandardNormal) + 0.2).collect();
        let r = si_snr_slices(&e, &t, mode).unwrap();
        let err_e = fd_error(&e, r.grad("estimate").data(), |x| si_snr_slices(x, &t, mode).unwrap().value);
        let err_t = fd_error(&t, r.grad("target").data(), |x| si_snr_slices(&e, x, mode).unwrap().value);
        out.push((name, err_e.max(err_t)));
    }

    // Target branch of the NULL-aware loss, then the nontarget branch itself.
    let t = gauss(64, &mut rng);
    let e: Vec<f64> = t.iter().map(|v| 0.6 * v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let f = |x: &[f64]| {
        si_snr_with_null(&wave(x.to_vec()), Label::Target, Some(&wave(t.clone())), SiSnrMode::Standard, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    };
    out.push(("si_snr_with_null target", fd_error(&e, f(&e).grad("estimate").data(), |x| f(x).value)));
    let null: Vec<f64> = gauss(80, &mut rng).iter().map(|v| v * 1e-6).collect();
    let e: Vec<f64> = gauss(80, &mut rng).iter().map(|v| v * 0.01).collect();
    out.push(("si_snr_with_null nontarget", fd_error(&e, null_snr(&e, &null).grad("estimate").data(), |x| null_snr(x, &null).value)));

    let (n, c, d) = (5, 3, 8);
    let labels = [0, 1, 2, 1, 0];
    let raw_e = gauss(n * d, &mut rng);
    let raw_w = gauss(c * d, &mut rng);
    let lm = |re: &[f64], rw: &[f64]| {
        let (e, _) = normalize_rows(re, d);
        let (w, _) = normalize_rows(rw, d);
        lmcl(&Tensor::from_vec(&[n, d], e).unwrap(), &labels, &Tensor::from_vec(&[c, d], w).unwrap(), LMCL_MARGIN, 5.0).unwrap()
    };
    let (e, ne) = normalize_rows(&raw_e, d);
    let (w, nw) = normalize_rows(&raw_w, d);
    let r = lm(&raw_e, &raw_w);
    let ge = normalize_rows_backward(&e, &ne, r.grad("embeddings").data(), d);
    let gw = normalize_rows_backward(&w, &nw, r.grad("class_weights").data(), d);
    let err = fd_error(&raw_e, &ge, |x| lm(x, &raw_w).value).max(fd_error(&raw_w, &gw, |x| lm(&raw_e, x).value));
    out.push(("lmcl", err));

    let (a, p, ng) = (unit(128, &mut rng), unit(128, &mut rng), unit(128, &mut rng));
    let r = triplet_loss(&a, &p, &ng, 0.2).unwrap();
    let err = if r.value > 0.05 {
        fd_error(&a, r.grad("anchor").data(), |x| triplet_loss(x, &p, &ng, 0.2).unwrap().value)
            .max(fd_error(&p, r.grad("positive").data(), |x| triplet_loss(&a, x, &ng, 0.2).unwrap().value))
            .max(fd_error(&ng, r.grad("negative").data(), |x| triplet_loss(&a, &p, x, 0.2).unwrap().value))
    } else {
        f64::INFINITY
    };
    out.push(("triplet off-hinge", err));

    let yt = Tensor::from_vec(&[4, 16], gauss(64, &mut rng)).unwrap();
    let ys = gauss(64, &mut rng);
    let mse = |x: &[f64]| ts_mse(&yt, &Tensor::from_vec(&[4, 16], x.to_vec()).unwrap()).unwrap();
    out.push(("ts_mse", fd_error(&ys, mse(&ys).grad("student").data(), |x| mse(x).value)));

    let (n, c, d) = (6, 3, 8);
    let labels = [0, 0, 1, 1, 2, 2];
    let emb: Vec<f64> = (0..n).flat_map(|_| unit(d, &mut rng)).collect();
    let wts = Tensor::from_vec(&[c, d], (0..c).flat_map(|_| unit(d, &mut rng)).collect()).unwrap();
    let teacher = Tensor::from_vec(&[n, d], (0..n).flat_map(|_| unit(d, &mut rng)).collect()).unwrap();
    let sv_of = |x: &[f64]| {
        let et = Tensor::from_vec(&[n, d], x.to_vec()).unwrap();
        let trip = batch_triplet_loss(&et, &labels, 0.2).unwrap();
        let lm = lmcl(&et, &labels, &wts, 0.2, 10.0).unwrap();
        sv_loss(&trip, &lm, &l2_regularizer([("class_weights", &wts)]), SvLossWeights::default()).unwrap()
    };
    out.push(("L_SV", fd_error(&emb, sv_of(&emb).grad("embeddings").data(), |x| sv_of(x).value)));
    let student_of = |x: &[f64]| {
        let mut mse = ts_mse(&teacher, &Tensor::from_vec(&[n, d], x.to_vec()).unwrap()).unwrap();
        let g = mse.gradients.remove("student").unwrap();
        mse.gradients.remove("teacher");
        mse.gradients.insert("embeddings".into(), g);
        student_loss(&sv_of(x), &mse).unwrap()
    };
    out.push(("L_S", fd_error(&emb, student_of(&emb).grad("embeddings").data(), |x| student_of(x).value)));
    let t = gauss(48, &mut rng);
    let est: Vec<f64> = gauss(48, &mut rng).iter().zip(&t).map(|(a, b)| 0.3 * a + b).collect();
    let tase_of = |x: &[f64], e: &[f64]| {
        let enh = si_snr_slices(x, &t, SiSnrMode::Standard).unwrap().negated();
        tase_loss(&enh, &sv_of(e), TaseWeights::default()).unwrap()
    };
    let r = tase_of(&est, &emb);
    let err = fd_error(&est, r.grad("estimate").data(), |x| tase_of(x, &emb).value)
        .max(fd_error(&emb, r.grad("embeddings").data(), |x| tase_of(&est, x).value));
    out.push(("L_TASE", err));
    out
}

fn layer_gradients() -> Vec<(&'static str, f64)> {
    let conv = |i, o, k, d, s, p| LayerSpec::Conv1d { in_channels: i, out_channels: o, kernel: k, dilation: d, stride: s, padding: p };
    let tconv = |bias| LayerSpec::ConvTranspose1d { in_channels: 3, out_channels: 2, kernel: 5, stride: 2, bias };
    let cases: Vec<(&'static str, LayerSpec, usize, usize)> = vec![
        ("conv1d", conv(3, 4, 3, 2, 1, Padding::Valid), 3, 12),
        ("conv1d strided", conv(2, 3, 4, 1, 2, Padding::Valid), 2, 15),
        ("conv1d replicate", conv(3, 3, 3, 2, 1, Padding::Replicate), 3, 10),
        ("linear", LayerSpec::Linear { in_features: 5, out_features: 4 }, 5, 6),
        ("relu", LayerSpec::Relu, 4, 6),
        ("prelu", LayerSpec::Prelu { channels: 4 }, 4, 6),
        ("layernorm", LayerSpec::LayerNorm { channels: 5 }, 5, 4),
        ("mean-pool", LayerSpec::MeanPoolTime, 4, 7),
        ("stats-pool", LayerSpec::StatsPoolTime, 4, 7),
        ("l2-normalize", LayerSpec::L2Normalize, 6, 3),
        ("sigmoid", LayerSpec::Sigmoid, 4, 5),
        ("conv-transpose", tconv(true), 3, 6),
        ("conv-transpose no bias", tconv(false), 3, 6),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, spec, c, t))| {
            let seed = 100 + 10 * i as u64;
            let mut net = Network::<f64>::new("g", &[spec], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for p in net.params_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            net.touch();
            let x = Tensor::from_vec(&[c, t], (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let loss = move |y: &Tensor<f64>| {
                let mut r = ChaCha8Rng::seed_from_u64(seed + 3);
                let w: Vec<f64> = (0..y.len()).map(|_| r.random_range(-1.0..1.0)).collect();
                (y.data().iter().zip(&w).map(|(a, b)| a * b).sum(), Tensor::from_vec(y.shape(), w).unwrap())
            };
            (name, grad_check(&net, &x, loss, FD_STEP, seed + 4).unwrap().max_rel_error)
        })
        .collect()
}

pub fn gradient_suite() -> Outcome {
    let all: Vec<(&str, f64)> = loss_gradients().into_iter().chain(layer_gradients()).collect();
    let failed: Vec<String> = all.iter().filter(|(_, e)| !(*e <= 1e-4)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure(failed.is_empty(), || failed.join(", "))?;
    let worst = all.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.1e}", all.len()))
}

fn uniform_noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    wave((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn chi2_p(counts: &[usize]) -> f64 {
    let e = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2)
}

pub fn mixer_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..500u64 {
        let spec = MixtureSpec::sample(&mut rng);
        let len = rng.random_range(2000..6000);
        let target = uniform_noise(len, 1000 + k);
        let interferers: Vec<Waveform> =
            (1..spec.n_speakers).map(|j| uniform_noise(rng.random_range(500..9000), 5000 + 10 * k + j as u64)).collect();
        let noise = uniform_noise(rng.random_range(300..9000), 9000 + k);
        let m = make_mixture(&spec, &target, &interferers, &noise, &mut rng).map_err(|e| e.to_string())?;
        worst = worst.max((m.measured_snr_db() - spec.snr_db).abs());
        if spec.n_speakers > 1 && spec.sir_db.is_finite() {
            worst = worst.max((m.measured_sir_db() - spec.sir_db).abs());
        }
    }
    ensure(worst < 0.01, || format!("re-measured level off by {worst} dB"))?;

    let mut n = [0usize; 3];
    let mut sir = [0usize; SIR_GRID_DB.len()];
    for _ in 0..6000 {
        let s = MixtureSpec::sample(&mut rng);
        n[s.n_speakers - 1] += 1;
        sir[SIR_GRID_DB.iter().position(|&v| v == s.sir_db).unwrap()] += 1;
    }
    let (pn, ps) = (chi2_p(&n), chi2_p(&sir));
    ensure(pn > 0.01 && ps > 0.01, || format!("chi2 p {pn:.4} / {ps:.4}"))?;

    let corpus = toy_speakers(6, 5, (0.25, 0.4), &mut rng).unwrap();
    let draws = 12_000u64;
    let nt = (0..draws)
        .filter(|_| sample_triplet(&corpus, &mut rng, NontargetRatio::DEFAULT).unwrap().label == Label::Nontarget)
        .count() as u64;
    let band = Binomial::new(NontargetRatio::DEFAULT.probability(), draws).unwrap();
    let (lo, hi) = (band.inverse_cdf(0.005), band.inverse_cdf(0.995));
    ensure((lo..=hi).contains(&nt), || format!("{nt} nontargets outside [{lo}, {hi}]"))?;
    Ok(format!("max level error {worst:.1e} dB, chi2 p {pn:.3}/{ps:.3}, {nt} nontargets in [{lo}, {hi}]"))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=500);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let levels = if rng.random_bool(0.5) { 8.0 } else { 1e9 };
    let scores = labels
        .iter()
        .map(|&t| ((rng.random_range(-1.0f64..1.0) + if t { 0.5 } else { 0.0 }) * levels).round() / levels)
        .collect();
    (scores, labels)
}

pub fn eer_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        let (eer, _) = compute_eer(&s, &l).map_err(|e| e.to_string())?;
        let oracle = sweep_eer(&s, &l);
        ensure(eer == oracle, || format!("instance {i}: {eer} vs sweep {oracle}"))?;

        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp()).collect();
        let u: Vec<f64> = s.iter().map(|x| x.powi(3) + x).collect();
        let (et, eu) = (compute_eer(&t, &l).unwrap().0, compute_eer(&u, &l).unwrap().0);
        ensure(et == eer && eu == eer, || format!("instance {i}: transformed EER {et} / {eu} vs {eer}"))?;

        let det = det_curve(&s, &l).unwrap();
        let monotone = det.windows(2).all(|w| w[0].threshold < w[1].threshold && w[1].far <= w[0].far && w[1].miss >= w[0].miss);
        ensure(monotone, || format!("instance {i}: DET not monotone"))?;
    }
    Ok("1000 instances identical to the sweep, invariant and monotone".into())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn determinism_suite() -> Outcome {
    let corpus = toy_speakers(4, 4, (0.6, 0.9), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut cfg = StageConfig::new(StageId::Pretrain);
    cfg.epochs = 1;
    cfg.max_steps = Some(3);
    cfg.batch = 4;
    cfg.crop_samples = 2000;
    let pretrain = || {
        let mut net = Embedder::student(6).unwrap();
        (pretrain_embedder(&mut net, &corpus, &cfg).unwrap().step_losses, net)
    };
    let (la, net_a) = pretrain();
    let (lb, _) = pretrain();

    let triplets = generate_triplets(&corpus, 4, NontargetRatio::DEFAULT, 7).unwrap();
    let mut jcfg = StageConfig::new(StageId::JointTrain);
    jcfg.max_steps = Some(2);
    jcfg.batch = 4;
    jcfg.crop_samples = 2000;
    let joint = || {
        let config = EnhancerConfig { basis: 16, kernel: 16, stride: 8, bottleneck: 8, hidden: 8, dilations: vec![1, 2] };
        let mut enh = SpeechEnhancer::new(config, 8).unwrap();
        let mut net1 = net_a.clone();
        net1.distilled = true;
        (stage2_joint_train(&mut enh, &mut net1, &triplets, &jcfg).unwrap().step_losses, enh)
    };
    let (ja, enh) = joint();
    let (jb, _) = joint();
    let drift = la.iter().zip(&lb).chain(ja.iter().zip(&jb)).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    ensure(la.len() == 3 && ja.len() == 2 && drift <= 1e-5, || format!("step loss drift {drift:e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = enh.to_checkpoint().merge(net_a.network().to_checkpoint());
    let path = dir.path().join("all.ckpt");
    write_checkpoint(&path, &ckpt).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    write_checkpoint(&path, &read_checkpoint(&path).unwrap()).unwrap();
    ensure(read_checkpoint(&path).unwrap() == ckpt && std::fs::read(&path).unwrap() == bytes, || {
        "checkpoint changed on round trip".into()
    })?;
    enh.save(dir.path().join("enh")).unwrap();
    ensure(SpeechEnhancer::load(dir.path().join("enh")).unwrap().to_checkpoint() == enh.to_checkpoint(), || {
        "enhancer model files changed on round trip".into()
    })?;

    let mut m = EvalManifest::default();
    for s in ["a", "b", "c"] {
        for k in 0..5 {
            m.utterances.push(EvalUtterance { id: format!("{s}{k}"), speakers: vec![s.into()], snr_db: Some(1.5 * k as f64) });
        }
    }
    let text = trials_to_text(&generate_trials(&m, 10, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
    let again = trials_to_text(&generate_trials(&m, 10, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
    let path = dir.path().join("t.trials");
    std::fs::write(&path, &text).unwrap();
    let back = trials_to_text(&parse_trials(&std::fs::read_to_string(&path).unwrap()).unwrap());
    ensure(text == again && back == text, || "trial file not reproduced bit-exactly".into())?;
    Ok(format!("max step-loss drift {drift:.1e}, {} checkpoint bytes and {} trial bytes round-trip", bytes.len(), text.len()))
}
