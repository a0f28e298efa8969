//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p clmrkit --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clmrkit::audio::AudioBuffer;
use clmrkit::augment::{
    add_noise, apply_gain, butterworth_filter, delay_by, delay_offset, invert_polarity, pitch_shift, reverb,
    ChainConfig, FilterKind, ReverbParams, TransformChain,
};
use clmrkit::autodiff::gradcheck::check_gradients;
use clmrkit::autodiff::{Tape, Tensor, TensorError, Var};
use clmrkit::contrastive::{nt_xent, nt_xent_value, pair_similarity, pretrain, RunOutput, TrainConfig};
use clmrkit::datasets::{build_vocabulary, load_manifest, synthesize_corpus, Manifest, Split, SynthConfig};
use clmrkit::dsp::{amplitude_to_db, correlation, peak_frequency, rms, sine, tone_amplitude};
use clmrkit::eval::{checkpoint_hash, evaluate, load_eval_data, pr_auc, roc_auc, EvalData, ProbeConfig};
use clmrkit::model::{
    filter_spectrum, write_spectra_csv, Checkpoint, EncoderConfig, LinearVars, ModelParams, Projector, SpectrumConfig,
};

// Tolerances and budgets, pinned here.
const NT_XENT_REL_TOL: f64 = 1e-6;
const NT_XENT_BUDGET: Duration = Duration::from_secs(10);
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GAIN_TOL: f64 = 1e-6;
const SNR_TARGET_DB: f64 = 80.0;
const SNR_TOL_DB: f64 = 0.5;
const PITCH_TARGET_HZ: f64 = 587.33;
const PITCH_REL_TOL: f64 = 0.02;
const STOPBAND_MIN_DB: f64 = 9.0;
const PASSBAND_MAX_DB: f64 = 1.0;
const REVERB_MIN_CORR: f64 = 0.99;
const AUGMENT_BUDGET: Duration = Duration::from_secs(60);
const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(30);
const PARAM_TARGET: f64 = 2.5e6;
const PARAM_REL_TOL: f64 = 0.10;
const PRETRAIN_MIN_STEPS: usize = 500;
/// Steps actually run; the criterion sets only a floor.
const PRETRAIN_STEPS: usize = 1500;
const LOSS_DROP: f64 = 0.20;
const SIMILARITY_GAP: f64 = 0.2;
const TRAINED_MIN_AUC: f64 = 0.90;
const RANDOM_MAX_AUC: f64 = 0.65;
const END_TO_END_BUDGET: Duration = Duration::from_secs(15 * 60);
const MONOTONE_SLACK: f64 = 0.02;

const SR: u32 = 22050;
const SEED: u64 = 2024;

type Outcome = Result<String, String>;
/// Final checkpoint bytes, every epoch checkpoint, loss CSV text.
type RunArtifacts = (Vec<u8>, Vec<Vec<u8>>, String);
type Quick = (&'static str, fn() -> Outcome);
type Staged = (&'static str, fn(&Desk) -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, format!("took {t:.1?}, budget {budget:?}"))
}

fn rand64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn brute_nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let n = m / 2;
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |a: usize, b: usize| z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / (norm(&z[a]) * norm(&z[b]));
    let mut total = 0.0;
    for i in 0..m {
        let j = if i < n { i + n } else { i - n };
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
        total += -((sim(i, j) / tau).exp() / denom).ln();
    }
    total / m as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let tau = [0.1, 0.5, 1.0][k % 3];
        let rows: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z = Tensor::new(vec![2 * n, d], rows.concat()).unwrap();
        let got = nt_xent_value(&z, tau).map_err(|e| e.to_string())?;
        let want = brute_nt_xent(&rows, tau);
        worst = worst.max((got - want).abs() / want.abs());
    }
    ensure(worst <= NT_XENT_REL_TOL, format!("worst relative error {worst:e}"))?;
    for n in 2..=8 {
        let z = Tensor::<f64>::new(vec![2 * n, 3], [0.3, -1.2, 0.7].repeat(2 * n)).unwrap();
        let got = nt_xent_value(&z, 0.5).map_err(|e| e.to_string())?;
        let want = ((2 * n - 1) as f64).ln();
        ensure((got - want).abs() <= 1e-6, format!("identical rows at N={n}: {got} vs {want}"))?;
    }
    within_budget(start, NT_XENT_BUDGET)?;
    Ok(format!("100 instances, worst rel err {worst:.1e}, {:.2?}", start.elapsed()))
}

fn grad_family<F>(rng: &mut ChaCha8Rng, name: &str, mut make: F) -> Result<f64, String>
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>),
{
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let (inputs, f) = make(rng);
        let r = check_gradients(&inputs, 1e-6, f).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(r.max_rel_error);
    }
    ensure(worst < GRAD_REL_TOL, format!("{name}: relative error {worst:e}"))?;
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst: f64 = 0.0;

    worst = worst.max(grad_family(&mut rng, "conv1d", |r| {
        let (b, ci, co, l) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(6..12));
        let (stride, pad) = [(1, 1), (3, 0), (2, 1)][r.random_range(0..3)];
        let out_len = (l + 2 * pad - 3) / stride + 1;
        let w = rand64(r, &[b * co * out_len]).into_data();
        let inputs = vec![rand64(r, &[b, ci, l]), rand64(r, &[co, ci, 3]), rand64(r, &[co])];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
            t.weighted_sum(y, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "batchnorm1d", |r| {
        let (b, c, l) = (r.random_range(2..4), r.random_range(1..4), r.random_range(2..6));
        let w = rand64(r, &[b * c * l]).into_data();
        let inputs = vec![rand64(r, &[b, c, l]), rand64(r, &[c]), rand64(r, &[c])];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            t.weighted_sum(y, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "linear", |r| {
        let (b, i, o) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
        let w = rand64(r, &[b * o]).into_data();
        let inputs = vec![rand64(r, &[b, i]), rand64(r, &[o, i]), rand64(r, &[o])];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            t.weighted_sum(y, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "maxpool1d", |r| {
        // a shuffled grid with spacing 0.1 keeps every window far from a tie
        let (c, l) = (r.random_range(1..3), 3 * r.random_range(1..4));
        let mut vals: Vec<f64> = (0..c * l).map(|i| i as f64 * 0.1).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let w = rand64(r, &[c * l / 3]).into_data();
        let inputs = vec![Tensor::new(vec![1, c, l], vals).unwrap()];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.maxpool1d(v[0], 3)?;
            t.weighted_sum(y, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "sigmoid", |r| {
        let (a, b) = (r.random_range(1..5), r.random_range(1..5));
        let w = rand64(r, &[a * b]).into_data();
        let inputs = vec![rand64(r, &[a, b]).map(|x| x * 3.0)];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sigmoid(v[0]);
            t.weighted_sum(y, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "projector", |r| {
        let (b, d, o) = (r.random_range(1..4), r.random_range(2..6), r.random_range(1..4));
        let w = rand64(r, &[b * o]).into_data();
        let inputs = vec![rand64(r, &[b, d]), rand64(r, &[d, d]), rand64(r, &[d]), rand64(r, &[o, d]), rand64(r, &[o])];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let layers = [
                LinearVars { weight: v[1], bias: v[2] },
                LinearVars { weight: v[3], bias: v[4] },
            ];
            let z = Projector::forward(t, &layers, v[0])?;
            t.weighted_sum(z, w.clone())
        }))
    })?);

    worst = worst.max(grad_family(&mut rng, "nt_xent", |r| {
        let (n, d) = (r.random_range(2..5), r.random_range(2..6));
        let tau = [0.1, 0.5, 1.0][r.random_range(0..3)];
        let inputs = vec![rand64(r, &[2 * n, d])];
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            nt_xent(t, v[0], tau).map_err(|e| TensorError::ShapeMismatch(e.to_string()))
        }))
    })?);

    within_budget(start, GRAD_BUDGET)?;
    Ok(format!("7 ops x {GRAD_INSTANCES} instances, worst rel err {worst:.1e}, {:.2?}", start.elapsed()))
}

fn tone(freq: f64, len: usize, amp: f64) -> AudioBuffer {
    AudioBuffer::new(sine(freq, SR, len, amp), SR, "tone").unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let noise: Vec<f32> = (0..59049).map(|_| rng.random_range(-0.5..0.5)).collect();
    let x = AudioBuffer::new(noise, SR, "x").unwrap();

    ensure(invert_polarity(&invert_polarity(&x)) == x, "polarity is not an involution")?;

    let g = apply_gain(&x, -6.0).map_err(|e| e.to_string())?;
    let factor = 10f64.powf(-0.3);
    let gain_err = x
        .samples()
        .iter()
        .zip(g.samples())
        .map(|(&a, &b)| (b as f64 - a as f64 * factor).abs() / a.abs().max(1e-3) as f64)
        .fold(0.0, f64::max);
    ensure(gain_err <= GAIN_TOL, format!("gain relative error {gain_err:e}"))?;

    let t = tone(440.0, 59049, 0.5);
    let noisy = add_noise(&t, SNR_TARGET_DB, &mut rng).map_err(|e| e.to_string())?;
    let diff: Vec<f32> = noisy.samples().iter().zip(t.samples()).map(|(a, b)| a - b).collect();
    let snr = 20.0 * (rms(t.samples()) / rms(&diff)).log10();
    ensure((snr - SNR_TARGET_DB).abs() <= SNR_TOL_DB, format!("measured SNR {snr:.3} dB"))?;

    for ms in [200, 250, 300, 350, 400, 450] {
        let offset = delay_offset(ms, SR);
        let exact = (ms as f64 * SR as f64 / 1000.0).round() as usize;
        ensure(offset == exact, format!("offset {offset} for {ms} ms, expected {exact}"))?;
        let mut impulse = vec![0.0f32; offset + 10];
        impulse[0] = 1.0;
        let y = delay_by(&AudioBuffer::new(impulse, SR, "i").unwrap(), offset, 0.5);
        ensure(y.samples()[offset] == 0.25 && y.samples()[offset - 1] == 0.0, format!("echo misplaced at {ms} ms"))?;
    }

    let shifted = pitch_shift(&tone(440.0, 59049, 0.5), 5.0).map_err(|e| e.to_string())?;
    let peak = peak_frequency(shifted.samples(), SR);
    let pitch_err = (peak - PITCH_TARGET_HZ).abs() / PITCH_TARGET_HZ;
    ensure(pitch_err <= PITCH_REL_TOL, format!("pitch peak {peak:.2} Hz"))?;

    let cutoff = 1000.0;
    let level = |f: f64| {
        let input = tone(f, 22050, 0.5);
        let out = butterworth_filter(&input, FilterKind::LowPass, cutoff);
        // skip the filter's start-up transient
        let tail = &out.samples()[4410..];
        amplitude_to_db(tone_amplitude(tail, SR, f) / tone_amplitude(&input.samples()[4410..], SR, f))
    };
    let stop = -level(2.0 * cutoff);
    let pass = level(cutoff / 4.0).abs();
    ensure(stop > STOPBAND_MIN_DB, format!("octave-above attenuation {stop:.2} dB"))?;
    ensure(pass < PASSBAND_MAX_DB, format!("pass-band change {pass:.3} dB"))?;

    let dry = reverb(
        &x,
        ReverbParams {
            room_size: 0.0,
            reverberance: 0.0,
            damping: 0.0,
        },
    );
    let corr = correlation(dry.samples(), x.samples());
    ensure(corr > REVERB_MIN_CORR, format!("zero-parameter reverb correlation {corr:.4}"))?;

    let mut always = ChainConfig::default();
    always.set_all_probabilities(1.0);
    let chain = always.build(SR).map_err(|e| e.to_string())?;
    for trial in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        for tc in chain.transforms() {
            let y = tc.transform.apply(&x, &mut r).map_err(|e| e.to_string())?;
            ensure(y.len() == x.len(), format!("{} changed length", tc.transform.name()))?;
            ensure(y.samples().iter().all(|v| v.is_finite()), format!("{} produced non-finite output", tc.transform.name()))?;
        }
    }

    within_budget(start, AUGMENT_BUDGET)?;
    Ok(format!(
        "SNR {snr:.2} dB, pitch peak {peak:.1} Hz, stop-band -{stop:.1} dB, reverb corr {corr:.4}, {:.2?}",
        start.elapsed()
    ))
}

fn brute_roc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i]).collect();
    pos.iter()
        .map(|&i| {
            let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
            above.iter().filter(|&&j| l[j]).count() as f64 / above.len() as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=25);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        l[0] = true;
        l[n - 1] = false;
        let e1 = (roc_auc(&s, &l).map_err(|e| e.to_string())? - brute_roc(&s, &l)).abs();
        let e2 = (pr_auc(&s, &l).map_err(|e| e.to_string())? - brute_ap(&s, &l)).abs();
        worst = worst.max(e1).max(e2);
    }
    ensure(worst <= METRIC_TOL, format!("worst deviation {worst:e}"))?;
    let s = [0.1, 0.2, 0.7, 0.9];
    let l = [false, false, true, true];
    ensure(roc_auc(&s, &l).unwrap() == 1.0 && pr_auc(&s, &l).unwrap() == 1.0, "perfect ranking")?;
    ensure(roc_auc(&[0.4; 5], &[true, false, true, false, false]).unwrap() == 0.5, "all-ties ROC-AUC")?;
    within_budget(start, METRIC_BUDGET)?;
    Ok(format!("500 instances, worst deviation {worst:e}, {:.2?}", start.elapsed()))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let params = ModelParams::new(EncoderConfig::canonical(), &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::new(vec![2, 1, 59049], (0..2 * 59049).map(|i| ((i as f32) * 0.013).sin() * 0.3).collect()).unwrap();
    let h = params.encoder.encode(&x).map_err(|e| e.to_string())?;
    ensure(h.shape() == [2, 512], format!("encoder output {:?}", h.shape()))?;
    let z = params.projector.project(&h).map_err(|e| e.to_string())?;
    ensure(z.shape() == [2, 128], format!("projector output {:?}", z.shape()))?;
    let count = params.parameter_count();
    let rel = (count as f64 - PARAM_TARGET).abs() / PARAM_TARGET;
    ensure(rel <= PARAM_REL_TOL, format!("{count} parameters"))?;
    Ok(format!("[B,1,59049] -> [B,512] -> [B,128], {count} parameters"))
}

/// Shared state for the desk-scale criteria.
struct Desk {
    _dir: tempfile::TempDir,
    manifest: Manifest,
    labels: Vec<Vec<f32>>,
    tags: Vec<String>,
    train_songs: Vec<AudioBuffer>,
    chain: TransformChain,
    trained: Checkpoint,
    trained_bytes: Vec<u8>,
    losses: Vec<f64>,
    elapsed: Duration,
}

fn desk_chain() -> TransformChain {
    let cfg = ChainConfig { crop_length: Some(EncoderConfig::desk().input_length), ..ChainConfig::default() };
    cfg.build(SR).unwrap()
}

fn desk_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: SEED,
        deterministic: true,
        checkpoint_interval: epochs,
        ..TrainConfig::default()
    }
}

fn load_split(manifest: &Manifest, split: Split) -> Vec<AudioBuffer> {
    manifest.indices(split).into_iter().map(|i| manifest.load_audio(i, SR).unwrap()).collect()
}

fn setup_desk() -> Result<Desk, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        songs: 40,
        classes: 4,
        duration_secs: 10.0,
        sample_rate: SR,
        seed: SEED,
        ..SynthConfig::default()
    };
    synthesize_corpus(dir.path(), &synth).map_err(|e| e.to_string())?;
    let manifest = load_manifest(&dir.path().join("manifest.csv")).map_err(|e| e.to_string())?;
    let (vocab, labels) = build_vocabulary(&manifest, 5).map_err(|e| e.to_string())?;
    let train_songs = load_split(&manifest, Split::Train);
    let chain = desk_chain();
    let steps_per_epoch = train_songs.len() / 8;
    let epochs = PRETRAIN_STEPS.div_ceil(steps_per_epoch);
    let train_config = desk_train_config(epochs);
    let mut model = ModelParams::new(EncoderConfig::desk(), &mut ChaCha8Rng::seed_from_u64(SEED)).map_err(|e| e.to_string())?;
    let out = dir.path().join("pretrain");
    let outcome = pretrain(&train_songs, &mut model, &chain, &train_config, Some(&RunOutput::new(&out))).map_err(|e| e.to_string())?;
    let last = outcome.checkpoints.last().ok_or("no checkpoint written")?;
    let trained_bytes = std::fs::read(last).map_err(|e| e.to_string())?;
    let trained = Checkpoint::load(last).map_err(|e| e.to_string())?;
    Ok(Desk {
        manifest,
        labels,
        tags: vocab.tags,
        train_songs,
        chain,
        trained,
        trained_bytes,
        losses: outcome.losses.iter().map(|l| l.loss).collect(),
        elapsed: start.elapsed(),
        _dir: dir,
    })
}

fn eval_data(desk: &Desk, params: &ModelParams) -> Result<EvalData, String> {
    load_eval_data(&desk.manifest, &desk.labels, desk.tags.clone(), &params.encoder, SR).map_err(|e| e.to_string())
}

fn probe_config() -> ProbeConfig {
    ProbeConfig {
        seed: SEED,
        ..ProbeConfig::default()
    }
}

fn criterion_6(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let steps = desk.losses.len();
    ensure(steps >= PRETRAIN_MIN_STEPS, format!("only {steps} steps"))?;
    let first = desk.losses[..50].iter().sum::<f64>() / 50.0;
    let last = desk.losses[steps - 50..].iter().sum::<f64>() / 50.0;
    let drop = 1.0 - last / first;

    let held_out: Vec<AudioBuffer> = [Split::Valid, Split::Test]
        .iter()
        .flat_map(|&s| load_split(&desk.manifest, s))
        .collect();
    let sim = pair_similarity(&desk.trained.params.encoder, &held_out, &desk.chain, SEED).map_err(|e| e.to_string())?;
    let gap = sim.positive - sim.negative;

    let trained = evaluate(&eval_data(desk, &desk.trained.params)?, &probe_config(), 1.0, None).map_err(|e| e.to_string())?;
    let random_params =
        ModelParams::new(EncoderConfig::desk(), &mut ChaCha8Rng::seed_from_u64(SEED + 66)).map_err(|e| e.to_string())?;
    let random = evaluate(&eval_data(desk, &random_params)?, &probe_config(), 1.0, None).map_err(|e| e.to_string())?;
    let total = desk.elapsed + start.elapsed();

    let summary = format!(
        "{steps} steps, loss {first:.3} -> {last:.3} ({:.0}% drop), sim gap {gap:.3} (pos {:.3}, neg {:.3}), \
         probe ROC-AUC trained {:.3} vs random {:.3}, {total:.0?}",
        drop * 100.0,
        sim.positive,
        sim.negative,
        trained.tag_roc_auc,
        random.tag_roc_auc
    );
    let mut failures = Vec::new();
    if drop < LOSS_DROP {
        failures.push("(a) loss drop");
    }
    if gap < SIMILARITY_GAP {
        failures.push("(b) similarity gap");
    }
    if trained.tag_roc_auc < TRAINED_MIN_AUC {
        failures.push("(c) trained probe");
    }
    if random.tag_roc_auc > RANDOM_MAX_AUC {
        failures.push("(c) random-encoder probe above ceiling");
    }
    if total > END_TO_END_BUDGET {
        failures.push("runtime");
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join(", ")))
    }
}

fn criterion_7(desk: &Desk) -> Outcome {
    let data = eval_data(desk, &desk.trained.params)?;
    let mut means = Vec::new();
    for fraction in [0.25, 0.5, 1.0] {
        let report = evaluate(&data, &probe_config(), fraction, None).map_err(|e| e.to_string())?;
        ensure(report.runs == 3, "expected 3 seeds")?;
        means.push(report.tag_roc_auc);
    }
    let summary = format!("ROC-AUC at 25/50/100%: {:.3} / {:.3} / {:.3}", means[0], means[1], means[2]);
    ensure(means.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK), summary.clone())?;
    Ok(summary)
}

fn run_once(desk: &Desk, dir: &Path) -> Result<RunArtifacts, String> {
    let config = desk_train_config(4);
    let mut model = ModelParams::new(EncoderConfig::desk(), &mut ChaCha8Rng::seed_from_u64(SEED)).map_err(|e| e.to_string())?;
    let outcome = pretrain(&desk.train_songs, &mut model, &desk.chain, &config, Some(&RunOutput::new(dir)))
        .map_err(|e| e.to_string())?;
    let losses = std::fs::read(dir.join("loss.csv")).map_err(|e| e.to_string())?;
    let ckpts = outcome
        .checkpoints
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let probe = ProbeConfig {
        seeds: 2,
        max_epochs: 20,
        ..probe_config()
    };
    let report = evaluate(&eval_data(desk, &model)?, &probe, 0.5, Some(checkpoint_hash(&ckpts[0]))).map_err(|e| e.to_string())?;
    Ok((losses, ckpts, serde_json::to_string(&report).map_err(|e| e.to_string())?))
}

fn criterion_8(desk: &Desk) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_once(desk, &dir.path().join("a"))?;
    let b = run_once(desk, &dir.path().join("b"))?;
    ensure(a.0 == b.0, "loss curves differ")?;
    ensure(a.1 == b.1, "checkpoints differ")?;
    ensure(a.2 == b.2, "eval reports differ")?;
    Ok(format!("2 runs: {} loss bytes, {} checkpoint(s), report identical", a.0.len(), a.1.len()))
}

fn criterion_9(desk: &Desk) -> Outcome {
    let spectra = filter_spectrum(&desk.trained.params.encoder, 0, &SpectrumConfig::default(), SR).map_err(|e| e.to_string())?;
    let filters = desk.trained.params.encoder.layers[0].out_channels();
    ensure(spectra.len() == filters, format!("{} spectra for {filters} filters", spectra.len()))?;
    for s in &spectra {
        ensure(s.magnitudes.iter().all(|m| m.is_finite()), format!("filter {} not finite", s.filter))?;
        let max = s.magnitudes.iter().cloned().fold(0.0, f64::max);
        ensure((max - 1.0).abs() < 1e-12, format!("filter {} max {max}", s.filter))?;
    }
    ensure(spectra.windows(2).all(|w| w[0].peak_hz <= w[1].peak_hz), "not sorted by peak frequency")?;
    let mut csv_bytes = Vec::new();
    write_spectra_csv(&mut csv_bytes, &spectra, &serde_json::json!({ "seed": SEED })).map_err(|e| e.to_string())?;
    let rows = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(csv_bytes.as_slice())
        .records()
        .count();
    ensure(rows == filters, format!("{rows} CSV rows for {filters} filters"))?;
    ensure(!desk.trained_bytes.is_empty(), "empty checkpoint")?;
    Ok(format!(
        "{filters} filters, peaks {:.0}..{:.0} Hz, {rows} CSV rows",
        spectra[0].peak_hz,
        spectra[filters - 1].peak_hz
    ))
}

fn report(n: usize, name: &str, result: std::thread::Result<Outcome>) -> bool {
    let (ok, detail) = match result {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    println!("criterion {n} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    // `cargo test` passes harness flags; listing must not run the suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let quick: [Quick; 5] = [
        ("nt-xent oracle", criterion_1),
        ("gradient checks", criterion_2),
        ("augmentation invariants", criterion_3),
        ("metric oracles", criterion_4),
        ("shape and parameter contract", criterion_5),
    ];
    for (i, (name, f)) in quick.iter().enumerate() {
        all &= report(i + 1, name, catch_unwind(f));
    }
    let desk = catch_unwind(setup_desk);
    let staged: [Staged; 4] = [
        ("desk-scale end-to-end", criterion_6),
        ("label-efficiency monotonicity", criterion_7),
        ("determinism", criterion_8),
        ("filter-spectrum export", criterion_9),
    ];
    for (i, (name, f)) in staged.iter().enumerate() {
        let result = match &desk {
            Ok(Ok(d)) => catch_unwind(AssertUnwindSafe(|| f(d))),
            Ok(Err(e)) => Ok(Err(format!("setup failed: {e}"))),
            Err(_) => Ok(Err("setup panicked".into())),
        };
        all &= report(i + 6, name, result);
    }
    if !all {
        std::process::exit(1);
    }
}
