use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::audio::AudioBuffer;
use crate::augment::ChainConfig;
use crate::autodiff::gradcheck::check_gradients;
use crate::dsp::sine;
use crate::model::{EncoderConfig, ModelParams};

/// The loss spelled out: full similarity matrix, explicit indicator, explicit sum.
#[allow(clippy::needless_range_loop)]
fn brute_force(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let n = m / 2;
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut s = vec![vec![0.0; m]; m];
    for i in 0..m {
        for k in 0..m {
            s[i][k] = sim(&z[i], &z[k]);
        }
    }
    let mut total = 0.0;
    for i in 0..m {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..m {
            let indicator = if k != i { 1.0 } else { 0.0 };
            denom += indicator * (s[i][k] / tau).exp();
        }
        total += -((s[i][j] / tau).exp() / denom).ln();
    }
    total / m as f64
}

fn random_rows<R: Rng>(rng: &mut R, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

#[test]
fn cosine_examples() {
    let u = [0.3f32, -1.2, 2.0];
    assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f32> = u.iter().map(|v| -v).collect();
    assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(ContrastiveError::ZeroVector(0))));
}

#[test]
fn identical_embeddings_give_log_of_candidates() {
    for n in 2..=8 {
        let z = Tensor::<f64>::full(&[2 * n, 5], 0.7);
        let loss = nt_xent_value(&z, 0.5).unwrap();
        let expected = ((2 * n - 1) as f64).ln();
        assert!((loss - expected).abs() < 1e-6, "{n}: {loss}");
    }
}

#[test]
fn two_orthogonal_pairs_match_reference() {
    let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let loss = nt_xent_value(&to_tensor(&rows), 0.5).unwrap();
    let reference = brute_force(&rows, 0.5);
    assert!((loss - reference).abs() <= 1e-6 * reference.abs());
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let rows = random_rows(&mut rng, 2 * n, d);
        let loss = nt_xent_value(&to_tensor(&rows), tau).unwrap();
        let reference = brute_force(&rows, tau);
        assert!((loss - reference).abs() <= 1e-6 * reference.abs(), "{loss} vs {reference}");
    }
}

#[test]
fn error_cases() {
    assert!(matches!(
        nt_xent_value(&Tensor::<f64>::full(&[2, 3], 1.0), 0.5),
        Err(ContrastiveError::BatchTooSmall(2))
    ));
    assert!(matches!(
        nt_xent_value(&Tensor::<f64>::full(&[5, 3], 1.0), 0.5),
        Err(ContrastiveError::BatchTooSmall(5))
    ));
    let mut z = Tensor::<f64>::full(&[4, 3], 1.0);
    z.data_mut()[6..9].fill(0.0);
    assert!(matches!(nt_xent_value(&z, 0.5), Err(ContrastiveError::ZeroVector(2))));
    assert!(matches!(
        nt_xent_value(&Tensor::<f64>::full(&[4, 3], 1.0), 0.0),
        Err(ContrastiveError::InvalidConfig(_))
    ));
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(2..=4);
        let d = rng.random_range(2..=6);
        let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let z = to_tensor(&random_rows(&mut rng, 2 * n, d));
        let check = check_gradients(&[z], 1e-6, |tape, v| {
            nt_xent(tape, v[0], tau).map_err(|e| match e {
                ContrastiveError::Tensor(t) => t,
                other => TensorError::ShapeMismatch(other.to_string()),
            })
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-3, "{}", check.max_rel_error);
    }
}

#[test]
fn random_embeddings_near_uniform_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 4, 8] {
        let rows: Vec<Vec<f64>> = (0..2 * n)
            .map(|_| (0..128).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let loss = nt_xent_value(&to_tensor(&rows), 0.5).unwrap();
        let base = ((2 * n - 1) as f64).ln();
        assert!((loss - base).abs() < 0.1 * base, "{loss} vs {base}");
    }
}

fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_and_rotation_invariance(seed in any::<u64>(), n in 2usize..=6, d in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, 2 * n, d);
        let tau = 0.5;
        let base = nt_xent_value(&to_tensor(&rows), tau).unwrap();

        let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
        let mut permuted = vec![Vec::new(); 2 * n];
        for (k, &p) in perm.iter().enumerate() {
            permuted[k] = rows[p].clone();
            permuted[k + n] = rows[p + n].clone();
        }
        let loss = nt_xent_value(&to_tensor(&permuted), tau).unwrap();
        prop_assert!((loss - base).abs() < 1e-6);

        let q = orthogonal(d, &mut rng);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| q.iter().map(|qr| qr.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let loss = nt_xent_value(&to_tensor(&rotated), tau).unwrap();
        prop_assert!((loss - base).abs() < 1e-5);
        prop_assert!(base <= ((2 * n - 1) as f64).ln() + 2.0 / tau);
    }
}

#[test]
fn batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut all = compose_batch(10, 10, &mut rng).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(matches!(
        compose_batch(3, 4, &mut rng),
        Err(ContrastiveError::InsufficientSongs { have: 3, need: 4 })
    ));

    let songs = 20;
    let mut counts = vec![0usize; songs];
    let batches = 2000;
    for _ in 0..batches {
        let mut b = compose_batch(songs, 6, &mut rng).unwrap();
        b.iter().for_each(|&s| counts[s] += 1);
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 6);
    }
    let expected = (batches * 6) as f64 / songs as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(stat < ChiSquared::new((songs - 1) as f64).unwrap().inverse_cdf(0.99));
}

#[test]
fn epoch_is_one_pass_over_songs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batches = epoch_batches(10, 3, &mut rng).unwrap();
    assert_eq!(batches.len(), 3);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 9);
}

fn tiny_setup() -> (Vec<AudioBuffer>, ModelParams, crate::augment::TransformChain) {
    let songs: Vec<AudioBuffer> = (0..6)
        .map(|k| AudioBuffer::new(sine(200.0 + 150.0 * k as f64, 22050, 6000, 0.5), 22050, format!("s{k}")).unwrap())
        .collect();
    let config = EncoderConfig {
        channels: vec![8, 8, 8, 8, 8, 8, 16],
        projection_dim: 8,
        ..EncoderConfig::desk()
    };
    let model = ModelParams::new(config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let chain = ChainConfig {
        crop_length: Some(2187),
        ..ChainConfig::default()
    }
    .build(22050)
    .unwrap();
    (songs, model, chain)
}

#[test]
fn pretraining_is_reproducible() {
    let (songs, model, chain) = tiny_setup();
    let config = TrainConfig {
        epochs: 4,
        batch_size: 3,
        checkpoint_interval: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (k, deterministic) in [true, true, false].into_iter().enumerate() {
        let mut m = model.clone();
        let out = dir.path().join(k.to_string());
        let cfg = TrainConfig { deterministic, ..config.clone() };
        let outcome = pretrain(&songs, &mut m, &chain, &cfg, Some(&RunOutput::new(&out))).unwrap();
        assert_eq!(outcome.losses.len(), 8);
        assert_eq!(outcome.checkpoints.len(), 2);
        assert!(outcome.best_checkpoint.is_some());
        let bytes = std::fs::read(&outcome.checkpoints[1]).unwrap();
        let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        runs.push((outcome.losses, bytes, csv, m));
    }
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);
    assert_eq!(runs[0].2, runs[1].2);
    assert_eq!(runs[0].0, runs[2].0);
    assert_eq!(runs[0].3, runs[2].3);
    assert_ne!(runs[0].3, model);
}

#[test]
fn batch_of_two_runs_and_crop_mismatch_fails() {
    let (songs, mut model, chain) = tiny_setup();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let outcome = pretrain(&songs, &mut model, &chain, &config, None).unwrap();
    assert_eq!(outcome.losses.len(), 3);
    assert!(outcome.losses.iter().all(|l| l.loss.is_finite()));

    let other = ChainConfig {
        crop_length: Some(729),
        ..ChainConfig::crop_only()
    }
    .build(22050)
    .unwrap();
    assert!(matches!(
        pretrain(&songs, &mut model, &other, &config, None),
        Err(ContrastiveError::InvalidConfig(_))
    ));
    let bad = TrainConfig { batch_size: 1, ..config };
    assert!(pretrain(&songs, &mut model, &chain, &bad, None).is_err());
}

#[test]
fn similarity_summary_is_bounded() {
    let (songs, model, chain) = tiny_setup();
    let s = pair_similarity(&model.encoder, &songs, &chain, 1).unwrap();
    assert!((-1.0..=1.0).contains(&s.positive) && (-1.0..=1.0).contains(&s.negative));
}
