use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, DatasetError, Manifest, Song, Split};
use crate::audio::{write_wav, AudioBuffer};
use crate::augment::{Biquad, FilterKind};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthClass {
    Tone440,
    Harmonic,
    BandNoise,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [Self::Tone440, Self::Harmonic, Self::BandNoise, Self::AmTone];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Tone440 => "tone-440",
            Self::Harmonic => "harmonic",
            Self::BandNoise => "band-noise",
            Self::AmTone => "am-tone",
        }
    }
}

pub const SHARED_TAG: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub songs: usize,
    pub classes: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Maximum relative detune of each song's pitch.
    pub detune: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            songs: 40,
            classes: 4,
            duration_secs: 10.0,
            sample_rate: 22050,
            seed: 0,
            detune: 0.02,
        }
    }
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f32> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// Song `index` of the corpus; its class is `index % classes`.
pub fn synthesize_song(config: &SynthConfig, index: usize) -> AudioBuffer {
    let class = SynthClass::ALL[index % config.classes];
    let mut rng = rng_for(config.seed, &[index as u64]);
    let sr = config.sample_rate as f64;
    let n = (config.duration_secs * sr).round() as usize;
    let detune = 1.0 + rng.random_range(-config.detune..=config.detune);
    let peak = rng.random_range(0.4..0.9);
    let t = |i: usize| i as f64 / sr;
    let samples = match class {
        SynthClass::Tone440 => {
            let (f, phase) = (440.0 * detune, rng.random_range(0.0..TAU));
            (0..n).map(|i| (TAU * f * t(i) + phase).sin()).collect()
        }
        SynthClass::Harmonic => {
            let f0 = 220.0 * detune;
            let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..TAU)).collect();
            (0..n)
                .map(|i| {
                    phases
                        .iter()
                        .enumerate()
                        .map(|(h, p)| (TAU * (h + 1) as f64 * f0 * t(i) + p).sin() / (h + 1) as f64)
                        .sum()
                })
                .collect()
        }
        SynthClass::BandNoise => {
            let white: Vec<f32> = (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            let hp = Biquad::butterworth(FilterKind::HighPass, 1000.0 * detune, config.sample_rate);
            let lp = Biquad::butterworth(FilterKind::LowPass, 3000.0 * detune, config.sample_rate);
            lp.process(&hp.process(&white)).into_iter().map(f64::from).collect()
        }
        SynthClass::AmTone => {
            let f = 660.0 * detune;
            let rate = rng.random_range(3.0..6.0);
            let (p1, p2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            (0..n)
                .map(|i| (1.0 + 0.8 * (TAU * rate * t(i) + p2).sin()) * (TAU * f * t(i) + p1).sin())
                .collect()
        }
    };
    AudioBuffer::new(normalize_peak(samples, peak), config.sample_rate, format!("song_{index:03}"))
        .expect("non-empty synthetic song")
}

/// Split of the `rank`-th song (0-based) among `count` songs of one class:
/// 60% train, 20% valid, 20% test.
fn split_for(rank: usize, count: usize) -> Split {
    let train = ((count as f64 * 0.6).round() as usize).max(1);
    let valid = ((count as f64 * 0.2).round() as usize).max(usize::from(count >= 3));
    if rank < train {
        Split::Train
    } else if rank < train + valid {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Writes `dir/audio/song_XXX.wav` and `dir/manifest.csv`.
pub fn synthesize_corpus(dir: &Path, config: &SynthConfig) -> Result<Manifest, DatasetError> {
    if config.classes == 0 || config.classes > SynthClass::ALL.len() || config.songs == 0 {
        return Err(DatasetError::Malformed {
            row: 0,
            message: format!("synthetic corpus needs 1..=4 classes and at least one song, got {config:?}"),
        });
    }
    let audio = dir.join("audio");
    fs::create_dir_all(&audio)?;
    let mut songs = Vec::with_capacity(config.songs);
    for index in 0..config.songs {
        let class = index % config.classes;
        let per_class = (config.songs - class).div_ceil(config.classes);
        let buffer = synthesize_song(config, index);
        let path = audio.join(format!("{}.wav", buffer.source_id()));
        write_wav(&path, &buffer)?;
        songs.push(Song {
            source_id: buffer.source_id().to_string(),
            split: split_for(index / config.classes, per_class),
            tags: vec![SynthClass::ALL[class].tag().to_string(), SHARED_TAG.to_string()],
            paths: vec![path],
        });
    }
    let manifest = Manifest { songs };
    write_manifest(&manifest, &dir.join("manifest.csv"))?;
    Ok(manifest)
}
