//! Stochastic waveform augmentations and the positive-pair generator.
//!
//! A [`TransformChain`] always crops first, then visits polarity, noise,
//! gain, filter, delay, pitch and reverb in that order. Each transform flips
//! its own coin and draws its own parameters, separately for every view.

mod filter;
mod pitch;
mod reverb;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::dsp::rms;

pub use filter::{Biquad, FilterKind};
pub use pitch::{shift_pitch, time_stretch};
pub use reverb::{schroeder_reverb, ReverbParams};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("buffer of {len} samples is shorter than the crop length {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("input is silent; noise level is undefined")]
    SilentInput,
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("invalid transform chain: {0}")]
    InvalidChain(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Crop lengths used at the canonical sample rates.
pub fn canonical_crop_length(sample_rate: u32) -> Option<usize> {
    match sample_rate {
        8000 => Some(20736),
        16000 => Some(43740),
        22050 => Some(59049),
        _ => None,
    }
}

/// Contiguous `length`-sample slice starting at `start`.
pub fn crop_at(buffer: &AudioBuffer, start: usize, length: usize) -> Result<AudioBuffer, AugmentError> {
    if start + length > buffer.len() {
        return Err(AugmentError::TooShort {
            len: buffer.len(),
            needed: start + length,
        });
    }
    Ok(buffer.with_samples(buffer.samples()[start..start + length].to_vec())?)
}

/// Crop with a start index uniform over `[0, len - length]`.
pub fn random_crop<R: Rng + ?Sized>(
    buffer: &AudioBuffer,
    length: usize,
    rng: &mut R,
) -> Result<AudioBuffer, AugmentError> {
    Ok(random_crop_with_start(buffer, length, rng)?.0)
}

pub fn random_crop_with_start<R: Rng + ?Sized>(
    buffer: &AudioBuffer,
    length: usize,
    rng: &mut R,
) -> Result<(AudioBuffer, usize), AugmentError> {
    if buffer.len() < length {
        return Err(AugmentError::TooShort {
            len: buffer.len(),
            needed: length,
        });
    }
    let start = rng.random_range(0..=buffer.len() - length);
    Ok((crop_at(buffer, start, length)?, start))
}

pub fn invert_polarity(buffer: &AudioBuffer) -> AudioBuffer {
    let samples = buffer.samples().iter().map(|&s| -s).collect();
    buffer.with_samples(samples).expect("same length as a valid buffer")
}

/// Adds white Gaussian noise at `snr_db` relative to the buffer's RMS.
/// An infinite SNR returns the input unchanged.
pub fn add_noise<R: Rng + ?Sized>(
    buffer: &AudioBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<AudioBuffer, AugmentError> {
    if snr_db == f64::INFINITY {
        return Ok(buffer.clone());
    }
    if !snr_db.is_finite() {
        return Err(AugmentError::OutOfRange(format!("snr_db = {snr_db}")));
    }
    let signal = rms(buffer.samples());
    if signal == 0.0 {
        return Err(AugmentError::SilentInput);
    }
    let noise_rms = signal / 10f64.powf(snr_db / 20.0);
    let normal = Normal::new(0.0, noise_rms).expect("finite noise level");
    let samples = buffer
        .samples()
        .iter()
        .map(|&s| (s as f64 + normal.sample(rng)) as f32)
        .collect();
    Ok(buffer.with_samples(samples)?)
}

/// Multiplies by `10^(gain_db / 20)`; `gain_db` must lie in `[-6, 0]`.
pub fn apply_gain(buffer: &AudioBuffer, gain_db: f64) -> Result<AudioBuffer, AugmentError> {
    if !(-6.0..=0.0).contains(&gain_db) {
        return Err(AugmentError::OutOfRange(format!("gain {gain_db} dB outside [-6, 0]")));
    }
    let g = 10f64.powf(gain_db / 20.0);
    let samples = buffer.samples().iter().map(|&s| (s as f64 * g) as f32).collect();
    Ok(buffer.with_samples(samples)?)
}

pub fn butterworth_filter(buffer: &AudioBuffer, kind: FilterKind, cutoff_hz: f64) -> AudioBuffer {
    let y = Biquad::butterworth(kind, cutoff_hz, buffer.sample_rate()).process(buffer.samples());
    buffer.with_samples(y).expect("same length as a valid buffer")
}

/// Sample offset for a delay in milliseconds.
pub fn delay_offset(delay_ms: u32, sample_rate: u32) -> usize {
    (delay_ms as f64 * sample_rate as f64 / 1000.0).round() as usize
}

/// `(x + volume · shift(x, offset)) / 2`.
pub fn delay_by(buffer: &AudioBuffer, offset: usize, volume: f32) -> AudioBuffer {
    let x = buffer.samples();
    let samples = (0..x.len())
        .map(|i| {
            let delayed = if i >= offset { x[i - offset] * volume } else { 0.0 };
            (x[i] + delayed) / 2.0
        })
        .collect();
    buffer.with_samples(samples).expect("same length as a valid buffer")
}

pub fn pitch_shift(buffer: &AudioBuffer, semitones: f64) -> Result<AudioBuffer, AugmentError> {
    if !(-5.0..=5.0).contains(&semitones) {
        return Err(AugmentError::OutOfRange(format!("{semitones} semitones outside [-5, 5]")));
    }
    Ok(buffer.with_samples(shift_pitch(buffer.samples(), semitones))?)
}

pub fn reverb(buffer: &AudioBuffer, params: ReverbParams) -> AudioBuffer {
    let y = schroeder_reverb(buffer.samples(), buffer.sample_rate(), params);
    buffer.with_samples(y).expect("same length as a valid buffer")
}

/// A transform and its parameter distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Polarity,
    Noise { snr_db: f64 },
    Gain { min_db: f64, max_db: f64 },
    /// Coin flip between low-pass and high-pass with uniform cutoffs.
    Filter { low_pass_hz: [f64; 2], high_pass_hz: [f64; 2] },
    /// Uniform choice of delay; `volume` scales the delayed copy.
    Delay { delays_ms: Vec<u32>, volume: f32 },
    PitchShift { max_semitones: f64 },
    Reverb { room_size: [f64; 2], reverberance: [f64; 2], damping: [f64; 2] },
}

impl Transform {
    fn rank(&self) -> usize {
        match self {
            Transform::Polarity => 0,
            Transform::Noise { .. } => 1,
            Transform::Gain { .. } => 2,
            Transform::Filter { .. } => 3,
            Transform::Delay { .. } => 4,
            Transform::PitchShift { .. } => 5,
            Transform::Reverb { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        ["polarity", "noise", "gain", "filter", "delay", "pitch", "reverb"][self.rank()]
    }

    fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::OutOfRange(m));
        let range_ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        match self {
            Transform::Polarity => Ok(()),
            Transform::Noise { snr_db } if snr_db.is_nan() => bad(format!("snr_db {snr_db}")),
            Transform::Noise { .. } => Ok(()),
            Transform::Gain { min_db, max_db } if !(-6.0 <= *min_db && min_db <= max_db && *max_db <= 0.0) => {
                bad(format!("gain range [{min_db}, {max_db}] not within [-6, 0]"))
            }
            Transform::Filter { low_pass_hz, high_pass_hz }
                if !range_ok(low_pass_hz) || !range_ok(high_pass_hz) || low_pass_hz[0] <= 0.0 || high_pass_hz[0] <= 0.0 =>
            {
                bad("filter cutoff ranges must be positive and ordered".into())
            }
            Transform::Delay { delays_ms, .. } if delays_ms.is_empty() => bad("delay needs at least one choice".into()),
            Transform::PitchShift { max_semitones } if !(0.0..=5.0).contains(max_semitones) => {
                bad(format!("max_semitones {max_semitones} outside [0, 5]"))
            }
            Transform::Reverb { room_size, reverberance, damping }
                if ![room_size, reverberance, damping]
                    .iter()
                    .all(|r| range_ok(r) && r[0] >= 0.0 && r[1] <= 100.0) =>
            {
                bad("reverb ranges must lie within [0, 100]".into())
            }
            _ => Ok(()),
        }
    }

    /// Draws parameters and applies the transform.
    pub fn apply<R: Rng + ?Sized>(&self, x: &AudioBuffer, rng: &mut R) -> Result<AudioBuffer, AugmentError> {
        let uniform = |rng: &mut R, r: &[f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        Ok(match self {
            Transform::Polarity => invert_polarity(x),
            Transform::Noise { snr_db } => match add_noise(x, *snr_db, rng) {
                Err(AugmentError::SilentInput) => x.clone(),
                other => other?,
            },
            Transform::Gain { min_db, max_db } => {
                let g = uniform(rng, &[*min_db, *max_db]);
                apply_gain(x, g)?
            }
            Transform::Filter { low_pass_hz, high_pass_hz } => {
                if rng.random_bool(0.5) {
                    let fc = uniform(rng, low_pass_hz);
                    butterworth_filter(x, FilterKind::LowPass, fc)
                } else {
                    let fc = uniform(rng, high_pass_hz);
                    butterworth_filter(x, FilterKind::HighPass, fc)
                }
            }
            Transform::Delay { delays_ms, volume } => {
                let ms = *delays_ms.choose(rng).expect("validated non-empty");
                delay_by(x, delay_offset(ms, x.sample_rate()), *volume)
            }
            Transform::PitchShift { max_semitones } => {
                let st = uniform(rng, &[-max_semitones, *max_semitones]);
                pitch_shift(x, st)?
            }
            Transform::Reverb { room_size, reverberance, damping } => {
                let params = ReverbParams {
                    room_size: uniform(rng, room_size),
                    reverberance: uniform(rng, reverberance),
                    damping: uniform(rng, damping),
                };
                reverb(x, params)
            }
        })
    }
}

/// A transform applied with independent probability `probability`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub transform: Transform,
    pub probability: f64,
}

/// Crop length plus the ordered, probabilistic transforms that follow it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformChain {
    crop_length: usize,
    transforms: Vec<TransformConfig>,
}

impl TransformChain {
    pub fn new(crop_length: usize, transforms: Vec<TransformConfig>) -> Result<Self, AugmentError> {
        if crop_length == 0 {
            return Err(AugmentError::InvalidChain("crop length must be positive".into()));
        }
        for pair in transforms.windows(2) {
            if pair[0].transform.rank() >= pair[1].transform.rank() {
                return Err(AugmentError::InvalidChain(format!(
                    "{} may not follow {}",
                    pair[1].transform.name(),
                    pair[0].transform.name()
                )));
            }
        }
        for t in &transforms {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(AugmentError::OutOfRange(format!(
                    "{} probability {}",
                    t.transform.name(),
                    t.probability
                )));
            }
            t.transform.validate()?;
        }
        Ok(Self {
            crop_length,
            transforms,
        })
    }

    /// Crop only.
    pub fn crop_only(crop_length: usize) -> Result<Self, AugmentError> {
        Self::new(crop_length, Vec::new())
    }

    pub fn crop_length(&self) -> usize {
        self.crop_length
    }

    pub fn transforms(&self) -> &[TransformConfig] {
        &self.transforms
    }

    /// Runs every non-crop transform on an already cropped view.
    pub fn apply_transforms<R: Rng + ?Sized>(&self, view: AudioBuffer, rng: &mut R) -> Result<AudioBuffer, AugmentError> {
        let mut x = view;
        for t in &self.transforms {
            if rng.random_bool(t.probability) {
                x = t.transform.apply(&x, rng)?;
            }
        }
        Ok(x)
    }

    /// Crop followed by the transforms.
    pub fn augment<R: Rng + ?Sized>(&self, song: &AudioBuffer, rng: &mut R) -> Result<AudioBuffer, AugmentError> {
        let crop = random_crop(song, self.crop_length, rng)?;
        self.apply_transforms(crop, rng)
    }
}

/// Per-transform switches and parameter ranges, as they appear in config
/// files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ChainConfig {
    /// Defaults to the canonical length for the sample rate when absent.
    pub crop_length: Option<usize>,
    pub polarity: PolarityConfig,
    pub noise: NoiseConfig,
    pub gain: GainConfig,
    pub filter: FilterConfig,
    pub delay: DelayConfig,
    pub pitch: PitchConfig,
    pub reverb: ReverbConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarityConfig {
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub probability: f64,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainConfig {
    pub probability: f64,
    pub min_db: f64,
    pub max_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub probability: f64,
    pub low_pass_hz: [f64; 2],
    pub high_pass_hz: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayConfig {
    pub probability: f64,
    pub delays_ms: Vec<u32>,
    pub volume: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub probability: f64,
    pub max_semitones: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReverbConfig {
    pub probability: f64,
    pub room_size: [f64; 2],
    pub reverberance: [f64; 2],
    pub damping: [f64; 2],
}


impl Default for PolarityConfig {
    fn default() -> Self {
        Self { probability: 0.8 }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            snr_db: 80.0,
        }
    }
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            min_db: -6.0,
            max_db: 0.0,
        }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            low_pass_hz: [2200.0, 4000.0],
            high_pass_hz: [200.0, 1200.0],
        }
    }
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            probability: 0.4,
            delays_ms: (200..500).step_by(50).collect(),
            volume: 0.5,
        }
    }
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            probability: 0.4,
            max_semitones: 5.0,
        }
    }
}

impl Default for ReverbConfig {
    fn default() -> Self {
        Self {
            probability: 0.4,
            room_size: [0.0, 100.0],
            reverberance: [0.0, 100.0],
            damping: [0.0, 100.0],
        }
    }
}

impl ChainConfig {
    /// Every transform disabled.
    pub fn crop_only() -> Self {
        let mut c = Self::default();
        c.set_all_probabilities(0.0);
        c
    }

    pub fn set_all_probabilities(&mut self, p: f64) {
        self.polarity.probability = p;
        self.noise.probability = p;
        self.gain.probability = p;
        self.filter.probability = p;
        self.delay.probability = p;
        self.pitch.probability = p;
        self.reverb.probability = p;
    }

    pub fn build(&self, sample_rate: u32) -> Result<TransformChain, AugmentError> {
        let crop = match self.crop_length {
            Some(c) => c,
            None => canonical_crop_length(sample_rate).ok_or_else(|| {
                AugmentError::InvalidChain(format!("no canonical crop length at {sample_rate} Hz"))
            })?,
        };
        let entries = vec![
            (self.polarity.probability, Transform::Polarity),
            (self.noise.probability, Transform::Noise { snr_db: self.noise.snr_db }),
            (
                self.gain.probability,
                Transform::Gain {
                    min_db: self.gain.min_db,
                    max_db: self.gain.max_db,
                },
            ),
            (
                self.filter.probability,
                Transform::Filter {
                    low_pass_hz: self.filter.low_pass_hz,
                    high_pass_hz: self.filter.high_pass_hz,
                },
            ),
            (
                self.delay.probability,
                Transform::Delay {
                    delays_ms: self.delay.delays_ms.clone(),
                    volume: self.delay.volume,
                },
            ),
            (
                self.pitch.probability,
                Transform::PitchShift {
                    max_semitones: self.pitch.max_semitones,
                },
            ),
            (
                self.reverb.probability,
                Transform::Reverb {
                    room_size: self.reverb.room_size,
                    reverberance: self.reverb.reverberance,
                    damping: self.reverb.damping,
                },
            ),
        ];
        TransformChain::new(
            crop,
            entries
                .into_iter()
                .map(|(probability, transform)| TransformConfig { transform, probability })
                .collect(),
        )
    }
}

/// Two augmented views of one song.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamplePair {
    pub x_i: AudioBuffer,
    pub x_j: AudioBuffer,
    pub source_id: String,
}

/// Independent crops of `song`, each run through the chain. In asymmetric
/// mode `x_j` is the plain crop.
pub fn make_pair<R: Rng + ?Sized>(
    song: &AudioBuffer,
    chain: &TransformChain,
    asymmetric: bool,
    rng: &mut R,
) -> Result<ExamplePair, AugmentError> {
    let crop_i = random_crop(song, chain.crop_length(), rng)?;
    let crop_j = random_crop(song, chain.crop_length(), rng)?;
    let x_i = chain.apply_transforms(crop_i, rng)?;
    let x_j = if asymmetric {
        crop_j
    } else {
        chain.apply_transforms(crop_j, rng)?
    };
    Ok(ExamplePair {
        x_i,
        x_j,
        source_id: song.source_id().to_string(),
    })
}
