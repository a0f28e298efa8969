//! Canonical in-memory waveform plus WAV decoding, resampling and fragment
//! reassembly.

mod resample;
mod wav;

use std::sync::Arc;

use thiserror::Error;

pub use resample::{resample, SincResampler};
pub use wav::{decode_wav, decode_wav_bytes, write_wav};

/// Sample rates accepted by training pipelines.
pub const CANONICAL_RATES: [u32; 3] = [8000, 16000, 22050];

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("unsupported sample rate {0} Hz")]
    InvalidRate(u32),
    #[error("fragments have mixed sample rates ({0} and {1} Hz)")]
    MixedRates(u32, u32),
    #[error("fragments belong to different sources ({0:?} and {1:?})")]
    MixedSources(String, String),
    #[error("audio buffer is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform with samples in `[-1, 1]`.
///
/// Cloning is cheap: sample storage is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Arc<[f32]>,
    sample_rate: u32,
    source_id: String,
}

impl AudioBuffer {
    /// Clamps samples into `[-1, 1]`; non-finite values become 0.
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(0));
        }
        let samples: Vec<f32> = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self {
            samples: samples.into(),
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same rate and source, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(samples, self.sample_rate, self.source_id.clone())
    }

    pub fn has_canonical_rate(&self) -> bool {
        CANONICAL_RATES.contains(&self.sample_rate)
    }
}

/// Joins fragments of one song end to end.
pub fn concat_fragments(fragments: &[AudioBuffer]) -> Result<AudioBuffer, AudioError> {
    let first = fragments.first().ok_or(AudioError::Empty)?;
    let mut samples = Vec::with_capacity(fragments.iter().map(AudioBuffer::len).sum());
    for f in fragments {
        if f.sample_rate != first.sample_rate {
            return Err(AudioError::MixedRates(first.sample_rate, f.sample_rate));
        }
        if f.source_id != first.source_id {
            return Err(AudioError::MixedSources(first.source_id.clone(), f.source_id.clone()));
        }
        samples.extend_from_slice(&f.samples);
    }
    first.with_samples(samples)
}
