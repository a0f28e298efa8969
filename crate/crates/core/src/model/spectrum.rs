//! Frequency preference of convolutional filters by gradient ascent on the
//! input waveform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Encoder, Mode};
use crate::autodiff::{Tape, Tensor, TensorError};
use crate::dsp::magnitude_spectrum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub probe_length: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            probe_length: 729,
            steps: 100,
            step_size: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpectrumError {
    #[error("layer {index} is not usable with a {probe_length}-sample probe ({reason})")]
    InvalidLayer {
        index: usize,
        probe_length: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterSpectrum {
    pub filter: usize,
    pub peak_bin: usize,
    pub peak_hz: f64,
    /// Magnitudes scaled so the maximum is 1 (all zeros for a dead filter).
    pub magnitudes: Vec<f64>,
}

fn unit_rms(x: &mut [f32]) {
    let r = crate::dsp::rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v = (*v as f64 / r) as f32);
    }
}

/// For every filter of conv layer `layer_index`, ascends the mean
/// (batch-normalized, pre-activation) response of a random waveform, then
/// returns its normalized magnitude spectrum. Results are sorted by peak
/// frequency.
pub fn filter_spectrum(
    encoder: &Encoder,
    layer_index: usize,
    config: &SpectrumConfig,
    sample_rate: u32,
) -> Result<Vec<FilterSpectrum>, SpectrumError> {
    let invalid = |reason: String| SpectrumError::InvalidLayer {
        index: layer_index,
        probe_length: config.probe_length,
        reason,
    };
    let layer = encoder
        .layers
        .get(layer_index)
        .ok_or_else(|| invalid(format!("encoder has {} layers", encoder.layers.len())))?;
    let filters = layer.out_channels();
    let len = config.probe_length;
    if len == 0 {
        return Err(invalid("empty probe".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<f32> = (0..filters * len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    x.chunks_mut(len).for_each(unit_rms);

    let channels: Vec<usize> = (0..filters).collect();
    for _ in 0..config.steps {
        let grad = ascent_gradient(encoder, layer_index, &x, filters, len, &channels)
            .map_err(|e| invalid(e.to_string()))?;
        for (xs, gs) in x.chunks_mut(len).zip(grad.chunks(len)) {
            let g = crate::dsp::rms(gs);
            if g > 0.0 {
                for (v, d) in xs.iter_mut().zip(gs) {
                    *v += (config.step_size * *d as f64 / g) as f32;
                }
            }
            unit_rms(xs);
        }
    }
    if config.steps == 0 {
        // still check the layer is reachable with this probe length
        ascent_gradient(encoder, layer_index, &x, filters, len, &channels).map_err(|e| invalid(e.to_string()))?;
    }

    let bin_hz = sample_rate as f64 / len as f64;
    let mut out: Vec<FilterSpectrum> = x
        .chunks(len)
        .enumerate()
        .map(|(filter, xs)| {
            let samples: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
            let mut mag = magnitude_spectrum(&samples, None);
            let (peak_bin, max) = mag
                .iter()
                .enumerate()
                .fold((0, 0.0), |(bi, bm), (i, &m)| if m > bm { (i, m) } else { (bi, bm) });
            if max > 0.0 && max.is_finite() {
                mag.iter_mut().for_each(|m| *m /= max);
            } else {
                mag.iter_mut().for_each(|m| *m = 0.0);
            }
            FilterSpectrum {
                filter,
                peak_bin,
                peak_hz: peak_bin as f64 * bin_hz,
                magnitudes: mag,
            }
        })
        .collect();
    out.sort_by_key(|s| (s.peak_bin, s.filter));
    Ok(out)
}

/// One row per filter: `filter,peak_bin,peak_hz,bin_0,...`, in the given
/// order. A non-null `provenance` becomes a leading `# run:` comment line.
pub fn write_spectra_csv<W: std::io::Write>(
    mut out: W,
    spectra: &[FilterSpectrum],
    provenance: &serde_json::Value,
) -> Result<(), csv::Error> {
    if !provenance.is_null() {
        writeln!(out, "# run: {provenance}")?;
    }
    let bins = spectra.first().map_or(0, |s| s.magnitudes.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["filter".to_string(), "peak_bin".into(), "peak_hz".into()];
    header.extend((0..bins).map(|b| format!("bin_{b}")));
    w.write_record(&header)?;
    for s in spectra {
        let mut row = vec![s.filter.to_string(), s.peak_bin.to_string(), s.peak_hz.to_string()];
        row.extend(s.magnitudes.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn ascent_gradient(
    encoder: &Encoder,
    layer_index: usize,
    x: &[f32],
    filters: usize,
    len: usize,
    channels: &[usize],
) -> Result<Vec<f32>, TensorError> {
    let mut tape = Tape::new();
    let vars = encoder.register(&mut tape, false);
    let input = tape.leaf(Tensor::new(vec![filters, 1, len], x.to_vec())?, true);
    let (act, _) = encoder.run(&mut tape, &vars, input, Mode::Eval, Some(layer_index))?;
    let per_item = tape.select_channel_mean(act, channels.to_vec())?;
    let total = tape.sum(per_item);
    tape.backward(total)?;
    Ok(tape.grad(input).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; x.len()]))
}
