//! Pitch shifting: band-limited resampling followed by a WSOLA time stretch
//! back to the original duration.

use crate::audio::SincResampler;
use crate::dsp::hann;

const MAX_FRAME: usize = 2048;

/// Shifts pitch by `semitones` (12-TET) keeping the length of `samples`.
pub fn shift_pitch(samples: &[f32], semitones: f64) -> Vec<f32> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let ratio = 2f64.powf(-semitones / 12.0);
    let squeezed = SincResampler::with_ratio(ratio).process(samples);
    let mut out = time_stretch(&squeezed, n);
    out.resize(n, 0.0);
    out
}

/// Waveform-similarity overlap-add stretch of `input` to `target_len`
/// samples without changing pitch. Frames are 2048 samples with a 512 hop,
/// shrunk for short inputs.
pub fn time_stretch(input: &[f32], target_len: usize) -> Vec<f32> {
    if input.is_empty() || target_len == 0 {
        return vec![0.0; target_len];
    }
    let mut frame = MAX_FRAME;
    while frame > 64 && frame * 2 > input.len().max(target_len) {
        frame /= 2;
    }
    let hop = frame / 4;
    let tolerance = frame / 8;
    let overlap = frame - hop;
    let window = hann(frame);
    let alpha = target_len as f64 / input.len() as f64;
    let analysis_hop = hop as f64 / alpha;

    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < input.len() {
            input[i as usize] as f64
        } else {
            0.0
        }
    };

    let mut out = vec![0.0f64; target_len + frame + hop];
    let mut norm = vec![0.0f64; target_len + frame + hop];
    // where the previously copied frame started in the input
    let mut prev: isize = 0;
    let frames = target_len.div_ceil(hop) + 1;
    for k in 0..frames {
        let out_pos = k * hop;
        let nominal = (k as f64 * analysis_hop).round() as isize;
        let chosen = if k == 0 {
            0
        } else {
            // natural continuation of the previous frame
            let natural = prev + hop as isize;
            let mut best = nominal;
            let mut best_score = f64::NEG_INFINITY;
            for delta in -(tolerance as isize)..=tolerance as isize {
                let cand = nominal + delta;
                let mut score = 0.0;
                for i in (0..overlap).step_by(2) {
                    score += at(cand + i as isize) * at(natural + i as isize);
                }
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        for i in 0..frame {
            out[out_pos + i] += window[i] * at(chosen + i as isize);
            norm[out_pos + i] += window[i];
        }
        prev = chosen;
    }
    out.truncate(target_len);
    out.iter()
        .zip(&norm)
        .map(|(&v, &w)| if w > 1e-3 { (v / w) as f32 } else { 0.0 })
        .collect()
}
