//! Second-order Butterworth sections (RBJ cookbook formulation).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Butterworth (Q = 1/√2) section. The cutoff is clamped below Nyquist.
    pub fn butterworth(kind: FilterKind, cutoff_hz: f64, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let fc = cutoff_hz.clamp(1.0, 0.9 * nyquist);
        let w0 = 2.0 * PI * fc / sample_rate as f64;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let (b0, b1, b2) = match kind {
            FilterKind::LowPass => ((1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0),
            FilterKind::HighPass => ((1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0),
        };
        Self {
            b0: b0 / a0,
            b1: b1 / a0,
            b2: b2 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Runs the filter from rest (transposed direct form II).
    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let (mut z1, mut z2) = (0.0f64, 0.0f64);
        input
            .iter()
            .map(|&x| {
                let x = x as f64;
                let y = self.b0 * x + z1;
                z1 = self.b1 * x - self.a1 * y + z2;
                z2 = self.b2 * x - self.a2 * y;
                y as f32
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{amplitude_to_db, sine, tone_amplitude};

    fn gain_db(kind: FilterKind, cutoff: f64, freq: f64) -> f64 {
        let sr = 22050;
        let x = sine(freq, sr, 22050 * 2, 0.5);
        let y = Biquad::butterworth(kind, cutoff, sr).process(&x);
        // skip the start-up transient
        amplitude_to_db(tone_amplitude(&y[22050..], sr, freq) / 0.5)
    }

    #[test]
    fn low_pass_response() {
        assert!(gain_db(FilterKind::LowPass, 3000.0, 500.0).abs() < 1.0);
        assert!(gain_db(FilterKind::LowPass, 3000.0, 6000.0) < -9.0);
        // −3 dB at the cutoff
        assert!((gain_db(FilterKind::LowPass, 3000.0, 3000.0) + 3.01).abs() < 0.1);
    }

    #[test]
    fn high_pass_response() {
        assert!(gain_db(FilterKind::HighPass, 1000.0, 5000.0).abs() < 1.0);
        assert!(gain_db(FilterKind::HighPass, 1000.0, 500.0) < -9.0);
    }

    #[test]
    fn high_pass_removes_dc() {
        let x = vec![0.5f32; 22050];
        let y = Biquad::butterworth(FilterKind::HighPass, 200.0, 22050).process(&x);
        let tail = &y[11025..];
        let mean = tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64;
        assert!(mean.abs() < 1e-4, "{mean}");
    }
}
