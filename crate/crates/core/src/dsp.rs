//! Small spectral helpers shared by analysis code and tests.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}

pub fn amplitude_to_db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// One-sided magnitude spectrum (`n / 2 + 1` bins) of `samples`, optionally
/// weighted by `window`.
pub fn magnitude_spectrum(samples: &[f64], window: Option<&[f64]>) -> Vec<f64> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, &s)| Complex::new(s * window.map_or(1.0, |w| w[i]), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Frequency in Hz of the strongest spectral peak (Hann window, parabolic
/// interpolation on log magnitude). DC is ignored.
pub fn peak_frequency(samples: &[f32], sample_rate: u32) -> f64 {
    let n = samples.len();
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let w = hann(n);
    let mag = magnitude_spectrum(&x, Some(&w));
    let k = (1..mag.len())
        .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
        .unwrap_or(0);
    let mut bin = k as f64;
    if k > 0 && k + 1 < mag.len() {
        let (a, b, c) = (
            mag[k - 1].max(1e-300).ln(),
            mag[k].max(1e-300).ln(),
            mag[k + 1].max(1e-300).ln(),
        );
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            bin += 0.5 * (a - c) / denom;
        }
    }
    bin * sample_rate as f64 / n as f64
}

/// Amplitude of the component at `freq` Hz, estimated by correlating with a
/// quadrature pair (exact for integer numbers of periods).
pub fn tone_amplitude(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for (i, &x) in samples.iter().enumerate() {
        c += x as f64 * (w * i as f64).cos();
        s += x as f64 * (w * i as f64).sin();
    }
    2.0 * (c * c + s * s).sqrt() / samples.len() as f64
}

pub fn sine(freq: f64, sample_rate: u32, len: usize, amplitude: f64) -> Vec<f32> {
    (0..len)
        .map(|i| (amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin()) as f32)
        .collect()
}

pub fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let ma = a[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mb = b[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] as f64 - ma, b[i] as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_of_sine() {
        let x = sine(440.0, 22050, 22050, 0.5);
        assert!((peak_frequency(&x, 22050) - 440.0).abs() < 0.5);
        assert!((tone_amplitude(&x, 22050, 440.0) - 0.5).abs() < 1e-3);
    }
}
