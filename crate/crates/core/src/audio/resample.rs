use super::{AudioBuffer, AudioError, CANONICAL_RATES};

/// Zero crossings of the kernel on each side, measured at the lower rate.
const HALF_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.6;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.9;
const MAX_EXACT_PHASES: u64 = 4096;
const APPROX_PHASES: usize = 1024;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[derive(Clone, Copy, Debug)]
enum Stepping {
    /// Output `n` sits at input position `n * down / up`; one phase per residue.
    Rational { up: u64, down: u64 },
    /// Arbitrary output/input ratio; fractional positions snap to the nearest phase.
    Ratio(f64),
}

/// Polyphase windowed-sinc (Kaiser) resampler.
#[derive(Clone, Debug)]
pub struct SincResampler {
    stepping: Stepping,
    phases: usize,
    taps: usize,
    table: Vec<f32>,
}

impl SincResampler {
    /// Exact rational conversion between two rates.
    pub fn new(in_rate: u32, out_rate: u32) -> Self {
        let g = gcd(in_rate as u64, out_rate as u64);
        let (up, down) = (out_rate as u64 / g, in_rate as u64 / g);
        if up > MAX_EXACT_PHASES {
            return Self::with_ratio(out_rate as f64 / in_rate as f64);
        }
        Self::build(Stepping::Rational { up, down }, up as usize, out_rate as f64 / in_rate as f64)
    }

    /// Conversion by an arbitrary output/input length ratio.
    pub fn with_ratio(ratio: f64) -> Self {
        assert!(ratio.is_finite() && ratio > 0.0, "resampling ratio must be positive");
        Self::build(Stepping::Ratio(ratio), APPROX_PHASES, ratio)
    }

    fn build(stepping: Stepping, phases: usize, ratio: f64) -> Self {
        let widen = (1.0 / ratio).max(1.0);
        let half = (HALF_ZERO_CROSSINGS as f64 * widen).ceil() as usize;
        let taps = 2 * half;
        let cutoff = 0.5 * ROLLOFF * ratio.min(1.0);
        let i0_beta = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0f32; phases * taps];
        for p in 0..phases {
            let frac = p as f64 / phases as f64;
            let row = &mut table[p * taps..(p + 1) * taps];
            let mut acc = vec![0.0f64; taps];
            for (j, a) in acc.iter_mut().enumerate() {
                let d = j as f64 - (half as f64 - 1.0) - frac;
                let x = 2.0 * cutoff * d;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                let r = d / half as f64;
                let w = if r.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
                };
                *a = 2.0 * cutoff * sinc * w;
            }
            let sum: f64 = acc.iter().sum();
            for (dst, a) in row.iter_mut().zip(acc) {
                *dst = (a / sum) as f32;
            }
        }
        Self {
            stepping,
            phases,
            taps,
            table,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        match self.stepping {
            Stepping::Rational { up, down } => ((input_len as u64 * up).div_ceil(down)) as usize,
            Stepping::Ratio(r) => (input_len as f64 * r).round().max(1.0) as usize,
        }
    }

    fn position(&self, n: usize) -> (isize, usize) {
        match self.stepping {
            Stepping::Rational { up, down } => {
                let t = n as u64 * down;
                ((t / up) as isize, (t % up) as usize)
            }
            Stepping::Ratio(r) => {
                let t = n as f64 / r;
                let base = t.floor();
                let p = ((t - base) * self.phases as f64).round() as usize;
                if p == self.phases {
                    (base as isize + 1, 0)
                } else {
                    (base as isize, p)
                }
            }
        }
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let half = (self.taps / 2) as isize;
        let len = input.len() as isize;
        (0..self.output_len(input.len()))
            .map(|n| {
                let (base, phase) = self.position(n);
                let kernel = &self.table[phase * self.taps..(phase + 1) * self.taps];
                let start = base - (half - 1);
                let mut acc = 0.0f64;
                for (j, &k) in kernel.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && idx < len {
                        acc += k as f64 * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Converts `buffer` to `target_rate`, one of the canonical rates.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    if !CANONICAL_RATES.contains(&target_rate) {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if buffer.sample_rate() == target_rate {
        return Ok(buffer.clone());
    }
    let out = SincResampler::new(buffer.sample_rate(), target_rate).process(buffer.samples());
    AudioBuffer::new(out, target_rate, buffer.source_id())
}
