//! Schroeder reverberator: four parallel damped feedback combs feeding two
//! series all-pass sections.

const COMB_DELAYS: [usize; 4] = [1116, 1188, 1277, 1356];
const ALLPASS_DELAYS: [usize; 2] = [556, 441];
const ALLPASS_FEEDBACK: f64 = 0.5;
const MAX_FEEDBACK: f64 = 0.98;
const REFERENCE_RATE: f64 = 22050.0;

/// Reverb controls, each on `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverbParams {
    pub room_size: f64,
    pub reverberance: f64,
    pub damping: f64,
}

struct Comb {
    buf: Vec<f64>,
    idx: usize,
    feedback: f64,
    damp: f64,
    store: f64,
}

impl Comb {
    fn tick(&mut self, x: f64) -> f64 {
        let y = self.buf[self.idx];
        self.store = y * (1.0 - self.damp) + self.store * self.damp;
        self.buf[self.idx] = x + self.store * self.feedback;
        self.idx = (self.idx + 1) % self.buf.len();
        y
    }
}

struct Allpass {
    buf: Vec<f64>,
    idx: usize,
}

impl Allpass {
    fn tick(&mut self, x: f64) -> f64 {
        let b = self.buf[self.idx];
        self.buf[self.idx] = x + b * ALLPASS_FEEDBACK;
        self.idx = (self.idx + 1) % self.buf.len();
        b - x
    }
}

/// Applies the reverb and rescales the result so its peak equals the input
/// peak. Output length equals input length.
pub fn schroeder_reverb(input: &[f32], sample_rate: u32, params: ReverbParams) -> Vec<f32> {
    let room = params.room_size.clamp(0.0, 100.0);
    let feedback = (params.reverberance.clamp(0.0, 100.0) / 100.0).min(MAX_FEEDBACK);
    let wet_mix = params.reverberance.clamp(0.0, 100.0) / 100.0;
    let damp = params.damping.clamp(0.0, 100.0) / 100.0;
    let rate_scale = sample_rate as f64 / REFERENCE_RATE;
    let room_scale = 0.5 + room / 200.0;

    let mut combs: Vec<Comb> = COMB_DELAYS
        .iter()
        .map(|&d| Comb {
            buf: vec![0.0; ((d as f64 * room_scale * rate_scale).round() as usize).max(1)],
            idx: 0,
            feedback,
            damp,
            store: 0.0,
        })
        .collect();
    let mut allpasses: Vec<Allpass> = ALLPASS_DELAYS
        .iter()
        .map(|&d| Allpass {
            buf: vec![0.0; ((d as f64 * rate_scale).round() as usize).max(1)],
            idx: 0,
        })
        .collect();

    // keeps each comb's low-frequency gain near one regardless of feedback
    let comb_in = (1.0 - feedback) / COMB_DELAYS.len() as f64;
    let mut out: Vec<f64> = input
        .iter()
        .map(|&x| {
            let x = x as f64;
            let mut wet: f64 = combs.iter_mut().map(|c| c.tick(x * comb_in)).sum();
            for ap in allpasses.iter_mut() {
                wet = ap.tick(wet);
            }
            x + wet_mix * wet
        })
        .collect();

    let in_peak = input.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let out_peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if out_peak > 0.0 && in_peak > 0.0 {
        let g = in_peak / out_peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    // rounding after scaling may overshoot the input peak by an ulp
    let limit = in_peak as f32;
    out.into_iter().map(|v| (v as f32).clamp(-limit, limit)).collect()
}
