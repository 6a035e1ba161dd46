//! Timbre perturbation for content-feature inputs: random pitch shift
//! (resample, then time-stretch back to the original duration) followed by a
//! random three-band peaking equalizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mel::hann;
use super::{AudioClip, SAMPLE_RATE};

pub const MAX_SEMITONES: f64 = 4.0;
pub const MAX_EQ_DB: f64 = 6.0;
pub const EQ_CENTERS_HZ: [f64; 3] = [250.0, 1000.0, 4000.0];
const EQ_Q: f64 = 1.0;
const SINC_HALF_WIDTH: f64 = 16.0;
const GRAIN: usize = 640;
const SYNTH_HOP: usize = GRAIN / 2;
const SEARCH: isize = 200;
const PEAK_LIMIT: f64 = 0.99;

/// Randomly drawn perturbation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbParams {
    pub semitones: f64,
    pub eq_gains_db: [f64; 3],
}

impl PerturbParams {
    pub fn identity() -> Self {
        Self { semitones: 0.0, eq_gains_db: [0.0; 3] }
    }

    /// Semitones ~ U(±4), each band gain ~ U(±6 dB).
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let semitones = rng.gen_range(-MAX_SEMITONES..=MAX_SEMITONES);
        let mut eq_gains_db = [0.0; 3];
        for g in &mut eq_gains_db {
            *g = rng.gen_range(-MAX_EQ_DB..=MAX_EQ_DB);
        }
        Self { semitones, eq_gains_db }
    }

    /// Frequency multiplier applied to every partial.
    pub fn pitch_ratio(&self) -> f64 {
        2f64.powf(self.semitones / 12.0)
    }
}

/// Perturb with parameters drawn from `seed`. Output has the input's length.
pub fn perturb_signal(audio: &AudioClip, seed: u64) -> AudioClip {
    perturb_with(audio, &PerturbParams::sample(seed))
}

pub fn perturb_with(audio: &AudioClip, params: &PerturbParams) -> AudioClip {
    let n = audio.len();
    let ratio = params.pitch_ratio();
    let mut y = if (ratio - 1.0).abs() < 1e-12 {
        audio.samples().to_vec()
    } else {
        let shifted = resample_by(audio.samples(), ratio);
        time_stretch(&shifted, n)
    };
    for (&center, &gain) in EQ_CENTERS_HZ.iter().zip(&params.eq_gains_db) {
        if gain != 0.0 {
            Biquad::peaking(center, gain, EQ_Q, SAMPLE_RATE as f64).run(&mut y);
        }
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let k = PEAK_LIMIT / peak;
        y.iter_mut().for_each(|v| *v *= k);
    }
    AudioClip::new(y).expect("perturbation keeps samples finite and bounded")
}

/// Read the signal at rate `ratio` (output sample m = input time m·ratio)
/// through a Hann-windowed sinc low-pass.
fn resample_by(x: &[f64], ratio: f64) -> Vec<f64> {
    let out_len = ((x.len() as f64) / ratio).round().max(1.0) as usize;
    let cutoff = (1.0 / ratio).min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    (0..out_len)
        .map(|m| {
            let t = m as f64 * ratio;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let tau = t - k as f64;
                let u = tau / half;
                if u.abs() >= 1.0 {
                    continue;
                }
                let arg = std::f64::consts::PI * cutoff * tau;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                let w = 0.5 + 0.5 * (std::f64::consts::PI * u).cos();
                acc += v * cutoff * sinc * w;
            }
            acc
        })
        .collect()
}

/// Waveform-similarity overlap-add stretch of `x` to `out_len` samples.
fn time_stretch(x: &[f64], out_len: usize) -> Vec<f64> {
    let win = hann(GRAIN);
    let in_len = x.len() as isize;
    let sample = |i: isize| if i >= 0 && i < in_len { x[i as usize] } else { 0.0 };
    let analysis_hop = SYNTH_HOP as f64 * x.len() as f64 / out_len.max(1) as f64;
    let mut out = vec![0.0; out_len + GRAIN];
    let mut norm = vec![0.0; out_len + GRAIN];
    let mut prev: isize = 0;
    let mut k = 0usize;
    while k * SYNTH_HOP < out_len {
        let pos = if k == 0 {
            0
        } else {
            let nominal = (k as f64 * analysis_hop).round() as isize;
            let natural = prev + SYNTH_HOP as isize;
            let mut best = nominal;
            let mut best_score = f64::NEG_INFINITY;
            for cand in nominal - SEARCH..=nominal + SEARCH {
                if cand < 0 || cand >= in_len {
                    continue;
                }
                let score: f64 = (0..GRAIN as isize).step_by(2).map(|j| sample(cand + j) * sample(natural + j)).sum();
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        let base = k * SYNTH_HOP;
        for j in 0..GRAIN {
            out[base + j] += sample(pos + j as isize) * win[j];
            norm[base + j] += win[j];
        }
        prev = pos;
        k += 1;
    }
    out.truncate(out_len);
    out.iter().zip(&norm).map(|(v, w)| if *w > 1e-3 { v / w } else { 0.0 }).collect()
}

struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn peaking(center: f64, gain_db: f64, q: f64, fs: f64) -> Self {
        let a_lin = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * center / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha / a_lin;
        Self {
            b: [(1.0 + alpha * a_lin) / a0, -2.0 * cw / a0, (1.0 - alpha * a_lin) / a0],
            a: [-2.0 * cw / a0, (1.0 - alpha / a_lin) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}
