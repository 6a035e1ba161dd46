use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Mel energies are clamped here before the log.
pub const MEL_FLOOR: f64 = 1e-5;
/// `ln(MEL_FLOOR)`, the smallest value a log-mel entry can take.
pub const LOG_FLOOR: f64 = -11.512_925_464_970_229;

/// STFT and filterbank settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub hop: usize,
    pub window: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { hop: 320, window: 1280, fft_size: 1280, n_mels: 80, sample_rate: SAMPLE_RATE, f_min: 0.0, f_max: 8000.0 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window > self.fft_size {
            return Err(Error::invalid("mel window exceeds fft size"));
        }
        if self.hop == 0 || self.hop >= self.window {
            return Err(Error::invalid("mel hop must be in (0, window)"));
        }
        if self.n_mels != 80 {
            return Err(Error::invalid(format!("expected 80 mel bins, got {}", self.n_mels)));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!("expected {SAMPLE_RATE} Hz, got {}", self.sample_rate)));
        }
        if !(self.window - self.hop).is_multiple_of(2) {
            return Err(Error::invalid("window - hop must be even for symmetric padding"));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Reflect padding applied before the first frame.
    pub fn left_pad(&self) -> usize {
        (self.window - self.hop) / 2
    }
}

/// Number of analysis frames for `samples` input samples: `ceil(samples / hop)`.
pub fn frame_count(samples: usize, hop: usize) -> usize {
    samples.div_ceil(hop)
}

/// Log-mel matrix, frames × n_mels.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>, hop: usize, sample_rate: u32) -> Self {
        Self { values, hop, sample_rate }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Index into `[0, n)` by mirroring without repeating the edge sample,
/// folding as many times as needed.
pub(crate) fn reflect_index(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = j.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Samples of analysis frame `i`, centered on `i·hop + hop/2` of the clip.
pub(crate) fn frame_samples<'a>(samples: &'a [f64], i: usize, cfg: &MelConfig) -> impl Iterator<Item = f64> + 'a {
    let start = (i * cfg.hop) as isize - cfg.left_pad() as isize;
    let n = samples.len();
    (0..cfg.window as isize).map(move |m| samples[reflect_index(start + m, n)])
}

pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|m| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * m as f64 / len as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-style triangular filterbank with area normalization,
/// `n_mels × (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_freq = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_freq));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (right - left);
        for k in 0..n_freq {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0) * enorm;
        }
    }
    fb
}

pub(crate) struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    cfg: MelConfig,
}

impl Stft {
    pub(crate) fn new(cfg: &MelConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Self { fft, window: hann(cfg.window), cfg: *cfg }
    }

    /// Complex spectrum of one frame, `fft_size/2 + 1` bins.
    pub(crate) fn frame(&self, samples: &[f64], i: usize) -> Vec<Complex<f64>> {
        let offset = (self.cfg.fft_size - self.cfg.window) / 2;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (m, (x, w)) in frame_samples(samples, i, &self.cfg).zip(&self.window).enumerate() {
            buf[offset + m] = Complex::new(x * w, 0.0);
        }
        self.fft.process(&mut buf);
        buf.truncate(self.cfg.fft_size / 2 + 1);
        buf
    }
}

/// Log-mel spectrogram of magnitude STFT frames.
///
/// The clip is reflect-padded by `(window - hop) / 2` on the left and as far
/// as needed on the right, giving exactly `ceil(samples / hop)` frames with
/// frame `i` centered on sample `i·hop + hop/2`.
pub fn compute_mel(audio: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(Error::invalid("cannot analyze empty audio"));
    }
    let fb = mel_filterbank(cfg);
    let stft = Stft::new(cfg);
    let frames = frame_count(audio.len(), cfg.hop);
    let n_freq = cfg.fft_size / 2 + 1;
    let mut mags = Array2::zeros((frames, n_freq));
    for i in 0..frames {
        let spec = stft.frame(audio.samples(), i);
        for (k, c) in spec.iter().enumerate() {
            mags[[i, k]] = c.norm();
        }
    }
    let mut values = mags.dot(&fb.t());
    values.mapv_inplace(|v| v.max(MEL_FLOOR).ln());
    Ok(MelSpectrogram::new(values, cfg.hop, cfg.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_second_gives_fifty_frames() {
        let mel = compute_mel(&sine(300.0, 1.0, 0.3), &MelConfig::default()).unwrap();
        assert_eq!((mel.frames(), mel.bins()), (50, 80));
        assert_eq!(frame_count(16_000, 320), 50);
        assert_eq!(frame_count(16_001, 320), 51);
        assert_eq!(frame_count(1, 320), 1);
    }

    #[test]
    fn silence_is_the_floor() {
        let clip = AudioClip::new(vec![0.0; 4000]).unwrap();
        let mel = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert!(mel.values.iter().all(|&v| v == LOG_FLOOR));
        assert_eq!(LOG_FLOOR, MEL_FLOOR.ln());
    }

    #[test]
    fn short_clips_still_analyze() {
        let clip = AudioClip::new(vec![0.1, -0.2, 0.3]).unwrap();
        let mel = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(mel.frames(), 1);
        assert!(mel.values.iter().all(|v| v.is_finite() && *v >= LOG_FLOOR));
    }

    #[test]
    fn sine_peak_matches_direct_dft() {
        let cfg = MelConfig::default();
        let clip = sine(440.0, 0.5, 0.5);
        let mel = compute_mel(&clip, &cfg).unwrap();
        assert_eq!(mel.frames(), 25);

        // oracle: naive DFT of one interior window, projected onto the filterbank
        let win = hann(cfg.window);
        let frame: Vec<f64> = frame_samples(clip.samples(), 10, &cfg).collect();
        let n_freq = cfg.fft_size / 2 + 1;
        let mag: Vec<f64> = (0..n_freq)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (m, (&x, &w)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * m) as f64 / cfg.fft_size as f64;
                    re += x * w * ang.cos();
                    im += x * w * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let fb = mel_filterbank(&cfg);
        let oracle: Vec<f64> = (0..cfg.n_mels).map(|m| (0..n_freq).map(|k| fb[[m, k]] * mag[k]).sum()).collect();
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let expected = argmax(&oracle);
        for i in 0..mel.frames() {
            let row: Vec<f64> = mel.values.row(i).to_vec();
            assert_eq!(argmax(&row), expected, "frame {i}");
        }
        assert!((mel.values[[10, expected]] - oracle[expected].ln()).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let clip = sine(123.0, 0.3, 0.2);
        let a = compute_mel(&clip, &MelConfig::default()).unwrap();
        let b = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(-7, 4), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = MelConfig { window: 2048, ..MelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = MelConfig { n_mels: 64, ..MelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
