use super::mel::{frame_count, frame_samples, MelConfig};
use super::AudioClip;

pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 600.0;
/// Minimum normalized autocorrelation peak for a frame to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.3;
const SILENCE_RMS: f64 = 1e-4;

/// Per-frame F0 in Hz; `0.0` marks unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0_hz: Vec<f64>,
}

impl PitchContour {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz.iter().copied().filter(|&f| f > 0.0)
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0_hz.is_empty() {
            return 0.0;
        }
        self.voiced().count() as f64 / self.f0_hz.len() as f64
    }

    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

/// Plug-in point for F0 estimators. Implementations must return one value
/// per mel frame (`ceil(samples / hop)`).
pub trait PitchExtractor: Send + Sync {
    fn extract(&self, audio: &AudioClip, cfg: &MelConfig) -> PitchContour;
}

/// Frame-wise normalized cross-correlation pitch tracker.
#[derive(Clone, Copy, Debug)]
pub struct AutocorrelationPitch {
    pub threshold: f64,
    pub min_hz: f64,
    pub max_hz: f64,
}

impl Default for AutocorrelationPitch {
    fn default() -> Self {
        Self { threshold: VOICING_THRESHOLD, min_hz: F0_MIN_HZ, max_hz: F0_MAX_HZ }
    }
}

impl AutocorrelationPitch {
    fn frame_f0(&self, frame: &[f64], sample_rate: f64) -> f64 {
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        if rms < SILENCE_RMS {
            return 0.0;
        }
        let lag_min = (sample_rate / self.max_hz).floor() as usize;
        let lag_max = (sample_rate / self.min_hz).ceil() as usize;
        if lag_max + 2 >= x.len() {
            return 0.0;
        }
        let span = x.len() - lag_max - 1;
        let head = &x[..span];
        let e0: f64 = head.iter().map(|v| v * v).sum();
        let nccf = |lag: usize| {
            let tail = &x[lag..lag + span];
            let num: f64 = head.iter().zip(tail).map(|(a, b)| a * b).sum();
            let e1: f64 = tail.iter().map(|v| v * v).sum();
            let den = (e0 * e1).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        };
        let lo = lag_min.saturating_sub(1).max(1);
        let r: Vec<f64> = (lo..=lag_max + 1).map(nccf).collect();
        let at = |lag: usize| r[lag - lo];
        let best = (lag_min..=lag_max).map(at).fold(f64::NEG_INFINITY, f64::max);
        if best < self.threshold {
            return 0.0;
        }
        // earliest local peak close to the global maximum, to avoid period doubling
        let lag = (lag_min..=lag_max)
            .find(|&l| at(l) >= 0.9 * best && at(l) >= at(l - 1) && at(l) >= at(l + 1))
            .unwrap_or(lag_min);
        let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        (sample_rate / (lag as f64 + shift)).clamp(self.min_hz, self.max_hz)
    }
}

impl PitchExtractor for AutocorrelationPitch {
    fn extract(&self, audio: &AudioClip, cfg: &MelConfig) -> PitchContour {
        let frames = frame_count(audio.len(), cfg.hop);
        let sr = cfg.sample_rate as f64;
        let mut buf = Vec::with_capacity(cfg.window);
        let f0_hz = (0..frames)
            .map(|i| {
                buf.clear();
                buf.extend(frame_samples(audio.samples(), i, cfg));
                self.frame_f0(&buf, sr)
            })
            .collect();
        PitchContour { f0_hz }
    }
}

/// F0 contour with the default autocorrelation tracker.
pub fn extract_f0(audio: &AudioClip, cfg: &MelConfig) -> PitchContour {
    AutocorrelationPitch::default().extract(audio, cfg)
}
