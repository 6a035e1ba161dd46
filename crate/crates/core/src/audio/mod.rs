//! Audio frontend: clips, WAV IO, mel analysis, pitch, and perturbation.

mod mel;
mod perturb;
mod phase;
mod pitch;

use std::path::Path;

use crate::error::{Error, Result};

pub use mel::{compute_mel, frame_count, mel_filterbank, MelConfig, MelSpectrogram, LOG_FLOOR, MEL_FLOOR};
pub use perturb::{perturb_signal, perturb_with, PerturbParams, EQ_CENTERS_HZ, MAX_EQ_DB, MAX_SEMITONES};
pub use phase::reconstruct_waveform;
pub use pitch::{extract_f0, AutocorrelationPitch, PitchContour, PitchExtractor, F0_MAX_HZ, F0_MIN_HZ, VOICING_THRESHOLD};

/// Working sample rate of the whole system.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    /// Samples must be finite and non-empty. Values outside [-1, 1] are
    /// rejected rather than clipped.
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip is empty"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        if let Some(i) = samples.iter().position(|s| s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {i} outside [-1, 1]: {}", samples[i])));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Read a PCM (16/24/32-bit int) or float WAV. Multi-channel files are
    /// averaged to mono; other rates are resampled with [`resample`].
    pub fn load_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let channels = spec.channels.max(1) as usize;
        if channels > 1 {
            log::warn!("{}: mixing {channels} channels down to mono", path.display());
        }
        let mono: Vec<f64> = interleaved
            .chunks(channels)
            .map(|frame| (frame.iter().sum::<f64>() / channels as f64).clamp(-1.0, 1.0))
            .collect();
        let mono = if spec.sample_rate == SAMPLE_RATE { mono } else { resample(&mono, spec.sample_rate, SAMPLE_RATE) };
        Self::new(mono).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Write 16-bit PCM mono.
    pub fn save_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample((s * 32767.0).round() as i16).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

// Kaiser-windowed sinc parameters matching the usual "kaiser_best" filter.
const KAISER_ZERO_CROSSINGS: f64 = 64.0;
const KAISER_ROLLOFF: f64 = 0.947_593_716_739_959_6;
const KAISER_BETA: f64 = 14.769_656_459_379_492;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel
/// (64 zero crossings, β ≈ 14.77, roll-off ≈ 0.948).
pub fn resample(input: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let scale = ratio.min(1.0);
    let cutoff = KAISER_ROLLOFF * scale;
    let half_width = KAISER_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let out_len = (input.len() as f64 * ratio).ceil() as usize;
    (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let lo = (center - half_width).ceil().max(0.0) as usize;
            let hi = ((center + half_width).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let tau = center - k as f64;
                let u = tau / half_width;
                if u.abs() >= 1.0 {
                    continue;
                }
                let arg = std::f64::consts::PI * cutoff * tau;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                acc += x * cutoff * sinc * window;
            }
            acc
        })
        .collect()
}
