//! Classical phase reconstruction from a log-mel spectrogram. For listening
//! only; the output is not used by any metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::mel::{hann, mel_filterbank, MelConfig, MelSpectrogram, Stft};
use super::AudioClip;
use crate::error::Result;

/// Griffin–Lim iterations over a linear-magnitude estimate obtained by a
/// normalized filterbank transpose.
pub fn reconstruct_waveform(mel: &MelSpectrogram, cfg: &MelConfig, iterations: usize, seed: u64) -> Result<AudioClip> {
    cfg.validate()?;
    let fb = mel_filterbank(cfg);
    let n_freq = cfg.fft_size / 2 + 1;
    let frames = mel.frames();
    let row_mass: Vec<f64> = fb.outer_iter().map(|r| r.sum()).collect();
    let mut mags = vec![vec![0.0; n_freq]; frames];
    for (i, mrow) in mags.iter_mut().enumerate() {
        for (k, slot) in mrow.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for m in 0..cfg.n_mels {
                let w = fb[[m, k]];
                num += w * mel.values[[i, m]].exp();
                den += w * row_mass[m];
            }
            *slot = if den > 0.0 { num / den } else { 0.0 };
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases: Vec<Vec<Complex<f64>>> = (0..frames)
        .map(|_| {
            (0..n_freq)
                .map(|_| Complex::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let out_len = frames * cfg.hop;
    let stft = Stft::new(cfg);
    let mut signal = istft(&mags, &phases, cfg, out_len);
    for _ in 0..iterations {
        for (i, ph) in phases.iter_mut().enumerate() {
            for (p, c) in ph.iter_mut().zip(stft.frame(&signal, i)) {
                let n = c.norm();
                *p = if n > 1e-12 { c / n } else { Complex::new(1.0, 0.0) };
            }
        }
        signal = istft(&mags, &phases, cfg, out_len);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        signal.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    AudioClip::new(signal)
}

fn istft(mags: &[Vec<f64>], phases: &[Vec<Complex<f64>>], cfg: &MelConfig, out_len: usize) -> Vec<f64> {
    let ifft = FftPlanner::new().plan_fft_inverse(cfg.fft_size);
    let win = hann(cfg.window);
    let offset = (cfg.fft_size - cfg.window) / 2;
    let left = cfg.left_pad() as isize;
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for (i, (mag, ph)) in mags.iter().zip(phases).enumerate() {
        for (k, slot) in buf.iter_mut().enumerate() {
            let src = if k <= cfg.fft_size / 2 { k } else { cfg.fft_size - k };
            let c = ph[src] * mag[src];
            *slot = if k <= cfg.fft_size / 2 { c } else { c.conj() };
        }
        ifft.process(&mut buf);
        let start = (i * cfg.hop) as isize - left;
        for m in 0..cfg.window {
            let t = start + m as isize;
            if t < 0 || t >= out_len as isize {
                continue;
            }
            let w = win[m];
            out[t as usize] += buf[offset + m].re / cfg.fft_size as f64 * w;
            norm[t as usize] += w * w;
        }
    }
    out.iter().zip(&norm).map(|(v, n)| if *n > 1e-8 { v / n } else { 0.0 }).collect()
}
