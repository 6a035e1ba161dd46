//! Synthetic two-speaker corpus: source-filter vowels whose speakers differ
//! in F0 register, spectral tilt, and formant scale, over shared content.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Formant frequencies (Hz) and bandwidths of a few vowels.
const VOWELS: [[(f64, f64); 3]; 5] = [
    [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0)],
    [(270.0, 60.0), (2290.0, 100.0), (3010.0, 180.0)],
    [(300.0, 60.0), (870.0, 90.0), (2240.0, 170.0)],
    [(530.0, 70.0), (1840.0, 100.0), (2480.0, 170.0)],
    [(570.0, 80.0), (840.0, 90.0), (2410.0, 170.0)],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthVoice {
    pub f0_low: f64,
    pub f0_high: f64,
    /// Harmonic roll-off in dB per octave above 100 Hz.
    pub tilt_db_per_octave: f64,
    pub formant_scale: f64,
}

impl SynthVoice {
    pub fn low() -> Self {
        Self { f0_low: 100.0, f0_high: 140.0, tilt_db_per_octave: -12.0, formant_scale: 1.0 }
    }

    pub fn high() -> Self {
        Self { f0_low: 220.0, f0_high: 280.0, tilt_db_per_octave: -5.0, formant_scale: 1.18 }
    }
}

/// One clip: 3–4 vowels with smooth transitions, F0 drawn inside the
/// voice's band with a slow glide. Content depends only on `content_seed`,
/// so two voices with equal seeds say the same thing.
pub fn synth_clip(voice: &SynthVoice, content_seed: u64, voice_seed: u64) -> AudioClip {
    let mut content_rng = ChaCha8Rng::seed_from_u64(content_seed);
    let mut voice_rng = ChaCha8Rng::seed_from_u64(voice_seed);
    let secs = content_rng.gen_range(1.0..1.4);
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let segments = content_rng.gen_range(3..=4usize);
    let vowels: Vec<usize> = (0..segments).map(|_| content_rng.gen_range(0..VOWELS.len())).collect();
    let f_start = voice_rng.gen_range(voice.f0_low..voice.f0_high);
    let f_end = voice_rng.gen_range(voice.f0_low..voice.f0_high);
    let noise_seed = voice_rng.gen::<u64>();

    let sr = SAMPLE_RATE as f64;
    let block = 160;
    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    for b0 in (0..n).step_by(block) {
        let pos = b0 as f64 / n as f64;
        let f0 = f_start + (f_end - f_start) * pos;
        let formants = formants_at(&vowels, pos, voice.formant_scale);
        let harmonics = ((0.47 * sr) / f0) as usize;
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let f = h as f64 * f0;
                let tilt = 10f64.powf(voice.tilt_db_per_octave * (f / 100.0).log2().max(0.0) / 20.0);
                tilt * resonance(f, &formants)
            })
            .collect();
        for (i, slot) in out.iter_mut().enumerate().skip(b0).take(block) {
            let env = envelope(i, n);
            let mut v = 0.0;
            for (h, a) in amps.iter().enumerate() {
                v += a * ((h + 1) as f64 * phase).sin();
            }
            *slot = env * v + 1e-3 * noise.gen_range(-1.0..1.0);
            phase += std::f64::consts::TAU * f0 / sr;
            if phase > std::f64::consts::TAU * 1e3 {
                phase %= std::f64::consts::TAU;
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    AudioClip::new(out.into_iter().map(|v| v * k).collect()).expect("bounded synthetic audio")
}

fn formants_at(vowels: &[usize], pos: f64, scale: f64) -> [(f64, f64); 3] {
    let x = pos * vowels.len() as f64;
    let i = (x.floor() as usize).min(vowels.len() - 1);
    let frac = x - i as f64;
    let j = (i + 1).min(vowels.len() - 1);
    // hold each vowel, then glide over the last 30% of its span
    let w = ((frac - 0.7) / 0.3).clamp(0.0, 1.0);
    let mut out = [(0.0, 0.0); 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let (fa, ba) = VOWELS[vowels[i]][k];
        let (fb, bb) = VOWELS[vowels[j]][k];
        *slot = ((fa + (fb - fa) * w) * scale, ba + (bb - ba) * w);
    }
    out
}

fn resonance(f: f64, formants: &[(f64, f64); 3]) -> f64 {
    formants
        .iter()
        .map(|&(fc, bw)| {
            let d = (f - fc) / (bw / 2.0);
            1.0 / (1.0 + d * d).sqrt()
        })
        .sum::<f64>()
        + 0.02
}

fn envelope(i: usize, n: usize) -> f64 {
    let ramp = 400.0;
    let a = (i as f64 / ramp).min(1.0);
    let b = ((n - i) as f64 / ramp).min(1.0);
    a.min(b)
}

/// Writes `clips_per_speaker` clips for each of the two voices plus a
/// manifest. The last `dev_per_speaker` clips of each voice are tagged dev.
/// Returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, clips_per_speaker: usize, dev_per_speaker: usize, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if clips_per_speaker == 0 || dev_per_speaker >= clips_per_speaker {
        return Err(Error::invalid("need at least one training clip per speaker"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (s, voice) in [SynthVoice::low(), SynthVoice::high()].iter().enumerate() {
        for i in 0..clips_per_speaker {
            let content_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let voice_seed = seed.wrapping_mul(7_919).wrapping_add((s * 10_000 + i) as u64);
            let clip = synth_clip(voice, content_seed, voice_seed);
            let name = format!("spk{s}_{i:03}.wav");
            clip.save_wav(dir.join(&name))?;
            let split = if i >= clips_per_speaker - dev_per_speaker { "dev" } else { "train" };
            manifest.push_str(&format!("{name}\tspk{s}\t{split}\n"));
        }
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{extract_f0, MelConfig};

    #[test]
    fn voices_land_in_their_bands() {
        let cfg = MelConfig::default();
        for (voice, seed) in [(SynthVoice::low(), 1), (SynthVoice::high(), 2)] {
            let clip = synth_clip(&voice, 5, seed);
            assert!((1.0..1.4).contains(&clip.duration_secs()));
            let f0 = extract_f0(&clip, &cfg);
            assert!(f0.voiced_fraction() > 0.8, "{}", f0.voiced_fraction());
            let med = f0.median_voiced().unwrap();
            assert!(med > voice.f0_low * 0.95 && med < voice.f0_high * 1.05, "{med}");
        }
    }

    #[test]
    fn deterministic_and_content_shared() {
        let a = synth_clip(&SynthVoice::low(), 3, 9);
        assert_eq!(a, synth_clip(&SynthVoice::low(), 3, 9));
        let b = synth_clip(&SynthVoice::high(), 3, 10);
        assert_eq!(a.len(), b.len());
    }
}
