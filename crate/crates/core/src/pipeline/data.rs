use std::collections::BTreeMap;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::ManifestEntry;
use crate::audio::{compute_mel, extract_f0, AudioClip, MelConfig, PitchContour};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::factorize::{log_f0_input, pitch_features, ContentProvider, PerturbedMelProvider};
use crate::model::{pack, Model, ModelConfig, PackedBatch};

/// Analysis products of one clip.
#[derive(Clone, Debug)]
pub struct Example {
    /// Position in the source manifest.
    pub index: usize,
    pub speaker: usize,
    /// Raw log-mel, frames × bins.
    pub mel: Mat,
    pub content: Mat,
    /// Frames × 3 pitch features.
    pub pitch: Mat,
    pub f0: PitchContour,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Speaker names, indexed by `Example::speaker`.
    pub speakers: Vec<String>,
}

impl Dataset {
    /// Analyzes every entry. Unreadable clips are skipped with a warning.
    /// With `perturb_seed`, content features come from a perturbed copy of
    /// each clip (seed derived from the clip's manifest position).
    pub fn prepare(
        entries: &[(usize, &ManifestEntry)],
        model: &ModelConfig,
        mel_cfg: &MelConfig,
        perturb_seed: Option<u64>,
    ) -> Result<Self> {
        let speakers: Vec<String> = entries
            .iter()
            .map(|(_, e)| e.speaker.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let speaker_index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let provider = PerturbedMelProvider::new(model.content_dim, model.content_seed, *mel_cfg);
        let mut examples = Vec::new();
        for &(index, entry) in entries {
            let clip = match AudioClip::load_wav(&entry.path) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("skipping {}: {e}", entry.path.display());
                    continue;
                }
            };
            let mel = compute_mel(&clip, mel_cfg)?.values;
            let f0 = extract_f0(&clip, mel_cfg);
            let feats = match perturb_seed {
                Some(seed) => provider.perturbed(clip_seed(seed, index)).features(&clip)?,
                None => provider.features(&clip)?,
            };
            let pitch = pitch_features(&log_f0_input(&f0)?);
            examples.push(Example { index, speaker: speaker_index[entry.speaker.as_str()], mel, content: feats.values, pitch, f0 });
        }
        if examples.is_empty() {
            return Err(Error::invalid("no readable clips in the selected manifest entries"));
        }
        Ok(Self { examples, speakers })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn distinct_speakers(&self) -> usize {
        self.examples.iter().map(|e| e.speaker).collect::<std::collections::BTreeSet<_>>().len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.examples.iter().map(Example::frames).collect()
    }

    /// Scalar mean and standard deviation over every log-mel value.
    pub fn mel_stats(&self) -> (f64, f64) {
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for e in &self.examples {
            n += e.mel.len() as f64;
            sum += e.mel.sum();
            sq += e.mel.iter().map(|v| v * v).sum::<f64>();
        }
        let mean = sum / n;
        (mean, (sq / n - mean * mean).max(1e-12).sqrt())
    }
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Right-padded batch. `padding[i][f]` is true on frames past item i's end.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Dataset positions of the items.
    pub ids: Vec<usize>,
    pub speakers: Vec<usize>,
    pub lengths: Vec<usize>,
    pub mel: Vec<Mat>,
    pub content: Vec<Mat>,
    pub pitch: Vec<Mat>,
    pub padding: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_frames(&self) -> usize {
        self.mel.first().map_or(0, Mat::nrows)
    }

    /// Drops padding and standardizes the mel.
    pub fn pack(&self, model: &Model) -> Result<PackedBatch> {
        let mels: Vec<Mat> = self.mel.iter().map(|m| model.normalize_mel(m)).collect();
        let items: Vec<_> = (0..self.len()).map(|i| (&mels[i], &self.content[i], &self.pitch[i])).collect();
        pack(&items, &self.lengths)
    }
}

/// Length-bucketed batch order of one epoch: shuffle, sort within pools of
/// four batches, cut into batches, shuffle the batches.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1) << 32);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let pool = batch_size * 4;
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(pool) {
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Gathers items, optionally cropping each to `max_frames` at a random
/// start, and right-pads to the longest.
pub fn make_batch<R: Rng + ?Sized>(data: &Dataset, ids: &[usize], max_frames: Option<usize>, rng: &mut R) -> Result<Batch> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot build an empty batch"));
    }
    let mut spans = Vec::with_capacity(ids.len());
    for &id in ids {
        let e = data.examples.get(id).ok_or_else(|| Error::invalid(format!("no example {id}")))?;
        let n = e.frames();
        let span = match max_frames {
            Some(m) if m > 0 && n > m => {
                let start = rng.gen_range(0..=n - m);
                (start, m)
            }
            _ => (0, n),
        };
        spans.push(span);
    }
    let t_max = spans.iter().map(|s| s.1).max().unwrap();
    let pad = |m: &Mat, (start, len): (usize, usize)| {
        let mut out = Mat::zeros((t_max, m.ncols()));
        out.slice_mut(s![..len, ..]).assign(&m.slice(s![start..start + len, ..]));
        out
    };
    let mut batch = Batch { ids: ids.to_vec(), speakers: Vec::new(), lengths: Vec::new(), mel: Vec::new(), content: Vec::new(), pitch: Vec::new(), padding: Vec::new() };
    for (&id, &span) in ids.iter().zip(&spans) {
        let e = &data.examples[id];
        batch.speakers.push(e.speaker);
        batch.lengths.push(span.1);
        batch.mel.push(pad(&e.mel, span));
        batch.content.push(pad(&e.content, span));
        batch.pitch.push(pad(&e.pitch, span));
        batch.padding.push((0..t_max).map(|f| f >= span.1).collect());
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_cover_every_item_once() {
        let lengths: Vec<usize> = (0..23).map(|i| 40 + (i * 7) % 19).collect();
        let b = epoch_batches(&lengths, 4, 3, 0);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(&lengths, 4, 3, 0));
        assert_ne!(b, epoch_batches(&lengths, 4, 3, 1));
    }
}
