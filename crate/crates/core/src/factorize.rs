//! Speech factorization: content, pitch, and speaker encoders, their fusion
//! into the frame-level latent, and latent mixup across speakers.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, perturb_signal, AudioClip, MelConfig, PitchContour};
use crate::autograd::{Graph, Mat, Segments, Var};
use crate::error::{Error, Result};
use crate::nn::{self, WaveNetConfig};
use crate::params::{Init, ParamSpec, ParamStore};

/// Voiced log-F0 values are centered on this before embedding.
pub const LOG_F0_CENTER: f64 = 5.010_635_294_096_256; // ln(150)

/// Frame-aligned content features (frames × D_c).
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub values: Mat,
}

/// Utterance-level style vector (D_s).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Array1<f64>,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine(self.values.as_slice().unwrap(), other.values.as_slice().unwrap())
    }

    fn row(&self) -> Mat {
        self.values.clone().insert_axis(ndarray::Axis(0))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Frame-level latent (frames × D_z): ẑ, ẑ_mix, or an encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLatent {
    pub values: Mat,
}

impl FactorizedLatent {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Element-wise sum of content and pitch latents.
pub fn fuse(content: &FactorizedLatent, pitch: &FactorizedLatent) -> Result<FactorizedLatent> {
    if content.values.dim() != pitch.values.dim() {
        return Err(Error::invalid(format!(
            "cannot fuse latents of shape {:?} and {:?}",
            content.values.dim(),
            pitch.values.dim()
        )));
    }
    Ok(FactorizedLatent { values: &content.values + &pitch.values })
}

/// Source of frame-aligned, speaker-suppressed content features.
pub trait ContentProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, audio: &AudioClip) -> Result<ContentFeatures>;
}

/// Default provider: log-mel of (optionally perturbed) audio, mean-normalized
/// per bin over the utterance, through a fixed random projection.
#[derive(Clone, Debug)]
pub struct PerturbedMelProvider {
    projection: Mat,
    mel: MelConfig,
    perturb_seed: Option<u64>,
}

impl PerturbedMelProvider {
    /// Projection matrix is drawn from `projection_seed`; no perturbation.
    pub fn new(dim: usize, projection_seed: u64, mel: MelConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(projection_seed);
        let scale = 1.0 / (mel.n_mels as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((mel.n_mels, dim), || {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v * scale
        });
        Self { projection, mel, perturb_seed: None }
    }

    /// Same projection, with the input perturbed by `seed` before analysis.
    pub fn perturbed(&self, seed: u64) -> Self {
        Self { perturb_seed: Some(seed), ..self.clone() }
    }
}

impl ContentProvider for PerturbedMelProvider {
    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn features(&self, audio: &AudioClip) -> Result<ContentFeatures> {
        let input = match self.perturb_seed {
            Some(seed) => perturb_signal(audio, seed),
            None => audio.clone(),
        };
        let mut mel = compute_mel(&input, &self.mel)?.values;
        let mean = mel.mean_axis(ndarray::Axis(0)).expect("non-empty mel");
        mel -= &mean;
        Ok(ContentFeatures { values: mel.dot(&self.projection) })
    }
}

/// Log-F0 network input: `ln f0` on voiced frames, 0 on unvoiced ones.
pub fn log_f0_input(f0: &PitchContour) -> Result<Vec<f64>> {
    f0.f0_hz
        .iter()
        .map(|&f| {
            if f < 0.0 || !f.is_finite() {
                Err(Error::invalid(format!("invalid F0 value {f}")))
            } else if f == 0.0 {
                Ok(0.0)
            } else {
                Ok(f.ln())
            }
        })
        .collect()
}

/// Embedding input rows `[voiced·(ln f0 − center), voiced, unvoiced]`.
pub fn pitch_features(log_f0: &[f64]) -> Mat {
    Mat::from_shape_fn((log_f0.len(), 3), |(i, j)| {
        let voiced = log_f0[i] != 0.0;
        match (j, voiced) {
            (0, true) => log_f0[i] - LOG_F0_CENTER,
            (1, true) | (2, false) => 1.0,
            _ => 0.0,
        }
    })
}

/// Batch-level mixup assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixupPlan {
    permutation: Vec<usize>,
    apply: Vec<bool>,
}

impl MixupPlan {
    pub fn new(permutation: Vec<usize>, apply: Vec<bool>) -> Result<Self> {
        if permutation.len() != apply.len() {
            return Err(Error::invalid("mixup permutation and flags differ in length"));
        }
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("mixup permutation is not a bijection: {permutation:?}")));
            }
        }
        Ok(Self { permutation, apply })
    }

    pub fn identity(batch: usize) -> Self {
        Self { permutation: (0..batch).collect(), apply: vec![false; batch] }
    }

    /// Random cyclic derangement of a shuffled order, with the number of
    /// flagged items `floor(rate·B + u)`, `u ~ U[0,1)`, so the expected
    /// flag rate is exactly `rate`.
    pub fn sample<R: Rng + ?Sized>(batch: usize, rate: f64, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..batch).collect();
        order.shuffle(rng);
        let mut permutation = vec![0; batch];
        for i in 0..batch {
            permutation[order[i]] = order[(i + 1) % batch];
        }
        let count = ((rate * batch as f64 + rng.gen::<f64>()).floor() as usize).min(batch);
        let mut picks: Vec<usize> = (0..batch).collect();
        picks.shuffle(rng);
        let mut apply = vec![false; batch];
        for &i in &picks[..count] {
            apply[i] = true;
        }
        Self { permutation, apply }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn apply_flags(&self) -> &[bool] {
        &self.apply
    }

    pub fn flag_rate(&self) -> f64 {
        if self.apply.is_empty() {
            return 0.0;
        }
        self.apply.iter().filter(|&&a| a).count() as f64 / self.apply.len() as f64
    }
}

/// Widths of the three encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub wavenet_hidden: usize,
    pub wavenet_kernel: usize,
    pub content_layers: usize,
    pub pitch_layers: usize,
    pub dilation_cycle: usize,
    pub bottleneck_channels: usize,
    pub speaker_hidden: usize,
    pub speaker_heads: usize,
    pub speaker_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            wavenet_hidden: 64,
            wavenet_kernel: 3,
            content_layers: 8,
            pitch_layers: 8,
            dilation_cycle: 4,
            bottleneck_channels: 16,
            speaker_hidden: 128,
            speaker_heads: 2,
            speaker_kernel: 5,
        }
    }
}

/// Packed per-item encoder inputs.
pub struct EncoderInputs<'a> {
    /// rows × D_c
    pub content: &'a Mat,
    /// rows × 3, see [`pitch_features`]
    pub pitch: &'a Mat,
    pub segs: &'a Segments,
}

/// The three encoders plus the reconstruction head.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    pub content_dim: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
    pub mel_bins: usize,
}

impl SpeechEncoder {
    fn wavenet(&self, layers: usize) -> WaveNetConfig {
        WaveNetConfig {
            hidden: self.cfg.wavenet_hidden,
            kernel: self.cfg.wavenet_kernel,
            layers,
            dilation_cycle: self.cfg.dilation_cycle,
            cond_dim: self.speaker_dim,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let h = c.wavenet_hidden;
        let mut s = Vec::new();
        s.extend(nn::linear_specs("enc.content.in", self.content_dim, h, Init::FanIn));
        s.extend(self.wavenet(c.content_layers).specs("enc.content.wn"));
        s.extend(nn::linear_specs("enc.content.out", h, self.latent_dim, Init::FanIn));

        s.push(ParamSpec::new("enc.pitch.embed.w", (3, h), Init::Normal(1.0)));
        s.extend(nn::conv_specs("enc.pitch.down", h, c.bottleneck_channels, 3));
        s.extend(nn::linear_specs("enc.pitch.in", c.bottleneck_channels, h, Init::FanIn));
        s.extend(self.wavenet(c.pitch_layers).specs("enc.pitch.wn"));
        s.extend(nn::linear_specs("enc.pitch.out", h, self.latent_dim, Init::FanIn));

        let hs = c.speaker_hidden;
        s.extend(nn::linear_specs("enc.speaker.stem0", self.mel_bins, hs, Init::FanIn));
        s.extend(nn::linear_specs("enc.speaker.stem1", hs, hs, Init::FanIn));
        s.extend(nn::conv_specs("enc.speaker.glu", hs, 2 * hs, c.speaker_kernel));
        s.extend(nn::attention_specs("enc.speaker.attn", hs));
        s.extend(nn::linear_specs("enc.speaker.out", hs, self.speaker_dim, Init::FanIn));

        s.extend(nn::linear_specs("enc.recon", self.latent_dim, self.mel_bins, Init::FanIn));
        s
    }

    /// Content latent: rows × D_z.
    pub fn content_graph(&self, g: &mut Graph, p: &ParamStore, feats: Var, spk: Var, segs: &Segments) -> Var {
        let x = nn::linear(g, p, "enc.content.in", feats);
        let h = self.wavenet(self.cfg.content_layers).forward(g, p, "enc.content.wn", x, spk, segs);
        nn::linear(g, p, "enc.content.out", h)
    }

    /// Input layer of the pitch path: embedding of the rows × 3 pitch
    /// features (rows × hidden).
    pub fn pitch_embedding(&self, g: &mut Graph, p: &ParamStore, pitch: Var) -> Var {
        let w = g.param(p, "enc.pitch.embed.w");
        g.matmul(pitch, w)
    }

    /// Pitch latent: embedding → stride-2 bottleneck → nearest upsample →
    /// WaveNet → rows × D_z.
    pub fn pitch_graph(&self, g: &mut Graph, p: &ParamStore, pitch: Var, spk: Var, segs: &Segments) -> Var {
        let e = self.pitch_embedding(g, p, pitch);
        self.pitch_from_embedding(g, p, e, spk, segs)
    }

    pub fn pitch_from_embedding(&self, g: &mut Graph, p: &ParamStore, e: Var, spk: Var, segs: &Segments) -> Var {
        let (down_taps, up_index) = bottleneck_tables(segs);
        let cols = g.gather(e, down_taps);
        let down = nn::linear(g, p, "enc.pitch.down", cols);
        let up = g.gather_rows(down, up_index);
        let x = nn::linear(g, p, "enc.pitch.in", up);
        let h = self.wavenet(self.cfg.pitch_layers).forward(g, p, "enc.pitch.wn", x, spk, segs);
        nn::linear(g, p, "enc.pitch.out", h)
    }

    /// Convolutional front of the speaker encoder (rows × hidden).
    pub fn speaker_features(&self, g: &mut Graph, p: &ParamStore, mel: Var, segs: &Segments) -> Var {
        let x = nn::linear(g, p, "enc.speaker.stem0", mel);
        let x = g.silu(x);
        let x = nn::linear(g, p, "enc.speaker.stem1", x);
        let x = g.silu(x);
        let hs = self.cfg.speaker_hidden;
        let y = nn::conv1d(g, p, "enc.speaker.glu", x, segs, self.cfg.speaker_kernel, 1);
        let a = g.slice_cols(y, 0, hs);
        let b = g.slice_cols(y, hs, 2 * hs);
        let b = g.sigmoid(b);
        let glu = g.mul(a, b);
        g.add(x, glu)
    }

    /// Attention, output projection, and temporal mean pooling: one row per
    /// segment. Contains no positional information, so it is invariant to
    /// frame order within a segment.
    pub fn speaker_pool(&self, g: &mut Graph, p: &ParamStore, h: Var, segs: &Segments) -> Var {
        let att = nn::self_attention(g, p, "enc.speaker.attn", h, segs, self.cfg.speaker_heads, false);
        let x = g.add(h, att);
        let out = nn::linear(g, p, "enc.speaker.out", x);
        g.mean_rows(out, segs)
    }

    /// Speaker embeddings (segments × D_s) of normalized mel rows.
    pub fn speaker_graph(&self, g: &mut Graph, p: &ParamStore, mel: Var, segs: &Segments) -> Var {
        let h = self.speaker_features(g, p, mel, segs);
        self.speaker_pool(g, p, h, segs)
    }

    /// ẑ = E_cont(content, spk) + E_F0(pitch, spk) for every segment.
    pub fn fuse_graph(&self, g: &mut Graph, p: &ParamStore, inputs: &EncoderInputs<'_>, content: Var, pitch: Var, spk: Var) -> Var {
        let c = self.content_graph(g, p, content, spk, inputs.segs);
        let f = self.pitch_graph(g, p, pitch, spk, inputs.segs);
        g.add(c, f)
    }

    /// Returns `(ẑ, ẑ_mix)`. Flagged items are re-encoded with the speaker
    /// row of their permutation partner; the rest reuse ẑ unchanged.
    pub fn mixup_graph(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        inputs: &EncoderInputs<'_>,
        spk: Var,
        plan: &MixupPlan,
    ) -> Result<(Var, Var)> {
        let segs = inputs.segs;
        if plan.len() != segs.len() || g.shape(spk).0 != segs.len() {
            return Err(Error::invalid(format!(
                "mixup plan covers {} items, batch has {} segments and {} speaker rows",
                plan.len(),
                segs.len(),
                g.shape(spk).0
            )));
        }
        let content = g.constant(inputs.content.clone());
        let pitch = g.constant(inputs.pitch.clone());
        let z = self.fuse_graph(g, p, inputs, content, pitch, spk);
        let flagged: Vec<usize> = (0..plan.len()).filter(|&i| plan.apply[i]).collect();
        if flagged.is_empty() {
            return Ok((z, z));
        }
        let all: Vec<(usize, usize)> = segs.iter().collect();
        let sub_lengths: Vec<usize> = flagged.iter().map(|&i| all[i].1).collect();
        let sub_segs = Segments::from_lengths(&sub_lengths);
        let rows: Vec<usize> = flagged.iter().flat_map(|&i| all[i].0..all[i].0 + all[i].1).collect();
        let sub_content = inputs.content.select(ndarray::Axis(0), &rows);
        let sub_pitch = inputs.pitch.select(ndarray::Axis(0), &rows);
        let sub_content = g.constant(sub_content);
        let sub_pitch = g.constant(sub_pitch);
        let partner = flagged.iter().map(|&i| Some(plan.permutation[i])).collect();
        let sub_spk = g.gather_rows(spk, partner);
        let sub_inputs = EncoderInputs { content: inputs.content, pitch: inputs.pitch, segs: &sub_segs };
        let z_sub = self.fuse_graph(g, p, &sub_inputs, sub_content, sub_pitch, sub_spk);

        // rows of [z; z_sub] making up ẑ_mix
        let total = segs.total_rows();
        let mut index = Vec::with_capacity(total);
        let mut sub_offset = total;
        for (i, &(start, len)) in all.iter().enumerate() {
            if plan.apply[i] {
                index.extend((sub_offset..sub_offset + len).map(Some));
                sub_offset += len;
            } else {
                index.extend((start..start + len).map(Some));
            }
        }
        let stacked = g.concat_rows(&[z, z_sub]);
        let z_mix = g.gather_rows(stacked, index);
        Ok((z, z_mix))
    }

    pub fn recon_graph(&self, g: &mut Graph, p: &ParamStore, z: Var) -> Var {
        nn::linear(g, p, "enc.recon", z)
    }

    fn check_spk(&self, spk: &SpeakerEmbedding) -> Result<()> {
        if spk.dim() != self.speaker_dim || spk.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("speaker embedding must be {} finite values", self.speaker_dim)));
        }
        Ok(())
    }

    pub fn content_encode(&self, p: &ParamStore, feats: &ContentFeatures, spk: &SpeakerEmbedding) -> Result<FactorizedLatent> {
        self.check_spk(spk)?;
        if feats.values.ncols() != self.content_dim {
            return Err(Error::invalid(format!(
                "content features have {} channels, encoder expects {}",
                feats.values.ncols(),
                self.content_dim
            )));
        }
        if feats.values.nrows() == 0 {
            return Err(Error::invalid("content features are empty"));
        }
        let mut g = Graph::inference();
        let segs = Segments::single(feats.values.nrows());
        let x = g.constant(feats.values.clone());
        let s = g.constant(spk.row());
        let z = self.content_graph(&mut g, p, x, s, &segs);
        Ok(FactorizedLatent { values: g.value(z).clone() })
    }

    pub fn pitch_encode(&self, p: &ParamStore, f0: &PitchContour, spk: &SpeakerEmbedding) -> Result<FactorizedLatent> {
        self.check_spk(spk)?;
        if f0.is_empty() {
            return Err(Error::invalid("pitch contour is empty"));
        }
        let feats = pitch_features(&log_f0_input(f0)?);
        let mut g = Graph::inference();
        let segs = Segments::single(f0.len());
        let x = g.constant(feats);
        let s = g.constant(spk.row());
        let z = self.pitch_graph(&mut g, p, x, s, &segs);
        Ok(FactorizedLatent { values: g.value(z).clone() })
    }

    /// Speaker embedding of an already normalized mel (frames × bins).
    pub fn speaker_encode(&self, p: &ParamStore, mel: &Mat) -> Result<SpeakerEmbedding> {
        if mel.nrows() == 0 || mel.ncols() != self.mel_bins {
            return Err(Error::invalid(format!("speaker encoder needs ≥1 frame of {} bins", self.mel_bins)));
        }
        let mut g = Graph::inference();
        let segs = Segments::single(mel.nrows());
        let x = g.constant(mel.clone());
        let e = self.speaker_graph(&mut g, p, x, &segs);
        Ok(SpeakerEmbedding { values: g.value(e).row(0).to_owned() })
    }

    /// Array-level mixup over a batch. Returns `(ẑ, ẑ_mix)` per item.
    pub fn latent_mixup(
        &self,
        p: &ParamStore,
        feats: &[ContentFeatures],
        f0: &[PitchContour],
        spk: &[SpeakerEmbedding],
        plan: &MixupPlan,
    ) -> Result<(Vec<FactorizedLatent>, Vec<FactorizedLatent>)> {
        let b = feats.len();
        if f0.len() != b || spk.len() != b || plan.len() != b {
            return Err(Error::invalid("inconsistent batch sizes for mixup"));
        }
        let mut lengths = Vec::with_capacity(b);
        for (fe, pc) in feats.iter().zip(f0) {
            if fe.values.nrows() != pc.len() {
                return Err(Error::invalid("content and F0 are not frame-aligned"));
            }
            lengths.push(pc.len());
        }
        for s in spk {
            self.check_spk(s)?;
        }
        let segs = Segments::from_lengths(&lengths);
        let views: Vec<_> = feats.iter().map(|f| f.values.view()).collect();
        let content = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        let mut pitch_rows = Vec::new();
        for pc in f0 {
            pitch_rows.extend(log_f0_input(pc)?);
        }
        let pitch = pitch_features(&pitch_rows);
        let spk_rows = Mat::from_shape_fn((b, self.speaker_dim), |(i, j)| spk[i].values[j]);
        let mut g = Graph::inference();
        let s = g.constant(spk_rows);
        let inputs = EncoderInputs { content: &content, pitch: &pitch, segs: &segs };
        let (z, z_mix) = self.mixup_graph(&mut g, p, &inputs, s, plan)?;
        let split = |v: &Mat| {
            segs.iter()
                .map(|(start, len)| FactorizedLatent { values: v.slice(ndarray::s![start..start + len, ..]).to_owned() })
                .collect::<Vec<_>>()
        };
        Ok((split(g.value(z)), split(g.value(z_mix))))
    }
}

/// Gather tables for the stride-2, kernel-3 down-convolution and the
/// nearest-neighbour upsample back to full rate, per segment.
fn bottleneck_tables(segs: &Segments) -> (Vec<Vec<Option<usize>>>, Vec<Option<usize>>) {
    let mut taps = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut up = Vec::with_capacity(segs.total_rows());
    let mut down_offset = 0;
    for (start, len) in segs.iter() {
        let down_len = len.div_ceil(2);
        for o in 0..down_len {
            let center = 2 * o as isize;
            for (j, tap) in taps.iter_mut().enumerate() {
                let src = center + j as isize - 1;
                tap.push((src >= 0 && src < len as isize).then(|| start + src as usize));
            }
        }
        up.extend((0..len).map(|i| Some(down_offset + i / 2)));
        down_offset += down_len;
    }
    (taps, up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> SpeechEncoder {
        SpeechEncoder {
            cfg: EncoderConfig {
                wavenet_hidden: 8,
                wavenet_kernel: 3,
                content_layers: 2,
                pitch_layers: 2,
                dilation_cycle: 2,
                bottleneck_channels: 4,
                speaker_hidden: 8,
                speaker_heads: 2,
                speaker_kernel: 3,
            },
            content_dim: 6,
            latent_dim: 5,
            speaker_dim: 4,
            mel_bins: 80,
        }
    }

    fn params(enc: &SpeechEncoder) -> ParamStore {
        let mut p = ParamStore::initialize(&enc.specs(), 1);
        p.jitter(0.1, 2);
        p
    }

    fn spk(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding { values: Array1::from(v.to_vec()) }
    }

    fn contour(f: &[f64]) -> PitchContour {
        PitchContour { f0_hz: f.to_vec() }
    }

    #[test]
    fn fuse_laws() {
        let a = FactorizedLatent { values: array![[1.0, 2.0]] };
        let b = FactorizedLatent { values: array![[3.0, 4.0]] };
        let zero = FactorizedLatent { values: Mat::zeros((1, 2)) };
        assert_eq!(fuse(&a, &b).unwrap().values, array![[4.0, 6.0]]);
        assert_eq!(fuse(&a, &b).unwrap(), fuse(&b, &a).unwrap());
        assert_eq!(fuse(&a, &zero).unwrap(), a);
        let c = FactorizedLatent { values: Mat::zeros((2, 2)) };
        assert!(fuse(&a, &c).is_err());
    }

    #[test]
    fn content_shape_and_conditioning() {
        let enc = encoder();
        let p = params(&enc);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = ContentFeatures { values: crate::cfm::sample_noise(50, 6, &mut rng) };
        let a = enc.content_encode(&p, &feats, &spk(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let b = enc.content_encode(&p, &feats, &spk(&[0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(a.values.dim(), (50, 5));
        assert_ne!(a, b);
        let bad = ContentFeatures { values: Mat::zeros((50, 7)) };
        assert!(enc.content_encode(&p, &bad, &spk(&[0.0; 4])).is_err());
        assert!(enc.content_encode(&p, &feats, &spk(&[0.0; 3])).is_err());
    }

    #[test]
    fn zero_weight_content_encoder_reduces_to_bias_path() {
        // one-layer encoder with every input-side weight zeroed
        let mut enc = encoder();
        enc.cfg.content_layers = 1;
        let mut p = params(&enc);
        for name in ["enc.content.in.w", "enc.content.wn.in.0.w", "enc.content.wn.cond.w"] {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let feats = ContentFeatures { values: Mat::from_elem((7, 6), 0.3) };
        let z = enc.content_encode(&p, &feats, &spk(&[0.5, -1.0, 2.0, 0.1])).unwrap();

        // oracle: tanh/sigmoid gate of the biases, then res-skip and output layers
        let h = 8;
        let conv_b = p.get("enc.content.wn.in.0.b").unwrap();
        let cond_b = p.get("enc.content.wn.cond.b").unwrap();
        let acts: Vec<f64> = (0..h)
            .map(|c| {
                let a = conv_b[[0, c]] + cond_b[[0, c]];
                let b = conv_b[[0, h + c]] + cond_b[[0, h + c]];
                a.tanh() * (1.0 / (1.0 + (-b).exp()))
            })
            .collect();
        let rs_w = p.get("enc.content.wn.res_skip.0.w").unwrap();
        let rs_b = p.get("enc.content.wn.res_skip.0.b").unwrap();
        let skip: Vec<f64> = (0..h).map(|o| rs_b[[0, o]] + (0..h).map(|i| acts[i] * rs_w[[i, o]]).sum::<f64>()).collect();
        let out_w = p.get("enc.content.out.w").unwrap();
        let out_b = p.get("enc.content.out.b").unwrap();
        let expected: Vec<f64> = (0..5).map(|o| out_b[[0, o]] + (0..h).map(|i| skip[i] * out_w[[i, o]]).sum::<f64>()).collect();
        for row in z.values.outer_iter() {
            for (a, b) in row.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pitch_log_law_and_shape() {
        let f = contour(&[0.0, 110.0, 220.0, 0.0, 330.0]);
        let doubled = contour(&[0.0, 220.0, 440.0, 0.0, 660.0]);
        let a = log_f0_input(&f).unwrap();
        let b = log_f0_input(&doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            if *x == 0.0 {
                assert_eq!(*y, 0.0);
            } else {
                assert!((y - x - 2f64.ln()).abs() < 1e-12);
            }
        }
        assert!(log_f0_input(&contour(&[100.0, -1.0])).is_err());

        let enc = encoder();
        let p = params(&enc);
        let z = enc.pitch_encode(&p, &contour(&vec![150.0; 50]), &spk(&[0.1; 4])).unwrap();
        assert_eq!(z.values.dim(), (50, 5));
        let odd = enc.pitch_encode(&p, &contour(&[150.0; 7]), &spk(&[0.1; 4])).unwrap();
        assert_eq!(odd.frames(), 7);
        assert!(enc.pitch_encode(&p, &contour(&[100.0, -3.0]), &spk(&[0.1; 4])).is_err());
    }

    #[test]
    fn unvoiced_contour_uses_the_unvoiced_embedding() {
        let enc = encoder();
        let p = params(&enc);
        let s = spk(&[0.3, -0.2, 0.1, 0.0]);
        let z = enc.pitch_encode(&p, &contour(&[0.0; 9]), &s).unwrap();
        // feed the learned unvoiced row straight into the bottleneck path
        let mut g = Graph::inference();
        let segs = Segments::single(9);
        let w = p.get("enc.pitch.embed.w").unwrap();
        let uv = Mat::from_shape_fn((9, 8), |(_, j)| w[[2, j]]);
        let e = g.constant(uv);
        let sv = g.constant(s.row());
        let out = enc.pitch_from_embedding(&mut g, &p, e, sv, &segs);
        assert_eq!(g.value(out), &z.values);
    }

    #[test]
    fn speaker_pool_is_order_invariant() {
        let enc = encoder();
        let p = params(&enc);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = crate::cfm::sample_noise(12, 8, &mut rng);
        let mut order: Vec<usize> = (0..12).collect();
        order.reverse();
        order.swap(0, 5);
        let permuted = h.select(ndarray::Axis(0), &order);
        let segs = Segments::single(12);
        let mut g = Graph::inference();
        let a = g.constant(h);
        let b = g.constant(permuted);
        let pa = enc.speaker_pool(&mut g, &p, a, &segs);
        let pb = enc.speaker_pool(&mut g, &p, b, &segs);
        for (x, y) in g.value(pa).iter().zip(g.value(pb).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mel = crate::cfm::sample_noise(20, 80, &mut rng);
        assert_eq!(enc.speaker_encode(&p, &mel).unwrap().dim(), 4);
    }

    fn batch(enc: &SpeechEncoder) -> (Vec<ContentFeatures>, Vec<PitchContour>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = vec![
            ContentFeatures { values: crate::cfm::sample_noise(6, enc.content_dim, &mut rng) },
            ContentFeatures { values: crate::cfm::sample_noise(9, enc.content_dim, &mut rng) },
        ];
        let f0 = vec![contour(&[120.0, 0.0, 130.0, 140.0, 0.0, 150.0]), contour(&[200.0; 9])];
        (feats, f0)
    }

    #[test]
    fn mixup_identity_and_noop() {
        let enc = encoder();
        let p = params(&enc);
        let (feats, f0) = batch(&enc);
        let spks = vec![spk(&[1.0, 0.0, 0.0, 0.0]), spk(&[0.0, 1.0, 0.0, 0.0])];
        let ident = MixupPlan::new(vec![0, 1], vec![true, true]).unwrap();
        let (z, zm) = enc.latent_mixup(&p, &feats, &f0, &spks, &ident).unwrap();
        assert_eq!(z, zm);
        let off = MixupPlan::new(vec![1, 0], vec![false, false]).unwrap();
        let (z2, zm2) = enc.latent_mixup(&p, &feats, &f0, &spks, &off).unwrap();
        assert_eq!(z2, zm2);
        assert_eq!(z, z2);
    }

    #[test]
    fn mixup_swaps_speaker_condition() {
        let enc = encoder();
        let p = params(&enc);
        let (feats, f0) = batch(&enc);
        let spks = vec![spk(&[1.0, 0.0, 0.0, 0.0]), spk(&[0.0, 1.0, 0.0, 0.0])];
        let plan = MixupPlan::new(vec![1, 0], vec![true, false]).unwrap();
        let (z, zm) = enc.latent_mixup(&p, &feats, &f0, &spks, &plan).unwrap();
        // item 0 re-encoded under item 1's speaker vector
        let c = enc.content_encode(&p, &feats[0], &spks[1]).unwrap();
        let f = enc.pitch_encode(&p, &f0[0], &spks[1]).unwrap();
        let expected = fuse(&c, &f).unwrap();
        for (a, b) in zm[0].values.iter().zip(expected.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(zm[0], z[0]);
        assert_eq!(zm[1], z[1]);
    }

    #[test]
    fn plan_validation_and_rate() {
        assert!(MixupPlan::new(vec![0, 0], vec![true, true]).is_err());
        assert!(MixupPlan::new(vec![0, 2], vec![true, true]).is_err());
        assert!(MixupPlan::new(vec![1, 0], vec![true]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut flagged = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let plan = MixupPlan::sample(7, 0.5, &mut rng);
            assert!(MixupPlan::new(plan.permutation().to_vec(), plan.apply_flags().to_vec()).is_ok());
            assert!(plan.permutation().iter().enumerate().all(|(i, &p)| p != i));
            flagged += plan.flag_rate();
        }
        let mean = flagged / n as f64;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn bottleneck_tables_respect_segments() {
        let segs = Segments::from_lengths(&[3, 2]);
        let (taps, up) = bottleneck_tables(&segs);
        assert_eq!(taps[0], vec![None, Some(1), None]);
        assert_eq!(taps[1], vec![Some(0), Some(2), Some(3)]);
        assert_eq!(taps[2], vec![Some(1), None, Some(4)]);
        assert_eq!(up, vec![Some(0), Some(0), Some(1), Some(2), Some(2)]);
    }
}
