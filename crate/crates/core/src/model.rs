//! Full model: encoders plus vector field, and the joint training objective.

use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::cfm::{self, FlowTime, LossNormalization, MaskIndicator, SigmaMin};
use crate::dit::{DiT, DiTConfig};
use crate::error::{Error, Result};
use crate::factorize::{EncoderConfig, EncoderInputs, MixupPlan, SpeechEncoder};
use crate::params::{ParamSpec, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub content_dim: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
    pub encoder: EncoderConfig,
    pub dit: DiTConfig,
    /// Seed of the fixed content-feature projection.
    pub content_seed: u64,
    /// Global log-mel statistics used to standardize the generative target.
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            mel_bins: 80,
            content_dim: 64,
            latent_dim: 128,
            speaker_dim: 128,
            encoder: EncoderConfig::default(),
            dit: DiTConfig::desk(),
            content_seed: 0x5eed,
            mel_mean: 0.0,
            mel_std: 1.0,
        }
    }

    /// Encoder widths used with the full-size transformer presets.
    pub fn full_scale(dit: DiTConfig) -> Self {
        Self {
            mel_bins: 80,
            content_dim: 1024,
            latent_dim: 256,
            speaker_dim: 256,
            encoder: EncoderConfig {
                wavenet_hidden: 256,
                wavenet_kernel: 5,
                content_layers: 8,
                pitch_layers: 8,
                dilation_cycle: 1,
                bottleneck_channels: 64,
                speaker_hidden: 256,
                speaker_heads: 2,
                speaker_kernel: 5,
            },
            dit,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        let e = &self.encoder;
        if [self.mel_bins, self.content_dim, self.latent_dim, self.speaker_dim].contains(&0)
            || [e.wavenet_hidden, e.content_layers, e.pitch_layers, e.bottleneck_channels, e.speaker_hidden].contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if e.wavenet_kernel.is_multiple_of(2) || e.speaker_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if e.speaker_heads == 0 || !e.speaker_hidden.is_multiple_of(e.speaker_heads) {
            return Err(Error::Config("speaker attention width must split evenly into heads".into()));
        }
        if self.mel_std.is_nan() || self.mel_std <= 0.0 || !self.mel_mean.is_finite() {
            return Err(Error::Config("mel statistics must be finite with positive spread".into()));
        }
        Ok(())
    }
}

/// Rows of every item laid end to end (padding already removed).
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub segs: Segments,
    /// Standardized log-mel, rows × bins.
    pub mel: Mat,
    pub content: Mat,
    /// Rows × 3 pitch features.
    pub pitch: Mat,
}

/// Random quantities of one training step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    pub plan: MixupPlan,
    pub times: Vec<FlowTime>,
    pub masks: Vec<MaskIndicator>,
    /// Packed x0, rows × bins.
    pub noise: Mat,
}

impl StepDraws {
    pub fn sample<R: Rng + ?Sized>(lengths: &[usize], bins: usize, mixup_rate: Option<f64>, rng: &mut R) -> Result<Self> {
        let b = lengths.len();
        let plan = match mixup_rate {
            Some(rate) if b >= 2 => MixupPlan::sample(b, rate, rng),
            _ => MixupPlan::identity(b),
        };
        let times = (0..b).map(|_| cfm::sample_time(rng)).collect();
        let masks = lengths.iter().map(|&n| cfm::sample_mask(n, rng)).collect::<Result<_>>()?;
        let noise = cfm::sample_noise(lengths.iter().sum(), bins, rng);
        Ok(Self { plan, times, masks, noise })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub sigma_min: SigmaMin,
    pub normalization: LossNormalization,
    pub recon_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { sigma_min: SigmaMin::default(), normalization: LossNormalization::default(), recon_weight: 1.0 }
    }
}

/// Graph of one evaluated objective.
pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub cfm: Var,
    pub rec: Var,
    pub u_pred: Var,
    /// Packed OT target, rows × bins.
    pub target: Mat,
    /// Packed mask weights, rows × bins.
    pub weights: Mat,
}

impl LossGraph {
    pub fn values(&self) -> (f64, f64, f64) {
        (self.graph.scalar(self.total), self.graph.scalar(self.cfm), self.graph.scalar(self.rec))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: SpeechEncoder,
    pub dit: DiT,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = SpeechEncoder {
            cfg: cfg.encoder,
            content_dim: cfg.content_dim,
            latent_dim: cfg.latent_dim,
            speaker_dim: cfg.speaker_dim,
            mel_bins: cfg.mel_bins,
        };
        let dit = DiT::new(cfg.dit, cfg.mel_bins, cfg.latent_dim, cfg.speaker_dim)?;
        Ok(Self { cfg, encoder, dit })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder.specs();
        s.extend(self.dit.specs());
        s
    }

    pub fn num_params(&self) -> usize {
        self.specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs(), seed)
    }

    /// Checks that `p` holds exactly this model's tensors.
    pub fn check_params(&self, p: &ParamStore) -> Result<()> {
        let specs = self.specs();
        if specs.len() != p.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.len(), p.len())));
        }
        for spec in specs {
            match p.get(&spec.name) {
                Some(v) if v.dim() == spec.shape => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!("{} has shape {:?}, expected {:?}", spec.name, v.dim(), spec.shape)))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {}", spec.name))),
            }
        }
        Ok(())
    }

    pub fn normalize_mel(&self, mel: &Mat) -> Mat {
        mel.mapv(|v| (v - self.cfg.mel_mean) / self.cfg.mel_std)
    }

    pub fn denormalize_mel(&self, mel: &Mat) -> Mat {
        mel.mapv(|v| v * self.cfg.mel_std + self.cfg.mel_mean)
    }

    /// Joint objective: masked CFM on the vector field conditioned on ẑ_mix,
    /// plus weighted L1 reconstruction of the mel from ẑ.
    pub fn loss_graph(&self, p: &ParamStore, batch: &PackedBatch, draws: &StepDraws, opts: &LossOptions, track: bool) -> Result<LossGraph> {
        let segs = &batch.segs;
        let rows = segs.total_rows();
        let bins = self.cfg.mel_bins;
        if batch.mel.dim() != (rows, bins) || draws.noise.dim() != (rows, bins) {
            return Err(Error::invalid("batch mel and noise must be rows × bins"));
        }
        if batch.content.dim() != (rows, self.cfg.content_dim) || batch.pitch.dim() != (rows, 3) {
            return Err(Error::invalid("batch content and pitch features are misaligned"));
        }
        if draws.times.len() != segs.len() || draws.masks.len() != segs.len() {
            return Err(Error::invalid("one time and mask per item required"));
        }

        let sigma = opts.sigma_min.value();
        let mut x_t = Mat::zeros((rows, bins));
        let mut prompt = Mat::zeros((rows, bins));
        let mut weights = Mat::zeros((rows, bins));
        let mut t_col = Mat::zeros((segs.len(), 1));
        for (i, (start, len)) in segs.iter().enumerate() {
            let mask = &draws.masks[i];
            if mask.frames() != len {
                return Err(Error::invalid(format!("mask {i} covers {} frames, item has {len}", mask.frames())));
            }
            let t = draws.times[i].value();
            t_col[[i, 0]] = t;
            for r in 0..len {
                let row = start + r;
                let masked = mask.is_masked(r);
                for c in 0..bins {
                    let x0 = draws.noise[[row, c]];
                    let x1 = batch.mel[[row, c]];
                    x_t[[row, c]] = (1.0 - (1.0 - sigma) * t) * x0 + t * x1;
                    if masked {
                        weights[[row, c]] = 1.0;
                    } else {
                        prompt[[row, c]] = x1;
                    }
                }
            }
        }
        let target = &batch.mel - &(&draws.noise * (1.0 - sigma));
        let masked_elems = weights.sum();
        let denom = match opts.normalization {
            LossNormalization::MaskedElements => masked_elems,
            LossNormalization::AllElements => (rows * bins) as f64,
        };
        if masked_elems == 0.0 {
            return Err(Error::invalid("no masked frames in batch"));
        }

        let mut g = if track { Graph::new() } else { Graph::inference() };
        let mel_var = g.constant(batch.mel.clone());
        let spk_h = self.encoder.speaker_features(&mut g, p, mel_var, segs);
        let spk = self.encoder.speaker_pool(&mut g, p, spk_h, segs);
        let inputs = EncoderInputs { content: &batch.content, pitch: &batch.pitch, segs };
        let (z, z_mix) = self.encoder.mixup_graph(&mut g, p, &inputs, spk, &draws.plan)?;

        let recon = self.encoder.recon_graph(&mut g, p, z);
        let diff = g.sub(recon, mel_var);
        let diff = g.abs(diff);
        let rec_sum = g.sum_all(diff);
        let rec = g.scale(rec_sum, 1.0 / (rows * bins) as f64);

        let xv = g.constant(x_t);
        let pv = g.constant(prompt);
        let tv = g.constant(t_col);
        let u_pred = self.dit.forward(&mut g, p, xv, pv, z_mix, spk, tv, segs);
        let cfm_loss = cfm::masked_mse_graph(&mut g, u_pred, target.clone(), weights.clone(), denom);
        let weighted_rec = g.scale(rec, opts.recon_weight);
        let total = g.add(cfm_loss, weighted_rec);
        Ok(LossGraph { graph: g, total, cfm: cfm_loss, rec, u_pred, target, weights })
    }
}

/// Packs `(mel, content, pitch)` item tensors, trimming each to `lengths`.
pub fn pack(items: &[(&Mat, &Mat, &Mat)], lengths: &[usize]) -> Result<PackedBatch> {
    if items.len() != lengths.len() || items.is_empty() {
        return Err(Error::invalid("pack needs one length per item"));
    }
    let trim = |m: &Mat, n: usize| -> Result<Mat> {
        if m.nrows() < n {
            return Err(Error::invalid(format!("item has {} rows, needs {n}", m.nrows())));
        }
        Ok(m.slice(s![..n, ..]).to_owned())
    };
    let mut mels = Vec::new();
    let mut contents = Vec::new();
    let mut pitches = Vec::new();
    for (&(mel, content, pitch), &n) in items.iter().zip(lengths) {
        if n == 0 {
            return Err(Error::invalid("empty item in batch"));
        }
        mels.push(trim(mel, n)?);
        contents.push(trim(content, n)?);
        pitches.push(trim(pitch, n)?);
    }
    let cat = |v: &[Mat]| {
        let views: Vec<_> = v.iter().map(|m| m.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
    };
    Ok(PackedBatch { segs: Segments::from_lengths(lengths), mel: cat(&mels)?, content: cat(&contents)?, pitch: cat(&pitches)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ConditioningVariant;
    use crate::factorize::pitch_features;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            mel_bins: 6,
            content_dim: 5,
            latent_dim: 4,
            speaker_dim: 4,
            encoder: EncoderConfig {
                wavenet_hidden: 4,
                wavenet_kernel: 3,
                content_layers: 1,
                pitch_layers: 1,
                dilation_cycle: 1,
                bottleneck_channels: 2,
                speaker_hidden: 4,
                speaker_heads: 2,
                speaker_kernel: 3,
            },
            dit: DiTConfig { layers: 1, hidden: 8, mlp: 12, heads: 2, variant: ConditioningVariant::AdalnSep },
            ..ModelConfig::desk()
        }
    }

    fn batch(cfg: &ModelConfig, lengths: &[usize], seed: u64) -> PackedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: usize = lengths.iter().sum();
        let f0: Vec<f64> = (0..rows).map(|i| if i % 4 == 3 { 0.0 } else { (120.0 + i as f64).ln() }).collect();
        PackedBatch {
            segs: Segments::from_lengths(lengths),
            mel: cfm::sample_noise(rows, cfg.mel_bins, &mut rng),
            content: cfm::sample_noise(rows, cfg.content_dim, &mut rng),
            pitch: pitch_features(&f0),
        }
    }

    #[test]
    fn presets_validate_and_count() {
        assert!(ModelConfig::desk().validate().is_ok());
        let base = Model::new(ModelConfig::full_scale(DiTConfig::base())).unwrap().num_params() as f64;
        let small = Model::new(ModelConfig::full_scale(DiTConfig::small())).unwrap().num_params() as f64;
        assert!((base / 155e6 - 1.0).abs() < 0.1, "base {base}");
        assert!((small / 38e6 - 1.0).abs() < 0.1, "small {small}");
        let mut bad = ModelConfig::desk();
        bad.encoder.wavenet_kernel = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn initial_loss_is_mean_square_target() {
        let cfg = tiny_config();
        let model = Model::new(cfg).unwrap();
        let p = model.init_params(3);
        let b = batch(&cfg, &[7, 5], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = StepDraws::sample(&[7, 5], cfg.mel_bins, Some(0.5), &mut rng).unwrap();
        let lg = model.loss_graph(&p, &b, &draws, &LossOptions::default(), false).unwrap();
        assert!(lg.graph.value(lg.u_pred).iter().all(|&v| v == 0.0));
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (start, len)) in b.segs.iter().enumerate() {
            for r in 0..len {
                if draws.masks[i].is_masked(r) {
                    for c in 0..cfg.mel_bins {
                        let u = b.mel[[start + r, c]] - (1.0 - 1e-4) * draws.noise[[start + r, c]];
                        num += u * u;
                        den += 1.0;
                    }
                }
            }
        }
        let (_, cfm_loss, _) = lg.values();
        assert!((cfm_loss - num / den).abs() <= 1e-12 * cfm_loss);
    }

    #[test]
    fn pack_trims_padding() {
        let a = Mat::ones((4, 2));
        let c = Mat::ones((4, 3));
        let p = Mat::ones((4, 3));
        let packed = pack(&[(&a, &c, &p), (&a, &c, &p)], &[4, 2]).unwrap();
        assert_eq!(packed.mel.nrows(), 6);
        assert_eq!(packed.segs.lengths(), vec![4, 2]);
        assert!(pack(&[(&a, &c, &p)], &[5]).is_err());
    }

    #[test]
    fn check_params_detects_mismatch() {
        let model = Model::new(tiny_config()).unwrap();
        let mut p = model.init_params(0);
        assert!(model.check_params(&p).is_ok());
        p.insert("dit.out.b", Mat::zeros((1, 3)));
        assert!(model.check_params(&p).is_err());
    }
}
