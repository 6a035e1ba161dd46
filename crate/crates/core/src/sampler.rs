//! Inference: assemble the infilling condition from a source utterance and a
//! target voice prompt, then integrate the vector field with fixed-step Euler.

use ndarray::{concatenate, s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, reconstruct_waveform, AudioClip, AutocorrelationPitch, MelConfig, MelSpectrogram, PitchContour, PitchExtractor, F0_MAX_HZ, F0_MIN_HZ};
use crate::autograd::Mat;
use crate::cfm::{sample_noise, FlowTime, MaskIndicator};
use crate::error::{Error, Result};
use crate::factorize::{fuse, ContentProvider, FactorizedLatent, PerturbedMelProvider, SpeakerEmbedding};
use crate::model::Model;
use crate::params::ParamStore;

pub const MIN_PROMPT_SECS: f64 = 0.5;
pub const MAX_STEPS: usize = 1000;
pub const DEMO_PHASE_ITERATIONS: usize = 60;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default)]
    pub solver: Solver,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Result<Self> {
        let cfg = Self { steps, solver: Solver::Euler, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STEPS).contains(&self.steps) {
            return Err(Error::invalid(format!("steps must be in 1..={MAX_STEPS}, got {}", self.steps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConversionRequest {
    pub source: AudioClip,
    /// Voice prompt of the target speaker.
    pub target: AudioClip,
    pub sampler: SamplerConfig,
}

/// Everything the vector field sees apart from `x_t` and `t`.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    /// Standardized target mel in the prompt region, zeros elsewhere.
    pub prompt: Mat,
    pub z: Mat,
    pub e_spk: Array1<f64>,
    pub mask: MaskIndicator,
    /// Prompt-region log-mel before standardization.
    pub prompt_mel: Mat,
}

impl ConditionBundle {
    pub fn frames(&self) -> usize {
        self.prompt.nrows()
    }

    pub fn prompt_frames(&self) -> usize {
        self.mask.run().0
    }
}

/// Fixed-step Euler from `x0` over the grid `t_k = k/steps`. Prompt-region
/// rows of the result are replaced by the prompt values.
pub fn euler_solve<F>(mut field: F, x0: &Mat, bundle: &ConditionBundle, steps: usize) -> Result<Mat>
where
    F: FnMut(&Mat, FlowTime) -> Result<Mat>,
{
    if steps == 0 {
        return Err(Error::invalid("steps must be ≥ 1"));
    }
    if x0.dim() != bundle.prompt.dim() {
        return Err(Error::invalid(format!("x0 shape {:?} does not match condition {:?}", x0.dim(), bundle.prompt.dim())));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = FlowTime::new(k as f64 / steps as f64)?;
        let v = field(&x, t)?;
        if v.dim() != x.dim() {
            return Err(Error::invalid(format!("field returned shape {:?}, expected {:?}", v.dim(), x.dim())));
        }
        if let Some(bad) = v.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                stage: "euler".into(),
                detail: format!("step {k}: field value #{bad} is {}", v.iter().nth(bad).unwrap()),
            });
        }
        x.scaled_add(dt, &v);
    }
    let p = bundle.prompt_frames();
    x.slice_mut(s![..p, ..]).assign(&bundle.prompt.slice(s![..p, ..]));
    Ok(x)
}

/// Maps voiced source log-F0 onto the target's voiced log-F0 mean and
/// spread. Contours without voiced frames pass through unchanged.
pub fn transpose_f0(source: &PitchContour, target: &PitchContour) -> PitchContour {
    let stats = |c: &PitchContour| {
        let l: Vec<f64> = c.voiced().map(f64::ln).collect();
        if l.is_empty() {
            return None;
        }
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l.len() as f64;
        Some((mean, var.sqrt()))
    };
    let (Some((ms, ss)), Some((mt, st))) = (stats(source), stats(target)) else {
        return source.clone();
    };
    let gain = if ss > 1e-6 && st > 1e-6 { st / ss } else { 1.0 };
    let f0_hz = source
        .f0_hz
        .iter()
        .map(|&f| if f > 0.0 { ((f.ln() - ms) * gain + mt).exp().clamp(F0_MIN_HZ, F0_MAX_HZ) } else { 0.0 })
        .collect();
    PitchContour { f0_hz }
}

/// Result of one conversion.
#[derive(Clone, Debug)]
pub struct Conversion {
    /// Converted utterance (source frame count), log-mel scale.
    pub mel: MelSpectrogram,
    /// Prompt followed by the converted region, log-mel scale.
    pub full: Mat,
}

/// Holds a trained model and the fixed analysis front end.
pub struct Converter<'a> {
    model: &'a Model,
    params: &'a ParamStore,
    mel_cfg: MelConfig,
    content: Box<dyn ContentProvider + 'a>,
    pitch: Box<dyn PitchExtractor + 'a>,
}

impl<'a> Converter<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore, mel_cfg: MelConfig) -> Result<Self> {
        model.check_params(params)?;
        mel_cfg.validate()?;
        if mel_cfg.n_mels != model.cfg.mel_bins {
            return Err(Error::Config(format!("model expects {} mel bins, analysis gives {}", model.cfg.mel_bins, mel_cfg.n_mels)));
        }
        let content = Box::new(PerturbedMelProvider::new(model.cfg.content_dim, model.cfg.content_seed, mel_cfg));
        Ok(Self { model, params, mel_cfg, content, pitch: Box::new(AutocorrelationPitch::default()) })
    }

    pub fn with_content_provider(mut self, provider: Box<dyn ContentProvider + 'a>) -> Result<Self> {
        if provider.dim() != self.model.cfg.content_dim {
            return Err(Error::Config(format!("content provider yields {} channels, model expects {}", provider.dim(), self.model.cfg.content_dim)));
        }
        self.content = provider;
        Ok(self)
    }

    pub fn with_pitch_extractor(mut self, extractor: Box<dyn PitchExtractor + 'a>) -> Self {
        self.pitch = extractor;
        self
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel_cfg
    }

    /// Speaker embedding of a clip in the model's own space.
    pub fn embed(&self, clip: &AudioClip) -> Result<SpeakerEmbedding> {
        let mel = compute_mel(clip, &self.mel_cfg)?;
        self.embed_mel(&mel.values)
    }

    /// Speaker embedding of a log-mel matrix.
    pub fn embed_mel(&self, mel: &Mat) -> Result<SpeakerEmbedding> {
        self.model.encoder.speaker_encode(self.params, &self.model.normalize_mel(mel))
    }

    fn latent(&self, clip: &AudioClip, f0: &PitchContour, spk: &SpeakerEmbedding) -> Result<FactorizedLatent> {
        let feats = self.content.features(clip)?;
        let c = self.model.encoder.content_encode(self.params, &feats, spk)?;
        let p = self.model.encoder.pitch_encode(self.params, f0, spk)?;
        fuse(&c, &p)
    }

    pub fn build_inference_condition(&self, req: &ConversionRequest) -> Result<ConditionBundle> {
        req.sampler.validate()?;
        if req.target.duration_secs() < MIN_PROMPT_SECS {
            return Err(Error::invalid(format!(
                "target prompt is {:.3} s, at least {MIN_PROMPT_SECS} s required",
                req.target.duration_secs()
            )));
        }
        let raw_target = compute_mel(&req.target, &self.mel_cfg)?.values;
        let target_mel = self.model.normalize_mel(&raw_target);
        let source_frames = crate::audio::frame_count(req.source.len(), self.mel_cfg.hop);
        let e_spk = self.model.encoder.speaker_encode(self.params, &target_mel)?;

        let target_f0 = self.pitch.extract(&req.target, &self.mel_cfg);
        let source_f0 = transpose_f0(&self.pitch.extract(&req.source, &self.mel_cfg), &target_f0);
        let z_prompt = self.latent(&req.target, &target_f0, &e_spk)?;
        let z_source = self.latent(&req.source, &source_f0, &e_spk)?;
        if z_source.frames() != source_frames || z_prompt.frames() != target_mel.nrows() {
            return Err(Error::invalid("analysis front end returned misaligned frames"));
        }

        let p = target_mel.nrows();
        let prompt_mel = raw_target;
        let prompt = concatenate![Axis(0), target_mel, Mat::zeros((source_frames, self.model.cfg.mel_bins))];
        let z = concatenate![Axis(0), z_prompt.values, z_source.values];
        Ok(ConditionBundle { prompt, z, e_spk: e_spk.values, mask: MaskIndicator::prefix_prompt(p, source_frames), prompt_mel })
    }

    /// Integrates from seeded noise and returns the converted region.
    pub fn convert(&self, req: &ConversionRequest) -> Result<Conversion> {
        let bundle = self.build_inference_condition(req)?;
        self.solve(&bundle, &req.sampler)
    }

    pub fn solve(&self, bundle: &ConditionBundle, sampler: &SamplerConfig) -> Result<Conversion> {
        sampler.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let x0 = sample_noise(bundle.frames(), self.model.cfg.mel_bins, &mut rng);
        let field = |x: &Mat, t: FlowTime| self.model.dit.vector_field(self.params, x, &bundle.prompt, &bundle.z, &bundle.e_spk, t);
        let x = euler_solve(field, &x0, bundle, sampler.steps)?;
        let mut full = self.model.denormalize_mel(&x);
        full.slice_mut(s![..bundle.prompt_frames(), ..]).assign(&bundle.prompt_mel);
        let converted = full.slice(s![bundle.prompt_frames().., ..]).to_owned();
        Ok(Conversion { mel: MelSpectrogram::new(converted, self.mel_cfg.hop, self.mel_cfg.sample_rate), full })
    }

    /// Listening-only waveform estimate of a converted mel.
    pub fn demo_waveform(&self, mel: &MelSpectrogram) -> Result<AudioClip> {
        reconstruct_waveform(mel, &self.mel_cfg, DEMO_PHASE_ITERATIONS, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn bundle(frames: usize, prompt: usize) -> ConditionBundle {
        let mut pr = Mat::zeros((frames, 3));
        pr.slice_mut(s![..prompt, ..]).fill(7.0);
        ConditionBundle {
            prompt: pr,
            z: Mat::zeros((frames, 2)),
            e_spk: Array1::zeros(2),
            mask: MaskIndicator::prefix_prompt(prompt, frames - prompt),
            prompt_mel: Mat::zeros((prompt, 3)),
        }
    }

    fn noise(frames: usize) -> Mat {
        sample_noise(frames, 3, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn null_field_returns_noise() {
        let b = bundle(6, 0);
        let x0 = noise(6);
        let x = euler_solve(|x, _| Ok(Mat::zeros(x.dim())), &x0, &b, 4).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn single_step_is_one_field_evaluation() {
        let b = bundle(6, 2);
        let x0 = noise(6);
        let field = |x: &Mat, t: FlowTime| Ok(x.mapv(|v| v.sin() + t.value()));
        let x = euler_solve(field, &x0, &b, 1).unwrap();
        let expected = &x0 + &x0.mapv(f64::sin);
        assert_eq!(x.slice(s![2.., ..]), expected.slice(s![2.., ..]));
        assert!(x.slice(s![..2, ..]).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn time_grid_is_k_over_steps() {
        let b = bundle(2, 0);
        let mut seen = Vec::new();
        euler_solve(
            |x, t| {
                seen.push(t.value());
                Ok(Mat::zeros(x.dim()))
            },
            &noise(2),
            &b,
            5,
        )
        .unwrap();
        assert_eq!(seen, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
    }

    #[test]
    fn non_finite_field_reports_step() {
        let b = bundle(2, 0);
        let err = euler_solve(
            |x, t| Ok(if t.value() >= 0.5 { Mat::from_elem(x.dim(), f64::NAN) } else { Mat::zeros(x.dim()) }),
            &noise(2),
            &b,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { ref detail, .. } if detail.starts_with("step 2")), "{err}");
        assert!(euler_solve(|x, _| Ok(Mat::zeros(x.dim())), &noise(2), &b, 0).is_err());
    }

    #[test]
    fn transposition_matches_target_statistics() {
        let src = PitchContour { f0_hz: vec![100.0, 0.0, 120.0, 110.0, 0.0] };
        let tgt = PitchContour { f0_hz: vec![240.0, 220.0, 0.0, 260.0] };
        let out = transpose_f0(&src, &tgt);
        assert_eq!(out.f0_hz[1], 0.0);
        assert_eq!(out.f0_hz[4], 0.0);
        let mean = |c: &PitchContour| {
            let l: Vec<f64> = c.voiced().map(f64::ln).collect();
            l.iter().sum::<f64>() / l.len() as f64
        };
        assert!((mean(&out) - mean(&tgt)).abs() < 1e-12);
        let silent = PitchContour { f0_hz: vec![0.0; 3] };
        assert_eq!(transpose_f0(&src, &silent), src);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::new(0, 0).is_err());
        assert!(SamplerConfig::new(1001, 0).is_err());
        assert!(SamplerConfig::new(6, 0).is_ok());
    }

    fn clip(secs: f64, freq: f64) -> AudioClip {
        let n = (secs * 16_000.0) as usize;
        AudioClip::new((0..n).map(|i| 0.3 * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin()).collect()).unwrap()
    }

    #[test]
    fn untrained_conversion_layout() {
        let mut cfg = ModelConfig::desk();
        cfg.dit.layers = 1;
        cfg.encoder.content_layers = 1;
        cfg.encoder.pitch_layers = 1;
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(0);
        let conv = Converter::new(&model, &params, MelConfig::default()).unwrap();
        let req = ConversionRequest { source: clip(2.0, 150.0), target: clip(1.0, 240.0), sampler: SamplerConfig::new(2, 3).unwrap() };
        let bundle = conv.build_inference_condition(&req).unwrap();
        assert_eq!(bundle.frames(), 150);
        assert_eq!(bundle.prompt_frames(), 50);
        assert_eq!(bundle.mask.masked_count(), 100);
        let out = conv.convert(&req).unwrap();
        assert_eq!(out.mel.frames(), 100);
        let target = compute_mel(&req.target, &MelConfig::default()).unwrap().values;
        assert_eq!(out.full.slice(s![..50, ..]), target.view());
        let again = conv.convert(&req).unwrap();
        assert_eq!(again.mel.values, out.mel.values);

        let short = ConversionRequest { target: clip(0.4, 240.0), ..req };
        assert!(conv.build_inference_condition(&short).is_err());
    }
}
