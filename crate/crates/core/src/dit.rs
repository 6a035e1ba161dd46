//! Diffusion-transformer vector field with adaptive layer-norm conditioning.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::cfm::FlowTime;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Init, ParamSpec, ParamStore};

pub const TIME_FREQUENCIES: usize = 256;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// How the speaker and time streams reach the blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningVariant {
    /// One projection of `s + t` drives every modulation.
    AdalnZero,
    /// Attention sub-block is modulated by the speaker stream only, the
    /// feed-forward sub-block by the time stream only.
    #[default]
    AdalnSep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub variant: ConditioningVariant,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiTConfig {
    pub fn base() -> Self {
        Self { layers: 12, hidden: 768, mlp: 3072, heads: 12, variant: ConditioningVariant::AdalnSep }
    }

    pub fn small() -> Self {
        Self { layers: 8, hidden: 384, mlp: 1536, heads: 8, variant: ConditioningVariant::AdalnSep }
    }

    pub fn desk() -> Self {
        Self { layers: 4, hidden: 128, mlp: 512, heads: 4, variant: ConditioningVariant::AdalnSep }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.mlp == 0 || self.heads == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) || !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden {} must split into {} heads of even width",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-item shift, scale and gate for one sub-block (each items × hidden).
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub alpha: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockModulation {
    pub attn: Modulation,
    pub ffn: Modulation,
}

/// `alpha ⊙ (gamma ⊙ LN(h) + beta)` with per-segment modulation rows.
pub fn adaln(g: &mut Graph, h: Var, m: &Modulation, segs: &Segments) -> Var {
    let inner = modulate(g, h, m, segs);
    let alpha = nn::broadcast_segments(g, m.alpha, segs);
    g.mul(alpha, inner)
}

fn modulate(g: &mut Graph, h: Var, m: &Modulation, segs: &Segments) -> Var {
    let n = g.layer_norm(h);
    let gamma = nn::broadcast_segments(g, m.gamma, segs);
    let beta = nn::broadcast_segments(g, m.beta, segs);
    let scaled = g.mul(n, gamma);
    g.add(scaled, beta)
}

/// Sinusoidal features of `1000·t` (items × 256): cosines then sines.
pub fn time_features(g: &mut Graph, t: Var) -> Var {
    let half = TIME_FREQUENCIES / 2;
    let freqs = Mat::from_shape_fn((1, half), |(_, i)| TIME_SCALE * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp());
    let freqs = g.constant(freqs);
    let args = g.matmul(t, freqs);
    let c = g.cos(args);
    let s = g.sin(args);
    g.concat_cols(&[c, s])
}

/// The vector-field network.
#[derive(Clone, Debug)]
pub struct DiT {
    pub cfg: DiTConfig,
    pub mel_bins: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
}

impl DiT {
    pub fn new(cfg: DiTConfig, mel_bins: usize, latent_dim: usize, speaker_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, mel_bins, latent_dim, speaker_dim })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let h = self.cfg.hidden;
        let mut s = Vec::new();
        s.extend(nn::linear_specs("dit.in", 2 * self.mel_bins + self.latent_dim, h, Init::FanIn));
        s.extend(nn::linear_specs("dit.time.0", TIME_FREQUENCIES, h, Init::FanIn));
        s.extend(nn::linear_specs("dit.time.1", h, h, Init::FanIn));
        s.extend(nn::linear_specs("dit.spk", self.speaker_dim, h, Init::FanIn));
        for l in 0..self.cfg.layers {
            match self.cfg.variant {
                ConditioningVariant::AdalnZero => {
                    s.extend(nn::linear_specs(&format!("dit.blocks.{l}.mod"), h, 6 * h, Init::Zeros));
                }
                ConditioningVariant::AdalnSep => {
                    s.extend(nn::linear_specs(&format!("dit.blocks.{l}.attn_mod"), h, 3 * h, Init::Zeros));
                    s.extend(nn::linear_specs(&format!("dit.blocks.{l}.ffn_mod"), h, 3 * h, Init::Zeros));
                }
            }
            s.extend(nn::attention_specs(&format!("dit.blocks.{l}.attn"), h));
            s.extend(nn::linear_specs(&format!("dit.blocks.{l}.ffn.0"), h, self.cfg.mlp, Init::FanIn));
            s.extend(nn::linear_specs(&format!("dit.blocks.{l}.ffn.1"), self.cfg.mlp, h, Init::FanIn));
        }
        s.extend(nn::linear_specs("dit.out", h, self.mel_bins, Init::Zeros));
        s
    }

    pub fn num_params(&self) -> usize {
        self.specs().iter().map(ParamSpec::numel).sum()
    }

    /// Time stream (items × hidden) from an items × 1 time column.
    pub fn time_stream(&self, g: &mut Graph, p: &ParamStore, t: Var) -> Var {
        let f = time_features(g, t);
        let x = nn::linear(g, p, "dit.time.0", f);
        let x = g.silu(x);
        nn::linear(g, p, "dit.time.1", x)
    }

    pub fn speaker_stream(&self, g: &mut Graph, p: &ParamStore, e_spk: Var) -> Var {
        nn::linear(g, p, "dit.spk", e_spk)
    }

    fn split(&self, g: &mut Graph, raw: Var, offset: usize) -> Modulation {
        let h = self.cfg.hidden;
        let alpha = g.slice_cols(raw, offset, offset + h);
        let gamma = g.slice_cols(raw, offset + h, offset + 2 * h);
        let gamma = g.add_const(gamma, 1.0);
        let beta = g.slice_cols(raw, offset + 2 * h, offset + 3 * h);
        Modulation { alpha, gamma, beta }
    }

    /// Modulations of block `layer` from the speaker and time streams.
    pub fn block_modulation(&self, g: &mut Graph, p: &ParamStore, layer: usize, s: Var, t: Var) -> BlockModulation {
        match self.cfg.variant {
            ConditioningVariant::AdalnZero => {
                let c = g.add(s, t);
                let c = g.silu(c);
                let raw = nn::linear(g, p, &format!("dit.blocks.{layer}.mod"), c);
                BlockModulation { attn: self.split(g, raw, 0), ffn: self.split(g, raw, 3 * self.cfg.hidden) }
            }
            ConditioningVariant::AdalnSep => {
                let cs = g.silu(s);
                let ct = g.silu(t);
                let ra = nn::linear(g, p, &format!("dit.blocks.{layer}.attn_mod"), cs);
                let rf = nn::linear(g, p, &format!("dit.blocks.{layer}.ffn_mod"), ct);
                BlockModulation { attn: self.split(g, ra, 0), ffn: self.split(g, rf, 0) }
            }
        }
    }

    pub fn block(&self, g: &mut Graph, p: &ParamStore, layer: usize, h: Var, m: &BlockModulation, segs: &Segments) -> Var {
        let x = modulate(g, h, &m.attn, segs);
        let att = nn::self_attention(g, p, &format!("dit.blocks.{layer}.attn"), x, segs, self.cfg.heads, true);
        let alpha = nn::broadcast_segments(g, m.attn.alpha, segs);
        let att = g.mul(alpha, att);
        let h = g.add(h, att);

        let x = modulate(g, h, &m.ffn, segs);
        let x = nn::linear(g, p, &format!("dit.blocks.{layer}.ffn.0"), x);
        let x = g.gelu(x);
        let x = nn::linear(g, p, &format!("dit.blocks.{layer}.ffn.1"), x);
        let alpha = nn::broadcast_segments(g, m.ffn.alpha, segs);
        let x = g.mul(alpha, x);
        g.add(h, x)
    }

    /// Predicted velocity (rows × bins). `x_t`, `prompt` and `z` are packed
    /// rows; `e_spk` and `t` have one row per segment.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x_t: Var,
        prompt: Var,
        z: Var,
        e_spk: Var,
        t: Var,
        segs: &Segments,
    ) -> Var {
        let x = g.concat_cols(&[x_t, prompt, z]);
        let mut h = nn::linear(g, p, "dit.in", x);
        let ts = self.time_stream(g, p, t);
        let ss = self.speaker_stream(g, p, e_spk);
        for l in 0..self.cfg.layers {
            let m = self.block_modulation(g, p, l, ss, ts);
            h = self.block(g, p, l, h, &m, segs);
        }
        let h = g.layer_norm(h);
        nn::linear(g, p, "dit.out", h)
    }

    /// Single-item convenience wrapper over [`DiT::forward`].
    pub fn vector_field(
        &self,
        p: &ParamStore,
        x_t: &Mat,
        prompt: &Mat,
        z: &Mat,
        e_spk: &Array1<f64>,
        t: FlowTime,
    ) -> Result<Mat> {
        let frames = x_t.nrows();
        if frames == 0
            || x_t.ncols() != self.mel_bins
            || prompt.dim() != (frames, self.mel_bins)
            || z.dim() != (frames, self.latent_dim)
            || e_spk.len() != self.speaker_dim
        {
            return Err(Error::invalid(format!(
                "vector field inputs have shapes {:?}, {:?}, {:?}, {}",
                x_t.dim(),
                prompt.dim(),
                z.dim(),
                e_spk.len()
            )));
        }
        let mut g = Graph::inference();
        let segs = Segments::single(frames);
        let xv = g.constant(x_t.clone());
        let pv = g.constant(prompt.clone());
        let zv = g.constant(z.clone());
        let sv = g.constant(e_spk.clone().insert_axis(ndarray::Axis(0)));
        let tv = g.constant(Mat::from_elem((1, 1), t.value()));
        let out = self.forward(&mut g, p, xv, pv, zv, sv, tv, &segs);
        Ok(g.value(out).clone())
    }
}

/// Time embedding of a single instant (1 × hidden).
pub fn time_embed(dit: &DiT, p: &ParamStore, t: FlowTime) -> Mat {
    let mut g = Graph::inference();
    let tv = g.constant(Mat::from_elem((1, 1), t.value()));
    let e = dit.time_stream(&mut g, p, tv);
    g.value(e).clone()
}
