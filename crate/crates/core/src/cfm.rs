//! Optimal-transport conditional flow matching: probability path, target
//! field, infilling masks, and the masked regression loss.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const MASK_MIN_FRACTION: f64 = 0.7;
pub const MASK_MAX_FRACTION: f64 = 1.0;

/// Flow time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Residual noise scale of the path at `t = 1`, in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SigmaMin(f64);

impl SigmaMin {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::invalid(format!("sigma_min {sigma} outside (0, 1)")));
        }
        Ok(Self(sigma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for SigmaMin {
    fn default() -> Self {
        Self(DEFAULT_SIGMA_MIN)
    }
}

impl TryFrom<f64> for SigmaMin {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SigmaMin> for f64 {
    fn from(s: SigmaMin) -> f64 {
        s.0
    }
}

/// `t ~ U[0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> FlowTime {
    FlowTime(rng.gen::<f64>())
}

/// I.i.d. standard normal matrix.
pub fn sample_noise<R: Rng + ?Sized>(frames: usize, bins: usize, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((frames, bins), || rng.sample(StandardNormal))
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `φ_t = (1 − (1 − σ_min)·t)·x0 + t·x1`.
pub fn ot_path(x0: &Mat, x1: &Mat, t: FlowTime, sigma: SigmaMin) -> Result<Mat> {
    same_shape(x0, x1)?;
    let t = t.value();
    let a = 1.0 - (1.0 - sigma.value()) * t;
    let mut out = Mat::zeros(x0.raw_dim());
    Zip::from(&mut out).and(x0).and(x1).for_each(|o, &n, &d| *o = a * n + t * d);
    Ok(out)
}

/// `u = x1 − (1 − σ_min)·x0`, the (time-independent) path derivative.
pub fn ot_target(x0: &Mat, x1: &Mat, sigma: SigmaMin) -> Result<Mat> {
    same_shape(x0, x1)?;
    let k = 1.0 - sigma.value();
    let mut out = Mat::zeros(x0.raw_dim());
    Zip::from(&mut out).and(x0).and(x1).for_each(|o, &n, &d| *o = d - k * n);
    Ok(out)
}

/// Per-frame infilling mask: 1 = masked (predicted, in the loss), 0 = visible
/// prompt. Masked frames always form one contiguous run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskIndicator {
    frames: usize,
    start: usize,
    len: usize,
}

impl MaskIndicator {
    /// Run of `len` masked frames starting at `start`.
    pub fn from_run(frames: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > frames {
            return Err(Error::invalid(format!("mask run {start}+{len} exceeds {frames} frames")));
        }
        Ok(Self { frames, start, len })
    }

    /// Visible prefix of `prompt` frames followed by `masked` frames.
    pub fn prefix_prompt(prompt: usize, masked: usize) -> Self {
        Self { frames: prompt + masked, start: prompt, len: masked }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn run(&self) -> (usize, usize) {
        (self.start, self.len)
    }

    pub fn masked_count(&self) -> usize {
        self.len
    }

    pub fn masked_fraction(&self) -> f64 {
        self.len as f64 / self.frames as f64
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.len
    }

    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.frames).map(|i| self.is_masked(i) as u8).collect()
    }

    /// `frames × 1` column of 0/1, for broadcasting over bins.
    pub fn column(&self) -> Mat {
        Mat::from_shape_fn((self.frames, 1), |(i, _)| self.is_masked(i) as u8 as f64)
    }

    /// `frames × bins` 0/1 matrix.
    pub fn broadcast(&self, bins: usize) -> Mat {
        Mat::from_shape_fn((self.frames, bins), |(i, _)| self.is_masked(i) as u8 as f64)
    }
}

/// Masked fraction `r ~ U[0.7, 1.0]`, run length `round(r·frames)` (at
/// least one frame) at a uniform start that keeps the run inside the
/// sequence.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<MaskIndicator> {
    if frames == 0 {
        return Err(Error::invalid("mask needs at least one frame"));
    }
    let r: f64 = rng.gen_range(MASK_MIN_FRACTION..=MASK_MAX_FRACTION);
    let len = ((r * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.gen_range(0..=frames - len);
    MaskIndicator::from_run(frames, start, len)
}

/// How the masked squared error is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Mean over masked elements only.
    #[default]
    MaskedElements,
    /// Mean over all elements with unmasked entries zeroed.
    AllElements,
}

/// Squared error of `pred` against `target` over the masked frames.
pub fn masked_mse(pred: &Mat, target: &Mat, mask: &MaskIndicator, norm: LossNormalization) -> Result<f64> {
    same_shape(pred, target)?;
    if mask.frames() != pred.nrows() {
        return Err(Error::invalid(format!("mask has {} frames, prediction {}", mask.frames(), pred.nrows())));
    }
    if mask.masked_count() == 0 {
        return Err(Error::invalid("mask selects no frames"));
    }
    let (start, len) = mask.run();
    let mut sum = 0.0;
    for i in start..start + len {
        for (p, t) in pred.row(i).iter().zip(target.row(i)) {
            sum += (p - t) * (p - t);
        }
    }
    let denom = match norm {
        LossNormalization::MaskedElements => len * pred.ncols(),
        LossNormalization::AllElements => pred.len(),
    };
    Ok(sum / denom as f64)
}

/// Graph form of [`masked_mse`]; `weights` is a 0/1 matrix with the shape of
/// `pred` and `denom` the normalizer.
pub fn masked_mse_graph(g: &mut Graph, pred: Var, target: Mat, weights: Mat, denom: f64) -> Var {
    let target = g.constant(target);
    let weights = g.constant(weights);
    let diff = g.sub(pred, target);
    let diff = g.mul(diff, weights);
    let sq = g.mul(diff, diff);
    let sum = g.sum_all(sq);
    g.scale(sum, 1.0 / denom)
}
