//! Layer building blocks expressed on the autodiff [`Graph`].

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::params::{Init, ParamSpec, ParamStore};

pub fn linear_specs(prefix: &str, input: usize, output: usize, weight_init: Init) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), (input, output), weight_init),
        ParamSpec::new(format!("{prefix}.b"), (1, output), Init::Zeros),
    ]
}

/// `x · W + b`.
pub fn linear(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(p, &format!("{prefix}.w"));
    let b = g.param(p, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Convolution weights are stored tap-major: `(kernel · c_in) × c_out`.
pub fn conv_specs(prefix: &str, c_in: usize, c_out: usize, kernel: usize) -> Vec<ParamSpec> {
    linear_specs(prefix, kernel * c_in, c_out, Init::FanIn)
}

/// Gather table for a "same"-padded 1-D convolution evaluated inside each
/// segment; taps that fall outside their segment read zeros.
pub fn conv_taps(segs: &Segments, kernel: usize, dilation: usize) -> Vec<Vec<Option<usize>>> {
    let half = (kernel as isize - 1) / 2;
    (0..kernel as isize)
        .map(|j| {
            let offset = (j - half) * dilation as isize;
            let mut tap = Vec::with_capacity(segs.total_rows());
            for (start, len) in segs.iter() {
                for i in 0..len as isize {
                    let src = i + offset;
                    tap.push((src >= 0 && src < len as isize).then(|| start + src as usize));
                }
            }
            tap
        })
        .collect()
}

pub fn conv1d(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    x: Var,
    segs: &Segments,
    kernel: usize,
    dilation: usize,
) -> Var {
    let cols = if kernel == 1 { x } else { g.gather(x, conv_taps(segs, kernel, dilation)) };
    linear(g, p, prefix, cols)
}

/// Repeat one row per segment over all rows of that segment.
pub fn broadcast_segments(g: &mut Graph, per_segment: Var, segs: &Segments) -> Var {
    let index = segs.row_owner().into_iter().map(Some).collect();
    g.gather_rows(per_segment, index)
}

/// Rotary tables (`rows × head_dim/2`) for the within-segment positions.
pub fn rope_tables(segs: &Segments, head_dim: usize) -> (Mat, Mat) {
    let half = head_dim / 2;
    let pos = segs.row_positions();
    let mut cos = Mat::zeros((pos.len(), half));
    let mut sin = Mat::zeros((pos.len(), half));
    for (r, &p) in pos.iter().enumerate() {
        for i in 0..half {
            let freq = 10_000f64.powf(-(i as f64) / half as f64);
            let angle = p as f64 * freq;
            cos[[r, i]] = angle.cos();
            sin[[r, i]] = angle.sin();
        }
    }
    (cos, sin)
}

pub fn attention_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.qkv"), width, 3 * width, Init::FanIn);
    specs.extend(linear_specs(&format!("{prefix}.out"), width, width, Init::FanIn));
    specs
}

/// Bidirectional multi-head self-attention within segments, optionally
/// with rotary relative positions on queries and keys.
pub fn self_attention(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    x: Var,
    segs: &Segments,
    heads: usize,
    rotary: bool,
) -> Var {
    let width = g.shape(x).1;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x);
    let mut q = g.slice_cols(qkv, 0, width);
    let mut k = g.slice_cols(qkv, width, 2 * width);
    let v = g.slice_cols(qkv, 2 * width, 3 * width);
    if rotary {
        let (cos, sin) = rope_tables(segs, width / heads);
        q = g.rope(q, cos.clone(), sin.clone(), heads);
        k = g.rope(k, cos, sin, heads);
    }
    let att = g.attention(q, k, v, heads, segs);
    linear(g, p, &format!("{prefix}.out"), att)
}

/// Gated-activation residual stack with global conditioning injected in
/// every layer (non-causal WaveNet).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WaveNetConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    /// Dilation doubles every layer and resets after this many layers.
    pub dilation_cycle: usize,
    pub cond_dim: usize,
}

impl WaveNetConfig {
    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.dilation_cycle.max(1))
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let h = self.hidden;
        let mut specs = linear_specs(&format!("{prefix}.cond"), self.cond_dim, 2 * h * self.layers, Init::FanIn);
        for i in 0..self.layers {
            specs.extend(conv_specs(&format!("{prefix}.in.{i}"), h, 2 * h, self.kernel));
            let rs_out = if i + 1 < self.layers { 2 * h } else { h };
            specs.extend(linear_specs(&format!("{prefix}.res_skip.{i}"), h, rs_out, Init::FanIn));
        }
        specs
    }

    /// `x` is rows × hidden, `cond` is one conditioning row per segment.
    /// Returns the summed skip connections (rows × hidden).
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, cond: Var, segs: &Segments) -> Var {
        let h = self.hidden;
        let cond_all = linear(g, p, &format!("{prefix}.cond"), cond);
        let cond_rows = broadcast_segments(g, cond_all, segs);
        let mut x = x;
        let mut skip: Option<Var> = None;
        for i in 0..self.layers {
            let xin = conv1d(g, p, &format!("{prefix}.in.{i}"), x, segs, self.kernel, self.dilation(i));
            let ci = g.slice_cols(cond_rows, 2 * h * i, 2 * h * (i + 1));
            let pre = g.add(xin, ci);
            let a = g.slice_cols(pre, 0, h);
            let b = g.slice_cols(pre, h, 2 * h);
            let a = g.tanh(a);
            let b = g.sigmoid(b);
            let acts = g.mul(a, b);
            let rs = linear(g, p, &format!("{prefix}.res_skip.{i}"), acts);
            let skip_part = if i + 1 < self.layers {
                let res = g.slice_cols(rs, 0, h);
                x = g.add(x, res);
                g.slice_cols(rs, h, 2 * h)
            } else {
                rs
            };
            skip = Some(match skip {
                Some(s) => g.add(s, skip_part),
                None => skip_part,
            });
        }
        skip.expect("wavenet needs at least one layer")
    }
}
