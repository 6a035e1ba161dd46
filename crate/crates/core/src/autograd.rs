//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every value in the graph is a 2-D matrix. Sequences of several utterances
//! are packed row-wise, and the few ops that must respect utterance
//! boundaries (attention, convolution taps) take explicit [`Segments`].
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges of the packed sequences, as `(start, len)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Vec<(usize, usize)>);

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &len in lengths {
            out.push((start, len));
            start += len;
        }
        Segments(out)
    }

    pub fn single(len: usize) -> Self {
        Segments(vec![(0, len)])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.0.iter().map(|&(_, l)| l).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.0.iter().map(|&(_, l)| l).collect()
    }

    /// Segment index of every packed row.
    pub fn row_owner(&self) -> Vec<usize> {
        let mut owner = Vec::with_capacity(self.total_rows());
        for (i, &(_, len)) in self.0.iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, len));
        }
        owner
    }

    /// Position of every packed row inside its own segment.
    pub fn row_positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.total_rows());
        for &(_, len) in &self.0 {
            pos.extend(0..len);
        }
        pos
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    LayerNorm(Var, Vec<f64>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<Vec<Option<usize>>>),
    MeanRows(Var, Segments),
    SumAll(Var),
    Rope { x: Var, cos: Mat, sin: Mat },
    Attention { q: Var, k: Var, v: Var, heads: usize, segs: Segments, probs: Vec<Mat> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Computation graph recording values and the ops that produced them.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    track_params: bool,
}

const LN_EPS: f64 = 1e-6;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameter leaves take part in backward.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), track_params: true }
    }

    /// Graph for forward-only evaluation; nothing requires a gradient.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient regardless of the graph mode.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf, self.track_params);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` (1 × m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expected a single row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a ⊙ row` with `row` (1 × m) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expected a single row");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        let ng = self.ng(a);
        self.push(value, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        let ng = self.ng(a);
        self.push(value, Op::Cos(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut out = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut orow).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Multi-tap row gather. Output row `i` is the concatenation over taps
    /// `j` of `a[taps[j][i]]`, with `None` producing zeros. Used for
    /// convolution unfolding and for broadcasting per-utterance rows.
    pub fn gather(&mut self, a: Var, taps: Vec<Vec<Option<usize>>>) -> Var {
        assert!(!taps.is_empty(), "gather: no taps");
        let rows = taps[0].len();
        assert!(taps.iter().all(|t| t.len() == rows), "gather: ragged taps");
        let x = self.value(a);
        let m = x.ncols();
        let mut out = Mat::zeros((rows, m * taps.len()));
        for (j, tap) in taps.iter().enumerate() {
            for (i, idx) in tap.iter().enumerate() {
                if let Some(r) = *idx {
                    out.slice_mut(s![i, j * m..(j + 1) * m]).assign(&x.row(r));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, taps), ng)
    }

    /// Single-tap gather.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        self.gather(a, vec![index])
    }

    /// Mean over the rows of each segment, one output row per segment.
    pub fn mean_rows(&mut self, a: Var, segs: &Segments) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((segs.len(), x.ncols()));
        for (i, (start, len)) in segs.iter().enumerate() {
            let mean = x
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("mean_rows: empty segment");
            out.row_mut(i).assign(&mean);
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a, segs.clone()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Rotary position embedding applied per head. `cos`/`sin` are
    /// rows × head_dim/2 tables.
    pub fn rope(&mut self, a: Var, cos: Mat, sin: Mat, heads: usize) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let hd = m / heads;
        let half = hd / 2;
        assert_eq!(cos.dim(), (n, half), "rope: table shape");
        let mut out = Mat::zeros((n, m));
        for r in 0..n {
            for h in 0..heads {
                let base = h * hd;
                for i in 0..half {
                    let (c, s) = (cos[[r, i]], sin[[r, i]]);
                    let x1 = x[[r, base + i]];
                    let x2 = x[[r, base + i + half]];
                    out[[r, base + i]] = x1 * c - x2 * s;
                    out[[r, base + i + half]] = x2 * c + x1 * s;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Rope { x: a, cos, sin }, ng)
    }

    /// Bidirectional multi-head scaled dot-product attention applied
    /// independently within each segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: &Segments) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, m) = qm.dim();
        assert_eq!(km.dim(), (n, m));
        assert_eq!(vm.dim(), (n, m));
        assert_eq!(m % heads, 0, "attention: width not divisible by heads");
        let hd = m / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros((n, m));
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for (start, len) in segs.iter() {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qs = qm.slice(s![start..start + len, cols.clone()]);
                let ks = km.slice(s![start..start + len, cols.clone()]);
                let vs = vm.slice(s![start..start + len, cols.clone()]);
                let mut scores = qs.dot(&ks.t()) * scale;
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![start..start + len, cols]).assign(&scores.dot(&vs));
                probs.push(scores);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, segs: segs.clone(), probs }, ng)
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_order
            .iter()
            .filter_map(|name| {
                let v = self.params[name];
                let g = grads[v.0].clone().unwrap_or_else(|| Mat::zeros(self.value(v).raw_dim()));
                self.nodes[v.0].needs_grad.then(|| (name.clone(), g))
            })
            .collect();
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || -g);
            }
            Op::Mul(a, b) => {
                self.acc_if(grads, *a, || g * self.value(*b));
                self.acc_if(grads, *b, || g * self.value(*a));
            }
            Op::AddRow(a, r) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *r, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                self.acc_if(grads, *a, || g * self.value(*r));
                self.acc_if(grads, *r, || (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => self.acc_if(grads, *a, || g * *k),
            Op::AddConst(a) => self.acc_if(grads, *a, || g.clone()),
            Op::Gelu(a) => self.acc_if(grads, *a, || {
                let mut d = self.value(*a).mapv(|x| {
                    let u = GELU_K * (x + GELU_C * x * x * x);
                    let th = u.tanh();
                    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
                });
                d *= g;
                d
            }),
            Op::Silu(a) => self.acc_if(grads, *a, || {
                let mut d = self.value(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                d *= g;
                d
            }),
            Op::Tanh(a) => self.acc_if(grads, *a, || g * &y.mapv(|v| 1.0 - v * v)),
            Op::Sigmoid(a) => self.acc_if(grads, *a, || g * &y.mapv(|v| v * (1.0 - v))),
            Op::Sin(a) => self.acc_if(grads, *a, || g * &self.value(*a).mapv(f64::cos)),
            Op::Cos(a) => self.acc_if(grads, *a, || g * &self.value(*a).mapv(|x| -x.sin())),
            Op::Abs(a) => self.acc_if(grads, *a, || g * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })),
            Op::LayerNorm(a, inv_std) => self.acc_if(grads, *a, || {
                let m = y.ncols() as f64;
                let mut dx = Mat::zeros(y.raw_dim());
                for (r, mut drow) in dx.outer_iter_mut().enumerate() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.sum() / m;
                    let mean_gy = gy.dot(&yr) / m;
                    let is = inv_std[r];
                    Zip::from(&mut drow)
                        .and(&gy)
                        .and(&yr)
                        .for_each(|d, &gv, &yv| *d = is * (gv - mean_g - yv * mean_gy));
                }
                dx
            }),
            Op::Transpose(a) => self.acc_if(grads, *a, || g.t().to_owned()),
            Op::SliceCols(a, start) => self.acc_if(grads, *a, || {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                d
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Gather(a, taps) => self.acc_if(grads, *a, || {
                let x = self.value(*a);
                let m = x.ncols();
                let mut d = Mat::zeros(x.raw_dim());
                for (j, tap) in taps.iter().enumerate() {
                    for (i, idx) in tap.iter().enumerate() {
                        if let Some(r) = *idx {
                            let src = g.slice(s![i, j * m..(j + 1) * m]);
                            let mut dst = d.row_mut(r);
                            dst += &src;
                        }
                    }
                }
                d
            }),
            Op::MeanRows(a, segs) => self.acc_if(grads, *a, || {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (i, (start, len)) in segs.iter().enumerate() {
                    let row = g.row(i).mapv(|v| v / len as f64);
                    for r in start..start + len {
                        d.row_mut(r).assign(&row);
                    }
                }
                d
            }),
            Op::SumAll(a) => self.acc_if(grads, *a, || Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]])),
            Op::Rope { x, cos, sin } => self.acc_if(grads, *x, || {
                let (n, m) = g.dim();
                let half = cos.ncols();
                let hd = 2 * half;
                let heads = m / hd;
                let mut d = Mat::zeros((n, m));
                for r in 0..n {
                    for h in 0..heads {
                        let base = h * hd;
                        for i in 0..half {
                            let (c, s) = (cos[[r, i]], sin[[r, i]]);
                            let g1 = g[[r, base + i]];
                            let g2 = g[[r, base + i + half]];
                            d[[r, base + i]] = g1 * c + g2 * s;
                            d[[r, base + i + half]] = -g1 * s + g2 * c;
                        }
                    }
                }
                d
            }),
            Op::Attention { q, k, v, heads, segs, probs } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, m) = qm.dim();
                let hd = m / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Mat::zeros((n, m));
                let mut dk = Mat::zeros((n, m));
                let mut dv = Mat::zeros((n, m));
                let mut pi = 0;
                for (start, len) in segs.iter() {
                    for h in 0..*heads {
                        let rows = start..start + len;
                        let cols = h * hd..(h + 1) * hd;
                        let p = &probs[pi];
                        pi += 1;
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qm.slice(s![rows.clone(), cols.clone()]);
                        let ks = km.slice(s![rows.clone(), cols.clone()]);
                        let vs = vm.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot: f64 = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
                    }
                }
                if self.ng(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.ng(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce() -> Mat) {
        if self.ng(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_rows_inplace(x: &mut Mat) {
    for mut row in x.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(String, Mat)>,
}

impl Gradients {
    /// Gradient of an arbitrary node (zeros if it was unreachable).
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients, in first-use order.
    pub fn params(&self) -> &[(String, Mat)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, Mat)> {
        self.params
    }
}
