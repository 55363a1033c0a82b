//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and produces
//! gradients for every parameter (and every leaf created with
//! `requires_grad`). Parameters are borrowed from a [`ParamStore`], never
//! copied, so a graph is cheap to build per clip and per step.
//!
//! All operations work on 2-D matrices; the right operand of the elementwise
//! binary ops may broadcast along rows and/or columns (`[1,n]`, `[m,1]`, `[1,1]`).

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of an `im2col` lowering for a square-kernel 2-D convolution over
/// an `[h·w, c]` (row-major spatial, channels last) feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    CrossEntropy(Var, Vec<usize>, Tensor),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>, Var),
    ShiftRows(Var, isize),
    TemporalConv(Var, Var, usize),
    BlockMix(Var, Tensor),
    RowGroupMean(Var, usize),
    Reshape(Var),
    Im2Col(Var, ConvGeom),
    Bilinear(Var, Var, usize, usize),
    Ctc(Var, Tensor),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn bcast_index(ar: usize, ac: usize, br: usize, bc: usize) -> impl Fn(usize, usize) -> usize {
    assert!(
        (br == ar || br == 1) && (bc == ac || bc == 1),
        "cannot broadcast [{br},{bc}] onto [{ar},{ac}]"
    );
    move |i, j| (if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to(g: &Tensor, br: usize, bc: usize) -> Tensor {
    let (ar, ac) = g.as_matrix();
    if ar == br && ac == bc {
        return g.clone().reshape(&[br, bc]);
    }
    let idx = bcast_index(ar, ac, br, bc);
    let mut out = vec![0.0; br * bc];
    for i in 0..ar {
        let row = g.row(i);
        for (j, v) in row.iter().enumerate() {
            out[idx(i, j)] += v;
        }
    }
    Tensor::new(&[br, bc], out)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.as_matrix();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * n..(i + 1) * n];
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = libm::exp(v - mx);
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.as_matrix();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
        for (d, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Bilinear lookup of a `[h·w, c]` map at a normalized location `(u, v) ∈ [0,1]²`.
///
/// Cell `(i, j)` has its center at `((j+0.5)/w, (i+0.5)/h)`; locations are
/// clamped to the unit square and then to the outermost cell centers.
/// Returns the four `(row_index, weight)` taps plus `∂x/∂u`, `∂y/∂v` and the
/// fractional offsets needed by the backward pass.
pub(crate) struct BilinearTaps {
    pub taps: [(usize, f64); 4],
    pub dxdu: f64,
    pub dydv: f64,
    pub fx: f64,
    pub fy: f64,
    pub idx: [usize; 4],
}

pub(crate) fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> BilinearTaps {
    fn axis(u: f64, size: usize) -> (usize, usize, f64, f64) {
        let mut d = size as f64;
        let uc = if u < 0.0 {
            d = 0.0;
            0.0
        } else if u > 1.0 {
            d = 0.0;
            1.0
        } else {
            u
        };
        let mut x = uc * size as f64 - 0.5;
        let hi = (size - 1) as f64;
        if x <= 0.0 {
            if x < 0.0 {
                d = 0.0;
            }
            x = 0.0;
        } else if x >= hi {
            if x > hi {
                d = 0.0;
            }
            x = hi;
        }
        let x0 = libm::floor(x) as usize;
        let x0 = x0.min(size - 1);
        let x1 = (x0 + 1).min(size - 1);
        (x0, x1, x - x0 as f64, d)
    }
    let (x0, x1, fx, dxdu) = axis(u, w);
    let (y0, y1, fy, dydv) = axis(v, h);
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let taps = [
        (idx[0], (1.0 - fx) * (1.0 - fy)),
        (idx[1], fx * (1.0 - fy)),
        (idx[2], (1.0 - fx) * fy),
        (idx[3], fx * fy),
    ];
    BilinearTaps { taps, dxdu, dydv, fx, fy, idx }
}

fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let (ho, wo) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let c = g.channels;
    let cols = k * k * c;
    let mut out = vec![0.0; ho * wo * cols];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * g.w + ix as usize);
                    dst[(ky * k + kx) * c..(ky * k + kx + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(&[ho * wo, cols], out)
}

fn col2im(gcol: &Tensor, g: &ConvGeom) -> Tensor {
    let (ho, wo) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let c = g.channels;
    let cols = k * k * c;
    let mut out = vec![0.0; g.h * g.w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &gcol.data()[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let base = (iy as usize * g.w + ix as usize) * c;
                    for ch in 0..c {
                        out[base + ch] += src[(ky * k + kx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[g.h * g.w, c], out)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

/// CTC negative log-likelihood and its gradient w.r.t. the `[T, V]` log-probabilities.
///
/// Returns `(loss, grad)`; an infeasible alignment yields `(inf, zeros)`.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> (f64, Tensor) {
    let (t_len, v) = log_probs.as_matrix();
    let ext: Vec<usize> = core::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let mut grad = Tensor::zeros(&[t_len, v]);
    if t_len == 0 {
        return (f64::INFINITY, grad);
    }
    let lp = |t: usize, s: usize| log_probs.get2(t, ext[s]);
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == neg {
        return (f64::INFINITY, grad);
    }

    // beta[t][s]: log-prob of emitting the suffix after t given state s at t.
    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, s);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > neg {
                row[ext[s]] -= libm::exp(occ);
            }
        }
    }
    (-log_p, grad)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ar, ac) = ta.as_matrix();
        let (br, bc) = tb.as_matrix();
        let idx = bcast_index(ar, ac, br, bc);
        let mut out = ta.clone().reshape(&[ar, ac]);
        for i in 0..ar {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o += tb.data()[idx(i, j)];
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ar, ac) = ta.as_matrix();
        let (br, bc) = tb.as_matrix();
        let idx = bcast_index(ar, ac, br, bc);
        let mut out = ta.clone().reshape(&[ar, ac]);
        for i in 0..ar {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o -= tb.data()[idx(i, j)];
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ar, ac) = ta.as_matrix();
        let (br, bc) = tb.as_matrix();
        let idx = bcast_index(ar, ac, br, bc);
        let mut out = ta.clone().reshape(&[ar, ac]);
        for i in 0..ar {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o *= tb.data()[idx(i, j)];
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `alpha·a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x + beta);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, alpha), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a @ bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + libm::exp(-x)));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise standardization `(x − μ)/√(σ² + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (m, n) = x.as_matrix();
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd[i] = r;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, n], out), Op::LayerNorm(a, rstd), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Summed softmax cross-entropy of `[m, V]` logits against `m` target classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let (m, v) = x.as_matrix();
        assert_eq!(m, targets.len(), "cross_entropy: {m} rows vs {} targets", targets.len());
        let logp = log_softmax_rows(x);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < v, "target {t} out of vocabulary {v}");
            loss -= logp.get2(i, t);
        }
        let probs = logp.map(libm::exp);
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec(), probs), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (m, n) = x.as_matrix();
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, len], out), Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols row mismatch");
                out.extend_from_slice(t.row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[m, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let n = x.cols();
        assert!(start + len <= x.rows(), "slice_rows {start}+{len} > {}", x.rows());
        let out = x.data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&[len, n], out), Op::SliceRows(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows col mismatch");
            out.extend_from_slice(t.data());
        }
        let m = out.len() / n.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[m, n], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(x.row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[idx.len(), n], out), Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Copy of `base` whose rows `idx[i]` are replaced by `src` row `i`.
    /// With repeated indices the last write wins.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Var {
        let mut out = self.value(base).clone();
        let s = self.value(src);
        assert_eq!(s.rows(), idx.len(), "scatter_rows: {} src rows vs {} indices", s.rows(), idx.len());
        assert_eq!(s.cols(), out.cols(), "scatter_rows col mismatch");
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        let ng = self.ng(base) || self.ng(src);
        self.push(out, Op::ScatterRows(base, idx.to_vec(), src), ng)
    }

    /// `out[r] = a[r − shift]`, zero where the source row is out of range.
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let x = self.value(a);
        let (m, n) = x.as_matrix();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let s = r as isize - shift;
            if s >= 0 && (s as usize) < m {
                out[r * n..(r + 1) * n].copy_from_slice(x.row(s as usize));
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, n], out), Op::ShiftRows(a, shift), ng)
    }

    /// Zero-padded 1-D convolution over blocks of `step` rows: `x` is `[M, C_in]`,
    /// `w` is `[k·C_in, C_out]` with tap `j` reading rows offset by `(j − k/2)·step`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, step: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, cin) = xv.as_matrix();
        let (kc, cout) = wv.as_matrix();
        assert!(cin > 0 && kc % cin == 0 && (kc / cin) % 2 == 1, "temporal_conv: weight {kc}x{cout} for {cin} inputs");
        let mut out = vec![0.0; m * cout];
        for (j, src, dst, len) in conv_taps(m, kc / cin, step) {
            gemm(len, cin, cout, &xv.data()[src * cin..(src + len) * cin], false, &wv.data()[j * cin * cout..(j + 1) * cin * cout], false, &mut out[dst * cout..(dst + len) * cout], 1.0);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&[m, cout], out), Op::TemporalConv(x, w, step), ng)
    }

    /// Applies a constant `[N, N]` mixing matrix to each consecutive block of `N` rows.
    pub fn block_mix(&mut self, a: Var, mix: &Tensor) -> Var {
        let x = self.value(a);
        let (m, c) = x.as_matrix();
        let nb = mix.rows();
        assert_eq!(mix.cols(), nb, "block_mix matrix must be square");
        assert_eq!(m % nb, 0, "block_mix: {m} rows not divisible by {nb}");
        let mut out = vec![0.0; m * c];
        for b in 0..m / nb {
            let range = b * nb * c..(b + 1) * nb * c;
            gemm(nb, nb, c, mix.data(), false, &x.data()[range.clone()], false, &mut out[range], 0.0);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, c], out), Op::BlockMix(a, mix.clone()), ng)
    }

    /// Mean over each consecutive group of `group` rows: `[G·group, C] → [G, C]`.
    pub fn row_group_mean(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (m, c) = x.as_matrix();
        assert!(group > 0 && m % group == 0, "row_group_mean: {m} rows, group {group}");
        let g = m / group;
        let mut out = vec![0.0; g * c];
        for r in 0..m {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        let inv = 1.0 / group as f64;
        for v in &mut out {
            *v *= inv;
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[g, c], out), Op::RowGroupMean(a, group), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(&[rows, cols]);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let x = self.value(a);
        assert_eq!(x.as_matrix(), (geom.h * geom.w, geom.channels), "im2col geometry mismatch");
        let out = im2col(x, &geom);
        let ng = self.ng(a);
        self.push(out, Op::Im2Col(a, geom), ng)
    }

    /// Bilinear sampling of a `[h·w, C]` map at `[P, 2]` normalized `(u, v)` points.
    pub fn bilinear_sample(&mut self, map: Var, points: Var, h: usize, w: usize) -> Var {
        let m = self.value(map);
        let p = self.value(points);
        assert_eq!(m.rows(), h * w, "bilinear map rows {} != {h}x{w}", m.rows());
        assert_eq!(p.cols(), 2, "points must be [P,2]");
        let c = m.cols();
        let np = p.rows();
        let mut out = vec![0.0; np * c];
        for i in 0..np {
            let taps = bilinear_taps(h, w, p.get2(i, 0), p.get2(i, 1));
            let dst = &mut out[i * c..(i + 1) * c];
            for (r, wgt) in taps.taps {
                if wgt == 0.0 {
                    continue;
                }
                for (d, v) in dst.iter_mut().zip(m.row(r)) {
                    *d += wgt * v;
                }
            }
        }
        let ng = self.ng(map) || self.ng(points);
        self.push(Tensor::new(&[np, c], out), Op::Bilinear(map, points, h, w), ng)
    }

    /// CTC loss over `[T, V]` log-probabilities; infeasible targets give zero loss and gradient.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Var {
        let (mut loss, mut grad) = ctc_forward_backward(self.value(log_probs), target, blank);
        if !loss.is_finite() {
            loss = 0.0;
            grad = Tensor::zeros(&[grad.rows(), grad.cols()]);
        }
        let ng = self.ng(log_probs);
        self.push(Tensor::scalar(loss), Op::Ctc(log_probs, grad), ng)
    }

    /// Reverse pass from a `[1,1]` output. Returns per-node gradients.
    pub fn backward(&self, output: Var) -> Backward {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = Var(i);
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.ng(*b) {
                        let (br, bc) = self.shape(*b);
                        let mut gb = reduce_to(&g, br, bc);
                        gb.scale_assign(sign);
                        acc(&mut grads, *b, gb);
                    }
                    if self.ng(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        acc(&mut grads, *a, g.reshape(&shape));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (ar, ac) = ta.as_matrix();
                    let (br, bc) = tb.as_matrix();
                    let idx = bcast_index(ar, ac, br, bc);
                    if self.ng(*b) {
                        let prod = g.zip_map(ta, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(&prod, br, bc));
                    }
                    if self.ng(*a) {
                        let mut ga = g.clone().reshape(ta.shape());
                        for r in 0..ar {
                            for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                                *x *= tb.data()[idx(r, j)];
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Affine(a, alpha) => {
                    let mut ga = g.reshape(self.value(*a).shape());
                    ga.scale_assign(*alpha);
                    acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if self.ng(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, 0.0);
                        acc(&mut grads, *a, Tensor::new(self.value(*a).shape(), ga));
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, 0.0);
                        acc(&mut grads, *b, Tensor::new(self.value(*b).shape(), gb));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    if self.ng(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(*b).data(), false, &mut ga, 0.0);
                        acc(&mut grads, *a, Tensor::new(&[m, k], ga));
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, self.value(*a).data(), false, &mut gb, 0.0);
                        acc(&mut grads, *b, Tensor::new(&[n, k], gb));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(self.value(out), |g, y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(self.value(out), |g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(out);
                    let (m, n) = y.as_matrix();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, n], ga));
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(out);
                    let (m, n) = y.as_matrix();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] = gr[j] - libm::exp(yr[j]) * s;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, n], ga));
                }
                Op::LayerNorm(a, rstd) => {
                    let y = self.value(out);
                    let (m, n) = y.as_matrix();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[r * n + j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, n], ga));
                }
                Op::SumAll(a) => {
                    let s = g.data()[0];
                    let ga = Tensor::full(self.value(*a).shape(), s);
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let s = g.data()[0];
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        ga.row_mut(r)[t] -= 1.0;
                    }
                    ga.scale_assign(s);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.shape(*a);
                    let len = g.cols();
                    let mut ga = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        if self.ng(p) {
                            let mut gp = Vec::with_capacity(m * n);
                            for r in 0..m {
                                gp.extend_from_slice(&g.row(r)[off..off + n]);
                            }
                            acc(&mut grads, p, Tensor::new(&[m, n], gp));
                        }
                        off += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(&[m, n]);
                    ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        if self.ng(p) {
                            let gp = g.data()[off * n..(off + m) * n].to_vec();
                            acc(&mut grads, p, Tensor::new(&[m, n], gp));
                        }
                        off += m;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(&[m, n]);
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterRows(base, idx, src) => {
                    if self.ng(*src) {
                        let n = g.cols();
                        let mut gs = Tensor::zeros(&[idx.len(), n]);
                        for (i, &r) in idx.iter().enumerate() {
                            let last = idx.iter().rposition(|&x| x == r) == Some(i);
                            if last {
                                gs.row_mut(i).copy_from_slice(g.row(r));
                            }
                        }
                        acc(&mut grads, *src, gs);
                    }
                    if self.ng(*base) {
                        let mut gb = g;
                        for &r in idx {
                            gb.row_mut(r).fill(0.0);
                        }
                        let shape = self.value(*base).shape().to_vec();
                        acc(&mut grads, *base, gb.reshape(&shape));
                    }
                }
                Op::ShiftRows(a, shift) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let s = r as isize - shift;
                        if s >= 0 && (s as usize) < m {
                            ga.row_mut(s as usize).copy_from_slice(g.row(r));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::TemporalConv(x, w, step) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, cin) = xv.as_matrix();
                    let (kc, cout) = wv.as_matrix();
                    let taps = conv_taps(m, kc / cin, *step);
                    if self.ng(*x) {
                        let mut gx = vec![0.0; m * cin];
                        for &(j, src, dst, len) in &taps {
                            gemm(len, cout, cin, &g.data()[dst * cout..(dst + len) * cout], false, &wv.data()[j * cin * cout..(j + 1) * cin * cout], true, &mut gx[src * cin..(src + len) * cin], 1.0);
                        }
                        acc(&mut grads, *x, Tensor::new(&[m, cin], gx));
                    }
                    if self.ng(*w) {
                        let mut gw = vec![0.0; kc * cout];
                        for &(j, src, dst, len) in &taps {
                            gemm(cin, len, cout, &xv.data()[src * cin..(src + len) * cin], true, &g.data()[dst * cout..(dst + len) * cout], false, &mut gw[j * cin * cout..(j + 1) * cin * cout], 1.0);
                        }
                        acc(&mut grads, *w, Tensor::new(&[kc, cout], gw));
                    }
                }
                Op::BlockMix(a, mix) => {
                    let (m, c) = self.shape(*a);
                    let nb = mix.rows();
                    let mut ga = vec![0.0; m * c];
                    for b in 0..m / nb {
                        let range = b * nb * c..(b + 1) * nb * c;
                        gemm(nb, nb, c, mix.data(), true, &g.data()[range.clone()], false, &mut ga[range], 0.0);
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, c], ga));
                }
                Op::RowGroupMean(a, group) => {
                    let (m, c) = self.shape(*a);
                    let inv = 1.0 / *group as f64;
                    let mut ga = vec![0.0; m * c];
                    for r in 0..m {
                        for (d, v) in ga[r * c..(r + 1) * c].iter_mut().zip(g.row(r / group)) {
                            *d = v * inv;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, c], ga));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshape(&shape));
                }
                Op::Im2Col(a, geom) => acc(&mut grads, *a, col2im(&g, geom)),
                Op::Bilinear(map, points, h, w) => {
                    let m = self.value(*map);
                    let p = self.value(*points);
                    let c = m.cols();
                    let mut gm = if self.ng(*map) { Some(Tensor::zeros(m.shape())) } else { None };
                    let mut gp = vec![0.0; p.rows() * 2];
                    for i in 0..p.rows() {
                        let bt = bilinear_taps(*h, *w, p.get2(i, 0), p.get2(i, 1));
                        let gi = g.row(i);
                        if let Some(gm) = gm.as_mut() {
                            for (r, wgt) in bt.taps {
                                if wgt != 0.0 {
                                    for (d, v) in gm.row_mut(r).iter_mut().zip(gi) {
                                        *d += wgt * v;
                                    }
                                }
                            }
                        }
                        let [i00, i01, i10, i11] = bt.idx;
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ch in 0..c {
                            let (v00, v01, v10, v11) =
                                (m.get2(i00, ch), m.get2(i01, ch), m.get2(i10, ch), m.get2(i11, ch));
                            let dx = (1.0 - bt.fy) * (v01 - v00) + bt.fy * (v11 - v10);
                            let dy = (1.0 - bt.fx) * (v10 - v00) + bt.fx * (v11 - v01);
                            du += gi[ch] * dx;
                            dv += gi[ch] * dy;
                        }
                        gp[i * 2] = du * bt.dxdu;
                        gp[i * 2 + 1] = dv * bt.dydv;
                    }
                    if let Some(gm) = gm {
                        acc(&mut grads, *map, gm);
                    }
                    if self.ng(*points) {
                        acc(&mut grads, *points, Tensor::new(&[p.rows(), 2], gp));
                    }
                }
                Op::Ctc(a, grad) => {
                    let mut ga = grad.clone();
                    ga.scale_assign(g.data()[0]);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Backward { grads, nodes_params: self.param_map() }
    }

    fn param_map(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `(tap, first source row, first output row, rows)` for each tap that overlaps the input.
fn conv_taps(m: usize, kernel: usize, step: usize) -> Vec<(usize, usize, usize, usize)> {
    let pad = kernel / 2;
    (0..kernel)
        .filter_map(|j| {
            let off = j.abs_diff(pad) * step;
            if off >= m {
                return None;
            }
            let (src, dst) = if j >= pad { (off, 0) } else { (0, off) };
            Some((j, src, dst, m - off))
        })
        .collect()
}

/// Result of a reverse pass.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    nodes_params: Vec<(usize, ParamId)>,
}

impl Backward {
    /// Gradient w.r.t. an input leaf (or any retained node), if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, summed over every use of each parameter.
    pub fn param_grads(&self, n_params: usize) -> Gradients {
        let mut out = Gradients::new(n_params);
        for &(node, id) in &self.nodes_params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(id, g);
            }
        }
        out
    }

    /// Accumulates parameter gradients into an existing buffer.
    pub fn accumulate_into(&self, out: &mut Gradients) {
        for &(node, id) in &self.nodes_params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = build(&mut g, xv);
        let y = g.sum_all(y);
        let bw = g.backward(y);
        let analytic = bw.wrt(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let xv = g.input(xp);
                let y = build(&mut g, xv);
                g.value(y).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    fn sample(m: usize, n: usize) -> Tensor {
        Tensor::new(&[m, n], (0..m * n).map(|i| libm::sin(i as f64 * 1.7 + 0.3)).collect())
    }

    #[test]
    fn grads_elementwise_and_norms() {
        fd_check(|g, x| { let s = g.sigmoid(x); g.mul(s, x) }, sample(3, 4));
        fd_check(|g, x| { let t = g.tanh(x); g.layer_norm(t, 1e-5) }, sample(3, 4));
        fd_check(|g, x| { let s = g.softmax(x); let w = g.constant(sample(3, 4)); g.mul(s, w) }, sample(3, 4));
        fd_check(|g, x| { let s = g.log_softmax(x); let w = g.constant(sample(3, 4)); g.mul(s, w) }, sample(3, 4));
    }

    #[test]
    fn grads_matmul_family() {
        fd_check(|g, x| { let w = g.constant(sample(4, 2)); g.matmul(x, w) }, sample(3, 4));
        fd_check(|g, x| { let w = g.constant(sample(5, 4)); g.matmul_bt(x, w) }, sample(3, 4));
        fd_check(|g, x| { let w = g.constant(sample(2, 3)); g.matmul(w, x) }, sample(3, 4));
        fd_check(|g, x| { let w = g.constant(sample(5, 4)); g.matmul_bt(w, x) }, sample(3, 4));
    }

    #[test]
    fn temporal_conv_matches_shifted_taps() {
        // 4 frames of 2 nodes, kernel 3.
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(sample(8, 3));
        let w = g.constant(sample(9, 2));
        let fused = g.temporal_conv(x, w, 2);
        let taps: Vec<Var> = (0..3isize).map(|j| g.shift_rows(x, (1 - j) * 2)).collect();
        let stacked = g.concat_cols(&taps);
        let reference = g.matmul(stacked, w);
        assert!(g.value(fused).max_abs_diff(g.value(reference)) < 1e-12);
        // A kernel wider than the sequence only sees the existing frames.
        let wide = g.constant(sample(15, 2));
        let short = g.constant(sample(2, 3));
        let y = g.temporal_conv(short, wide, 2);
        let centre = g.slice_rows(wide, 6, 3);
        let only_centre = g.matmul(short, centre);
        assert!(g.value(y).max_abs_diff(g.value(only_centre)) < 1e-12);
    }

    #[test]
    fn grads_temporal_conv() {
        fd_check(|g, x| { let w = g.constant(sample(9, 2)); g.temporal_conv(x, w, 2) }, sample(8, 3));
        fd_check(|g, w| { let x = g.constant(sample(8, 3)); g.temporal_conv(x, w, 2) }, sample(9, 2));
    }

    #[test]
    fn grads_broadcast_binary() {
        let col = sample(3, 1);
        fd_check(move |g, x| { let c = g.constant(col.clone()); let a = g.add(x, c); g.mul(a, a) }, sample(3, 4));
        fd_check(|g, x| { let a = g.constant(sample(3, 4)); let r = g.mul(a, x); g.sub(r, x) }, sample(1, 4));
        fd_check(|g, x| { let a = g.constant(sample(3, 4)); g.mul(a, x) }, sample(1, 1));
    }

    #[test]
    fn grads_structural_ops() {
        fd_check(|g, x| { let s = g.shift_rows(x, 2); let t = g.shift_rows(x, -1); let y = g.mul(s, t); g.add(y, s) }, sample(5, 3));
        fd_check(|g, x| g.row_group_mean(x, 2), sample(6, 3));
        fd_check(|g, x| { let a = g.slice_cols(x, 1, 2); let b = g.slice_rows(x, 0, 2); let b = g.slice_cols(b, 0, 2); let c = g.concat_rows(&[a, b]); g.mul(c, c) }, sample(3, 4));
        fd_check(|g, x| { let c = g.concat_cols(&[x, x]); g.mul(c, c) }, sample(2, 3));
        fd_check(|g, x| { let r = g.gather_rows(x, &[2, 0, 2]); g.mul(r, r) }, sample(3, 2));
        let mix = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.2, 0.8]);
        fd_check(move |g, x| { let y = g.block_mix(x, &mix); g.mul(y, y) }, sample(4, 3));
        fd_check(|g, x| { let t = g.transpose(x); let r = g.reshape(t, 2, 6); g.mul(r, r) }, sample(4, 3));
    }

    #[test]
    fn grads_scatter() {
        fd_check(
            |g, x| {
                let src = g.slice_rows(x, 0, 2);
                let src = g.affine(src, 3.0, 1.0);
                let y = g.scatter_rows(x, &[3, 1], src);
                g.mul(y, y)
            },
            sample(4, 2),
        );
    }

    #[test]
    fn grads_im2col() {
        let geom = ConvGeom { h: 4, w: 3, channels: 2, kernel: 3, stride: 2, pad: 1 };
        fd_check(move |g, x| { let c = g.im2col(x, geom); g.mul(c, c) }, sample(12, 2));
    }

    #[test]
    fn grads_cross_entropy_and_ctc() {
        fd_check(|g, x| g.cross_entropy(x, &[1, 0, 3]), sample(3, 4));
        fd_check(|g, x| { let lp = g.log_softmax(x); g.ctc_loss(lp, &[1, 2, 2], 0) }, sample(7, 4));
    }

    #[test]
    fn grads_bilinear_points_and_map() {
        let pts = Tensor::new(&[3, 2], vec![0.31, 0.62, 0.77, 0.14, 0.52, 0.43]);
        let map = sample(9, 2);
        fd_check({ let pts = pts.clone(); move |g, m| { let p = g.constant(pts.clone()); g.bilinear_sample(m, p, 3, 3) } }, map.clone());
        fd_check(move |g, p| { let m = g.constant(map.clone()); let s = g.bilinear_sample(m, p, 3, 3); g.mul(s, s) }, pts);
    }

    #[test]
    fn ctc_matches_path_enumeration() {
        // Brute force over every length-T path collapsing to the target.
        let t_len = 4;
        let v = 3;
        let logits = sample(t_len, v);
        let lp = log_softmax_rows(&logits);
        let target = [1usize, 2];
        let mut total = 0.0;
        for code in 0..v.pow(t_len as u32) {
            let path: Vec<usize> = (0..t_len).map(|t| (code / v.pow(t as u32)) % v).collect();
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &s in &path {
                if s != prev && s != 0 {
                    collapsed.push(s);
                }
                prev = s;
            }
            if collapsed == target {
                total += path.iter().enumerate().map(|(t, &s)| libm::exp(lp.get2(t, s))).product::<f64>();
            }
        }
        let (loss, _) = ctc_forward_backward(&lp, &target, 0);
        assert!((loss + libm::log(total)).abs() < 1e-12);
    }
}
