//! Small building blocks shared by the encoders, the fusion module and the language head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Weights and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{heads} heads do not divide {dim}");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// `query` is `[Lq, D]`, `kv` is `[Lk, D_kv]`; `mask` (if any) is an additive `[Lq, Lk]` constant.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, mask: Option<&Tensor>) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let s = g.matmul_bt(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let a = g.softmax(s);
            heads.push(g.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, cat)
    }
}

/// Two-layer position-wise MLP with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Additive causal mask: `0` on and below the diagonal, a large negative value above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.row_mut(i)[j] = -1e9;
        }
    }
    m
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let freq = libm::pow(10000.0, -((i / 2 * 2) as f64) / dim as f64);
            let a = pos as f64 * freq;
            row[i] = if i % 2 == 0 { libm::sin(a) } else { libm::cos(a) };
        }
    }
    t
}
