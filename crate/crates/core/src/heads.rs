//! Task-specific heads used as baselines against unified generative fine-tuning:
//! mean pooling + linear classifier for isolated recognition, and an LSTM
//! with a CTC output layer for continuous recognition.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Single-layer LSTM, gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    input: Linear,
    recurrent: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = Linear::new(store, &format!("{prefix}.input"), in_dim, 4 * hidden, rng);
        // Forget-gate bias starts at one.
        let bias = input.bias.expect("input projection has a bias");
        store.get_mut(bias).data_mut()[hidden..2 * hidden].fill(1.0);
        let recurrent = Linear::no_bias(store, &format!("{prefix}.recurrent"), hidden, 4 * hidden, rng);
        Self { input, recurrent, hidden }
    }

    /// `[T, in] → [T, hidden]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (t_len, _) = g.shape(x);
        let hd = self.hidden;
        let xs = self.input.forward(g, x);
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut c = g.constant(Tensor::zeros(&[1, hd]));
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice_rows(xs, t, 1);
            let ht = self.recurrent.forward(g, h);
            let z = g.add(xt, ht);
            let zi = g.slice_cols(z, 0, hd);
            let i = g.sigmoid(zi);
            let zf = g.slice_cols(z, hd, hd);
            let f = g.sigmoid(zf);
            let zc = g.slice_cols(z, 2 * hd, hd);
            let cand = g.tanh(zc);
            let zo = g.slice_cols(z, 3 * hd, hd);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

/// Label inventory with stable ids (sorted order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        labels.sort();
        labels.dedup();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Mean over time followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, prefix, in_dim, classes, rng) }
    }

    /// `[T, in] → [1, classes]` logits.
    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (t, _) = g.shape(x);
        let pooled = g.row_group_mean(x, t);
        self.linear.forward(g, pooled)
    }

    pub fn loss(&self, g: &mut Graph<'_>, x: Var, class: usize) -> Var {
        let l = self.logits(g, x);
        g.cross_entropy(l, &[class])
    }

    pub fn predict(&self, g: &mut Graph<'_>, x: Var) -> usize {
        let l = self.logits(g, x);
        argmax_first(g.value(l).row(0))
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the CTC blank symbol; label `k` is emitted as class `k + 1`.
pub const CTC_BLANK: usize = 0;

/// LSTM over time, then per-frame log-probabilities over blank + labels.
#[derive(Clone, Debug)]
pub struct CtcHead {
    lstm: Lstm,
    out: Linear,
    pub labels: usize,
}

impl CtcHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, labels: usize, rng: &mut R) -> Self {
        Self {
            lstm: Lstm::new(store, &format!("{prefix}.lstm"), in_dim, hidden, rng),
            out: Linear::new(store, &format!("{prefix}.out"), hidden, labels + 1, rng),
            labels,
        }
    }

    pub fn log_probs(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.lstm.forward(g, x);
        let z = self.out.forward(g, h);
        g.log_softmax(z)
    }

    /// CTC loss for label ids (not yet offset for the blank).
    pub fn loss(&self, g: &mut Graph<'_>, x: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= self.labels) {
            return Err(Error::IndexOutOfRange { index: bad, limit: self.labels });
        }
        let lp = self.log_probs(g, x);
        let shifted: Vec<usize> = target.iter().map(|t| t + 1).collect();
        Ok(g.ctc_loss(lp, &shifted, CTC_BLANK))
    }

    /// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
    pub fn decode(&self, g: &mut Graph<'_>, x: Var) -> Vec<usize> {
        let lp = self.log_probs(g, x);
        ctc_greedy_decode(g.value(lp))
    }
}

/// Collapses a best path over `[T, 1 + labels]` log-probabilities to label ids.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = CTC_BLANK;
    for t in 0..log_probs.rows() {
        let k = argmax_first(log_probs.row(t));
        if k != CTC_BLANK && k != prev {
            out.push(k - 1);
        }
        prev = k;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ctc_forward_backward;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_shapes_and_causality() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let run = |x: Tensor| {
            let mut g = Graph::new(&store);
            let v = g.constant(x);
            let h = lstm.forward(&mut g, v);
            g.value(h).clone()
        };
        let a = run(Tensor::new(&[4, 3], (0..12).map(|v| v as f64 * 0.1).collect()));
        assert_eq!(a.shape(), &[4, 5]);
        let mut changed = Tensor::new(&[4, 3], (0..12).map(|v| v as f64 * 0.1).collect());
        changed.row_mut(3)[0] = 9.0;
        let b = run(changed);
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn ctc_loss_vanishes_on_confident_alignment() {
        // Frames emit g1 g1 blank g2 with confidence p; loss -> 0 as p -> 1.
        let path = [1usize, 1, 0, 2];
        let mut last = f64::INFINITY;
        for p in [0.9, 0.99, 0.999, 0.999_999] {
            let rest = (1.0 - p) / 2.0;
            let lp = Tensor::new(
                &[4, 3],
                path.iter().flat_map(|&k| (0..3).map(move |j| libm::log(if j == k { p } else { rest }))).collect(),
            );
            let (loss, _) = ctc_forward_backward(&lp, &[1, 2], CTC_BLANK);
            assert!(loss < last);
            last = loss;
            assert_eq!(ctc_greedy_decode(&lp), vec![0, 1]);
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn greedy_decode_merges_repeats_but_not_across_blanks() {
        let ids = [1usize, 1, 0, 1, 2, 2, 0];
        let lp = Tensor::new(&[7, 3], ids.iter().flat_map(|&k| (0..3).map(move |j| if j == k { 0.0 } else { -5.0 })).collect());
        assert_eq!(ctc_greedy_decode(&lp), vec![0, 0, 1]);
    }

    #[test]
    fn classifier_and_labels() {
        let set = LabelSet::new(["b", "a", "c", "a"]);
        assert_eq!(set.len(), 3);
        assert_eq!(set.id("c"), Some(2));
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "cls", 4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[6, 4], 0.5));
        let l = head.logits(&mut g, x);
        assert_eq!(g.shape(l), (1, 3));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[6, 4], 0.5));
        let loss = head.loss(&mut g, x, 1);
        assert!(g.value(loss).data()[0] > 0.0);
    }

    #[test]
    fn ctc_head_validates_targets() {
        let mut store = ParamStore::new();
        let head = CtcHead::new(&mut store, "ctc", 4, 6, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[5, 4], 0.1));
        assert_eq!(head.loss(&mut g, x, &[]).unwrap_err(), Error::EmptyTarget);
        assert!(head.loss(&mut g, x, &[3]).is_err());
        let l = head.loss(&mut g, x, &[0, 2]).unwrap();
        assert!(g.value(l).data()[0].is_finite());
    }
}
