//! Sequence-to-sequence language head: projection of sign features, a small
//! encoder-decoder transformer, the teacher-forced loss and text generation.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS};

/// Anything that maps input embeddings and a decoder prefix to next-token logits.
pub trait Seq2Seq {
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// `[T, d_model]` inputs to `[T, d_model]` memory.
    fn encode(&self, g: &mut Graph<'_>, inputs: Var) -> Var;
    /// Logits `[prefix.len(), vocab]`; row `i` predicts token `i + 1`.
    fn decode_logits(&self, g: &mut Graph<'_>, memory: Var, prefix: &[usize]) -> Var;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// Standard deviation of the token embedding initialization.
    pub embed_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { d_model: 256, heads: 4, encoder_layers: 2, decoder_layers: 2, ff_dim: 512, embed_std: 1.0 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig {
                key: "lm.heads",
                reason: format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            });
        }
        if self.ff_dim == 0 {
            return Err(Error::InvalidConfig { key: "lm.ff_dim", reason: "must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Pre-LN transformer encoder-decoder with sinusoidal positions.
#[derive(Clone, Debug)]
pub struct TinySeq2Seq {
    pub cfg: LmConfig,
    vocab: usize,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl TinySeq2Seq {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &LmConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.add(format!("{prefix}.embed"), normal_init(rng, &[vocab, d], cfg.embed_std));
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("{prefix}.enc{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_dim, rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, &format!("{prefix}.enc_norm"), d);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("{prefix}.dec{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    cross: MultiHeadAttention::new(store, &format!("{p}.cross"), d, d, cfg.heads, rng),
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_dim, rng),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, &format!("{prefix}.dec_norm"), d);
        let head = Linear::new(store, &format!("{prefix}.head"), d, vocab, rng);
        Ok(Self { cfg: *cfg, vocab, embed, encoder, enc_norm, decoder, dec_norm, head })
    }

    fn add_positions(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (len, d) = g.shape(x);
        let pos = g.constant(sinusoidal_positions(len, d));
        g.add(x, pos)
    }
}

impl Seq2Seq for TinySeq2Seq {
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode(&self, g: &mut Graph<'_>, inputs: Var) -> Var {
        let mut x = self.add_positions(g, inputs);
        for l in &self.encoder {
            let h = l.ln1.forward(g, x);
            let a = l.attn.forward(g, h, h, None);
            x = g.add(x, a);
            let h = l.ln2.forward(g, x);
            let f = l.ff.forward(g, h);
            x = g.add(x, f);
        }
        self.enc_norm.forward(g, x)
    }

    fn decode_logits(&self, g: &mut Graph<'_>, memory: Var, prefix: &[usize]) -> Var {
        let table = g.param(self.embed);
        let emb = g.gather_rows(table, prefix);
        let mut x = self.add_positions(g, emb);
        let mask = causal_mask(prefix.len());
        for l in &self.decoder {
            let h = l.ln1.forward(g, x);
            let a = l.self_attn.forward(g, h, h, Some(&mask));
            x = g.add(x, a);
            let h = l.ln2.forward(g, x);
            let c = l.cross.forward(g, h, memory, None);
            x = g.add(x, c);
            let h = l.ln3.forward(g, x);
            let f = l.ff.forward(g, h);
            x = g.add(x, f);
        }
        let x = self.dec_norm.forward(g, x);
        self.head.forward(g, x)
    }
}

/// Linear map from the `4C` sign features to the language model width.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, d_model: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, prefix, in_dim, d_model, rng) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, sign: Var) -> Var {
        self.linear.forward(g, sign)
    }

    /// Value-level projection of a `[T, 4C]` tensor.
    pub fn apply(&self, store: &ParamStore, sign: &Tensor) -> Tensor {
        let mut g = Graph::new(store);
        let x = g.constant(sign.clone());
        let y = self.forward(&mut g, x);
        g.value(y).clone()
    }
}

/// Summed and per-token teacher-forced negative log-likelihood.
#[derive(Clone, Copy, Debug)]
pub struct LmLoss {
    pub sum: Var,
    pub mean: Var,
    pub tokens: usize,
    /// `[U, V]` logits the loss was computed from.
    pub logits: Var,
}

/// Loss of `[U, V]` logits against `U` target ids.
pub fn nll_from_logits(g: &mut Graph<'_>, logits: Var, targets: &[usize]) -> Result<LmLoss> {
    if targets.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let (rows, vocab) = g.shape(logits);
    if rows != targets.len() {
        return Err(Error::LengthMismatch(format!("{rows} logit rows for {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::IndexOutOfRange { index: t, limit: vocab });
    }
    let sum = g.cross_entropy(logits, targets);
    let mean = g.scale(sum, 1.0 / targets.len() as f64);
    Ok(LmLoss { sum, mean, tokens: targets.len(), logits })
}

/// Per-token loss against targets smoothed toward the uniform distribution:
/// `(1 − ε)·NLL/U + ε·mean(−log p)`. With `ε = 0` this is `loss.mean` itself.
pub fn smoothed_mean(g: &mut Graph<'_>, loss: &LmLoss, epsilon: f64) -> Var {
    if epsilon == 0.0 {
        return loss.mean;
    }
    let (u, v) = g.shape(loss.logits);
    let logp = g.log_softmax(loss.logits);
    let total = g.sum_all(logp);
    let uniform = g.scale(total, -epsilon / (u * v) as f64);
    let nll = g.scale(loss.mean, 1.0 - epsilon);
    g.add(nll, uniform)
}

/// Decoder input (`<bos>` + ids) and prediction targets (ids + `<eos>`).
pub fn teacher_forcing(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(ids);
    let mut target = ids.to_vec();
    target.push(EOS);
    (input, target)
}

/// Teacher-forced loss of `target` token ids given `[T, d_model]` input embeddings.
pub fn lm_loss<M: Seq2Seq + ?Sized>(g: &mut Graph<'_>, model: &M, embeddings: Var, target: &[usize]) -> Result<LmLoss> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let (input, shifted) = teacher_forcing(target);
    let memory = model.encode(g, embeddings);
    let logits = model.decode_logits(g, memory, &input);
    nll_from_logits(g, logits, &shifted)
}

/// Next-token distribution given a prefix that starts with `<bos>`.
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

/// A [`Seq2Seq`] model with a fixed, already encoded memory.
pub struct Conditioned<'a, M: Seq2Seq + ?Sized> {
    pub model: &'a M,
    pub store: &'a ParamStore,
    pub memory: Tensor,
}

impl<'a, M: Seq2Seq + ?Sized> Conditioned<'a, M> {
    pub fn new(model: &'a M, store: &'a ParamStore, embeddings: &Tensor) -> Self {
        let mut g = Graph::new(store);
        let x = g.constant(embeddings.clone());
        let m = model.encode(&mut g, x);
        let memory = g.value(m).clone();
        Self { model, store, memory }
    }
}

impl<M: Seq2Seq + ?Sized> StepModel for Conditioned<'_, M> {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut g = Graph::new(self.store);
        let mem = g.constant(self.memory.clone());
        let logits = self.model.decode_logits(&mut g, mem, prefix);
        let last = g.value(logits).row(prefix.len() - 1).to_vec();
        let n = last.len();
        log_softmax_rows(&Tensor::new(&[1, n], last)).into_data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { strategy: DecodeStrategy::Greedy, beam_width: 4, max_len: 64 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::InvalidConfig { key: "decode.max_len", reason: "must be at least 1".into() });
        }
        if self.strategy == DecodeStrategy::Beam && self.beam_width == 0 {
            return Err(Error::InvalidConfig { key: "decode.beam_width", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Generated token ids, without `<bos>`/`<eos>`.
pub fn generate<S: StepModel + ?Sized>(model: &S, cfg: &DecodeConfig) -> Vec<usize> {
    match cfg.strategy {
        DecodeStrategy::Greedy => greedy(model, cfg.max_len),
        DecodeStrategy::Beam => beam_search(model, cfg.beam_width.max(1), cfg.max_len),
    }
}

pub fn greedy<S: StepModel + ?Sized>(model: &S, max_len: usize) -> Vec<usize> {
    let mut prefix = alloc::vec![BOS];
    while prefix.len() <= max_len {
        let next = argmax(&model.next_log_probs(&prefix));
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    prefix
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search on summed log-probabilities without length normalization.
///
/// The `width` best extensions survive each step; those ending in `<eos>`
/// are retired. Width 1 reproduces [`greedy`].
pub fn beam_search<S: StepModel + ?Sized>(model: &S, width: usize, max_len: usize) -> Vec<usize> {
    let mut live = alloc::vec![Hyp { tokens: alloc::vec![BOS], score: 0.0 }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut cand = Vec::new();
        for h in &live {
            for (tok, lp) in model.next_log_probs(&h.tokens).into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cand.push(Hyp { tokens, score: h.score + lp });
            }
        }
        cand.sort_by(rank);
        cand.truncate(width);
        live.clear();
        for h in cand {
            if *h.tokens.last().unwrap() == EOS {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    let mut best = done.swap_remove(0).tokens;
    if best.last() == Some(&EOS) {
        best.pop();
    }
    best.remove(0);
    best
}
