//! Recognition and translation metrics. All scores are fractions in `[0, 1]`
//! (WER may exceed 1); scaling to percent happens only when printing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::is_cjk;

/// Levenshtein distance with unit costs, two-row dynamic program.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(S + D + I) / |ref|`.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let (mut edits, mut words) = (0, 0);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero clipped precision gives a score of zero.
    #[default]
    None,
    /// Add one to numerator and denominator for orders above one.
    AddOne,
}

/// Clipped n-gram matches and totals for orders `1..=max_n`, plus lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Ord + Clone>(toks: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self { matches: alloc::vec![0; max_n], totals: alloc::vec![0; max_n], hyp_len: 0, ref_len: 0 }
    }

    /// Adds one segment; the reference length is the one closest to the
    /// hypothesis length (shorter wins ties).
    pub fn add<T: Ord + Clone>(&mut self, refs: &[Vec<T>], hyp: &[T]) {
        let max_n = self.matches.len();
        self.hyp_len += hyp.len();
        self.ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let mut best: BTreeMap<Vec<T>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(best.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU over the first `n` orders of these statistics.
    pub fn score(&self, n: usize, smoothing: Smoothing) -> f64 {
        assert!(n >= 1 && n <= self.matches.len(), "order {n} not collected");
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            let (mut m, mut t) = (self.matches[k] as f64, self.totals[k] as f64);
            if smoothing == Smoothing::AddOne && k > 0 {
                m += 1.0;
                t += 1.0;
            }
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += libm::log(m / t);
        }
        let bp = if self.hyp_len >= self.ref_len { 1.0 } else { libm::exp(1.0 - self.ref_len as f64 / self.hyp_len as f64) };
        bp * libm::exp(log_sum / n as f64)
    }
}

/// Corpus BLEU-`max_n`: counts are pooled over all segments before the geometric mean.
pub fn corpus_bleu<T: Ord + Clone>(refs: &[Vec<Vec<T>>], hyps: &[Vec<T>], max_n: usize, smoothing: Smoothing) -> Result<f64> {
    Ok(corpus_bleu_stats(refs, hyps, max_n)?.score(max_n, smoothing))
}

pub fn corpus_bleu_stats<T: Ord + Clone>(refs: &[Vec<Vec<T>>], hyps: &[Vec<T>], max_n: usize) -> Result<BleuStats> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch(alloc::format!("{} reference sets for {} hypotheses", refs.len(), hyps.len())));
    }
    if max_n == 0 {
        return Err(Error::InvalidConfig { key: "bleu.max_n", reason: "must be at least 1".into() });
    }
    let mut stats = BleuStats::new(max_n);
    for (r, h) in refs.iter().zip(hyps) {
        stats.add(r, h);
    }
    Ok(stats)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    let l = lcs_len(reference, hypothesis);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / hypothesis.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence-level ROUGE-L.
pub fn corpus_rouge_l<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pairs.iter().map(|(r, h)| rouge_l(r, h)).sum::<f64>() / pairs.len() as f64)
}

/// One classification outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction<L, C> {
    pub truth: L,
    pub predicted: L,
    pub class: C,
}

/// Per-instance and per-class top-1 accuracy.
pub fn top1<L: PartialEq, C: Ord>(records: &[Prediction<L, C>]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut per_class: BTreeMap<&C, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for r in records {
        let hit = usize::from(r.truth == r.predicted);
        correct += hit;
        let e = per_class.entry(&r.class).or_insert((0, 0));
        e.0 += hit;
        e.1 += 1;
    }
    let p_i = correct as f64 / records.len() as f64;
    let p_c = per_class.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per_class.len() as f64;
    Ok((p_i, p_c))
}

fn normalize_label(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Maps generated text to a class: exact match on normalized text, else the
/// label at the smallest character edit distance (ties to the
/// lexicographically smaller label). `None` only for an empty vocabulary.
pub fn islr_match<S: AsRef<str>>(generated: &str, vocabulary: &[S]) -> Option<usize> {
    let g = normalize_label(generated);
    let labels: Vec<String> = vocabulary.iter().map(|s| normalize_label(s.as_ref())).collect();
    if let Some(i) = labels.iter().position(|l| *l == g) {
        return Some(i);
    }
    let gc: Vec<char> = g.chars().collect();
    (0..labels.len()).min_by(|&a, &b| {
        let da = edit_distance(&gc, &labels[a].chars().collect::<Vec<_>>());
        let db = edit_distance(&gc, &labels[b].chars().collect::<Vec<_>>());
        da.cmp(&db).then_with(|| labels[a].cmp(&labels[b])).then(a.cmp(&b))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextUnit {
    /// Characters when the text contains CJK, words otherwise.
    #[default]
    Auto,
    Char,
    Word,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c as u32, 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20 | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65 | 0x2010..=0x2027)
}

/// Scoring tokens: punctuation removed, lowercased; characters or words per `unit`.
pub fn metric_tokens(text: &str, unit: TextUnit) -> Vec<String> {
    let cleaned: String = text.chars().map(|c| if is_punct(c) { ' ' } else { c }).collect::<String>().to_lowercase();
    let unit = match unit {
        TextUnit::Auto if cleaned.chars().any(is_cjk) => TextUnit::Char,
        TextUnit::Auto => TextUnit::Word,
        u => u,
    };
    match unit {
        TextUnit::Char => cleaned.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect(),
        _ => cleaned.split_whitespace().map(str::to_string).collect(),
    }
}

/// Metric bundle for one task and split; only task-relevant fields are set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub bleu: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_i_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_c_top1: Option<f64>,
}

/// BLEU-1..4 and ROUGE-L for translation output.
pub fn translation_scores(references: &[String], hypotheses: &[String], unit: TextUnit, smoothing: Smoothing) -> Result<(BTreeMap<usize, f64>, f64)> {
    if references.len() != hypotheses.len() {
        return Err(Error::LengthMismatch(alloc::format!("{} references for {} hypotheses", references.len(), hypotheses.len())));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput);
    }
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| alloc::vec![metric_tokens(r, unit)]).collect();
    let hyps: Vec<Vec<String>> = hypotheses.iter().map(|h| metric_tokens(h, unit)).collect();
    let stats = corpus_bleu_stats(&refs, &hyps, 4)?;
    let bleu = (1..=4).map(|n| (n, stats.score(n, smoothing))).collect();
    let pairs: Vec<(Vec<String>, Vec<String>)> = refs.into_iter().map(|mut r| r.remove(0)).zip(hyps).collect();
    Ok((bleu, corpus_rouge_l(&pairs)?))
}
