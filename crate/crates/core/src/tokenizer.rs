//! Whitespace tokenizer with a character fallback.
//!
//! Text is split on whitespace; CJK characters always form their own word.
//! A word found in the vocabulary becomes one token. Otherwise it is spelled
//! out as its first character followed by `##`-prefixed continuation
//! characters. Characters missing from the vocabulary map to `<unk>`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const CONT: &str = "##";

/// Token ids plus the text they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
    pub tokenizer_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    id: String,
}

/// CJK ideographs and CJK punctuation / full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xFF00..=0xFFEF | 0x20000..=0x2FA1F)
}

/// Splits text into words; each CJK character is a word of its own.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_cjk(c) {
                if !cur.is_empty() {
                    words.push(core::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Joins words with single spaces, except next to CJK characters.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut prev_cjk = true;
    for w in words {
        let w = w.as_ref();
        let first_cjk = w.chars().next().is_some_and(is_cjk);
        if !out.is_empty() && !prev_cjk && !first_cjk {
            out.push(' ');
        }
        out.push_str(w);
        prev_cjk = w.chars().last().is_some_and(is_cjk);
    }
    out
}

/// Canonical form that `decode(encode(text))` reproduces.
pub fn normalize_text(text: &str) -> String {
    join_words(&pre_tokenize(text))
}

impl Tokenizer {
    /// Builds a vocabulary from every word seen at least `min_count` times plus
    /// every character (as a word start and as a continuation).
    pub fn fit<S: AsRef<str>>(texts: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for t in texts {
            for w in pre_tokenize(t.as_ref()) {
                chars.extend(w.chars().map(|c| (c, ())));
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(counts.into_iter().filter(|&(_, n)| n >= min_count.max(1)).map(|(w, _)| w));
        for &c in chars.keys() {
            tokens.push(c.to_string());
            let mut cont = String::from(CONT);
            cont.push(c);
            tokens.push(cont);
        }
        Self::from_tokens(tokens).expect("fitted vocabulary is well formed")
    }

    /// Vocabulary in file order; the four specials must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::MalformedFile("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::MalformedFile(alloc::format!("vocabulary line {} is not a single token", i + 1)));
            }
            index.entry(t.clone()).or_insert(i);
        }
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &tokens {
            for b in t.bytes().chain(core::iter::once(b'\n')) {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        Ok(Self { tokens, index, id: alloc::format!("ws-char-{:016x}", h) })
    }

    /// Parses a vocabulary file body (one token per line).
    pub fn from_vocab_str(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn to_vocab_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for w in pre_tokenize(text) {
            if let Some(&id) = self.index.get(&w) {
                ids.push(id);
                continue;
            }
            let mut buf = String::new();
            for (k, c) in w.chars().enumerate() {
                buf.clear();
                if k > 0 {
                    buf.push_str(CONT);
                }
                buf.push(c);
                ids.push(self.index.get(&buf).copied().unwrap_or(UNK));
            }
        }
        TokenSequence { ids, text: normalize_text(text), tokenizer_id: self.id.clone() }
    }

    /// Inverse of [`encode`](Self::encode); specials other than `<unk>` are skipped.
    pub fn decode(&self, ids: &[usize]) -> TokenSequence {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIALS[UNK]);
            match tok.strip_prefix(CONT) {
                Some(rest) if !rest.is_empty() && !words.is_empty() => words.last_mut().unwrap().push_str(rest),
                _ => words.push(tok.to_string()),
            }
        }
        TokenSequence { ids: ids.to_vec(), text: join_words(&words), tokenizer_id: self.id.clone() }
    }
}
