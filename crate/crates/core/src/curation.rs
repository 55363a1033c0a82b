//! Turning timestamped broadcast transcripts into clip records.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::is_cjk;

pub const DEFAULT_MARKS: [char; 3] = ['。', '？', '！'];
/// Training clips must be strictly shorter than this many frames.
pub const MAX_TRAIN_FRAMES: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptInput {
    pub program_id: String,
    pub utterances: Vec<Utterance>,
    pub marks: Vec<char>,
}

impl TranscriptInput {
    pub fn new(program_id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Self { program_id: program_id.into(), utterances, marks: DEFAULT_MARKS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = f64::NEG_INFINITY;
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(Error::InvalidTranscript(format!("{}: utterance {i} has empty text", self.program_id)));
            }
            if !(u.start_s.is_finite() && u.end_s.is_finite()) || u.end_s < u.start_s || u.start_s < last {
                return Err(Error::InvalidTranscript(format!("{}: utterance {i} timestamps are not non-decreasing", self.program_id)));
            }
            last = u.end_s;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    /// No sentence-final mark was found; the whole program is one segment.
    pub no_boundaries: bool,
    /// Characters after the last mark that were discarded.
    pub dropped_tail_chars: usize,
}

fn push_text(buf: &mut String, piece: &str) {
    let piece = piece.trim();
    if piece.is_empty() {
        return;
    }
    let joins = buf.chars().last().is_some_and(|c| !is_cjk(c) && !c.is_whitespace())
        && piece.chars().next().is_some_and(|c| !is_cjk(c));
    if joins {
        buf.push(' ');
    }
    buf.push_str(piece);
}

/// Splits the utterance stream after every sentence-final mark.
///
/// A mark's time is interpolated linearly over the characters of its
/// utterance, so a mark that ends an utterance lands on `end_s`. Each segment
/// runs from the previous mark (the program start for the first) to its own.
pub fn segment(input: &TranscriptInput) -> Result<Segmentation> {
    input.validate()?;
    let Some(first) = input.utterances.first() else {
        return Ok(Segmentation { segments: Vec::new(), no_boundaries: true, dropped_tail_chars: 0 });
    };
    let mut segments = Vec::new();
    let mut start = first.start_s;
    let mut buf = String::new();
    for u in &input.utterances {
        let chars: Vec<char> = u.text.chars().collect();
        let mut piece = String::new();
        for (i, &c) in chars.iter().enumerate() {
            piece.push(c);
            if input.marks.contains(&c) {
                let t = u.start_s + (u.end_s - u.start_s) * (i + 1) as f64 / chars.len() as f64;
                push_text(&mut buf, &piece);
                piece.clear();
                segments.push(Segment { text: core::mem::take(&mut buf), start_s: start, end_s: t });
                start = t;
            }
        }
        push_text(&mut buf, &piece);
    }
    if segments.is_empty() {
        let end = input.utterances.last().map_or(start, |u| u.end_s);
        return Ok(Segmentation { segments: alloc::vec![Segment { text: buf, start_s: start, end_s: end }], no_boundaries: true, dropped_tail_chars: 0 });
    }
    let dropped = buf.chars().filter(|c| !c.is_whitespace()).count();
    Ok(Segmentation { segments, no_boundaries: false, dropped_tail_chars: dropped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Relative crop box as fractions of the frame size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropGeometry {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropGeometry {
    pub const FULL: CropGeometry = CropGeometry { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if ok(self.x0, self.x1) && ok(self.y0, self.y1) {
            Ok(())
        } else {
            Err(Error::InvalidConfig { key: "crop", reason: format!("{self:?} is not a box inside the unit square") })
        }
    }

    /// Pixel box `(x, y, w, h)` for a `width × height` frame.
    pub fn to_pixels(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x = libm::round(self.x0 * width as f64) as usize;
        let y = libm::round(self.y0 * height as f64) as usize;
        let x1 = (libm::round(self.x1 * width as f64) as usize).clamp(x + 1, width.max(x + 1));
        let y1 = (libm::round(self.y1 * height as f64) as usize).clamp(y + 1, height.max(y + 1));
        (x, y, x1 - x, y1 - y)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub media: String,
    pub frame_start: usize,
    pub frame_end: usize,
    pub keypoints: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glosses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub duration_s: f64,
    pub frame_count: usize,
    pub frame_rate: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropGeometry>,
    /// Source frame `[width, height]` in pixels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_size: Option<[u32; 2]>,
}

/// `round(duration · fps)`.
pub fn frame_count(duration_s: f64, frame_rate: f64) -> usize {
    libm::round((duration_s * frame_rate).max(0.0)) as usize
}

/// Where a program's media and keypoints live and how it is cropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramSource {
    pub media: String,
    pub keypoints: String,
    pub frame_rate: f64,
    pub split: Split,
    pub crop: Option<CropGeometry>,
    pub frame_size: Option<[u32; 2]>,
}

/// Clip records for the segments of one program; ids are `<program>_<index>`.
pub fn records_from_segments(program_id: &str, segments: &[Segment], src: &ProgramSource) -> Vec<ClipRecord> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let duration = s.end_s - s.start_s;
            let n = frame_count(duration, src.frame_rate);
            let start = frame_count(s.start_s, src.frame_rate);
            ClipRecord {
                clip_id: format!("{program_id}_{i:04}"),
                media: src.media.clone(),
                frame_start: start,
                frame_end: start + n,
                keypoints: src.keypoints.clone(),
                text: s.text.clone(),
                glosses: None,
                label: None,
                duration_s: duration,
                frame_count: n,
                frame_rate: src.frame_rate,
                split: src.split,
                crop: src.crop,
                frame_size: src.frame_size,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ClipRecord>,
    /// Training clips removed for length.
    pub dropped: usize,
    /// Evaluation clips at or above the limit; they will be truncated when loaded.
    pub truncated: Vec<String>,
}

/// Keeps training clips with `frame_count < 512`; evaluation clips stay and
/// are listed for truncation. Records are never modified.
pub fn apply_filters(records: Vec<ClipRecord>) -> FilterOutcome {
    let mut out = FilterOutcome { kept: Vec::with_capacity(records.len()), dropped: 0, truncated: Vec::new() };
    for r in records {
        let long = r.frame_count >= MAX_TRAIN_FRAMES;
        match (r.split, long) {
            (Split::Train, true) => out.dropped += 1,
            (_, true) => {
                out.truncated.push(r.clip_id.clone());
                out.kept.push(r);
            }
            _ => out.kept.push(r),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `(bin start, count)` for every non-empty bin, ascending.
    pub bins: Vec<(f64, usize)>,
}

impl Histogram {
    fn build(values: impl Iterator<Item = f64>, bin_width: f64) -> Self {
        let mut m: BTreeMap<i64, usize> = BTreeMap::new();
        for v in values {
            *m.entry(libm::floor(v / bin_width) as i64).or_insert(0) += 1;
        }
        Self { bin_width, bins: m.into_iter().map(|(k, c)| (k as f64 * bin_width, c)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    Char,
    Word,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub clips: usize,
    pub total_duration_s: f64,
    pub mean_duration_s: f64,
    pub mean_text_len: f64,
    pub length_unit: LengthUnit,
    pub vocab_size: usize,
    pub duration_hist: Histogram,
    pub length_hist: Histogram,
}

fn text_units(text: &str, unit: LengthUnit) -> Vec<String> {
    match unit {
        LengthUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect(),
        LengthUnit::Word => text.split_whitespace().map(str::to_string).collect(),
    }
}

/// Clip count, mean duration and text length, vocabulary size and histograms
/// (1 s duration bins, 5-unit length bins).
pub fn corpus_stats(records: &[ClipRecord], unit: LengthUnit) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = records.len() as f64;
    let lens: Vec<usize> = records.iter().map(|r| text_units(&r.text, unit).len()).collect();
    let vocab: BTreeSet<String> = records.iter().flat_map(|r| text_units(&r.text, unit)).collect();
    let total: f64 = records.iter().map(|r| r.duration_s).sum();
    Ok(CorpusStats {
        clips: records.len(),
        total_duration_s: total,
        mean_duration_s: total / n,
        mean_text_len: lens.iter().sum::<usize>() as f64 / n,
        length_unit: unit,
        vocab_size: vocab.len(),
        duration_hist: Histogram::build(records.iter().map(|r| r.duration_s), 1.0),
        length_hist: Histogram::build(lens.iter().map(|&l| l as f64), 5.0),
    })
}
