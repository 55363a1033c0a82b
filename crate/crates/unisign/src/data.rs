//! Manifest records turned into model-ready clips.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use unisign_core::curation::ClipRecord;
use unisign_core::pose::{canonical_specs, group_and_normalize, GroupedPose, NormalizeConfig, PoseSequence};
use unisign_core::task::{build_target, Task};
use unisign_core::tokenizer::Tokenizer;
use unisign_core::vision::{Frame, FrameSource};

use crate::error::{Result, RunError};
use crate::io::{load_pose_sequence, open_frames};
use crate::manifest::Manifest;

pub type SharedFrames = Arc<dyn FrameSource + Send + Sync>;

#[derive(Clone)]
pub struct PreparedClip {
    pub record: ClipRecord,
    pub grouped: GroupedPose,
    pub frames: Option<SharedFrames>,
    /// Frames cut from the start when the clip was shortened.
    pub truncated_from: Option<usize>,
}

impl PreparedClip {
    pub fn id(&self) -> &str {
        &self.record.clip_id
    }
}

/// A clip with its token target for one task.
#[derive(Clone)]
pub struct TrainClip {
    pub clip: PreparedClip,
    pub target: Vec<usize>,
    pub target_text: String,
}

pub struct LoadOptions<'a> {
    pub normalize: NormalizeConfig,
    /// Longer clips keep their central `max_frames` frames.
    pub max_frames: usize,
    /// Open video frames (needed only with an RGB branch).
    pub with_frames: bool,
    pub frame_cache: &'a Path,
}

/// Keypoint files shared by several clips are read once.
#[derive(Default)]
pub struct PoseCache {
    seqs: HashMap<PathBuf, Arc<PoseSequence>>,
}

impl PoseCache {
    fn get(&mut self, path: &Path, frame_rate: f64) -> Result<Arc<PoseSequence>> {
        if let Some(s) = self.seqs.get(path) {
            return Ok(s.clone());
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("keypoints");
        let s = Arc::new(load_pose_sequence(path, id, frame_rate)?);
        self.seqs.insert(path.to_path_buf(), s.clone());
        Ok(s)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Frames of a source restricted to a pixel rectangle.
struct CroppedFrames {
    inner: SharedFrames,
    rect: (usize, usize, usize, usize),
}

impl FrameSource for CroppedFrames {
    fn frame(&self, index: usize) -> unisign_core::Result<Frame> {
        let f = self.inner.frame(index)?;
        let (x, y, w, h) = self.rect;
        let (fw, fh) = (f.width as usize, f.height as usize);
        let mut rgb = vec![0u8; w * h * 3];
        for r in 0..h.min(fh.saturating_sub(y)) {
            let src = ((y + r) * fw + x) * 3;
            let n = w.min(fw.saturating_sub(x)) * 3;
            rgb[r * w * 3..r * w * 3 + n].copy_from_slice(&f.rgb[src..src + n]);
        }
        Frame::new(w as u32, h as u32, rgb)
    }
}

/// The keypoints of one record: the `[frame_start, frame_end)` slice of a
/// program-level file, or the whole file when it holds just this clip.
fn clip_sequence(record: &ClipRecord, full: &PoseSequence) -> Result<PoseSequence> {
    let n = full.num_frames();
    let mut seq = if n >= record.frame_end && record.frame_end > record.frame_start {
        full.slice_frames(record.frame_start, record.frame_end)?
    } else if n == record.frame_count {
        full.clone()
    } else {
        return Err(unisign_core::Error::MalformedFile(format!(
            "{}: keypoints have {n} frames, record needs [{}, {})",
            record.clip_id, record.frame_start, record.frame_end
        ))
        .into());
    };
    seq.clip_id = record.clip_id.clone();
    Ok(seq)
}

pub fn prepare_clip(record: &ClipRecord, base: &Path, opts: &LoadOptions<'_>, cache: &mut PoseCache) -> Result<PreparedClip> {
    let full = cache.get(&resolve(base, &record.keypoints), record.frame_rate)?;
    let mut seq = clip_sequence(record, &full)?;
    let mut truncated_from = None;
    if seq.num_frames() > opts.max_frames {
        let start = (seq.num_frames() - opts.max_frames) / 2;
        log::warn!("{}: {} frames, keeping the central {}", record.clip_id, seq.num_frames(), opts.max_frames);
        seq = seq.slice_frames(start, start + opts.max_frames)?;
        truncated_from = Some(start);
    }
    let mut rect = None;
    if let Some([w, h]) = record.frame_size {
        seq = seq.with_frame_size(w, h);
        if let Some(crop) = record.crop {
            let r = crop.to_pixels(w as usize, h as usize);
            seq.translate(-(r.0 as f64), -(r.1 as f64));
            seq = seq.with_frame_size(r.2 as u32, r.3 as u32);
            rect = Some(r);
        }
    } else if record.crop.is_some() {
        log::warn!("{}: crop geometry ignored because the frame size is unknown", record.clip_id);
    }
    let grouped = group_and_normalize(&seq, &canonical_specs(), &opts.normalize)?;

    let frames = if opts.with_frames && !record.media.is_empty() {
        let start = record.frame_start + truncated_from.unwrap_or(0);
        let src = open_frames(&resolve(base, &record.media), start, seq.num_frames(), record.frame_rate, opts.frame_cache)?;
        Some(match rect {
            Some(rect) => Arc::new(CroppedFrames { inner: src, rect }) as SharedFrames,
            None => src,
        })
    } else {
        None
    };
    Ok(PreparedClip { record: record.clone(), grouped, frames, truncated_from })
}

pub fn prepare_manifest(manifest: &Manifest, opts: &LoadOptions<'_>) -> Result<Vec<PreparedClip>> {
    let mut cache = PoseCache::default();
    manifest.records.iter().map(|r| prepare_clip(r, manifest.base_dir(), opts, &mut cache)).collect()
}

/// Texts the tokenizer is fitted on: sentences, gloss strings and labels.
pub fn annotation_texts<'a>(records: impl IntoIterator<Item = &'a ClipRecord>) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        if !r.text.trim().is_empty() {
            out.push(r.text.clone());
        }
        if let Some(g) = &r.glosses {
            out.push(g.join(" "));
        }
        if let Some(l) = &r.label {
            out.push(l.clone());
        }
    }
    out
}

/// Attaches `task` targets (sentences when `task` is `None`).
pub fn with_targets(clips: Vec<PreparedClip>, task: Option<Task>, tokenizer: &Tokenizer) -> Result<Vec<TrainClip>> {
    clips
        .into_iter()
        .map(|clip| {
            let target = build_target(&clip.record, task.unwrap_or(Task::Slt))?;
            let ids = tokenizer.encode(&target.text).ids;
            if ids.is_empty() {
                return Err(RunError::Core(unisign_core::Error::EmptyTarget));
            }
            Ok(TrainClip { clip, target: ids, target_text: target.text })
        })
        .collect()
}
