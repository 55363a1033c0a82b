//! Small synthetic corpora for smoke tests and toy experiments.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unisign_core::curation::{ClipRecord, Split};
use unisign_core::pose::{PoseSequence, NUM_KEYPOINTS};
use unisign_core::vision::Frame;

use crate::error::{Result, RunError};
use crate::io::{save_frame, save_pose_sequence};

pub const WORDS: [&str; 24] = [
    "the", "red", "blue", "green", "cat", "dog", "bird", "runs", "sleeps", "eats", "big", "small", "house", "tree", "river", "today",
    "we", "see", "a", "fast", "slow", "old", "new", "sun",
];

pub const CLASS_WORDS: [&str; 12] = ["book", "water", "friend", "school", "family", "help", "thanks", "work", "home", "food", "music", "teacher"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthKind {
    /// Every clip gets its own random trajectory and a distinct 3–6 word sentence.
    Sentences,
    /// Clips are noisy copies of per-class motion prototypes; the label is the class word.
    Classes { classes: usize, noise: f64 },
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub clips: usize,
    pub frames: usize,
    pub seed: u64,
    pub split: Split,
    pub frame_size: (u32, u32),
    /// Also write PNG frames per clip.
    pub with_frames: bool,
    pub prefix: String,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, clips: usize, frames: usize, seed: u64) -> Self {
        Self { kind, clips, frames, seed, split: Split::Train, frame_size: (256, 256), with_frames: false, prefix: "toy".into() }
    }
}

/// `count` distinct sentences of 3–6 words.
pub fn distinct_sentences<R: Rng>(rng: &mut R, count: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(3..=6);
        let s: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).expect("word list is non-empty")).collect();
        let s = s.join(" ");
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Base position plus a per-keypoint oscillation: `[x, y, phase, amplitude]`.
type Motion = Vec<[f64; 4]>;

fn random_motion<R: Rng>(rng: &mut R, size: (u32, u32)) -> Motion {
    let (w, h) = (f64::from(size.0), f64::from(size.1));
    (0..NUM_KEYPOINTS)
        .map(|_| [rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h), rng.random_range(0.0..TAU), rng.random_range(2.0..0.1 * w)])
        .collect()
}

fn render<R: Rng>(rng: &mut R, motion: &Motion, frames: usize, freq: f64, noise: f64) -> Vec<f64> {
    let mut data = Vec::with_capacity(frames * NUM_KEYPOINTS * 3);
    for t in 0..frames {
        for m in motion {
            let a = m[2] + freq * t as f64;
            let jitter = |rng: &mut R| if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            data.push(m[0] + m[3] * a.cos() + jitter(rng));
            data.push(m[1] + m[3] * a.sin() + jitter(rng));
            data.push(rng.random_range(0.3..1.0));
        }
    }
    data
}

fn frame_image(color: [u8; 3], t: usize, size: (u32, u32)) -> Frame {
    let (w, h) = size;
    let mut rgb = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let shade = ((x + y + 4 * t as u32) % 64) as u8;
            rgb.extend(color.map(|c| c.saturating_add(shade)));
        }
    }
    Frame::new(w, h, rgb).expect("buffer matches size")
}

/// Writes keypoints (and frames) under `dir` and returns the records.
pub fn synthesize(spec: &SynthSpec, dir: &Path) -> Result<Vec<ClipRecord>> {
    if spec.clips == 0 || spec.frames == 0 {
        return Err(RunError::Config("synthetic corpus needs at least one clip and one frame".into()));
    }
    std::fs::create_dir_all(dir.join("keypoints")).map_err(|e| RunError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (sentences, prototypes) = match spec.kind {
        SynthKind::Sentences => (distinct_sentences(&mut rng, spec.clips), Vec::new()),
        SynthKind::Classes { classes, .. } => {
            if classes == 0 || classes > CLASS_WORDS.len() {
                return Err(RunError::Config(format!("classes must be in 1..={}", CLASS_WORDS.len())));
            }
            // Prototypes come from their own stream so that train and test
            // corpora with different seeds share classes.
            let mut proto_rng = ChaCha8Rng::seed_from_u64(0x5EED_C1A5);
            let protos: Vec<(Motion, f64)> = (0..classes).map(|k| (random_motion(&mut proto_rng, spec.frame_size), 0.15 + 0.1 * k as f64)).collect();
            (Vec::new(), protos)
        }
    };
    let fps = 25.0;
    let mut records = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let clip_id = format!("{}_{i:04}", spec.prefix);
        let (data, text, label, glosses) = match spec.kind {
            SynthKind::Sentences => {
                let motion = random_motion(&mut rng, spec.frame_size);
                let freq = rng.random_range(0.1..0.6);
                (render(&mut rng, &motion, spec.frames, freq, 0.0), sentences[i].clone(), None, None)
            }
            SynthKind::Classes { classes, noise } => {
                let k = i % classes;
                let (motion, freq) = &prototypes[k];
                let word = CLASS_WORDS[k].to_string();
                (render(&mut rng, motion, spec.frames, *freq, noise), word.clone(), Some(word.clone()), Some(vec![word]))
            }
        };
        let keypoints = format!("keypoints/{clip_id}.npy");
        let seq = PoseSequence::new(clip_id.clone(), fps, data)?;
        save_pose_sequence(&dir.join(&keypoints), &seq)?;
        let media = if spec.with_frames {
            let rel = format!("frames/{clip_id}");
            let fdir = dir.join(&rel);
            std::fs::create_dir_all(&fdir).map_err(|e| RunError::io(&fdir, e))?;
            let color = [rng.random_range(0..160), rng.random_range(0..160), rng.random_range(0..160)];
            for t in 0..spec.frames {
                save_frame(&fdir.join(format!("{t:06}.png")), &frame_image(color, t, spec.frame_size))?;
            }
            rel
        } else {
            String::new()
        };
        records.push(ClipRecord {
            clip_id,
            media,
            frame_start: 0,
            frame_end: spec.frames,
            keypoints,
            text,
            glosses,
            label,
            duration_s: spec.frames as f64 / fps,
            frame_count: spec.frames,
            frame_rate: fps,
            split: spec.split,
            crop: None,
            frame_size: Some([spec.frame_size.0, spec.frame_size.1]),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_are_distinct_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = distinct_sentences(&mut rng, 40);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 40);
        assert!(s.iter().all(|x| (3..=6).contains(&x.split(' ').count())));
    }

    #[test]
    fn class_corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::new(SynthKind::Classes { classes: 3, noise: 1.0 }, 6, 5, 2);
        spec.with_frames = true;
        spec.frame_size = (32, 24);
        let recs = synthesize(&spec, dir.path()).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs[4].label.as_deref(), Some(CLASS_WORDS[1]));
        assert!(dir.path().join("frames/toy_0005/000004.png").exists());
        assert!(dir.path().join(&recs[0].keypoints).exists());
    }
}
