//! Keypoint arrays and video frames on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use npyz::WriterBuilder;
use unisign_core::pose::{PoseSequence, NUM_KEYPOINTS};
use unisign_core::vision::{Frame, FrameSource};

use crate::error::{Result, RunError};

/// Reads a `T × 133 × 3` keypoint array (`<f4` or `<f8` `.npy`).
pub fn load_pose_sequence(path: &Path, clip_id: &str, frame_rate: f64) -> Result<PoseSequence> {
    let file = File::open(path).map_err(|e| RunError::io(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| malformed(path, e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 3 || shape[1] as usize != NUM_KEYPOINTS || shape[2] != 3 {
        return Err(malformed(path, format!("expected shape [T, {NUM_KEYPOINTS}, 3], found {shape:?}")));
    }
    let data: Vec<f64> = match npy.dtype().descr().trim_matches('\'') {
        "<f4" => npy.into_vec::<f32>().map_err(|e| malformed(path, e.to_string()))?.into_iter().map(f64::from).collect(),
        "<f8" => npy.into_vec::<f64>().map_err(|e| malformed(path, e.to_string()))?,
        other => return Err(malformed(path, format!("unsupported dtype {other}"))),
    };
    PoseSequence::new(clip_id, frame_rate, data).map_err(|e| match e {
        unisign_core::Error::MalformedFile(m) => malformed(path, m),
        other => other.into(),
    })
}

fn malformed(path: &Path, msg: String) -> RunError {
    unisign_core::Error::MalformedFile(format!("{}: {msg}", path.display())).into()
}

/// Writes keypoints as a `<f4` array of shape `T × 133 × 3`.
pub fn save_pose_sequence(path: &Path, seq: &PoseSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| RunError::io(path, e))?;
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&[seq.num_frames() as u64, NUM_KEYPOINTS as u64, 3])
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| RunError::io(path, e))?;
    w.extend(seq.data().iter().map(|&v| v as f32)).map_err(|e| RunError::io(path, e))?;
    w.finish().map_err(|e| RunError::io(path, e))
}

/// Frames stored as numbered image files in one directory (sorted by name).
pub struct FrameDir {
    files: Vec<PathBuf>,
}

impl FrameDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| RunError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(RunError::Media { path: dir.to_path_buf(), reason: "no png/jpg frames".into() });
        }
        Ok(Self { files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl FrameSource for FrameDir {
    fn frame(&self, index: usize) -> unisign_core::Result<Frame> {
        let path = self
            .files
            .get(index)
            .ok_or(unisign_core::Error::IndexOutOfRange { index, limit: self.files.len() })?;
        let img = image::open(path).map_err(|e| unisign_core::Error::Decode(format!("{}: {e}", path.display())))?.to_rgb8();
        Frame::new(img.width(), img.height(), img.into_raw())
    }
}

/// A source viewed from `offset` onward.
pub struct FrameWindow {
    inner: Arc<dyn FrameSource + Send + Sync>,
    offset: usize,
}

impl FrameWindow {
    pub fn new(inner: Arc<dyn FrameSource + Send + Sync>, offset: usize) -> Self {
        Self { inner, offset }
    }
}

impl FrameSource for FrameWindow {
    fn frame(&self, index: usize) -> unisign_core::Result<Frame> {
        self.inner.frame(index + self.offset)
    }
}

/// Writes one RGB frame as PNG.
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    image::RgbImage::from_raw(frame.width, frame.height, frame.rgb.clone())
        .ok_or_else(|| RunError::Media { path: path.to_path_buf(), reason: "buffer size does not match frame size".into() })?
        .save(path)
        .map_err(|e| RunError::Media { path: path.to_path_buf(), reason: e.to_string() })
}

/// Opens frames `[start, start + count)` of `media`.
///
/// A directory is read as numbered images. A video file is decoded with an
/// external `ffmpeg` into `cache`; without `ffmpeg` this is a decode error.
pub fn open_frames(media: &Path, start: usize, count: usize, frame_rate: f64, cache: &Path) -> Result<Arc<dyn FrameSource + Send + Sync>> {
    if media.is_dir() {
        let dir: Arc<dyn FrameSource + Send + Sync> = Arc::new(FrameDir::open(media)?);
        return Ok(Arc::new(FrameWindow::new(dir, start)));
    }
    if !media.exists() {
        return Err(RunError::Media { path: media.to_path_buf(), reason: "not found".into() });
    }
    let stem = media.file_stem().and_then(|s| s.to_str()).unwrap_or("video");
    let out = cache.join(format!("{stem}_{start}_{count}"));
    if !out.is_dir() {
        std::fs::create_dir_all(&out).map_err(|e| RunError::io(&out, e))?;
        let status = Command::new("ffmpeg")
            .args(["-v", "error", "-ss"])
            .arg(format!("{:.6}", start as f64 / frame_rate))
            .arg("-i")
            .arg(media)
            .args(["-frames:v", &count.to_string()])
            .arg(out.join("%06d.png"))
            .status();
        match status {
            Ok(s) if s.success() => {}
            Ok(s) => {
                let _ = std::fs::remove_dir_all(&out);
                return Err(unisign_core::Error::Decode(format!("{}: ffmpeg exited with {s}", media.display())).into());
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&out);
                return Err(unisign_core::Error::Decode(format!("{}: cannot run ffmpeg ({e})", media.display())).into());
            }
        }
    }
    Ok(Arc::new(FrameDir::open(&out)?))
}
