//! Line-delimited JSON files: transcripts in, clip manifests out.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unisign_core::curation::{ClipRecord, CropGeometry, ProgramSource, Split, Utterance};

use crate::error::{Result, RunError};

/// First line of every manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub config_hash: String,
    pub clips: usize,
}

#[derive(Serialize)]
struct MetaLine<'a> {
    _meta: &'a ManifestMeta,
}

/// Writes records sorted by `clip_id` after a `{"_meta": …}` header line.
pub fn write_manifest(path: &Path, records: &[ClipRecord], config_hash: &str) -> Result<()> {
    let mut sorted: Vec<&ClipRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| RunError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let meta = ManifestMeta { config_hash: config_hash.to_string(), clips: records.len() };
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| RunError::io(path, e));
    put(serde_json::to_string(&MetaLine { _meta: &meta }).expect("meta serializes"))?;
    for r in sorted {
        put(serde_json::to_string(r).expect("record serializes"))?;
    }
    w.flush().map_err(|e| RunError::io(path, e))
}

pub struct Manifest {
    pub path: PathBuf,
    pub meta: Option<ManifestMeta>,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    /// Directory that relative media and keypoint paths are resolved against.
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in read_lines(path)? {
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|source| RunError::Json { path: path.to_path_buf(), line: i, source })?;
        if let Some(m) = value.get("_meta") {
            meta = Some(serde_json::from_value(m.clone()).map_err(|source| RunError::Json { path: path.to_path_buf(), line: i, source })?);
            continue;
        }
        records.push(serde_json::from_value(value).map_err(|source| RunError::Json { path: path.to_path_buf(), line: i, source })?);
    }
    Ok(Manifest { path: path.to_path_buf(), meta, records })
}

/// Non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| RunError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// One `{text, start_s, end_s}` object per line.
pub fn read_transcript(path: &Path) -> Result<Vec<Utterance>> {
    read_lines(path)?
        .into_iter()
        .map(|(i, line)| serde_json::from_str(&line).map_err(|source| RunError::Json { path: path.to_path_buf(), line: i, source }))
        .collect()
}

/// Per-program media location, split and station crop (`programs.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramEntry {
    pub media: String,
    pub keypoints: String,
    pub frame_rate: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_size: Option<[u32; 2]>,
}

impl ProgramEntry {
    pub fn source(&self) -> ProgramSource {
        ProgramSource {
            media: self.media.clone(),
            keypoints: self.keypoints.clone(),
            frame_rate: self.frame_rate,
            split: self.split,
            crop: self.crop,
            frame_size: self.frame_size,
        }
    }
}

pub fn read_programs(path: &Path) -> Result<BTreeMap<String, ProgramEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let programs: BTreeMap<String, ProgramEntry> =
        serde_json::from_str(&text).map_err(|source| RunError::Json { path: path.to_path_buf(), line: source.line(), source })?;
    for (id, p) in &programs {
        if let Some(c) = &p.crop {
            c.validate().map_err(|e| RunError::Config(format!("programs.json: {id}: {e}")))?;
        }
        if !(p.frame_rate > 0.0) {
            return Err(RunError::Config(format!("programs.json: {id}: frame_rate must be positive")));
        }
    }
    Ok(programs)
}
