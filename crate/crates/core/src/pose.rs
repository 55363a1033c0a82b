//! Whole-body keypoint sequences, sub-pose grouping and root normalization.
//!
//! Keypoints follow the 133-point COCO-WholeBody layout. Group index tables
//! are written 1-based (as they are usually published) and converted to
//! 0-based storage once, inside [`GroupSpec::from_one_based`].

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_KEYPOINTS: usize = 133;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupId {
    #[serde(rename = "lh")]
    LeftHand,
    #[serde(rename = "rh")]
    RightHand,
    #[serde(rename = "b")]
    Body,
    #[serde(rename = "f")]
    Face,
}

impl GroupId {
    /// Concatenation order of the fused sign feature.
    pub const ALL: [GroupId; 4] = [GroupId::LeftHand, GroupId::RightHand, GroupId::Body, GroupId::Face];
    pub const HANDS: [GroupId; 2] = [GroupId::LeftHand, GroupId::RightHand];

    pub fn index(self) -> usize {
        match self {
            GroupId::LeftHand => 0,
            GroupId::RightHand => 1,
            GroupId::Body => 2,
            GroupId::Face => 3,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            GroupId::LeftHand => "lh",
            GroupId::RightHand => "rh",
            GroupId::Body => "b",
            GroupId::Face => "f",
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, GroupId::LeftHand | GroupId::RightHand)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// One clip of whole-body keypoints: `T × 133 × (x, y, confidence)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub clip_id: String,
    pub frame_rate: f64,
    /// Source frame `(width, height)` in pixels, when known.
    pub frame_size: Option<(u32, u32)>,
    frames: usize,
    data: Vec<f64>,
}

impl PoseSequence {
    /// Validates a flat row-major `T·133·3` buffer.
    ///
    /// Confidences are clamped into `[0, 1]`; any non-finite value is rejected.
    pub fn new(clip_id: impl Into<String>, frame_rate: f64, mut data: Vec<f64>) -> Result<Self> {
        let stride = NUM_KEYPOINTS * 3;
        if data.len() % stride != 0 {
            return Err(Error::MalformedFile(alloc::format!(
                "{} values is not a multiple of 133x3",
                data.len()
            )));
        }
        let frames = data.len() / stride;
        if frames == 0 {
            return Err(Error::EmptyClip);
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::MalformedFile(alloc::format!(
                "non-finite value at frame {}, keypoint {}",
                pos / stride,
                (pos % stride) / 3
            )));
        }
        for c in data.iter_mut().skip(2).step_by(3) {
            *c = c.clamp(0.0, 1.0);
        }
        Ok(Self { clip_id: clip_id.into(), frame_rate, frame_size: None, frames, data })
    }

    pub fn with_frame_size(mut self, width: u32, height: u32) -> Self {
        self.frame_size = Some((width, height));
        self
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    /// `(x, y, confidence)` of 0-based keypoint `k` at frame `t`.
    pub fn keypoint(&self, t: usize, k: usize) -> [f64; 3] {
        let o = (t * NUM_KEYPOINTS + k) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn keypoint_mut(&mut self, t: usize, k: usize) -> &mut [f64] {
        let o = (t * NUM_KEYPOINTS + k) * 3;
        &mut self.data[o..o + 3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::IndexOutOfRange { index: end, limit: self.frames });
        }
        let stride = NUM_KEYPOINTS * 3;
        Ok(Self {
            clip_id: self.clip_id.clone(),
            frame_rate: self.frame_rate,
            frame_size: self.frame_size,
            frames: end - start,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Adds `(dx, dy)` to every keypoint.
    pub fn translate(&mut self, dx: f64, dy: f64) {
        for kp in self.data.chunks_exact_mut(3) {
            kp[0] += dx;
            kp[1] += dy;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group: GroupId,
    /// 0-based keypoint indices.
    pub indices: Vec<usize>,
    /// 0-based root index used for normalization, if any.
    pub root: Option<usize>,
}

impl GroupSpec {
    /// Builds a spec from 1-based keypoint numbers.
    pub fn from_one_based(group: GroupId, indices: &[usize], root: Option<usize>) -> Result<Self> {
        let conv = |i: usize| {
            if i == 0 || i > NUM_KEYPOINTS {
                Err(Error::IndexOutOfRange { index: i, limit: NUM_KEYPOINTS })
            } else {
                Ok(i - 1)
            }
        };
        Ok(Self {
            group,
            indices: indices.iter().map(|&i| conv(i)).collect::<Result<_>>()?,
            root: root.map(conv).transpose()?,
        })
    }

    pub fn node_count(&self) -> usize {
        self.indices.len()
    }

    /// Position of the root inside `indices`.
    pub fn root_position(&self) -> Option<usize> {
        self.root.and_then(|r| self.indices.iter().position(|&i| i == r))
    }
}

/// The four canonical groups: hands 21+21, body 9, face 18.
pub fn canonical_specs() -> [GroupSpec; 4] {
    let lh: Vec<usize> = (92..=112).collect();
    let rh: Vec<usize> = (113..=133).collect();
    let body: Vec<usize> = core::iter::once(1).chain(4..=11).collect();
    let face: Vec<usize> = [24, 26, 28, 30, 32, 34, 36, 38, 40, 54].into_iter().chain(84..=91).collect();
    [
        GroupSpec::from_one_based(GroupId::LeftHand, &lh, Some(92)),
        GroupSpec::from_one_based(GroupId::RightHand, &rh, Some(113)),
        GroupSpec::from_one_based(GroupId::Body, &body, None),
        GroupSpec::from_one_based(GroupId::Face, &face, Some(54)),
    ]
    .map(|s| s.expect("canonical indices are in range"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    /// Divide coordinates by the larger side of the source frame (when known).
    pub scale_by_frame: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { scale_by_frame: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupData {
    pub group: GroupId,
    pub nodes: usize,
    /// `T·N × 2` root-relative (and optionally scaled) coordinates.
    pub normalized: Vec<[f64; 2]>,
    /// `T·N` confidences, untouched.
    pub confidence: Vec<f64>,
    /// `T·N × 2` source-pixel coordinates.
    pub raw: Vec<[f64; 2]>,
}

impl GroupData {
    /// Model input `[T·N, 2]` (or `[T·N, 3]` with confidence appended).
    pub fn input_tensor(&self, with_confidence: bool) -> Tensor {
        let width = if with_confidence { 3 } else { 2 };
        let mut data = Vec::with_capacity(self.normalized.len() * width);
        for (xy, c) in self.normalized.iter().zip(&self.confidence) {
            data.extend_from_slice(xy);
            if with_confidence {
                data.push(*c);
            }
        }
        Tensor::new(&[self.normalized.len(), width], data)
    }

    pub fn frame_raw(&self, t: usize) -> &[[f64; 2]] {
        &self.raw[t * self.nodes..(t + 1) * self.nodes]
    }

    pub fn frame_confidence(&self, t: usize) -> &[f64] {
        &self.confidence[t * self.nodes..(t + 1) * self.nodes]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedPose {
    pub clip_id: String,
    pub frames: usize,
    pub frame_size: Option<(u32, u32)>,
    groups: [GroupData; 4],
}

impl GroupedPose {
    pub fn group(&self, id: GroupId) -> &GroupData {
        &self.groups[id.index()]
    }

    pub fn groups(&self) -> &[GroupData; 4] {
        &self.groups
    }
}

/// Selects each group's keypoints and normalizes hands and face relative to their root.
///
/// The body group keeps its coordinates (apart from the optional frame scaling).
pub fn group_and_normalize(seq: &PoseSequence, specs: &[GroupSpec], cfg: &NormalizeConfig) -> Result<GroupedPose> {
    let scale = match (cfg.scale_by_frame, seq.frame_size) {
        (true, Some((w, h))) if w.max(h) > 0 => 1.0 / f64::from(w.max(h)),
        _ => 1.0,
    };
    let t_len = seq.num_frames();
    let mut slots: [Option<GroupData>; 4] = Default::default();
    for spec in specs {
        if let Some(&bad) = spec.indices.iter().chain(spec.root.iter()).find(|&&i| i >= NUM_KEYPOINTS) {
            return Err(Error::IndexOutOfRange { index: bad + 1, limit: NUM_KEYPOINTS });
        }
        let n = spec.node_count();
        let mut normalized = Vec::with_capacity(t_len * n);
        let mut raw = Vec::with_capacity(t_len * n);
        let mut confidence = Vec::with_capacity(t_len * n);
        for t in 0..t_len {
            let origin = spec.root.map_or([0.0, 0.0], |r| {
                let k = seq.keypoint(t, r);
                [k[0], k[1]]
            });
            for &k in &spec.indices {
                let [x, y, c] = seq.keypoint(t, k);
                raw.push([x, y]);
                normalized.push([(x - origin[0]) * scale, (y - origin[1]) * scale]);
                confidence.push(c);
            }
        }
        slots[spec.group.index()] = Some(GroupData { group: spec.group, nodes: n, normalized, confidence, raw });
    }
    let [lh, rh, b, f] = slots;
    let missing = |id: GroupId| Error::GroupMissing(id.short());
    Ok(GroupedPose {
        clip_id: seq.clip_id.clone(),
        frames: t_len,
        frame_size: seq.frame_size,
        groups: [
            lh.ok_or_else(|| missing(GroupId::LeftHand))?,
            rh.ok_or_else(|| missing(GroupId::RightHand))?,
            b.ok_or_else(|| missing(GroupId::Body))?,
            f.ok_or_else(|| missing(GroupId::Face))?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn clip(frames: usize) -> PoseSequence {
        let mut data = Vec::new();
        for t in 0..frames {
            for k in 0..NUM_KEYPOINTS {
                data.extend_from_slice(&[10.0 * k as f64 + t as f64, 3.0 * k as f64 - t as f64, 0.5]);
            }
        }
        PoseSequence::new("c", 25.0, data).unwrap()
    }

    #[test]
    fn canonical_group_sizes() {
        let specs = canonical_specs();
        let counts: Vec<usize> = specs.iter().map(GroupSpec::node_count).collect();
        assert_eq!(counts, vec![21, 21, 9, 18]);
        assert_eq!(counts.iter().sum::<usize>(), 69);
        assert_eq!(specs[0].root, Some(91));
        assert_eq!(specs[1].root, Some(112));
        assert_eq!(specs[2].root, None);
        assert_eq!(specs[3].root, Some(53));
        assert_eq!(specs[3].root_position(), Some(9));
        assert_eq!(specs[2].indices, vec![0, 3, 4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn shape_and_errors_on_load() {
        assert_eq!(clip(10).num_frames(), 10);
        assert!(matches!(PoseSequence::new("x", 25.0, vec![0.0; 10 * 120 * 3]), Err(Error::MalformedFile(_))));
        assert!(matches!(PoseSequence::new("x", 25.0, vec![]), Err(Error::EmptyClip)));
        let mut data = vec![0.0; 133 * 3];
        data[0] = f64::NAN;
        assert!(matches!(PoseSequence::new("x", 25.0, data), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn roots_are_origin_and_body_is_raw() {
        let seq = clip(3);
        let gp = group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig::default()).unwrap();
        assert_eq!(gp.frames, 3);
        for (g, root_pos) in [(GroupId::LeftHand, 0), (GroupId::RightHand, 0), (GroupId::Face, 9)] {
            let d = gp.group(g);
            for t in 0..3 {
                assert_eq!(d.normalized[t * d.nodes + root_pos], [0.0, 0.0]);
            }
        }
        let b = gp.group(GroupId::Body);
        assert_eq!(b.normalized, b.raw);
    }

    #[test]
    fn collapsed_hand_normalizes_to_zero() {
        let mut seq = clip(2);
        for k in 91..112 {
            let kp = seq.keypoint_mut(1, k);
            kp[0] = 7.0;
            kp[1] = -2.0;
        }
        let gp = group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig::default()).unwrap();
        let lh = gp.group(GroupId::LeftHand);
        assert!(lh.normalized[21..42].iter().all(|p| *p == [0.0, 0.0]));
    }

    #[test]
    fn out_of_range_spec_is_rejected() {
        let mut specs = canonical_specs().to_vec();
        specs[2].indices.push(140);
        let err = group_and_normalize(&clip(1), &specs, &NormalizeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
        assert!(GroupSpec::from_one_based(GroupId::Body, &[134], None).is_err());
    }

    #[test]
    fn missing_group_is_reported() {
        let specs = canonical_specs();
        let err = group_and_normalize(&clip(1), &specs[..3], &NormalizeConfig::default()).unwrap_err();
        assert_eq!(err, Error::GroupMissing("f"));
    }

    #[test]
    fn frame_scaling_divides_by_longer_side() {
        let seq = clip(1).with_frame_size(200, 100);
        let gp = group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig::default()).unwrap();
        let b = gp.group(GroupId::Body);
        assert_eq!(b.normalized[0], [b.raw[0][0] / 200.0, b.raw[0][1] / 200.0]);
        let off = group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig { scale_by_frame: false }).unwrap();
        assert_eq!(off.group(GroupId::Body).normalized, off.group(GroupId::Body).raw);
    }
}
