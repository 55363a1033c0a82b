//! Hand crops from video frames and the image encoder that turns them into
//! spatial feature maps for fusion.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::pose::{GroupId, GroupedPose};
use crate::tensor::Tensor;

/// An 8-bit RGB frame, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width as usize * height as usize * 3 {
            return Err(Error::Decode(format!("{}x{} frame with {} bytes", width, height, rgb.len())));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn solid(width: u32, height: u32, color: [u8; 3]) -> Self {
        let rgb = color.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, rgb }
    }

    /// Channel value in `[0,1]`, zero outside the frame.
    fn texel(&self, x: isize, y: isize, ch: usize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return 0.0;
        }
        f64::from(self.rgb[(y as usize * self.width as usize + x as usize) * 3 + ch]) / 255.0
    }
}

/// Random access to the decoded frames of one clip (0-based, aligned with the keypoint frame axis).
pub trait FrameSource {
    fn frame(&self, index: usize) -> Result<Frame>;
}

impl FrameSource for [Frame] {
    fn frame(&self, index: usize) -> Result<Frame> {
        self.get(index).cloned().ok_or_else(|| Error::Decode(format!("frame {index} out of range ({} frames)", self.len())))
    }
}

impl FrameSource for Vec<Frame> {
    fn frame(&self, index: usize) -> Result<Frame> {
        self.as_slice().frame(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Scale applied to the keypoint bounding box.
    pub margin: f64,
    /// Expand the box to a square on its longer side before resizing.
    pub square: bool,
    /// Side of the box used when all keypoints coincide.
    pub fallback_size: f64,
    /// Output side in pixels.
    pub size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { margin: 1.2, square: true, fallback_size: 64.0, size: 112 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Maps source-pixel points into the box's `[0,1]²` frame; returns the
    /// points plus how many had to be clamped.
    pub fn normalize_points(&self, points: &[[f64; 2]]) -> (Vec<[f64; 2]>, usize) {
        let mut clamped = 0;
        let out = points
            .iter()
            .map(|&[x, y]| {
                let u = (x - self.x0) / self.width();
                let v = (y - self.y0) / self.height();
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    clamped += 1;
                }
                [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
            })
            .collect();
        (out, clamped)
    }
}

/// Box around a hand's keypoints. The second value is `true` when the
/// degenerate fallback was used.
///
/// Boxes are not shifted or shrunk at frame borders; pixels beyond the frame
/// read as black.
pub fn hand_crop_box(points: &[[f64; 2]], cfg: &CropConfig) -> (CropBox, bool) {
    let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
    let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let (cx, cy) = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
    let (mut w, mut h) = ((xmax - xmin) * cfg.margin, (ymax - ymin) * cfg.margin);
    let degenerate = w.max(h) < 1e-9;
    if degenerate {
        w = cfg.fallback_size;
        h = cfg.fallback_size;
    } else if cfg.square {
        let side = w.max(h);
        w = side;
        h = side;
    } else {
        // A flat box still needs some extent on its thin axis.
        w = w.max(1.0);
        h = h.max(1.0);
    }
    (CropBox { x0: cx - w / 2.0, y0: cy - h / 2.0, x1: cx + w / 2.0, y1: cy + h / 2.0 }, degenerate)
}

/// Bilinear resample of `bbox` to a `size × size` image, `[size², 3]` in `[0,1]`.
pub fn resample_box(frame: &Frame, bbox: &CropBox, size: usize) -> Tensor {
    let mut out = Vec::with_capacity(size * size * 3);
    let sx = bbox.width() / size as f64;
    let sy = bbox.height() / size as f64;
    for i in 0..size {
        // Pixel centers sit at integer + 0.5 in source coordinates.
        let y = bbox.y0 + (i as f64 + 0.5) * sy - 0.5;
        let y0 = libm::floor(y);
        let fy = y - y0;
        for j in 0..size {
            let x = bbox.x0 + (j as f64 + 0.5) * sx - 0.5;
            let x0 = libm::floor(x);
            let fx = x - x0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            for ch in 0..3 {
                let v = (1.0 - fx) * (1.0 - fy) * frame.texel(xi, yi, ch)
                    + fx * (1.0 - fy) * frame.texel(xi + 1, yi, ch)
                    + (1.0 - fx) * fy * frame.texel(xi, yi + 1, ch)
                    + fx * fy * frame.texel(xi + 1, yi + 1, ch);
                out.push(v);
            }
        }
    }
    Tensor::new(&[size * size, 3], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandCrop {
    /// `[size², 3]`, RGB in `[0,1]`.
    pub image: Tensor,
    pub source_frame_index: usize,
    pub group: GroupId,
    pub crop_box: CropBox,
    pub degenerate: bool,
}

/// Crops one hand at each of `indices`.
pub fn crop_hand(frames: &dyn FrameSource, grouped: &GroupedPose, hand: GroupId, indices: &[usize], cfg: &CropConfig) -> Result<Vec<HandCrop>> {
    if !hand.is_hand() {
        return Err(Error::ConfigMismatch(format!("{hand} is not a hand group")));
    }
    let data = grouped.group(hand);
    indices
        .iter()
        .map(|&t| {
            if t >= grouped.frames {
                return Err(Error::IndexOutOfRange { index: t, limit: grouped.frames });
            }
            let frame = frames.frame(t)?;
            let (crop_box, degenerate) = hand_crop_box(data.frame_raw(t), cfg);
            Ok(HandCrop { image: resample_box(&frame, &crop_box, cfg.size), source_frame_index: t, group: hand, crop_box, degenerate })
        })
        .collect()
}

/// Both hands at every index, ordered index-major (lh then rh).
pub fn crop_hands(frames: &dyn FrameSource, grouped: &GroupedPose, indices: &[usize], cfg: &CropConfig) -> Result<Vec<HandCrop>> {
    let lh = crop_hand(frames, grouped, GroupId::LeftHand, indices, cfg)?;
    let rh = crop_hand(frames, grouped, GroupId::RightHand, indices, cfg)?;
    Ok(lh.into_iter().zip(rh).flat_map(|(a, b)| [a, b]).collect())
}

/// Any encoder mapping a `[size², 3]` crop to a `[h·w, C]` spatial map.
pub trait ImageEncoder {
    fn output_hw(&self) -> (usize, usize);
    fn output_channels(&self) -> usize;
    fn forward(&self, g: &mut Graph, image: Var) -> Var;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub crop: CropConfig,
    /// Output channels of each stride-2 3×3 convolution.
    pub conv_channels: Vec<usize>,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { crop: CropConfig::default(), conv_channels: alloc::vec![16, 32, 64, 128] }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

/// Stack of stride-2 convolutions (112 → 7 with four layers) and a 1×1 projection to `C`.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    layers: Vec<ConvLayer>,
    projection: Linear,
    out_hw: (usize, usize),
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &VisionConfig, out_channels: usize, rng: &mut R) -> Result<Self> {
        let mut side = cfg.crop.size;
        let mut c = 3;
        let mut layers = Vec::new();
        for (i, &co) in cfg.conv_channels.iter().enumerate() {
            let geom = ConvGeom { h: side, w: side, channels: c, kernel: 3, stride: 2, pad: 1 };
            if side < 2 {
                return Err(Error::InvalidConfig { key: "vision.conv_channels", reason: format!("too many layers for a {}px crop", cfg.crop.size) });
            }
            layers.push(ConvLayer {
                weight: store.add(format!("{prefix}.conv.{i}.weight"), xavier_uniform(rng, 9 * c, co)),
                bias: store.add(format!("{prefix}.conv.{i}.bias"), Tensor::zeros(&[1, co])),
                geom,
            });
            side = geom.out_h();
            c = co;
        }
        let projection = Linear::new(store, &format!("{prefix}.proj"), c, out_channels, rng);
        Ok(Self { layers, projection, out_hw: (side, side) })
    }
}

impl ImageEncoder for ConvEncoder {
    fn output_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    fn output_channels(&self) -> usize {
        self.projection.out_dim
    }

    fn forward(&self, g: &mut Graph, image: Var) -> Var {
        let mut x = image;
        for layer in &self.layers {
            let cols = g.im2col(x, layer.geom);
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            let y = g.matmul(cols, w);
            let y = g.add(y, b);
            x = g.relu(y);
        }
        self.projection.forward(g, x)
    }
}

/// Feature maps for the sampled crops of one hand: `K × h × w × C` as `[K·h·w, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatures {
    pub group: GroupId,
    pub frame_indices: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub maps: Tensor,
}

impl VisionFeatures {
    /// `[h·w, C]` map of the `k`-th crop.
    pub fn map(&self, k: usize) -> Tensor {
        let hw = self.h * self.w;
        let c = self.maps.cols();
        Tensor::new(&[hw, c], self.maps.data()[k * hw * c..(k + 1) * hw * c].to_vec())
    }
}

/// Encodes crops (evaluation mode) and groups the maps by hand, lh first.
pub fn encode_crops(encoder: &dyn ImageEncoder, store: &ParamStore, crops: &[HandCrop]) -> Result<Vec<VisionFeatures>> {
    if crops.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (h, w) = encoder.output_hw();
    let mut out = Vec::new();
    for hand in GroupId::HANDS {
        let mine: Vec<&HandCrop> = crops.iter().filter(|c| c.group == hand).collect();
        if mine.is_empty() {
            continue;
        }
        let mut data = Vec::new();
        for crop in &mine {
            let mut g = Graph::new(store);
            let x = g.constant(crop.image.clone());
            let y = encoder.forward(&mut g, x);
            data.extend_from_slice(g.value(y).data());
        }
        let c = encoder.output_channels();
        out.push(VisionFeatures {
            group: hand,
            frame_indices: mine.iter().map(|c| c.source_frame_index).collect(),
            h,
            w,
            maps: Tensor::new(&[mine.len() * h * w, c], data),
        });
    }
    Ok(out)
}

/// Human-readable description of a crop box, used in diagnostics.
pub fn describe_box(b: &CropBox) -> String {
    format!("({:.1},{:.1})-({:.1},{:.1})", b.x0, b.y0, b.x1, b.y1)
}
