//! Prior-guided fusion of hand pose features with hand RGB feature maps.
//!
//! Per sampled frame and hand:
//! 1. pose nodes attend to the whole RGB map (multi-head attention);
//! 2. each node samples the map around its own keypoint (deformable
//!    attention whose reference points are the keypoint coordinates);
//! 3. a gate blends the result back: `F̃ = (1 − g)·F + g·F̂`.
//!
//! The gate is `g = σ(W·[F, F̂] + b) · τ` with `W`, `b` and the scalar `τ`
//! all zero at initialization, so a fresh module returns its pose input
//! unchanged.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Global attention followed by keypoint-anchored deformable sampling.
    Deformable,
    /// Global cross-attention only.
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgfConfig {
    pub heads: usize,
    pub deform_points: usize,
    /// One gate value per channel instead of one per node.
    pub per_channel_gate: bool,
    pub mode: FusionMode,
}

impl Default for PgfConfig {
    fn default() -> Self {
        Self { heads: 8, deform_points: 4, per_channel_gate: false, mode: FusionMode::Deformable }
    }
}

impl PgfConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::InvalidConfig { key: "pgf.heads", reason: format!("{} heads do not divide {channels} channels", self.heads) });
        }
        if self.deform_points == 0 {
            return Err(Error::InvalidConfig { key: "pgf.deform_points", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pgf {
    pub cfg: PgfConfig,
    channels: usize,
    global: MultiHeadAttention,
    offsets: Linear,
    weights: Linear,
    value: Linear,
    out: Linear,
    gate: Linear,
    gate_scale: ParamId,
}

/// Graph handles produced by one [`Pgf::fuse_frame`] call.
pub struct FuseOutput {
    /// `[N, C]` blended features.
    pub fused: Var,
    /// `[N, C]` fully fused features before gating.
    pub candidate: Var,
    /// `[N, 1]` (or `[N, C]`) gate values.
    pub gate: Var,
    /// Per-head `[N·P, 2]` sampling locations (empty in cross-attention mode).
    pub locations: Vec<Var>,
    /// Keypoints that fell outside the crop and were clamped.
    pub clamped: usize,
}

impl Pgf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &PgfConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(channels)?;
        let hp = cfg.heads * cfg.deform_points;
        let gate_out = if cfg.per_channel_gate { channels } else { 1 };
        Ok(Self {
            cfg: *cfg,
            channels,
            global: MultiHeadAttention::new(store, &format!("{prefix}.global"), channels, channels, cfg.heads, rng),
            offsets: Linear::zeros(store, &format!("{prefix}.offsets"), channels, hp * 2),
            weights: Linear::new(store, &format!("{prefix}.attn"), channels, hp, rng),
            value: Linear::new(store, &format!("{prefix}.value"), channels, channels, rng),
            out: Linear::new(store, &format!("{prefix}.out"), channels, channels, rng),
            gate: Linear::zeros(store, &format!("{prefix}.gate"), 2 * channels, gate_out),
            gate_scale: store.add(format!("{prefix}.gate.scale"), Tensor::zeros(&[1, 1])),
        })
    }

    pub fn gate_scale(&self) -> ParamId {
        self.gate_scale
    }

    /// Fuses one frame: `pose` is `[N, C]`, `rgb` is `[h·w, C]`, `coords`
    /// are the `N` keypoints in the crop's normalized frame.
    pub fn fuse_frame(&self, g: &mut Graph, pose: Var, rgb: Var, hw: (usize, usize), coords: &[[f64; 2]]) -> FuseOutput {
        let n = coords.len();
        debug_assert_eq!(g.shape(pose), (n, self.channels));
        let mut clamped = 0;
        let refs: Vec<[f64; 2]> = coords
            .iter()
            .map(|&[u, v]| {
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    clamped += 1;
                }
                [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
            })
            .collect();

        let attended = self.global.forward(g, pose, rgb, None);
        let global = g.add(pose, attended);

        let mut locations = Vec::new();
        let candidate = match self.cfg.mode {
            FusionMode::CrossAttention => global,
            FusionMode::Deformable => {
                let (heads, points) = (self.cfg.heads, self.cfg.deform_points);
                let hd = self.channels / heads;
                let offsets = self.offsets.forward(g, global);
                let logits = self.weights.forward(g, global);
                let values = self.value.forward(g, rgb);
                let mut reference = Vec::with_capacity(n * points * 2);
                for r in &refs {
                    for _ in 0..points {
                        reference.extend_from_slice(r);
                    }
                }
                let reference = g.constant(Tensor::new(&[n * points, 2], reference));
                let mut per_head = Vec::with_capacity(heads);
                for h in 0..heads {
                    let off = g.slice_cols(offsets, h * points * 2, points * 2);
                    let off = g.reshape(off, n * points, 2);
                    let loc = g.add(off, reference);
                    locations.push(loc);
                    let vh = g.slice_cols(values, h * hd, hd);
                    let sampled = g.bilinear_sample(vh, loc, hw.0, hw.1);
                    let a = g.slice_cols(logits, h * points, points);
                    let a = g.softmax(a);
                    let a = g.reshape(a, n * points, 1);
                    let weighted = g.mul(sampled, a);
                    let pooled = g.row_group_mean(weighted, points);
                    per_head.push(g.scale(pooled, points as f64));
                }
                let cat = if heads == 1 { per_head[0] } else { g.concat_cols(&per_head) };
                let local = self.out.forward(g, cat);
                g.add(global, local)
            }
        };

        let both = g.concat_cols(&[pose, candidate]);
        let z = self.gate.forward(g, both);
        let s = g.sigmoid(z);
        let tau = g.param(self.gate_scale);
        let gate = g.mul(s, tau);
        let keep = g.affine(gate, -1.0, 1.0);
        let a = g.mul(pose, keep);
        let b = g.mul(candidate, gate);
        let fused = g.add(a, b);
        FuseOutput { fused, candidate, gate, locations, clamped }
    }
}

/// Bilinear lookup of `[h·w, C]` `map` at normalized points (clamped to the unit square).
pub fn deform_sample(map: &Tensor, h: usize, w: usize, points: &[[f64; 2]]) -> Vec<Vec<f64>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(map.clone());
    let p = g.constant(Tensor::new(&[points.len(), 2], points.iter().flatten().copied().collect()));
    let s = g.bilinear_sample(m, p, h, w);
    let out = g.value(s);
    (0..out.rows()).map(|r| out.row(r).to_vec()).collect()
}
