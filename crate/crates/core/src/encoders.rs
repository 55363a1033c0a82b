//! Per-group spatial graph encoders, short-term temporal encoders and the
//! node-pool + concatenation that produces the `T × 4C` sign feature.
//!
//! Features of one group live in a `[T·N, C]` matrix with row `t·N + n`.
//! Every group owns its own lift, spatial and temporal weights.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::pose::{GroupId, GroupedPose};
use crate::skeleton::{normalized_adjacency, GroupEdges};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_linear_dim: usize,
    pub gcn_dims: Vec<usize>,
    pub temporal_dims: Vec<usize>,
    pub temporal_kernel: usize,
    /// Append keypoint confidence as a third input channel.
    pub use_confidence: bool,
    pub edges: GroupEdges,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_linear_dim: 64,
            gcn_dims: alloc::vec![64, 128, 256],
            temporal_dims: alloc::vec![256, 256, 256],
            temporal_kernel: 5,
            use_confidence: false,
            edges: GroupEdges::default(),
        }
    }
}

impl EncoderConfig {
    /// Output channel count `C` of every group.
    pub fn channels(&self) -> usize {
        *self.temporal_dims.last().or(self.gcn_dims.last()).unwrap_or(&self.input_linear_dim)
    }

    /// Dimension of the spatial-encoder output fed to fusion and the temporal encoder.
    pub fn spatial_channels(&self) -> usize {
        *self.gcn_dims.last().unwrap_or(&self.input_linear_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::InvalidConfig {
                key: "encoder.temporal_kernel",
                reason: format!("{} is even; the kernel must be odd", self.temporal_kernel),
            });
        }
        if self.input_linear_dim == 0 || self.gcn_dims.contains(&0) || self.temporal_dims.contains(&0) {
            return Err(Error::InvalidConfig { key: "encoder", reason: "zero-width layer".into() });
        }
        Ok(())
    }

    /// Time steps on either side of a frame that can influence its output.
    pub fn temporal_radius(&self) -> usize {
        self.temporal_dims.len() * (self.temporal_kernel / 2)
    }
}

#[derive(Clone, Debug)]
struct GcnLayer {
    linear: Linear,
    norm: LayerNorm,
    residual: bool,
}

impl GcnLayer {
    fn forward(&self, g: &mut Graph, x: Var, adjacency: &Tensor) -> Var {
        let mixed = g.block_mix(x, adjacency);
        let h = self.linear.forward(g, mixed);
        let h = g.relu(h);
        let h = self.norm.forward(g, h);
        if self.residual {
            g.add(h, x)
        } else {
            h
        }
    }
}

/// Spatial graph mix followed by a `kernel × 1` temporal convolution with zero padding.
#[derive(Clone, Debug)]
struct StGcnLayer {
    spatial: Linear,
    temporal_weight: ParamId,
    temporal_bias: ParamId,
    norm: LayerNorm,
    residual: bool,
}

impl StGcnLayer {
    fn forward(&self, g: &mut Graph, x: Var, adjacency: &Tensor, nodes: usize) -> Var {
        let mixed = g.block_mix(x, adjacency);
        let s = self.spatial.forward(g, mixed);
        let s = g.relu(s);
        let w = g.param(self.temporal_weight);
        let b = g.param(self.temporal_bias);
        let t = g.temporal_conv(s, w, nodes);
        let t = g.add(t, b);
        let t = g.relu(t);
        let t = self.norm.forward(g, t);
        if self.residual {
            g.add(t, x)
        } else {
            t
        }
    }
}

/// Lift + spatial GCN + temporal ST-GCN for one sub-pose group.
#[derive(Clone, Debug)]
pub struct GroupEncoder {
    pub group: GroupId,
    pub nodes: usize,
    adjacency: Tensor,
    lift: Linear,
    gcn: Vec<GcnLayer>,
    temporal: Vec<StGcnLayer>,
}

impl GroupEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: GroupId,
        nodes: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let adjacency = normalized_adjacency(cfg.edges.for_group(group), nodes)?;
        let in_dim = if cfg.use_confidence { 3 } else { 2 };
        let name = format!("{prefix}.{}", group.short());
        let lift = Linear::new(store, &format!("{name}.lift"), in_dim, cfg.input_linear_dim, rng);
        let mut gcn = Vec::new();
        let mut c = cfg.input_linear_dim;
        for (i, &d) in cfg.gcn_dims.iter().enumerate() {
            gcn.push(GcnLayer {
                linear: Linear::new(store, &format!("{name}.gcn.{i}"), c, d, rng),
                norm: LayerNorm::new(store, &format!("{name}.gcn.{i}.norm"), d),
                residual: c == d,
            });
            c = d;
        }
        let mut temporal = Vec::new();
        for (i, &d) in cfg.temporal_dims.iter().enumerate() {
            let k = cfg.temporal_kernel;
            temporal.push(StGcnLayer {
                spatial: Linear::new(store, &format!("{name}.tcn.{i}.spatial"), c, d, rng),
                temporal_weight: store.add(format!("{name}.tcn.{i}.temporal.weight"), xavier_uniform(rng, k * d, d)),
                temporal_bias: store.add(format!("{name}.tcn.{i}.temporal.bias"), Tensor::zeros(&[1, d])),
                norm: LayerNorm::new(store, &format!("{name}.tcn.{i}.norm"), d),
                residual: c == d,
            });
            c = d;
        }
        Ok(Self { group, nodes, adjacency, lift, gcn, temporal })
    }

    /// `[T·N, 2|3] → [T·N, C_spatial]`.
    pub fn spatial(&self, g: &mut Graph, input: Var) -> Var {
        let mut x = self.lift.forward(g, input);
        for layer in &self.gcn {
            x = layer.forward(g, x, &self.adjacency);
        }
        x
    }

    /// `[T·N, C_spatial] → [T·N, C]`, length preserving.
    pub fn temporal(&self, g: &mut Graph, x: Var) -> Var {
        let mut x = x;
        for layer in &self.temporal {
            x = layer.forward(g, x, &self.adjacency, self.nodes);
        }
        x
    }
}

/// The four group encoders, in [`GroupId::ALL`] order.
#[derive(Clone, Debug)]
pub struct PoseEncoders {
    pub groups: Vec<GroupEncoder>,
    pub cfg: EncoderConfig,
}

impl PoseEncoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, node_counts: [usize; 4], cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let groups = GroupId::ALL
            .iter()
            .zip(node_counts)
            .map(|(&gid, n)| GroupEncoder::new(store, prefix, gid, n, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { groups, cfg: cfg.clone() })
    }

    pub fn group(&self, id: GroupId) -> &GroupEncoder {
        &self.groups[id.index()]
    }

    pub fn check_nodes(&self, grouped: &GroupedPose) -> Result<()> {
        for enc in &self.groups {
            let n = grouped.group(enc.group).nodes;
            if n != enc.nodes {
                return Err(Error::ConfigMismatch(format!(
                    "group {} has {n} nodes but its adjacency is {}x{}",
                    enc.group, enc.nodes, enc.nodes
                )));
            }
        }
        Ok(())
    }
}

/// Node-mean per group then concatenation in (lh, rh, b, f) order: `4 × [T·N_i, C] → [T, 4C]`.
pub fn aggregate_vars(g: &mut Graph, feats: &[Var; 4], nodes: [usize; 4]) -> Var {
    let pooled: Vec<Var> = feats.iter().zip(nodes).map(|(&f, n)| g.row_group_mean(f, n)).collect();
    g.concat_cols(&pooled)
}

/// Output of a group encoder: `T × N × C` stored as `[T·N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFeatures {
    pub group: GroupId,
    pub frames: usize,
    pub nodes: usize,
    pub data: Tensor,
}

impl PoseFeatures {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// `[N, C]` block of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.data.data()[t * self.nodes * c..(t + 1) * self.nodes * c]
    }
}

/// `T × 4C` sequence representation handed to the language head.
#[derive(Clone, Debug, PartialEq)]
pub struct SignFeatures {
    pub clip_id: String,
    pub data: Tensor,
}

impl SignFeatures {
    pub fn frames(&self) -> usize {
        self.data.rows()
    }
}

/// Runs the lift and spatial GCN of one group on its normalized coordinates.
pub fn encode_pose_group(encoders: &PoseEncoders, store: &ParamStore, grouped: &GroupedPose, group: GroupId) -> Result<PoseFeatures> {
    let enc = encoders.group(group);
    let data = grouped.group(group);
    if data.nodes != enc.nodes {
        return Err(Error::ConfigMismatch(format!(
            "group {group}: adjacency over {} nodes, input has {}",
            enc.nodes, data.nodes
        )));
    }
    let mut g = Graph::new(store);
    let x = g.constant(data.input_tensor(encoders.cfg.use_confidence));
    let y = enc.spatial(&mut g, x);
    Ok(PoseFeatures { group, frames: grouped.frames, nodes: enc.nodes, data: g.value(y).clone() })
}

/// Runs a group's temporal encoder on (possibly fused) spatial features.
pub fn encode_temporal(encoders: &PoseEncoders, store: &ParamStore, feat: &PoseFeatures) -> Result<PoseFeatures> {
    let enc = encoders.group(feat.group);
    if feat.frames == 0 {
        return Err(Error::EmptyClip);
    }
    if feat.nodes != enc.nodes || feat.data.rows() != feat.frames * feat.nodes {
        return Err(Error::LengthMismatch(format!(
            "group {}: expected {}x{} rows, got {}",
            feat.group,
            feat.frames,
            enc.nodes,
            feat.data.rows()
        )));
    }
    let mut g = Graph::new(store);
    let x = g.constant(feat.data.clone());
    let y = enc.temporal(&mut g, x);
    Ok(PoseFeatures { group: feat.group, frames: feat.frames, nodes: feat.nodes, data: g.value(y).clone() })
}

/// Pools every group over its nodes and concatenates the results.
pub fn aggregate_sign(clip_id: &str, features: &[PoseFeatures]) -> Result<SignFeatures> {
    let mut ordered: [Option<&PoseFeatures>; 4] = [None; 4];
    for f in features {
        ordered[f.group.index()] = Some(f);
    }
    let mut parts = Vec::with_capacity(4);
    for gid in GroupId::ALL {
        parts.push(ordered[gid.index()].ok_or(Error::GroupMissing(gid.short()))?);
    }
    let frames = parts[0].frames;
    let c = parts[0].channels();
    for p in &parts {
        if p.frames != frames || p.channels() != c {
            return Err(Error::LengthMismatch(format!(
                "group {} is {}x{}, expected {frames}x{c}",
                p.group,
                p.frames,
                p.channels()
            )));
        }
    }
    let mut out = Tensor::zeros(&[frames, 4 * c]);
    for (gi, p) in parts.iter().enumerate() {
        for t in 0..frames {
            let block = p.frame(t);
            let dst = &mut out.row_mut(t)[gi * c..(gi + 1) * c];
            for n in 0..p.nodes {
                for (d, v) in dst.iter_mut().zip(&block[n * c..(n + 1) * c]) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= p.nodes as f64;
            }
        }
    }
    Ok(SignFeatures { clip_id: clip_id.into(), data: out })
}
