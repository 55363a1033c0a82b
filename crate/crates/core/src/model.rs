//! The full pipeline: pose encoders, optional RGB fusion on sampled frames,
//! temporal encoders, projection and the language head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{aggregate_vars, EncoderConfig, PoseEncoders, SignFeatures};
use crate::error::{Error, Result};
use crate::lm::{generate, lm_loss, Conditioned, DecodeConfig, LmConfig, LmLoss, Projection, Seq2Seq, TinySeq2Seq};
use crate::params::ParamStore;
use crate::pgf::{Pgf, PgfConfig};
use crate::pose::{GroupId, GroupedPose, NormalizeConfig};
use crate::sampler::{clip_rng, reliability_scores, sample_frames, sampling_weights, SamplerConfig};
use crate::vision::{crop_hand, ConvEncoder, FrameSource, ImageEncoder, VisionConfig};

/// Every architecture setting of the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub normalize: NormalizeConfig,
    pub vision: VisionConfig,
    pub pgf: PgfConfig,
    pub sampler: SamplerConfig,
    pub lm: LmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pgf.validate(self.encoder.spatial_channels())?;
        self.sampler.validate()?;
        self.lm.validate()
    }
}

/// Vision encoder plus one fusion module per hand.
#[derive(Clone, Debug)]
pub struct RgbBranch {
    pub vision: ConvEncoder,
    /// Left hand, right hand.
    pub pgf: [Pgf; 2],
}

#[derive(Clone, Debug)]
pub struct UniSign {
    pub cfg: ModelConfig,
    pub encoders: PoseEncoders,
    pub projection: Projection,
    pub lm: TinySeq2Seq,
    pub rgb: Option<RgbBranch>,
}

/// One clip as seen by the model.
pub struct ClipInput<'a> {
    pub grouped: &'a GroupedPose,
    pub frames: Option<&'a dyn FrameSource>,
    /// Frames sent through the RGB branch, per hand (lh, rh).
    pub sampled: [Vec<usize>; 2],
}

impl<'a> ClipInput<'a> {
    pub fn pose_only(grouped: &'a GroupedPose) -> Self {
        Self { grouped, frames: None, sampled: [Vec::new(), Vec::new()] }
    }
}

pub struct ForwardOutput {
    /// `[T, 4C]`.
    pub sign: Var,
    /// `[T, d_model]`.
    pub embeddings: Var,
    /// Frames (per hand) that went through fusion.
    pub fused_frames: usize,
    /// Keypoints clamped into their crop during fusion.
    pub clamped: usize,
}

pub const NODE_COUNTS: [usize; 4] = [21, 21, 9, 18];

impl UniSign {
    /// Pose-only model. Parameters are created in a fixed order so that the
    /// RGB branch, added later, never shifts existing ids.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoders = PoseEncoders::new(store, "pose", NODE_COUNTS, &cfg.encoder, rng)?;
        let projection = Projection::new(store, "proj", 4 * cfg.encoder.channels(), cfg.lm.d_model, rng);
        let lm = TinySeq2Seq::new(store, "lm", &cfg.lm, vocab, rng)?;
        Ok(Self { cfg: cfg.clone(), encoders, projection, lm, rgb: None })
    }

    /// Adds the vision encoder and the two fusion modules (gates start closed).
    pub fn add_rgb_branch<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.rgb.is_some() {
            return Ok(());
        }
        let c = self.cfg.encoder.spatial_channels();
        let vision = ConvEncoder::new(store, "vision", &self.cfg.vision, c, rng)?;
        let pgf = [
            Pgf::new(store, "pgf.lh", c, &self.cfg.pgf, rng)?,
            Pgf::new(store, "pgf.rh", c, &self.cfg.pgf, rng)?,
        ];
        self.rgb = Some(RgbBranch { vision, pgf });
        Ok(())
    }

    /// Score-aware frame choice for both hands (empty without an RGB branch).
    pub fn sample_frames(&self, grouped: &GroupedPose, seed: u64, epoch: u64) -> Result<[Vec<usize>; 2]> {
        if self.rgb.is_none() || self.cfg.sampler.p_samp == 0.0 {
            return Ok([Vec::new(), Vec::new()]);
        }
        let mut out = [Vec::new(), Vec::new()];
        for (slot, hand) in out.iter_mut().zip(GroupId::HANDS) {
            let w = sampling_weights(&reliability_scores(grouped, hand)?);
            let mut rng = clip_rng(seed, &grouped.clip_id, epoch, hand);
            *slot = sample_frames(&w, &self.cfg.sampler, &mut rng);
        }
        Ok(out)
    }

    /// Sign features and language-model input embeddings for one clip.
    pub fn embed(&self, g: &mut Graph<'_>, clip: &ClipInput<'_>) -> Result<ForwardOutput> {
        let grouped = clip.grouped;
        if grouped.frames == 0 {
            return Err(Error::EmptyClip);
        }
        self.encoders.check_nodes(grouped)?;
        let with_conf = self.cfg.encoder.use_confidence;
        let mut spatial: Vec<Var> = GroupId::ALL
            .iter()
            .map(|&gid| {
                let x = g.constant(grouped.group(gid).input_tensor(with_conf));
                self.encoders.group(gid).spatial(g, x)
            })
            .collect();

        let (mut fused_frames, mut clamped) = (0, 0);
        if let (Some(rgb), Some(frames)) = (&self.rgb, clip.frames) {
            for (h, hand) in GroupId::HANDS.into_iter().enumerate() {
                let idx = &clip.sampled[h];
                if idx.is_empty() {
                    continue;
                }
                let n = grouped.group(hand).nodes;
                let crops = crop_hand(frames, grouped, hand, idx, &self.cfg.vision.crop)?;
                let mut rows = Vec::with_capacity(idx.len() * n);
                let mut fused = Vec::with_capacity(idx.len());
                for crop in &crops {
                    let t = crop.source_frame_index;
                    let img = g.constant(crop.image.clone());
                    let map = rgb.vision.forward(g, img);
                    let pose = g.slice_rows(spatial[hand.index()], t * n, n);
                    let (coords, c) = crop.crop_box.normalize_points(grouped.group(hand).frame_raw(t));
                    let out = rgb.pgf[h].fuse_frame(g, pose, map, rgb.vision.output_hw(), &coords);
                    clamped += c + out.clamped;
                    fused.push(out.fused);
                    rows.extend(t * n..(t + 1) * n);
                }
                let block = if fused.len() == 1 { fused[0] } else { g.concat_rows(&fused) };
                spatial[hand.index()] = g.scatter_rows(spatial[hand.index()], &rows, block);
                fused_frames += idx.len();
            }
        }

        let temporal: Vec<Var> = GroupId::ALL.iter().map(|&gid| self.encoders.group(gid).temporal(g, spatial[gid.index()])).collect();
        let sign = aggregate_vars(g, &[temporal[0], temporal[1], temporal[2], temporal[3]], NODE_COUNTS);
        let embeddings = self.projection.forward(g, sign);
        Ok(ForwardOutput { sign, embeddings, fused_frames, clamped })
    }

    /// Teacher-forced loss for `target` token ids.
    pub fn loss(&self, g: &mut Graph<'_>, clip: &ClipInput<'_>, target: &[usize]) -> Result<(LmLoss, ForwardOutput)> {
        let out = self.embed(g, clip)?;
        let loss = lm_loss(g, &self.lm, out.embeddings, target)?;
        Ok((loss, out))
    }

    /// Value-level `[T, 4C]` features.
    pub fn sign_features(&self, store: &ParamStore, clip: &ClipInput<'_>) -> Result<SignFeatures> {
        let mut g = Graph::new(store);
        let out = self.embed(&mut g, clip)?;
        Ok(SignFeatures { clip_id: clip.grouped.clip_id.clone(), data: g.value(out.sign).clone() })
    }

    /// Language-model encoder output `[T, d_model]`.
    pub fn lm_encoder_features(&self, store: &ParamStore, clip: &ClipInput<'_>) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::new(store);
        let out = self.embed(&mut g, clip)?;
        let mem = self.lm.encode(&mut g, out.embeddings);
        Ok(g.value(mem).clone())
    }

    /// Generated token ids (no specials).
    pub fn generate(&self, store: &ParamStore, clip: &ClipInput<'_>, cfg: &DecodeConfig) -> Result<Vec<usize>> {
        cfg.validate()?;
        let mut g = Graph::new(store);
        let out = self.embed(&mut g, clip)?;
        let emb = g.value(out.embeddings).clone();
        drop(g);
        let step = Conditioned::new(&self.lm, store, &emb);
        Ok(generate(&step, cfg))
    }

    /// Names of parameters belonging to the RGB branch.
    pub fn is_rgb_param(name: &str) -> bool {
        name.starts_with("vision.") || name.starts_with("pgf.")
    }
}

/// Short description of the model size for logs.
pub fn describe(store: &ParamStore, model: &UniSign) -> alloc::string::String {
    format!(
        "{} tensors, {} scalars, C={}, d_model={}, rgb={}",
        store.len(),
        store.numel(),
        model.cfg.encoder.channels(),
        model.cfg.lm.d_model,
        model.rgb.is_some()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{canonical_specs, group_and_normalize, PoseSequence, NUM_KEYPOINTS};
    use crate::vision::Frame;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.input_linear_dim = 8;
        cfg.encoder.gcn_dims = vec![8, 16];
        cfg.encoder.temporal_dims = vec![16];
        cfg.encoder.temporal_kernel = 3;
        cfg.pgf.heads = 2;
        cfg.pgf.deform_points = 2;
        cfg.vision.crop.size = 16;
        cfg.vision.conv_channels = vec![4, 8];
        cfg.lm = LmConfig { d_model: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, ff_dim: 32, embed_std: 1.0 };
        cfg.sampler.p_samp = 0.5;
        cfg
    }

    fn clip(frames: usize, seed: u64) -> GroupedPose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * NUM_KEYPOINTS)
            .flat_map(|_| [rng.random_range(10.0..90.0), rng.random_range(10.0..90.0), rng.random_range(0.0..1.0)])
            .collect();
        let seq = PoseSequence::new("clip", 25.0, data).unwrap().with_frame_size(100, 100);
        group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig::default()).unwrap()
    }

    #[test]
    fn fresh_rgb_branch_leaves_loss_unchanged() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = UniSign::new(&mut store, &cfg, 12, &mut rng).unwrap();
        let gp = clip(6, 1);
        let frames: Vec<Frame> = (0..6).map(|i| Frame::solid(100, 100, [i as u8 * 40, 20, 200])).collect();
        let target = [4, 5, 6];

        let mut g = Graph::new(&store);
        let (l1, _) = model.loss(&mut g, &ClipInput::pose_only(&gp), &target).unwrap();
        let before = g.value(l1.sum).data()[0];

        let n_before = store.len();
        model.add_rgb_branch(&mut store, &mut rng).unwrap();
        assert!(store.len() > n_before);
        let sampled = model.sample_frames(&gp, 3, 0).unwrap();
        assert!(!sampled[0].is_empty() && !sampled[1].is_empty());
        let input = ClipInput { grouped: &gp, frames: Some(&frames), sampled };
        let mut g = Graph::new(&store);
        let (l2, out) = model.loss(&mut g, &input, &target).unwrap();
        assert!(out.fused_frames > 0);
        assert_eq!(g.value(l2.sum).data()[0], before);
    }

    #[test]
    fn shapes_and_generation() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let model = UniSign::new(&mut store, &cfg, 12, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gp = clip(5, 2);
        let feats = model.sign_features(&store, &ClipInput::pose_only(&gp)).unwrap();
        assert_eq!(feats.data.shape(), &[5, 64]);
        let enc = model.lm_encoder_features(&store, &ClipInput::pose_only(&gp)).unwrap();
        assert_eq!(enc.shape(), &[5, 16]);
        let ids = model.generate(&store, &ClipInput::pose_only(&gp), &DecodeConfig { max_len: 4, ..Default::default() }).unwrap();
        assert!(ids.len() <= 4);
    }
}
