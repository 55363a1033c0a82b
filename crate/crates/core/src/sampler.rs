//! Score-aware selection of RGB frames.
//!
//! Frames whose hand keypoints are unreliable (low mean confidence) are the
//! ones most likely to be sent through the vision branch. Each hand draws its
//! own indices from its own seeded stream.

use alloc::format;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PoseFeatures;
use crate::error::{Error, Result};
use crate::pose::{GroupId, GroupedPose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Fraction of frames to draw, in `[0, 1]`.
    pub p_samp: f64,
    pub seed: u64,
    /// Collapse repeated draws (the draw itself is with replacement).
    pub dedupe: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p_samp: 0.10, seed: 0, dedupe: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_samp) {
            return Err(Error::InvalidConfig { key: "sampler.p_samp", reason: format!("{} is outside [0, 1]", self.p_samp) });
        }
        Ok(())
    }

    /// Number of draws for a clip of `frames` frames: `⌊T·p⌋`.
    pub fn draws(&self, frames: usize) -> usize {
        libm::floor(frames as f64 * self.p_samp) as usize
    }
}

/// Mean hand-keypoint confidence per frame.
pub fn reliability_scores(grouped: &GroupedPose, hand: GroupId) -> Result<Vec<f64>> {
    if !hand.is_hand() {
        return Err(Error::ConfigMismatch(format!("reliability scores are defined for hands, not {hand}")));
    }
    let d = grouped.group(hand);
    Ok((0..grouped.frames)
        .map(|t| d.frame_confidence(t).iter().sum::<f64>() / d.nodes as f64)
        .collect())
}

/// `1 − rs` per frame.
pub fn sampling_weights(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|rs| (1.0 - rs).max(0.0)).collect()
}

/// Draws `⌊T·p⌋` frame indices with probability proportional to `weights`.
///
/// All-zero weights fall back to uniform. The result is sorted ascending and,
/// with `dedupe`, free of repeats.
pub fn sample_frames<R: Rng + ?Sized>(weights: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Vec<usize> {
    let k = cfg.draws(weights.len());
    if k == 0 || weights.is_empty() {
        return Vec::new();
    }
    let mut picks: Vec<usize> = if weights.iter().any(|&w| w > 0.0) {
        let dist = WeightedIndex::new(weights).expect("weights are finite and non-negative");
        (0..k).map(|_| dist.sample(rng)).collect()
    } else {
        (0..k).map(|_| rng.random_range(0..weights.len())).collect()
    };
    picks.sort_unstable();
    if cfg.dedupe {
        picks.dedup();
    }
    picks
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Independent stream for one clip, epoch and hand; independent of worker scheduling.
pub fn clip_rng(seed: u64, clip_id: &str, epoch: u64, hand: GroupId) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    s = splitmix(s ^ stable_hash(clip_id));
    s = splitmix(s ^ epoch);
    s = splitmix(s ^ hand.index() as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Replaces the frames at `indices` with the rows of `fused` (`K·N × C`).
pub fn scatter_fused(features: &PoseFeatures, fused: &Tensor, indices: &[usize]) -> Result<PoseFeatures> {
    let n = features.nodes;
    let c = features.channels();
    if fused.rows() != indices.len() * n || (fused.cols() != c && !indices.is_empty()) {
        return Err(Error::LengthMismatch(format!(
            "fused block is {:?}, expected [{}, {c}]",
            fused.shape(),
            indices.len() * n
        )));
    }
    let mut out = features.clone();
    for (k, &t) in indices.iter().enumerate() {
        if t >= features.frames {
            return Err(Error::IndexOutOfRange { index: t, limit: features.frames });
        }
        out.data.data_mut()[t * n * c..(t + 1) * n * c].copy_from_slice(&fused.data()[k * n * c..(k + 1) * n * c]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{canonical_specs, group_and_normalize, NormalizeConfig, PoseSequence, NUM_KEYPOINTS};
    use alloc::vec;

    fn clip_with_hand_conf(confs: &[[f64; 21]]) -> GroupedPose {
        let mut data = vec![0.0; confs.len() * NUM_KEYPOINTS * 3];
        for (t, c) in confs.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                data[(t * NUM_KEYPOINTS + 91 + j) * 3 + 2] = v;
            }
        }
        group_and_normalize(&PoseSequence::new("c", 25.0, data).unwrap(), &canonical_specs(), &NormalizeConfig::default()).unwrap()
    }

    #[test]
    fn reliability_examples() {
        let mut mixed = [1.0; 21];
        mixed[20] = 0.0;
        let gp = clip_with_hand_conf(&[[1.0; 21], [0.25; 21], mixed]);
        let rs = reliability_scores(&gp, GroupId::LeftHand).unwrap();
        assert_eq!(rs[0], 1.0);
        assert_eq!(rs[1], 0.25);
        assert!((rs[2] - 20.0 / 21.0).abs() < 1e-15);
        let w = sampling_weights(&rs);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.75);
        assert!(reliability_scores(&gp, GroupId::Face).is_err());
    }

    #[test]
    fn draw_count_is_floor() {
        let cfg = SamplerConfig { dedupe: false, ..Default::default() };
        assert_eq!(cfg.draws(100), 10);
        assert_eq!(cfg.draws(9), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_frames(&[1.0; 100], &cfg, &mut rng).len(), 10);
        let none = SamplerConfig { p_samp: 0.0, ..cfg };
        assert!(sample_frames(&[1.0; 100], &none, &mut rng).is_empty());
    }

    #[test]
    fn single_nonzero_weight_always_wins() {
        let cfg = SamplerConfig { p_samp: 0.25, dedupe: false, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert_eq!(sample_frames(&[0.0, 0.0, 1.0, 0.0], &cfg, &mut rng), vec![2]);
        }
    }

    #[test]
    fn zero_weights_fall_back_to_uniform_and_output_is_sorted() {
        let cfg = SamplerConfig { p_samp: 1.0, dedupe: true, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let picks = sample_frames(&[0.0; 16], &cfg, &mut rng);
        assert!(!picks.is_empty());
        assert!(picks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn streams_depend_on_clip_epoch_and_hand() {
        let a = clip_rng(7, "clip", 0, GroupId::LeftHand).random::<u64>();
        assert_eq!(a, clip_rng(7, "clip", 0, GroupId::LeftHand).random::<u64>());
        assert_ne!(a, clip_rng(7, "clip", 0, GroupId::RightHand).random::<u64>());
        assert_ne!(a, clip_rng(7, "clip", 1, GroupId::LeftHand).random::<u64>());
        assert_ne!(a, clip_rng(7, "clip2", 0, GroupId::LeftHand).random::<u64>());
    }

    fn feats(frames: usize) -> PoseFeatures {
        PoseFeatures {
            group: GroupId::LeftHand,
            frames,
            nodes: 2,
            data: Tensor::new(&[frames * 2, 3], (0..frames * 6).map(|v| v as f64).collect()),
        }
    }

    #[test]
    fn scatter_semantics() {
        let f = feats(3);
        assert_eq!(scatter_fused(&f, &Tensor::zeros(&[0, 3]), &[]).unwrap(), f);
        let row = Tensor::full(&[2, 3], -1.0);
        let out = scatter_fused(&f, &row, &[0]).unwrap();
        assert_eq!(out.frame(0), &[-1.0; 6]);
        assert_eq!(out.frame(1), f.frame(1));
        assert_eq!(out.frame(2), f.frame(2));
        let all = Tensor::new(&[6, 3], (0..18).map(|v| 100.0 + v as f64).collect());
        let out = scatter_fused(&f, &all, &[2, 0, 1]).unwrap();
        assert_eq!(out.frame(2), &all.data()[0..6]);
        assert_eq!(out.frame(0), &all.data()[6..12]);
        assert_eq!(out.frame(1), &all.data()[12..18]);
        assert!(matches!(scatter_fused(&f, &row, &[3]), Err(Error::IndexOutOfRange { .. })));
    }
}
