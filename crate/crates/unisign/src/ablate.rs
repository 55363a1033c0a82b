//! Task-specific heads on frozen backbone features, for comparison with
//! the unified language-model paradigm.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unisign_core::autograd::Graph;
use unisign_core::heads::{ClassifierHead, CtcHead, LabelSet};
use unisign_core::metrics::EvalReport;
use unisign_core::model::UniSign;
use unisign_core::optim::AdamW;
use unisign_core::params::{Gradients, ParamStore};
use unisign_core::task::{build_target, Task};
use unisign_core::tensor::Tensor;
use unisign_core::Error;

use crate::config::{AblationConfig, EvalConfig};
use crate::data::PreparedClip;
use crate::error::{Result, RunError};
use crate::evaluate::{score, SampleResult};
use crate::train::{clip_input, epoch_order};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// `[T, 4C]` sign features.
    Sign,
    /// `[T, d_model]` language-model encoder output.
    LmEnc,
}

impl FromStr for FeatureSource {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(FeatureSource::Sign),
            "lm_enc" => Ok(FeatureSource::LmEnc),
            _ => Err(RunError::Config(format!("features: `{s}` is not sign or lm_enc"))),
        }
    }
}

/// Frozen features of every clip.
pub fn extract_features(model: &UniSign, store: &ParamStore, clips: &[PreparedClip], source: FeatureSource, sampler_seed: u64) -> Result<Vec<Tensor>> {
    clips
        .par_iter()
        .map(|c| {
            let input = clip_input(model, c, sampler_seed, 0)?;
            Ok(match source {
                FeatureSource::Sign => model.sign_features(store, &input)?.data,
                FeatureSource::LmEnc => model.lm_encoder_features(store, &input)?,
            })
        })
        .collect()
}

enum Head {
    Classifier(ClassifierHead),
    Ctc(CtcHead),
}

pub struct AblationOutcome {
    pub report: EvalReport,
    pub samples: Vec<SampleResult>,
}

fn targets(clips: &[PreparedClip], task: Task) -> Result<Vec<Vec<String>>> {
    clips
        .iter()
        .map(|c| Ok(build_target(&c.record, task)?.text.split_whitespace().map(str::to_string).collect()))
        .collect()
}

/// Trains the task's head on frozen features of `train` and scores `test`.
///
/// Isolated recognition uses mean pooling and a linear classifier with cross
/// entropy; continuous recognition uses an LSTM with CTC. Translation has no
/// task-specific head.
pub fn run_ablation_head(
    task: Task,
    train: (&[PreparedClip], &[Tensor]),
    test: (&[PreparedClip], &[Tensor]),
    cfg: &AblationConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<AblationOutcome> {
    if task == Task::Slt {
        return Err(Error::UnsupportedTask("slt").into());
    }
    if train.0.is_empty() || test.0.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let train_targets = targets(train.0, task)?;
    let test_targets = targets(test.0, task)?;
    let labels = LabelSet::new(train_targets.iter().flatten().cloned());
    let dim = train.1[0].cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = match task {
        Task::Islr => Head::Classifier(ClassifierHead::new(&mut store, "head", dim, labels.len(), &mut rng)),
        _ => Head::Ctc(CtcHead::new(&mut store, "head", dim, cfg.lstm_hidden, labels.len(), &mut rng)),
    };
    let ids: Vec<Vec<usize>> = train_targets.iter().map(|t| t.iter().map(|w| labels.id(w).expect("label from this set")).collect()).collect();

    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8, 1e-4);
    for epoch in 0..u64::from(cfg.epochs) {
        for i in epoch_order(train.0.len(), seed, epoch) {
            let mut g = Graph::new(&store);
            let x = g.constant(train.1[i].clone());
            let loss = match &head {
                Head::Classifier(h) => h.loss(&mut g, x, ids[i][0]),
                Head::Ctc(h) => h.loss(&mut g, x, &ids[i])?,
            };
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::DivergedLoss { step: epoch, clip_id: train.0[i].id().to_string() }.into());
            }
            let mut grads = Gradients::new(store.len());
            g.backward(loss).accumulate_into(&mut grads);
            drop(g);
            opt.update(&mut store, &grads, cfg.lr);
        }
    }

    let mut samples: Vec<SampleResult> = test
        .0
        .iter()
        .zip(test.1)
        .zip(&test_targets)
        .map(|((c, feat), truth)| {
            let mut g = Graph::new(&store);
            let x = g.constant(feat.clone());
            let predicted: Vec<&str> = match &head {
                Head::Classifier(h) => vec![labels.label(h.predict(&mut g, x)).unwrap_or_default()],
                Head::Ctc(h) => h.decode(&mut g, x).into_iter().map(|k| labels.label(k).unwrap_or_default()).collect(),
            };
            SampleResult { clip_id: c.id().to_string(), reference: truth.join(" "), hypothesis: predicted.join(" "), matched_label: None }
        })
        .collect();
    let report = score(task, "test", &mut samples, labels.labels(), eval)?;
    Ok(AblationOutcome { report, samples })
}

/// Fraction of samples whose hypothesis equals the reference exactly.
pub fn exact_match_rate(samples: &[SampleResult]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.hypothesis == s.reference).count() as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use unisign_core::curation::{ClipRecord, Split};
    use unisign_core::pose::{canonical_specs, group_and_normalize, NormalizeConfig, PoseSequence, NUM_KEYPOINTS};

    fn clip(label: &str) -> PreparedClip {
        let record = ClipRecord {
            clip_id: label.into(),
            media: String::new(),
            frame_start: 0,
            frame_end: 1,
            keypoints: String::new(),
            text: label.into(),
            glosses: Some(vec![label.into()]),
            label: Some(label.into()),
            duration_s: 0.04,
            frame_count: 1,
            frame_rate: 25.0,
            split: Split::Train,
            crop: None,
            frame_size: None,
        };
        let seq = PoseSequence::new(label, 25.0, vec![1.0; NUM_KEYPOINTS * 3]).unwrap();
        let grouped = group_and_normalize(&seq, &canonical_specs(), &NormalizeConfig::default()).unwrap();
        PreparedClip { record, grouped, frames: None, truncated_from: None }
    }

    #[test]
    fn separable_prototypes_are_learned() {
        // Three classes with features near fixed prototypes.
        let protos = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let names = ["a", "b", "c"];
        let mut clips = Vec::new();
        let mut feats = Vec::new();
        for rep in 0..4 {
            for (k, p) in protos.iter().enumerate() {
                clips.push(clip(names[k]));
                let noise = 0.05 * (rep as f64 - 1.5);
                feats.push(Tensor::from_rows(&[p.iter().map(|v| v + noise).collect(), p.iter().map(|v| v - noise).collect()]));
            }
        }
        let cfg = AblationConfig { epochs: 40, lr: 0.05, lstm_hidden: 8 };
        let out = run_ablation_head(Task::Islr, (&clips, &feats), (&clips, &feats), &cfg, &EvalConfig::default(), 1).unwrap();
        assert_eq!(out.report.p_i_top1, Some(1.0));
        assert!(matches!(
            run_ablation_head(Task::Slt, (&clips, &feats), (&clips, &feats), &cfg, &EvalConfig::default(), 1),
            Err(RunError::Core(Error::UnsupportedTask(_)))
        ));
    }
}
