//! Decoding a split, scoring it and writing the report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use unisign_core::lm::DecodeConfig;
use unisign_core::metrics::{corpus_wer, islr_match, metric_tokens, top1, translation_scores, EvalReport, Prediction, TextUnit};
use unisign_core::model::UniSign;
use unisign_core::params::ParamStore;
use unisign_core::task::{build_target, Task};
use unisign_core::tokenizer::Tokenizer;

use crate::config::EvalConfig;
use crate::data::PreparedClip;
use crate::error::{Result, RunError};
use crate::train::clip_input;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleResult {
    pub clip_id: String,
    pub reference: String,
    pub hypothesis: String,
    /// Label chosen for the hypothesis (recognition of isolated words only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_label: Option<String>,
}

/// Scores `(reference, hypothesis)` pairs for `task`. `labels` is the class
/// vocabulary used to map isolated-word output onto a class.
pub fn score(task: Task, split: &str, samples: &mut [SampleResult], labels: &[String], eval: &EvalConfig) -> Result<EvalReport> {
    let mut report = EvalReport { task: task.to_string(), split: split.to_string(), n_samples: samples.len(), ..Default::default() };
    if samples.is_empty() {
        return Err(unisign_core::Error::EmptyInput.into());
    }
    match task {
        Task::Slt => {
            let refs: Vec<String> = samples.iter().map(|s| s.reference.clone()).collect();
            let hyps: Vec<String> = samples.iter().map(|s| s.hypothesis.clone()).collect();
            let (bleu, rouge) = translation_scores(&refs, &hyps, eval.text_unit, eval.smoothing)?;
            report.bleu = bleu;
            report.rouge_l = Some(rouge);
        }
        Task::Cslr => {
            let pairs: Vec<(Vec<String>, Vec<String>)> = samples
                .iter()
                .map(|s| (metric_tokens(&s.reference, TextUnit::Word), metric_tokens(&s.hypothesis, TextUnit::Word)))
                .collect();
            report.wer = Some(corpus_wer(&pairs)?);
        }
        Task::Islr => {
            let preds: Vec<Prediction<String, String>> = samples
                .iter_mut()
                .map(|s| {
                    let m = islr_match(&s.hypothesis, labels).map(|i| labels[i].clone());
                    s.matched_label = m.clone();
                    Prediction { truth: s.reference.clone(), predicted: m.unwrap_or_default(), class: s.reference.clone() }
                })
                .collect();
            let (pi, pc) = top1(&preds)?;
            report.p_i_top1 = Some(pi);
            report.p_c_top1 = Some(pc);
        }
    }
    Ok(report)
}

/// Generates text for every clip with the unified language head.
pub fn decode_split(
    model: &UniSign,
    store: &ParamStore,
    tokenizer: &Tokenizer,
    clips: &[PreparedClip],
    task: Task,
    decode: &DecodeConfig,
    sampler_seed: u64,
) -> Result<Vec<SampleResult>> {
    clips
        .par_iter()
        .map(|c| {
            let reference = build_target(&c.record, task)?.text;
            let input = clip_input(model, c, sampler_seed, 0)?;
            let ids = model.generate(store, &input, decode)?;
            Ok(SampleResult { clip_id: c.id().to_string(), reference, hypothesis: tokenizer.decode(&ids).text, matched_label: None })
        })
        .collect()
}

/// Sorted distinct labels of `clips`.
pub fn label_vocabulary(clips: &[PreparedClip]) -> Vec<String> {
    let set: std::collections::BTreeSet<String> = clips.iter().filter_map(|c| c.record.label.clone()).collect();
    set.into_iter().collect()
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a EvalReport,
    config_hash: &'a str,
    checkpoint: &'a str,
    unavailable: [&'static str; 1],
}

/// Human-readable table of the populated metrics (scores ×100).
pub fn format_table(report: &EvalReport) -> String {
    let mut rows: Vec<(String, f64)> = Vec::new();
    if let Some(w) = report.wer {
        rows.push(("WER".into(), w));
    }
    let bleu: &BTreeMap<usize, f64> = &report.bleu;
    for (n, b) in bleu {
        rows.push((format!("BLEU-{n}"), *b));
    }
    if let Some(r) = report.rouge_l {
        rows.push(("ROUGE-L".into(), r));
    }
    if let Some(p) = report.p_i_top1 {
        rows.push(("P-I top1".into(), p));
    }
    if let Some(p) = report.p_c_top1 {
        rows.push(("P-C top1".into(), p));
    }
    let mut out = String::new();
    let _ = writeln!(out, "task {}  split {}  samples {}", report.task, report.split, report.n_samples);
    let _ = writeln!(out, "{:<10} {:>8}", "metric", "score");
    for (name, v) in rows {
        let _ = writeln!(out, "{name:<10} {:>8.2}", 100.0 * v);
    }
    out
}

/// Writes `report.jsonl` (one line per sample, then a summary line) and `report.txt`.
pub fn write_report(dir: &Path, report: &EvalReport, samples: &[SampleResult], config_hash: &str, checkpoint: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let jsonl = dir.join("report.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&jsonl).map_err(|e| RunError::io(&jsonl, e))?);
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s).expect("sample serializes")).map_err(|e| RunError::io(&jsonl, e))?;
    }
    let summary = SummaryLine { summary: report, config_hash, checkpoint, unavailable: ["bleurt"] };
    writeln!(f, "{}", serde_json::to_string(&summary).expect("summary serializes")).map_err(|e| RunError::io(&jsonl, e))?;
    f.flush().map_err(|e| RunError::io(&jsonl, e))?;
    let txt = dir.join("report.txt");
    let table = format!("{}config {config_hash}\nBLEURT not computed (needs a learned model)\n", format_table(report));
    std::fs::write(&txt, table).map_err(|e| RunError::io(&txt, e))?;
    Ok((jsonl, txt))
}
