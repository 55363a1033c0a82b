//! Command-line entry point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use unisign_core::curation::{apply_filters, corpus_stats, records_from_segments, segment, LengthUnit, Split, TranscriptInput};
use unisign_core::lm::DecodeStrategy;
use unisign_core::optim::Stage;
use unisign_core::pgf::FusionMode;
use unisign_core::task::Task;
use unisign_core::tokenizer::Tokenizer;

use crate::ablate::{extract_features, run_ablation_head, FeatureSource};
use crate::checkpoint;
use crate::config::{hex, RunConfig};
use crate::data::{annotation_texts, prepare_manifest, with_targets, LoadOptions, PreparedClip};
use crate::error::{Result, RunError};
use crate::evaluate::{decode_split, format_table, label_vocabulary, score, write_report};
use crate::manifest::{read_manifest, read_programs, read_transcript, write_manifest};
use crate::synth::{synthesize, SynthKind, SynthSpec};
use crate::train::{Control, Session};

#[derive(Parser, Debug)]
#[command(name = "unisign", version, about = "Pose-and-RGB sign language recognition and translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Fusion module used when the RGB branch is created.
    #[arg(long, global = true, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, global = true, value_enum)]
    pub decode: Option<DecodeArg>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    Deformable,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DecodeArg {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Islr,
    Cslr,
    Slt,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Islr => Task::Islr,
            TaskArg::Cslr => Task::Cslr,
            TaskArg::Slt => Task::Slt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ParadigmArg {
    Unified,
    TaskSpecific,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeaturesArg {
    Sign,
    LmEnc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum UnitArg {
    Char,
    Word,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKindArg {
    Sentences,
    Classes,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Segment transcripts into clips and write a manifest plus statistics.
    Curate {
        /// Directory of `<program>.jsonl` transcripts.
        #[arg(long)]
        transcripts: PathBuf,
        /// Program sources (default: `programs.json` inside the transcript directory).
        #[arg(long)]
        programs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "char")]
        unit: UnitArg,
    },
    /// Print corpus statistics of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "char")]
        unit: UnitArg,
    },
    /// Stage 1 (pose only) or stage 2 (RGB and pose) pre-training.
    Pretrain {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint of the previous stage (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run of this stage.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Stage 3 fine-tuning on one task.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "resume")]
        init: Option<PathBuf>,
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Decode a manifest and write `report.jsonl` and `report.txt`.
    Evaluate {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the test manifest of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the unified paradigm with task-specific heads.
    Ablate {
        #[arg(long, value_enum)]
        paradigm: ParadigmArg,
        #[arg(long, value_enum, default_value = "sign")]
        features: FeaturesArg,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a small synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sentences")]
        kind: SynthKindArg,
        #[arg(long, default_value_t = 16)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        with_frames: bool,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = cli.fusion {
        cfg.model.pgf.mode = match f {
            FusionArg::Deformable => FusionMode::Deformable,
            FusionArg::CrossAttention => FusionMode::CrossAttention,
        };
    }
    if let Some(d) = cli.decode {
        cfg.decode.strategy = match d {
            DecodeArg::Greedy => DecodeStrategy::Greedy,
            DecodeArg::Beam => DecodeStrategy::Beam,
        };
    }
    if let Some(w) = cli.beam_width {
        cfg.decode.beam_width = w;
    }
    if let Some(m) = cli.max_len {
        cfg.decode.max_len = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| RunError::Config(format!("data.{key} is not set")))
}

fn load_clips(cfg: &RunConfig, path: &Path, max_frames: usize, with_frames: bool) -> Result<Vec<PreparedClip>> {
    let manifest = read_manifest(path)?;
    let cache = cfg.frame_cache();
    let opts = LoadOptions { normalize: cfg.model.normalize, max_frames, with_frames, frame_cache: &cache };
    prepare_manifest(&manifest, &opts)
}

/// Tokenizer from `data.vocab`, or fitted on every configured manifest.
fn build_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    if let Some(v) = &cfg.data.vocab {
        let text = std::fs::read_to_string(v).map_err(|e| RunError::io(v, e))?;
        return Ok(Tokenizer::from_vocab_str(&text)?);
    }
    let mut texts = Vec::new();
    for p in [&cfg.data.train, &cfg.data.dev, &cfg.data.test].into_iter().flatten() {
        texts.extend(annotation_texts(&read_manifest(p)?.records));
    }
    Ok(Tokenizer::fit(&texts, cfg.data.min_count.max(1)))
}

fn stage_dir(cfg: &RunConfig, stage: Stage, task: Option<Task>) -> PathBuf {
    let name = match task {
        Some(t) => format!("stage{}_{t}", stage as u8),
        None => format!("stage{}", stage as u8),
    };
    cfg.output_root().join(name)
}

fn train_stage(cli: &Cli, config: &Path, stage: Stage, task: Option<Task>, init: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(config), cli)?;
    let hash = cfg.hash();
    let scfg = cfg.stage_config(stage, task);
    let train_path = required(&cfg.data.train, "train")?;
    let n = read_manifest(train_path)?.records.len();

    let mut session = if let Some(r) = resume {
        let ck = checkpoint::load(r)?;
        Session::resume(ck, scfg.clone(), hash.clone(), n)?
    } else if let Some(i) = init {
        let mut ck = checkpoint::load(i)?;
        ck.model.cfg.sampler = cfg.model.sampler;
        if stage == Stage::RgbPretrain {
            ck.model.cfg.pgf = cfg.model.pgf;
            ck.model.cfg.vision = cfg.model.vision.clone();
            ck.model.cfg.validate()?;
        }
        Session::from_checkpoint(ck, scfg.clone(), cfg.seed, hash.clone(), n)?
    } else {
        Session::fresh(scfg.clone(), &cfg.model, build_tokenizer(&cfg)?, cfg.seed, hash.clone(), n)?
    };
    log::info!("{}", unisign_core::model::describe(&session.store, &session.model));

    let with_frames = session.model.rgb.is_some();
    let clips = load_clips(&cfg, train_path, scfg.max_frames, with_frames)?;
    let data = with_targets(clips, task, &session.tokenizer)?;
    let dir = stage_dir(&cfg, stage, task);
    let last = session.run(&data, Some(&dir), |_, _| Control::Continue)?;
    if let Some(p) = last {
        println!("{}", p.display());
    }
    Ok(())
}

fn evaluate_cmd(cli: &Cli, task: Task, ckpt: &Path, manifest: Option<&Path>, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, cli)?;
    let ck = checkpoint::load(ckpt)?;
    let manifest = match manifest {
        Some(m) => m.to_path_buf(),
        None => required(&cfg.data.test, "test")?.to_path_buf(),
    };
    let max_frames = cfg.stage_config(Stage::Finetune, Some(task)).max_frames;
    let clips = load_clips(&cfg, &manifest, max_frames, ck.model.rgb.is_some())?;
    let split = clips.first().map_or("test", |c| c.record.split.as_str()).to_string();
    let sampler_seed = ck.meta.seed ^ ck.model.cfg.sampler.seed;
    let mut samples = decode_split(&ck.model, &ck.store, &ck.tokenizer, &clips, task, &cfg.decode, sampler_seed)?;
    let labels = label_vocabulary(&clips);
    let report = score(task, &split, &mut samples, &labels, &cfg.eval)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.with_extension("").with_file_name(format!("eval_{task}_{split}")));
    write_report(&dir, &report, &samples, &ck.meta.config_hash, &ckpt.display().to_string())?;
    print!("{}", format_table(&report));
    log::info!("report written to {}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(cli: &Cli, paradigm: ParadigmArg, features: FeatureSource, task: Task, ckpt: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if paradigm == ParadigmArg::Unified {
        return evaluate_cmd(cli, task, ckpt, None, config, out);
    }
    let cfg = load_config(config, cli)?;
    let ck = checkpoint::load(ckpt)?;
    let max_frames = cfg.stage_config(Stage::Finetune, Some(task)).max_frames;
    let with_frames = ck.model.rgb.is_some();
    let train = load_clips(&cfg, required(&cfg.data.train, "train")?, max_frames, with_frames)?;
    let test = load_clips(&cfg, required(&cfg.data.test, "test")?, max_frames, with_frames)?;
    let seed = ck.meta.seed ^ ck.model.cfg.sampler.seed;
    let ftrain = extract_features(&ck.model, &ck.store, &train, features, seed)?;
    let ftest = extract_features(&ck.model, &ck.store, &test, features, seed)?;
    let outcome = run_ablation_head(task, (&train, &ftrain), (&test, &ftest), &cfg.ablation, &cfg.eval, cfg.seed)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_root().join(format!("ablate_{task}_{features:?}").to_lowercase()));
    write_report(&dir, &outcome.report, &outcome.samples, &cfg.hash(), &ckpt.display().to_string())?;
    print!("{}", format_table(&outcome.report));
    Ok(())
}

fn curate_cmd(transcripts: &Path, programs: Option<&Path>, out: &Path, unit: LengthUnit) -> Result<()> {
    let programs_path = programs.map(Path::to_path_buf).unwrap_or_else(|| transcripts.join("programs.json"));
    let programs = read_programs(&programs_path)?;
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(&programs_path).map_err(|e| RunError::io(&programs_path, e))?);
    let mut records = Vec::new();
    let mut notes: BTreeMap<String, String> = BTreeMap::new();
    for (id, entry) in &programs {
        let tpath = transcripts.join(format!("{id}.jsonl"));
        let utterances = read_transcript(&tpath)?;
        hasher.update(std::fs::read(&tpath).map_err(|e| RunError::io(&tpath, e))?);
        let seg = segment(&TranscriptInput::new(id.clone(), utterances)).map_err(|e| RunError::Config(format!("{}: {e}", tpath.display())))?;
        if seg.no_boundaries {
            log::warn!("{id}: no sentence-final marks; kept as one clip");
            notes.insert(id.clone(), "no_boundaries".into());
        }
        if seg.dropped_tail_chars > 0 {
            log::warn!("{id}: dropped {} characters after the last mark", seg.dropped_tail_chars);
        }
        records.extend(records_from_segments(id, &seg.segments, &entry.source()));
    }
    let outcome = apply_filters(records);
    log::info!("{} clips kept, {} training clips dropped for length", outcome.kept.len(), outcome.dropped);
    for id in &outcome.truncated {
        log::warn!("{id}: at least 512 frames; it will be center-truncated when loaded");
    }
    let hash = hex(&hasher.finalize());
    write_manifest(out, &outcome.kept, &hash)?;
    let stats = corpus_stats(&outcome.kept, unit)?;
    let stats_path = out.with_extension("stats.json");
    let body = serde_json::json!({
        "config_hash": hash,
        "stats": stats,
        "dropped": outcome.dropped,
        "truncated": outcome.truncated,
        "no_boundaries": notes.keys().collect::<Vec<_>>(),
    });
    std::fs::write(&stats_path, serde_json::to_string_pretty(&body).expect("stats serialize")).map_err(|e| RunError::io(&stats_path, e))?;
    println!("{}", out.display());
    Ok(())
}

fn unit(u: UnitArg) -> LengthUnit {
    match u {
        UnitArg::Char => LengthUnit::Char,
        UnitArg::Word => LengthUnit::Word,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Curate { transcripts, programs, out, unit: u } => curate_cmd(transcripts, programs.as_deref(), out, unit(*u)),
        Command::Stats { manifest, unit: u } => {
            let m = read_manifest(manifest)?;
            let stats = corpus_stats(&m.records, unit(*u))?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            Ok(())
        }
        Command::Pretrain { stage, config, init, resume } => {
            let stage = Stage::try_from(*stage)?;
            train_stage(&cli, config, stage, None, init.as_deref(), resume.as_deref())
        }
        Command::Finetune { task, config, init, resume } => {
            train_stage(&cli, config, Stage::Finetune, Some((*task).into()), init.as_deref(), resume.as_deref())
        }
        Command::Evaluate { task, ckpt, manifest, config, out } => evaluate_cmd(&cli, (*task).into(), ckpt, manifest.as_deref(), config.as_deref(), out.as_deref()),
        Command::Ablate { paradigm, features, task, ckpt, config, out } => {
            let f = match features {
                FeaturesArg::Sign => FeatureSource::Sign,
                FeaturesArg::LmEnc => FeatureSource::LmEnc,
            };
            ablate_cmd(&cli, *paradigm, f, (*task).into(), ckpt, config.as_deref(), out.as_deref())
        }
        Command::Synth { out, kind, clips, frames, classes, seed, split, with_frames } => {
            let kind = match kind {
                SynthKindArg::Sentences => SynthKind::Sentences,
                SynthKindArg::Classes => SynthKind::Classes { classes: *classes, noise: 2.0 },
            };
            let mut spec = SynthSpec::new(kind, *clips, *frames, *seed);
            spec.split = (*split).into();
            spec.with_frames = *with_frames;
            let records = synthesize(&spec, out)?;
            let path = out.join("manifest.jsonl");
            let hash = hex(&Sha256::digest(format!("{spec:?}").as_bytes()));
            write_manifest(&path, &records, &hash)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}
