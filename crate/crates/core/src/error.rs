use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed keypoint data: {0}")]
    MalformedFile(String),
    #[error("clip has no frames")]
    EmptyClip,
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("group {0} missing")]
    GroupMissing(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("frame decode failed: {0}")]
    Decode(String),
    #[error("empty supervision target")]
    EmptyTarget,
    #[error("record {clip_id} has no {field} annotation")]
    MissingAnnotation { clip_id: String, field: &'static str },
    #[error("task {0} has no task-specific head")]
    UnsupportedTask(&'static str),
    #[error("reference must not be empty")]
    EmptyReference,
    #[error("input must not be empty")]
    EmptyInput,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("stage {stage} needs a checkpoint from an earlier stage")]
    MissingPrereqCheckpoint { stage: u8 },
    #[error("non-finite loss at step {step} (clip {clip_id})")]
    DivergedLoss { step: u64, clip_id: String },
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
