//! Downstream tasks and the supervision text each one trains on.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curation::ClipRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Isolated recognition: one word per clip.
    Islr,
    /// Continuous recognition: a gloss sequence.
    Cslr,
    /// Translation to a sentence.
    Slt,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Islr, Task::Cslr, Task::Slt];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Islr => "islr",
            Task::Cslr => "cslr",
            Task::Slt => "slt",
        }
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            Task::Islr => TargetKind::Word,
            Task::Cslr => TargetKind::Gloss,
            Task::Slt => TargetKind::Sentence,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "islr" => Ok(Task::Islr),
            "cslr" => Ok(Task::Cslr),
            "slt" => Ok(Task::Slt),
            _ => Err(Error::InvalidConfig { key: "task", reason: alloc::format!("unknown task `{s}`") }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Word,
    Gloss,
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionTarget {
    pub kind: TargetKind,
    pub text: String,
}

/// Text the language head is trained to produce for `record` under `task`.
///
/// Pre-training uses the sentence target, i.e. the same as [`Task::Slt`].
pub fn build_target(record: &ClipRecord, task: Task) -> Result<SupervisionTarget> {
    let missing = |field| Error::MissingAnnotation { clip_id: record.clip_id.clone(), field };
    let text = match task {
        Task::Islr => record.label.clone().filter(|l| !l.trim().is_empty()).ok_or_else(|| missing("label"))?,
        Task::Cslr => match &record.glosses {
            Some(g) if !g.is_empty() => g.join(" "),
            _ => return Err(missing("glosses")),
        },
        Task::Slt => {
            if record.text.trim().is_empty() {
                return Err(missing("text"));
            }
            record.text.clone()
        }
    };
    Ok(SupervisionTarget { kind: task.target_kind(), text })
}
