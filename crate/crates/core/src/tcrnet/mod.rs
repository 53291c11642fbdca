//! Tri-stream cross-reasoning network.
//!
//! Three modality streams (OCR text, image, refined reasoning), each an
//! `L × d` matrix, are fused through directed multi-head cross-attention
//! flows `T→I`, `T→R` and `I→R`. Each flow's output is mean-pooled over the
//! token axis, the pooled vectors are concatenated in that order, and an
//! affine head maps the fused vector to class logits. Forward and backward
//! passes are written out by hand in `f64`.

mod attention;
mod checkpoint;
mod model;

pub use attention::{cross_attention, cross_attention_backward, AttentionCache, AttentionParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    ablate, forward, init_params, loss_and_grads, ClassifierHead, Example, FlowParams, FlowTrace,
    ForwardTrace, Labels, Mode, ModelConfig, TcrNetParams,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MemeRecord, Stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input in {0}")]
    NonFiniteInput(String),
    #[error("flow {0} is not active in this model")]
    InactiveFlowRequested(Flow),
    #[error("no classifier head for task {0}")]
    MissingHead(Task),
    #[error("label {label} out of range for task {task} with {classes} classes")]
    LabelOutOfRange { task: Task, label: usize, classes: usize },
    #[error("batch is empty or carries no labels")]
    EmptyBatch,
    #[error("at least two streams must be kept, got {0}")]
    TooFewStreams(StreamSet),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Classification task. Target and intensity apply only to dark memes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "dh")]
    DarkHumor,
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "intensity")]
    Intensity,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::DarkHumor, Task::Target, Task::Intensity];

    pub fn num_classes(self) -> usize {
        match self {
            Task::DarkHumor => 2,
            Task::Target => 6,
            Task::Intensity => 3,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::DarkHumor => "dh",
            Task::Target => "target",
            Task::Intensity => "intensity",
        }
    }

    /// Gold class index for `record`, or `None` when the record is not
    /// eligible for this task.
    pub fn label(self, record: &MemeRecord) -> Option<usize> {
        match self {
            Task::DarkHumor => Some(usize::from(record.dark_humor)),
            Task::Target => record.target.filter(|_| record.dark_humor).map(|t| t.index()),
            Task::Intensity => record.intensity.filter(|_| record.dark_humor).map(|i| i.index()),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dh" | "dark" | "dark_humor" | "darkhumor" => Ok(Task::DarkHumor),
            "target" => Ok(Task::Target),
            "intensity" => Ok(Task::Intensity),
            other => Err(format!("unknown task `{other}` (expected dh, target or intensity)")),
        }
    }
}

/// A subset of the three streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamSet(u8);

impl StreamSet {
    pub const ALL: StreamSet = StreamSet(0b111);

    pub fn from_streams(streams: impl IntoIterator<Item = Stream>) -> Self {
        StreamSet(streams.into_iter().fold(0, |m, s| m | (1 << s.tag())))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b111).then_some(StreamSet(bits))
    }

    pub fn contains(self, s: Stream) -> bool {
        self.0 & (1 << s.tag()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn without(self, s: Stream) -> Self {
        StreamSet(self.0 & !(1 << s.tag()))
    }

    /// Flows in fused-vector order whose endpoints are both present.
    pub fn flows(self) -> Vec<Flow> {
        Flow::CANONICAL
            .into_iter()
            .filter(|f| self.contains(f.query) && self.contains(f.context))
            .collect()
    }
}

impl fmt::Display for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in [Stream::Text, Stream::Image, Stream::Reasoning] {
            if self.contains(s) {
                write!(f, "{}", s.letter())?;
            }
        }
        Ok(())
    }
}

impl FromStr for StreamSet {
    type Err = String;
    /// Letters from `t`, `i`, `r` in any order and case, e.g. `tir` or `TI`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = StreamSet(0);
        for ch in s.chars() {
            let stream = match ch.to_ascii_lowercase() {
                't' => Stream::Text,
                'i' => Stream::Image,
                'r' => Stream::Reasoning,
                other => return Err(format!("unknown stream letter `{other}` (use t, i, r)")),
            };
            if set.contains(stream) {
                return Err(format!("stream `{ch}` repeated"));
            }
            set = StreamSet(set.0 | (1 << stream.tag()));
        }
        Ok(set)
    }
}

impl TryFrom<String> for StreamSet {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StreamSet> for String {
    fn from(s: StreamSet) -> String {
        s.to_string()
    }
}

/// Directed cross-attention: queries from `query`, keys and values from
/// `context`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Flow {
    pub query: Stream,
    pub context: Stream,
}

impl Flow {
    pub const TEXT_IMAGE: Flow = Flow { query: Stream::Text, context: Stream::Image };
    pub const TEXT_REASONING: Flow = Flow { query: Stream::Text, context: Stream::Reasoning };
    pub const IMAGE_REASONING: Flow = Flow { query: Stream::Image, context: Stream::Reasoning };
    pub const CANONICAL: [Flow; 3] = [Flow::TEXT_IMAGE, Flow::TEXT_REASONING, Flow::IMAGE_REASONING];
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.query.letter(), self.context.letter())
    }
}
