//! Dark humor understanding for memes.
//!
//! The crate covers the whole pipeline short of running the upstream
//! encoders: dataset manifests and embedding files ([`data`]), structured
//! explanations and their refinement against a vision-language model
//! ([`explanation`], [`vlm`], [`refine`]), the tri-stream cross-attention
//! classifier with hand-written backpropagation ([`tcrnet`]), training
//! ([`trainer`]) and evaluation and agreement statistics ([`evalstats`]).

pub mod data;
pub mod evalstats;
pub mod explanation;
pub mod optim;
pub mod refine;
pub mod tcrnet;
pub mod trainer;
pub mod vlm;

pub use data::{
    DataError, EmbeddingTriple, IntensityLevel, MemeRecord, Split, Stream, TargetCategory,
};
pub use evalstats::{MetricsReport, StatsError};
pub use explanation::ExplanationDoc;
pub use tcrnet::{ModelError, StreamSet, Task, TcrNetParams};
pub use trainer::{TrainConfig, TrainError};
