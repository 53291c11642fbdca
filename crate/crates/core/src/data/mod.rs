//! Dataset schema, label taxonomy, manifest ingestion, split accounting and
//! the binary embedding file format.

mod embedding;
mod manifest;
mod stats;

pub use embedding::{
    embedding_path, read_embedding_file, read_embedding_from, write_embedding_file,
    write_embedding_to, EmbeddingTriple, Stream, DEFAULT_MODEL_DIM, DEFAULT_TOKENS,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use manifest::{load_manifest, parse_manifest, save_manifest, write_manifest};
pub use stats::{compute_stats, DatasetStats, SplitStats};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate meme id `{0}`")]
    DuplicateId(String),
    #[error("label constraint violated for meme `{0}`: dark_humor, target and intensity disagree")]
    LabelConstraintViolation(String),
    #[error("bad magic bytes in embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u16),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {stream} stream at row {row}, col {col}")]
    NonFiniteValue {
        stream: Stream,
        row: usize,
        col: usize,
    },
    #[error("corrupt embedding file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The group a dark meme aims at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TargetCategory {
    GenderSex,
    MentalHealth,
    Disability,
    RaceEthnicity,
    ViolenceDeath,
    Other,
}

impl TargetCategory {
    pub const ALL: [TargetCategory; 6] = [
        TargetCategory::GenderSex,
        TargetCategory::MentalHealth,
        TargetCategory::Disability,
        TargetCategory::RaceEthnicity,
        TargetCategory::ViolenceDeath,
        TargetCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetCategory::GenderSex => "Gender/Sex-Related Topics",
            TargetCategory::MentalHealth => "Mental Health",
            TargetCategory::Disability => "Disability",
            TargetCategory::RaceEthnicity => "Race/Ethnicity",
            TargetCategory::ViolenceDeath => "Violence/Death",
            TargetCategory::Other => "Other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }
}

impl fmt::Display for TargetCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown target category `{s}`"))
    }
}

/// Ordinal dark humor intensity: 1 = mild, 2 = moderate, 3 = severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntensityLevel(u8);

impl IntensityLevel {
    pub const MILD: IntensityLevel = IntensityLevel(1);
    pub const MODERATE: IntensityLevel = IntensityLevel(2);
    pub const SEVERE: IntensityLevel = IntensityLevel(3);
    pub const ALL: [IntensityLevel; 3] = [Self::MILD, Self::MODERATE, Self::SEVERE];

    pub fn new(value: u8) -> Option<Self> {
        (1..=3).contains(&value).then_some(IntensityLevel(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based class index used by the classifier.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        u8::try_from(idx + 1).ok().and_then(Self::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One meme with its gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemeRecord {
    pub id: String,
    pub image_file: String,
    pub ocr_text: String,
    pub dark_humor: bool,
    pub target: Option<TargetCategory>,
    pub intensity: Option<IntensityLevel>,
    pub split: Split,
}

impl MemeRecord {
    /// A non-dark record; target and intensity absent.
    pub fn non_dark(id: impl Into<String>, split: Split) -> Self {
        let id = id.into();
        MemeRecord {
            image_file: format!("{id}.png"),
            id,
            ocr_text: String::new(),
            dark_humor: false,
            target: None,
            intensity: None,
            split,
        }
    }

    pub fn dark(
        id: impl Into<String>,
        split: Split,
        target: TargetCategory,
        intensity: IntensityLevel,
    ) -> Self {
        MemeRecord {
            dark_humor: true,
            target: Some(target),
            intensity: Some(intensity),
            ..Self::non_dark(id, split)
        }
    }

    /// Checks the dark/target/intensity consistency rule.
    pub fn labels_consistent(&self) -> bool {
        match self.dark_humor {
            true => self.target.is_some() && self.intensity.is_some(),
            false => self.target.is_none() && self.intensity.is_none(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !self.labels_consistent() {
            return Err(DataError::LabelConstraintViolation(self.id.clone()));
        }
        Ok(())
    }
}
