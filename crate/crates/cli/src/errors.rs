use std::fmt;

use dhumor_core::refine::RefineError;
use dhumor_core::trainer::TrainError;
use dhumor_core::vlm::VlmError;
use dhumor_core::{DataError, ModelError, StatsError};

/// Bad input caught by the CLI itself (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn data_is_invalid(e: &DataError) -> bool {
    !matches!(e, DataError::Io(_))
}

fn model_is_invalid(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::TooFewStreams(_)
            | ModelError::InvalidConfig(_)
            | ModelError::ShapeMismatch(_)
            | ModelError::NonFiniteInput(_)
            | ModelError::MissingHead(_)
            | ModelError::LabelOutOfRange { .. }
            | ModelError::Checkpoint(_)
    )
}

/// 1 when the failure traces back to the user's input, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let bad_input = if cause.is::<Invalid>() || cause.is::<StatsError>() || cause.is::<csv::Error>() {
            true
        } else if let Some(e) = cause.downcast_ref::<DataError>() {
            data_is_invalid(e)
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            model_is_invalid(e)
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::MissingEmbedding(_)
                | TrainError::EmptyEligibleSet(_)
                | TrainError::TaskMismatch { .. }
                | TrainError::InvalidConfig(_)
                | TrainError::Stats(_) => true,
                TrainError::Data(d) => data_is_invalid(d),
                TrainError::Model(m) => model_is_invalid(m),
                TrainError::NaNGuard { .. } | TrainError::Io(_) => false,
            }
        } else if let Some(e) = cause.downcast_ref::<RefineError>() {
            matches!(e, RefineError::InvalidConfig(_) | RefineError::MissingImage { .. })
        } else if let Some(e) = cause.downcast_ref::<VlmError>() {
            matches!(e, VlmError::Config(_) | VlmError::EmptyScript | VlmError::InvalidRequest(_))
        } else {
            false
        };
        if bad_input {
            return 1;
        }
    }
    2
}

#[cfg(test)]
mod tests {
    use super::*;
    use dhumor_core::Task;

    #[test]
    fn classification() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&TrainError::EmptyEligibleSet(Task::Target).into()), 1);
        assert_eq!(exit_code(&TrainError::NaNGuard { epoch: 1, step: 0 }.into()), 2);
        let io = std::io::Error::other("disk");
        assert_eq!(exit_code(&anyhow::Error::from(io).context("writing")), 2);
        let wrapped = anyhow::Error::from(DataError::DuplicateId("a".into())).context("loading manifest");
        assert_eq!(exit_code(&wrapped), 1);
    }
}
