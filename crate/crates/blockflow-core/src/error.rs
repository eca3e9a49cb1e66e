//! Crate-wide error type.
//!
//! Errors fall into two classes: contract violations on the caller's side
//! (bad stage order, unknown labels, mismatched inputs) and numerical
//! failures during training or sampling. [`Error::is_numerical`] exposes the
//! distinction so drivers can map them to different exit codes.

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("cell {cell_id} has zero total count; cannot depth-normalize")]
    ZeroCountCell { cell_id: String },

    #[error("pipeline order violation: {op} requires stage {expected}, matrix is at {actual}")]
    PipelineOrder {
        op: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("max-abs scale factors are missing; matrix was never scaled")]
    MissingScaleFactors,

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("gene id {gene_id} in layout is not present in the expression matrix")]
    UnknownGene { gene_id: String },

    #[error("condition index {index} out of range for type {type_name} (vocab size {vocab})")]
    IndexOutOfVocab {
        type_name: String,
        index: usize,
        vocab: usize,
    },

    #[error("unknown condition label {label:?} for type {type_name}")]
    UnknownLabel { type_name: String, label: String },

    #[error("{what} misaligned: expected {expected} rows, got {actual}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("training diverged at epoch {epoch}: {what} became non-finite")]
    Diverged { epoch: usize, what: &'static str },

    #[error("non-finite value in {what} during {op}")]
    NonFinite { op: &'static str, what: &'static str },

    #[error("ODE trajectory became non-finite at step {step}")]
    OdeDiverged { step: usize },

    #[error("{metric} undefined: {reason}")]
    DegenerateMetric {
        metric: &'static str,
        reason: &'static str,
    },

    #[error("model states disagree: {what}")]
    StateMismatch { what: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures of the numerics themselves (divergence, non-finite
    /// trajectories), as opposed to invalid inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::NonFinite { .. } | Error::OdeDiverged { .. }
        )
    }
}
