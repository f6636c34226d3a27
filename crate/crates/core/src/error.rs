use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error("architecture mismatch at layer {layer}: {detail}")]
    ArchitectureMismatch { layer: usize, detail: String },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f32 },
    #[error("heuristic returned non-finite score {score} for candidate {fingerprint:016x} at step {step}")]
    NonFiniteScore {
        step: usize,
        fingerprint: u64,
        score: f64,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
