//! Foreground-aware dual-branch re-identification network on a deterministic
//! synthetic benchmark: a small reverse-mode autodiff engine, the layer
//! vocabulary, the two-branch model with its attention gating and target
//! attention loss, a sprite-compositing dataset generator with ground-truth
//! masks, and the training/evaluation protocol (CMC/mAP, camera accuracy,
//! mask IoU).

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod netpbm;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;

mod matmul;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),
    #[error("loss tensor is not on this graph")]
    LossNotOnGraph,
    #[error("missing gradient on trainable parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("checkpoint has bad magic bytes")]
    CheckpointBadMagic,
    #[error("checkpoint format version {0} not supported")]
    CheckpointBadVersion(u32),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CheckpointCrc { stored: u32, computed: u32 },
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),
}

pub type Result<T> = std::result::Result<T, Error>;
