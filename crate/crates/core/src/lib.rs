//! Test-time adaptation for blind image quality models.
//!
//! A small CNN quality model is trained on one distortion family and adapted
//! to a shifted test distribution batch by batch, by optimizing a
//! group-contrastive term over pseudo-labelled quality groups plus a
//! distortion-rank term, while only batch-norm affine parameters and the
//! projection head move.

pub mod adaptation;
pub mod distortions;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;

pub use adaptation::{adapt_batch, select_distortion_type, tta_run, BatchResult, DistortionMode, ParamHashes, TtaConfig, TtaRun};
pub use distortions::{DistortionKind, Level};
pub use eval::metrics::{plcc, srocc};
pub use image::Image;
pub use losses::Objective;
pub use model::{ArchConfig, ModelSnapshot, ParamRole, QualityModel};
pub use tensor::{BnMode, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    GradCheck(#[from] gradcheck::GradCheckError),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
