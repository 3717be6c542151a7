//! Few-step distillation of a class-conditional flow-matching model on 2D toy
//! data: teacher training, guidance distillation, multi-phase consistency
//! distillation and adversarial finetuning, on a small reverse-mode autodiff
//! tape.

pub mod ckpt;
pub mod data;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{energy_distance, sample_toy_data, ToyDist};
pub use nn::{FlowModel, ModelConfig};
pub use tensor::Tensor;
pub use train::{DistillConfig, PhaseSchedule};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged in stage {stage} at step {step}")]
    Divergence { stage: String, step: usize },
    #[error("stage `{0}` has not been run; its checkpoint is missing")]
    MissingStage(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
