//! A small vision-language-action model with a denoising action head, and
//! the tools to make it cheaper at inference time without retraining.

pub mod action;
pub mod config;
pub mod error;
pub mod export;
pub mod format;
pub mod layer_prune;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod profiler;
pub mod tensor;
pub mod token_prune;
pub mod verify;

pub use config::{CachePolicy, ModelConfig, PruningPlan, TokenPruneConfig};
pub use error::{Error, Result};
pub use model::ModelBundle;
pub use pipeline::{apply_plan, infer, DropSpec, InferenceOptions, InferenceOutput, PlanRequest, StageTimes};
pub use tensor::{SeededGenerator, Tensor};
