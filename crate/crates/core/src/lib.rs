//! Background-debiased image classification with a causal interventional
//! regularizer.
//!
//! A feature backbone yields per-position semantics, an activation backbone
//! gates them, and a shared classifier scores both the pooled features and
//! each gated position. Training adds a per-position likelihood penalty to
//! the usual cross-entropy.

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, Image, Sample, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use losses::{cross_entropy, l_cr_t, total_loss, LossBreakdown};
pub use metrics::{discriminability, evaluate, export_embeddings, DiscriminabilityReport, EvalReport, Pca};
pub use model::{CausalModel, ModelConfig, PredictMode};
pub use nn::{BackboneConfig, BlockConfig, ParamGroup, ParamSet};
pub use tensor::{Real, Tape, Tensor, Var};
pub use train::{train, train_with_validation, AdamConfig, Optimizer, TrainConfig, TrainLogRow, TrainOutcome};
