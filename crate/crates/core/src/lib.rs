//! Acceptance-aware training objectives for parallel block drafters and a
//! small speculative-decoding laboratory to exercise them.

pub mod analysis;
pub mod drafter;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod specdec;
pub mod weights;

pub use error::{Error, Result};
pub use drafter::{DrafterConfig, DrafterParams, StepMetrics};
pub use harness::{ExperimentConfig, RunRecord};
pub use losses::{LogitBlock, LossConfig, LossKind, LossResult, TargetDistBlock, TargetTokens};
pub use numerics::{Distribution, Matrix, RealVector};
pub use specdec::{BlockOutcome, TargetModel, TrainingExample};
pub use weights::{ConfidenceBlock, WeightVector};
