//! Uncertainty quantification for LLM multi-agent systems.
//!
//! Trajectories from repeated runs of one multi-agent system on one task
//! are embedded step by step and stacked into a ragged third-order tensor
//! with one slice per (run, agent). The tensor is fitted with PARAFAC2 at
//! ranks `1..=R_max`; the reconstruction losses, summed over ranks, form the
//! uncertainty score. Consistent runs compress well and score low.

pub mod baselines;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod parafac2;
pub mod ragged;
pub mod scorer;
pub mod synthetic;
pub mod trajectory;

pub use error::{Error, ErrorClass, Result};
pub use parafac2::{fit, fit_with_warm_start, FitConfig, FitResult, Init, Parafac2Factors};
pub use ragged::{build_ragged_tensor, EmbeddingMatrix, RaggedTensor, StepFilter};
pub use scorer::{score_task, sweep_ranks, LossMode, ScoreOptions, UncertaintyReport};
pub use trajectory::{parse_trajectory_log, validate_task_record, TaskRecord};
