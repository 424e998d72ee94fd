//! Desk-scale training harness around the residual-quantization core.
//!
//! Everything here is sized to run in seconds on a laptop while still
//! exercising the full training loop: seeded two-level synthetic data
//! ([`data`]), four tiny affine models with exact analytic gradients
//! ([`models`]), the interleaved and joint training drivers ([`phases`]),
//! and the two standing experiments — EMA convergence against the
//! closed-form limit and a VQ-versus-RQ comparison at a matched code
//! budget ([`experiments`]). Reports ([`report`]) are plain serializable
//! values, bit-reproducible from the config and seed.
//!
//! The harness works in f64 throughout; the generic core is instantiated
//! at that width.

pub mod data;
pub mod experiments;
pub mod models;
pub mod phases;
pub mod report;

pub use data::{gen_synthetic, sample_mask, Dataset, Sequence, SyntheticDatasetSpec};
pub use experiments::{convergence_experiment, vq_vs_rq_experiment, ComparisonBudget};
pub use models::{ToyDecoder, ToyEncoder, ToyEstimator, ToyTokenizerEncoder};
pub use phases::{
    evaluate, interleave, interleave_with_state, joint_train, joint_train_with_state,
    normalization_backward, train_encoder_phase, train_tokenizer_phase, HarnessConfig,
    PhaseSchedule, TrainState,
};
pub use report::{
    ComparisonReport, ComparisonRow, ConvergenceReport, EpochRecord, EvalRecord, PhaseRecord,
    RunReport, StageUsageRecord,
};

/// Errors a harness run can produce. Core numeric failures pass through
/// unchanged; the two harness-specific cases are bad run configuration and
/// a training loss leaving the finite range.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] resq_core::Error),
    #[error("invalid configuration: {name}: {reason}")]
    InvalidConfig {
        name: &'static str,
        reason: String,
    },
    #[error("training diverged in the {phase} phase at epoch {epoch}: {detail}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;
