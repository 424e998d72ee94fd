//! Codebook learning: seeded initialization (uniform / k-means), EMA updates
//! in both the operational and the analysis form, closed-form limits for
//! constant streams, and dead-code resets.

mod ema;
mod init;

pub use ema::{
    closed_form_limit, ema_step, ema_step_proof_form, laplace_smooth, BatchAssignment,
    ClosedFormLimit, EmaState,
};
pub use init::{
    derive_seed, fit_rq_init, init_kmeans, init_uniform, reset_unused,
    sample_without_replacement, InitMethod, QuantizerSpec,
};
