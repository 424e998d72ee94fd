//! Residual vector quantization with EMA-trained codebooks.
//!
//! The crate covers the full discrete-bottleneck stack: staged nearest-code
//! quantization ([`quantizer`]), seeded codebook fitting and
//! exponential-moving-average updates with provable bounds ([`training`]),
//! the associated losses with analytic gradients ([`losses`]), and codebook
//! usage metrics ([`metrics`]).
//!
//! All numeric code is generic over the scalar type (f32 or f64 via
//! [`scalar::Real`]); the `*64`/`*32` aliases below pick a width. Every
//! randomized operation takes an explicit seed and runs on a ChaCha8 stream,
//! so results are bit-reproducible across runs and platforms.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod quantizer;
mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub use quantizer::{
    Codebook, LatentSequence, NormalizationMode, QuantizationResult, ResidualQuantizer,
    SoftAssignment, StageQuantization, TokenGrid,
};
pub use training::{
    derive_seed, BatchAssignment, ClosedFormLimit, EmaState, InitMethod, QuantizerSpec,
};

/// 64-bit concrete aliases (the default working width).
pub type Codebook64 = Codebook<f64>;
pub type LatentSequence64 = LatentSequence<f64>;
pub type ResidualQuantizer64 = ResidualQuantizer<f64>;
pub type QuantizationResult64 = QuantizationResult<f64>;
pub type EmaState64 = EmaState<f64>;
pub type BatchAssignment64 = BatchAssignment<f64>;

/// 32-bit concrete aliases.
pub type Codebook32 = Codebook<f32>;
pub type LatentSequence32 = LatentSequence<f32>;
pub type ResidualQuantizer32 = ResidualQuantizer<f32>;
pub type QuantizationResult32 = QuantizationResult<f32>;
pub type EmaState32 = EmaState<f32>;
pub type BatchAssignment32 = BatchAssignment<f32>;
