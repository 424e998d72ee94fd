//! Serializable run reports. Every record here is a plain value fully
//! determined by the run configuration and seed — no wall-clock times, no
//! host-dependent fields — so identical runs produce identical reports.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDatasetSpec;
use resq_core::metrics::StageMetrics;
use resq_core::{InitMethod, NormalizationMode};

/// Stable names for the normalization modes, used in configs and reports.
pub fn normalization_name(mode: NormalizationMode) -> &'static str {
    match mode {
        NormalizationMode::None => "none",
        NormalizationMode::InputOnly => "input-only",
        NormalizationMode::PerStage => "per-stage",
    }
}

pub fn parse_normalization(name: &str) -> Option<NormalizationMode> {
    match name {
        "none" => Some(NormalizationMode::None),
        "input-only" => Some(NormalizationMode::InputOnly),
        "per-stage" => Some(NormalizationMode::PerStage),
        _ => None,
    }
}

/// Stable names for the codebook init methods.
pub fn init_method_name(method: InitMethod) -> &'static str {
    match method {
        InitMethod::Uniform => "uniform",
        InitMethod::KMeans => "kmeans",
    }
}

pub fn parse_init_method(name: &str) -> Option<InitMethod> {
    match name {
        "uniform" => Some(InitMethod::Uniform),
        "kmeans" => Some(InitMethod::KMeans),
        _ => None,
    }
}

/// Quantizer settings echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerEcho {
    pub stage_sizes: Vec<usize>,
    pub normalization: String,
    pub soft_k: usize,
    pub init_method: String,
    pub kmeans_steps: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub reset_threshold: f64,
}

/// Schedule and loss-weight settings echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEcho {
    pub iterations: usize,
    pub encoder_epochs: usize,
    pub tokenizer_epochs: usize,
    pub mask_ratio: f64,
    pub encoder_lr: f64,
    pub tokenizer_lr: f64,
    pub joint_mode: bool,
    /// Steps between tokenizer-side updates in joint mode; 0 disables them.
    pub tokenizer_update_every: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cos: f64,
}

/// Loss averages for one epoch. Fields are present only where the phase
/// computes them: encoder phases fill `prediction_loss`, tokenizer phases
/// the quantization/alignment pair, joint epochs whatever ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prediction_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quantization_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alignment_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub combined_loss: Option<f64>,
}

/// One training phase: which kind, which interleave iteration it belongs
/// to, and its per-epoch loss trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// "encoder", "tokenizer", or "joint".
    pub kind: String,
    /// 1-based interleave iteration the phase ran under.
    pub iteration: usize,
    pub epochs: Vec<EpochRecord>,
}

/// One stage's usage metrics in report form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageUsageRecord {
    pub stage_index: usize,
    pub codebook_size: usize,
    pub cur: f64,
    pub usage_entropy: f64,
    pub ecu: f64,
}

impl From<&StageMetrics<f64>> for StageUsageRecord {
    fn from(m: &StageMetrics<f64>) -> Self {
        Self {
            stage_index: m.stage_index,
            codebook_size: m.codebook_size,
            cur: m.cur,
            usage_entropy: m.usage_entropy,
            ecu: m.ecu,
        }
    }
}

/// Held-out evaluation snapshot taken after an encoder phase (or a joint
/// block): masked-token prediction accuracy against the tokenizer's
/// targets, the quantizer's reconstruction error, and per-stage usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    /// Fraction of masked (position, stage) cells predicted exactly.
    pub masked_token_accuracy: f64,
    /// Mean over stages of 1/K_m — the guess-at-random baseline.
    pub chance_accuracy: f64,
    /// Mean squared quantization error over the evaluation latents.
    pub quantization_mse: f64,
    pub stages: Vec<StageUsageRecord>,
}

/// Full record of one training run, bit-reproducible from config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// "interleaved" or "joint".
    pub mode: String,
    pub final_accuracy: f64,
    pub final_quantization_mse: f64,
    pub dataset: SyntheticDatasetSpec,
    pub quantizer: QuantizerEcho,
    pub schedule: ScheduleEcho,
    pub phases: Vec<PhaseRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Result of driving the analysis-form EMA recursion on a constant stream
/// and comparing against its closed-form limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub codebook_size: usize,
    pub dim: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub steps: u64,
    pub seed: u64,
    /// max_i |N_i − N_i^∞| after the final step.
    pub max_count_deviation: f64,
    /// max_i ‖c_i − c_i^∞‖₂ after the final step.
    pub max_code_deviation: f64,
    /// True when the count and running-sum bounds were re-verified after
    /// every single step (always the case when steps > 0).
    pub bounds_checked_every_step: bool,
}

/// One seed's paired single-stage-versus-residual comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub vq_mse: f64,
    pub rq_mse: f64,
    pub vq_accuracy: f64,
    pub rq_accuracy: f64,
    pub vq_stages: Vec<StageUsageRecord>,
    pub rq_stages: Vec<StageUsageRecord>,
}

/// Paired comparison of a single-stage and a residual quantizer at the
/// same total code budget, over a set of seeds on identical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub vq_stage_sizes: Vec<usize>,
    pub rq_stage_sizes: Vec<usize>,
    /// Rows where the residual arm reached strictly lower final MSE.
    pub rq_lower_mse: usize,
    /// Rows where every residual stage's usage rate was at least the
    /// single-stage arm's.
    pub rq_cur_at_least: usize,
    pub rows: Vec<ComparisonRow>,
}
