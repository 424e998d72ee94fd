//! Run configuration: a flat TOML file of named hyperparameters plus a
//! `[dataset]` table, resolved against a named preset. Every key is
//! optional in the file; the resolved [`RunConfig`] is fully concrete, so
//! serializing and re-parsing it is the identity.
//!
//! Two presets exist: `desk` (the default; everything sized to finish in
//! seconds) and `full` (the same run shape with 256-dimensional latents
//! and 256-code stages). Unknown keys are rejected, and every value is
//! range-checked here before it can reach the training code.

use std::path::Path;

use serde::{Deserialize, Serialize};

use resq_harness::phases::{HarnessConfig, PhaseSchedule};
use resq_harness::report::{parse_init_method, parse_normalization};
use resq_harness::{HarnessError, SyntheticDatasetSpec};

use resq_core::QuantizerSpec;

use crate::{CliError, Result};

/// Synthetic-data shape for `train` and `gen-data`. The seed defaults to
/// the run seed, so one number reproduces the whole run, data included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub coarse_centers: usize,
    pub fine_offsets: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// A fully resolved run configuration. Field order keeps the `[dataset]`
/// table last so the TOML rendering stays valid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Latent width D shared by the models and every codebook.
    pub dim: usize,
    /// Number of residual stages M.
    pub num_codebooks: usize,
    /// Codes per stage K (all stages share one size).
    pub codebook_size: usize,
    /// "none", "input-only", or "per-stage".
    pub normalization: String,
    /// Codes blended per lookup; 1 = hard assignment.
    pub soft_k: usize,
    /// "kmeans" or "uniform" codebook seeding.
    pub init_method: String,
    pub kmeans_steps: usize,
    /// EMA decay, strictly inside (0, 1).
    pub gamma: f64,
    /// EMA smoothing constant, strictly positive.
    pub epsilon: f64,
    /// Commitment weight.
    pub beta: f64,
    /// Alignment-loss weight.
    pub lambda_cos: f64,
    /// Joint-mode weight on the tokenizer objective.
    pub alpha: f64,
    /// Usage-count threshold for the unused-code reset sweep.
    pub reset_threshold: f64,
    /// Fraction of positions hidden from the encoder, strictly in (0, 1).
    pub mask_ratio: f64,
    pub iterations: usize,
    pub encoder_epochs: usize,
    pub tokenizer_epochs: usize,
    pub encoder_lr: f64,
    pub tokenizer_lr: f64,
    pub joint_mode: bool,
    /// Joint-mode batches between tokenizer-side updates; 0 disables them.
    pub tokenizer_update_every: u64,
    pub dataset: DatasetConfig,
}

/// The file-facing shape: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    seed: Option<u64>,
    dim: Option<usize>,
    num_codebooks: Option<usize>,
    codebook_size: Option<usize>,
    normalization: Option<String>,
    soft_k: Option<usize>,
    init_method: Option<String>,
    kmeans_steps: Option<usize>,
    gamma: Option<f64>,
    epsilon: Option<f64>,
    beta: Option<f64>,
    lambda_cos: Option<f64>,
    alpha: Option<f64>,
    reset_threshold: Option<f64>,
    mask_ratio: Option<f64>,
    iterations: Option<usize>,
    encoder_epochs: Option<usize>,
    tokenizer_epochs: Option<usize>,
    encoder_lr: Option<f64>,
    tokenizer_lr: Option<f64>,
    joint_mode: Option<bool>,
    tokenizer_update_every: Option<u64>,
    dataset: Option<RawDataset>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    n_samples: Option<usize>,
    seq_len: Option<usize>,
    feature_dim: Option<usize>,
    coarse_centers: Option<usize>,
    fine_offsets: Option<usize>,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
}

/// The desk preset: finishes in seconds, beats chance comfortably, and is
/// the baseline every documented number refers to.
fn desk_base() -> RunConfig {
    RunConfig {
        preset: "desk".to_string(),
        seed: 42,
        dim: 8,
        num_codebooks: 4,
        codebook_size: 16,
        normalization: "input-only".to_string(),
        soft_k: 1,
        init_method: "kmeans".to_string(),
        kmeans_steps: 10,
        gamma: 0.99,
        epsilon: 1e-5,
        beta: 0.25,
        lambda_cos: 1.0,
        alpha: 0.5,
        reset_threshold: 1.0,
        mask_ratio: 0.8,
        iterations: 2,
        encoder_epochs: 15,
        tokenizer_epochs: 10,
        encoder_lr: 0.1,
        tokenizer_lr: 0.1,
        joint_mode: false,
        tokenizer_update_every: 5,
        dataset: DatasetConfig {
            n_samples: 64,
            seq_len: 32,
            feature_dim: 16,
            coarse_centers: 16,
            fine_offsets: 16,
            noise_sigma: 0.05,
            seed: 42,
        },
    }
}

/// The full preset: the desk run shape with production-sized latents and
/// codebooks. Minutes, not seconds.
fn full_base() -> RunConfig {
    RunConfig {
        preset: "full".to_string(),
        dim: 256,
        codebook_size: 256,
        ..desk_base()
    }
}

impl RawConfig {
    fn resolve(self) -> Result<RunConfig> {
        let preset = self.preset.unwrap_or_else(|| "desk".to_string());
        let base = match preset.as_str() {
            "desk" => desk_base(),
            "full" => full_base(),
            other => {
                return Err(CliError::Validation(format!(
                    "preset: unknown preset {other:?}; expected \"desk\" or \"full\""
                )))
            }
        };
        let seed = self.seed.unwrap_or(base.seed);
        let ds = self.dataset.unwrap_or_default();
        Ok(RunConfig {
            preset,
            seed,
            dim: self.dim.unwrap_or(base.dim),
            num_codebooks: self.num_codebooks.unwrap_or(base.num_codebooks),
            codebook_size: self.codebook_size.unwrap_or(base.codebook_size),
            normalization: self.normalization.unwrap_or(base.normalization),
            soft_k: self.soft_k.unwrap_or(base.soft_k),
            init_method: self.init_method.unwrap_or(base.init_method),
            kmeans_steps: self.kmeans_steps.unwrap_or(base.kmeans_steps),
            gamma: self.gamma.unwrap_or(base.gamma),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            beta: self.beta.unwrap_or(base.beta),
            lambda_cos: self.lambda_cos.unwrap_or(base.lambda_cos),
            alpha: self.alpha.unwrap_or(base.alpha),
            reset_threshold: self.reset_threshold.unwrap_or(base.reset_threshold),
            mask_ratio: self.mask_ratio.unwrap_or(base.mask_ratio),
            iterations: self.iterations.unwrap_or(base.iterations),
            encoder_epochs: self.encoder_epochs.unwrap_or(base.encoder_epochs),
            tokenizer_epochs: self.tokenizer_epochs.unwrap_or(base.tokenizer_epochs),
            encoder_lr: self.encoder_lr.unwrap_or(base.encoder_lr),
            tokenizer_lr: self.tokenizer_lr.unwrap_or(base.tokenizer_lr),
            joint_mode: self.joint_mode.unwrap_or(base.joint_mode),
            tokenizer_update_every: self
                .tokenizer_update_every
                .unwrap_or(base.tokenizer_update_every),
            dataset: DatasetConfig {
                n_samples: ds.n_samples.unwrap_or(base.dataset.n_samples),
                seq_len: ds.seq_len.unwrap_or(base.dataset.seq_len),
                feature_dim: ds.feature_dim.unwrap_or(base.dataset.feature_dim),
                coarse_centers: ds.coarse_centers.unwrap_or(base.dataset.coarse_centers),
                fine_offsets: ds.fine_offsets.unwrap_or(base.dataset.fine_offsets),
                noise_sigma: ds.noise_sigma.unwrap_or(base.dataset.noise_sigma),
                // The run seed, not the preset's, so `--seed` moves the
                // data draw along with everything else.
                seed: ds.seed.unwrap_or(seed),
            },
        })
    }
}

impl RunConfig {
    /// The training-side view of this configuration. Fails with the
    /// offending key's name when a mode string is unrecognized.
    pub fn to_harness_config(&self) -> Result<HarnessConfig> {
        let normalization = parse_normalization(&self.normalization).ok_or_else(|| {
            CliError::Validation(format!(
                "normalization: unknown mode {:?}; expected \"none\", \"input-only\", or \"per-stage\"",
                self.normalization
            ))
        })?;
        let init_method = parse_init_method(&self.init_method).ok_or_else(|| {
            CliError::Validation(format!(
                "init_method: unknown method {:?}; expected \"kmeans\" or \"uniform\"",
                self.init_method
            ))
        })?;
        Ok(HarnessConfig {
            seed: self.seed,
            dim: self.dim,
            quantizer: QuantizerSpec {
                stage_sizes: vec![self.codebook_size; self.num_codebooks],
                normalization,
                soft_k: self.soft_k,
            },
            init_method,
            kmeans_steps: self.kmeans_steps,
            gamma: self.gamma,
            epsilon: self.epsilon,
            beta: self.beta,
            lambda_cos: self.lambda_cos,
            reset_threshold: self.reset_threshold,
            schedule: PhaseSchedule {
                iterations: self.iterations,
                encoder_epochs: self.encoder_epochs,
                tokenizer_epochs: self.tokenizer_epochs,
                mask_ratio: self.mask_ratio,
                encoder_lr: self.encoder_lr,
                tokenizer_lr: self.tokenizer_lr,
                joint_mode: self.joint_mode,
                tokenizer_update_every: self.tokenizer_update_every,
                alpha: self.alpha,
            },
        })
    }

    /// The data-generation view of this configuration.
    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_samples: self.dataset.n_samples,
            seq_len: self.dataset.seq_len,
            feature_dim: self.dataset.feature_dim,
            coarse_centers: self.dataset.coarse_centers,
            fine_offsets: self.dataset.fine_offsets,
            noise_sigma: self.dataset.noise_sigma,
            seed: self.dataset.seed,
        }
    }

    /// Range-checks every value, naming the offending key. Delegates to
    /// the training and data validators so no number can reach them
    /// unchecked by a route this module forgot.
    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 {
            return Err(CliError::Validation(
                "num_codebooks: need at least one stage".to_string(),
            ));
        }
        if self.codebook_size == 0 {
            return Err(CliError::Validation(
                "codebook_size: need at least one code per stage".to_string(),
            ));
        }
        self.to_harness_config()?
            .validate()
            .map_err(named_validation)?;
        self.dataset_spec().validate().map_err(|err| match err {
            HarnessError::InvalidConfig { name, reason } => {
                CliError::Validation(format!("dataset.{name}: {reason}"))
            }
            other => other.into(),
        })
    }

    /// Renders the resolved configuration; [`parse_config`] of the result
    /// reproduces `self` exactly.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("a resolved config always serializes")
    }
}

/// Maps a harness validation error onto the flat `key: reason` form the
/// one-line stderr contract wants.
fn named_validation(err: HarnessError) -> CliError {
    match err {
        HarnessError::InvalidConfig { name, reason } => {
            CliError::Validation(format!("{name}: {reason}"))
        }
        other => other.into(),
    }
}

/// Parses and validates configuration text. Empty text yields the desk
/// preset's defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_with_seed(text, None)
}

/// As [`parse_config`], with the run seed forced before resolution so a
/// derived dataset seed follows the override.
fn parse_with_seed(text: &str, seed: Option<u64>) -> Result<RunConfig> {
    let mut raw: RawConfig = toml::from_str(text)
        .map_err(|err| CliError::Validation(format!("config: {err}")))?;
    if seed.is_some() {
        raw.seed = seed;
    }
    let cfg = raw.resolve()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, resolves, and validates a run configuration. `path` of `None`
/// means "no file": the seed override (command line or environment) is
/// applied to the preset defaults.
pub fn load_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(crate::io_error("reading config", p))?,
        None => String::new(),
    };
    parse_with_seed(&text, seed_override)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_desk_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, desk_base());
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.reset_threshold, 1.0);
        assert_eq!(cfg.mask_ratio, 0.8);
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let mut cfg = parse_config("gamma = 0.97\nseed = 7\n[dataset]\nnoise_sigma = 0.01").unwrap();
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
        cfg.preset = "full".to_string();
        // A round trip keeps explicit values even where they differ from
        // the named preset's defaults.
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn out_of_range_values_fail_naming_the_key() {
        let err = parse_config("gamma = 1.5").unwrap_err();
        assert!(err.to_string().contains("gamma"), "got: {err}");
        let err = parse_config("mask_ratio = 0.0").unwrap_err();
        assert!(err.to_string().contains("mask_ratio"), "got: {err}");
        let err = parse_config("[dataset]\nn_samples = 1").unwrap_err();
        assert!(err.to_string().contains("dataset.n_samples"), "got: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("gamm = 0.9").unwrap_err();
        assert!(err.to_string().contains("gamm"), "got: {err}");
        let err = parse_config("[dataset]\nrows = 3").unwrap_err();
        assert!(err.to_string().contains("rows"), "got: {err}");
    }

    #[test]
    fn seed_override_moves_the_derived_dataset_seed() {
        let cfg = parse_with_seed("", Some(7)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.seed, 7);
        // An explicit dataset seed wins over the derivation.
        let cfg = parse_with_seed("[dataset]\nseed = 3", Some(7)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.seed, 3);
    }

    #[test]
    fn the_full_preset_scales_the_latent_side_only() {
        let cfg = parse_config("preset = \"full\"").unwrap();
        assert_eq!(cfg.dim, 256);
        assert_eq!(cfg.codebook_size, 256);
        assert_eq!(cfg.num_codebooks, 4);
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.dataset, desk_base().dataset);
        let err = parse_config("preset = \"laptop\"").unwrap_err();
        assert!(err.to_string().contains("preset"), "got: {err}");
    }

    #[test]
    fn resolved_configs_convert_and_validate_cleanly() {
        let cfg = parse_config("").unwrap();
        let harness = cfg.to_harness_config().unwrap();
        assert_eq!(harness.quantizer.stage_sizes, vec![16; 4]);
        assert!(harness.validate().is_ok());
        assert!(cfg.dataset_spec().validate().is_ok());
        let err = parse_config("normalization = \"l2\"").unwrap_err();
        assert!(err.to_string().contains("normalization"), "got: {err}");
        let err = parse_config("init_method = \"random\"").unwrap_err();
        assert!(err.to_string().contains("init_method"), "got: {err}");
    }
}
