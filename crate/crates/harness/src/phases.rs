//! Training drivers: the tokenizer and encoder phases, the interleaved
//! schedule that alternates them, and the single-loop joint variant.
//!
//! One batch is one sequence. Every batch step follows the same order:
//! quantize, compute losses and analytic gradients, apply the (gradient-
//! free) EMA codebook update, then the SGD parameter step. Randomness is
//! drawn from seeds derived per (family, iteration, epoch, sequence), so
//! a run is a pure function of its config — reports are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::data::{sample_mask, Dataset, Sequence, SyntheticDatasetSpec};
use crate::models::{ToyDecoder, ToyEncoder, ToyEstimator, ToyTokenizerEncoder};
use crate::report::{
    init_method_name, normalization_name, EpochRecord, EvalRecord, PhaseRecord, QuantizerEcho,
    RunReport, ScheduleEcho,
};
use crate::{gen_synthetic, HarnessError, Result};

use resq_core::losses::{
    codebook_loss, cosine_alignment_loss, joint_loss, masked_cross_entropy, straight_through,
    straight_through_backward, tokenizer_loss, TokenPredictions, TokenTargets,
};
use resq_core::metrics::{usage_histogram, MetricsReport, Provenance, UsageStats};
use resq_core::training::{derive_seed, ema_step, fit_rq_init, reset_unused};
use resq_core::{
    BatchAssignment64, EmaState64, InitMethod, LatentSequence64, NormalizationMode,
    QuantizerSpec, ResidualQuantizer64, TokenGrid,
};

// Seed-derivation families. Each family is folded into the run seed first,
// then iteration/epoch/sequence indices are folded into the result, so no
// two draws in a run share a stream.
const SALT_ENCODER: u64 = 11;
const SALT_DECODER: u64 = 12;
const SALT_TOKENIZER: u64 = 31;
const SALT_ESTIMATOR: u64 = 41;
const SALT_CODEBOOK: u64 = 51;
const SALT_RESET: u64 = 61;
const SALT_TRAIN_MASKS: u64 = 71;
const SALT_EVAL_MASKS: u64 = 81;

fn tokenizer_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, SALT_TOKENIZER), iteration as u64)
}

fn estimator_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, SALT_ESTIMATOR), iteration as u64)
}

fn codebook_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, SALT_CODEBOOK), iteration as u64)
}

fn reset_seed(seed: u64, iteration: usize, stage: usize) -> u64 {
    derive_seed(
        derive_seed(derive_seed(seed, SALT_RESET), iteration as u64),
        stage as u64,
    )
}

fn train_mask_seed(seed: u64, iteration: usize, epoch: usize, idx: usize) -> u64 {
    let a = derive_seed(derive_seed(seed, SALT_TRAIN_MASKS), iteration as u64);
    derive_seed(derive_seed(a, epoch as u64), idx as u64)
}

fn eval_mask_seed(seed: u64, idx: usize) -> u64 {
    derive_seed(derive_seed(seed, SALT_EVAL_MASKS), idx as u64)
}

/// How many epochs each phase runs, how phases alternate, and the step
/// sizes. `alpha` and the cadence only matter in joint mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    /// Interleave iterations; 1 runs the encoder phase only, n ≥ 2 runs
    /// encoder, then (tokenizer, encoder) n−1 more times.
    pub iterations: usize,
    pub encoder_epochs: usize,
    pub tokenizer_epochs: usize,
    /// Fraction of positions hidden from the encoder, strictly in (0, 1).
    pub mask_ratio: f64,
    pub encoder_lr: f64,
    pub tokenizer_lr: f64,
    /// Selects the single-objective driver instead of interleaving.
    pub joint_mode: bool,
    /// In joint mode, a tokenizer-side step (gradients and EMA) runs every
    /// this many batches; 0 disables tokenizer updates entirely.
    pub tokenizer_update_every: u64,
    /// Joint-mode weight on the tokenizer objective.
    pub alpha: f64,
}

/// Everything a training run needs beyond the dataset: latent width,
/// quantizer layout, update constants, loss weights, and the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub seed: u64,
    /// Latent width D shared by all models and codebooks.
    pub dim: usize,
    pub quantizer: QuantizerSpec,
    pub init_method: InitMethod,
    pub kmeans_steps: usize,
    /// EMA decay, strictly inside (0, 1).
    pub gamma: f64,
    /// EMA smoothing constant, strictly positive.
    pub epsilon: f64,
    /// Commitment weight in the codebook loss.
    pub beta: f64,
    /// Weight of the alignment term in the tokenizer loss.
    pub lambda_cos: f64,
    /// Usage-count threshold below which a code is reset on the first
    /// batch of a tokenizer phase.
    pub reset_threshold: f64,
    pub schedule: PhaseSchedule,
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, reason: String| {
            Err(HarnessError::InvalidConfig { name, reason })
        };
        if self.dim == 0 {
            return fail("dim", "latent width must be positive".into());
        }
        self.quantizer.validate().map_err(HarnessError::Core)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(
                "gamma",
                format!("decay must lie strictly inside (0, 1), got {}", self.gamma),
            );
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(
                "epsilon",
                format!("smoothing constant must be positive, got {}", self.epsilon),
            );
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_cos", self.lambda_cos),
            ("alpha", self.schedule.alpha),
            ("reset_threshold", self.reset_threshold),
            ("encoder_lr", self.schedule.encoder_lr),
            ("tokenizer_lr", self.schedule.tokenizer_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(
                    match name {
                        "beta" => "beta",
                        "lambda_cos" => "lambda_cos",
                        "alpha" => "alpha",
                        "reset_threshold" => "reset_threshold",
                        "encoder_lr" => "encoder_lr",
                        _ => "tokenizer_lr",
                    },
                    format!("must be a finite nonnegative real, got {v}"),
                );
            }
        }
        if self.schedule.iterations == 0 {
            return fail("iterations", "need at least one iteration".into());
        }
        if !(self.schedule.mask_ratio > 0.0 && self.schedule.mask_ratio < 1.0) {
            return fail(
                "mask_ratio",
                format!(
                    "mask ratio must lie strictly inside (0, 1), got {}",
                    self.schedule.mask_ratio
                ),
            );
        }
        Ok(())
    }

    fn quantizer_echo(&self) -> QuantizerEcho {
        QuantizerEcho {
            stage_sizes: self.quantizer.stage_sizes.clone(),
            normalization: normalization_name(self.quantizer.normalization).to_string(),
            soft_k: self.quantizer.soft_k,
            init_method: init_method_name(self.init_method).to_string(),
            kmeans_steps: self.kmeans_steps,
            gamma: self.gamma,
            epsilon: self.epsilon,
            reset_threshold: self.reset_threshold,
        }
    }

    fn schedule_echo(&self) -> ScheduleEcho {
        ScheduleEcho {
            iterations: self.schedule.iterations,
            encoder_epochs: self.schedule.encoder_epochs,
            tokenizer_epochs: self.schedule.tokenizer_epochs,
            mask_ratio: self.schedule.mask_ratio,
            encoder_lr: self.schedule.encoder_lr,
            tokenizer_lr: self.schedule.tokenizer_lr,
            joint_mode: self.schedule.joint_mode,
            tokenizer_update_every: self.schedule.tokenizer_update_every,
            alpha: self.schedule.alpha,
            beta: self.beta,
            lambda_cos: self.lambda_cos,
        }
    }
}

/// All mutable training state: the four models, the staged codebooks, and
/// their EMA statistics (one per stage).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub feature_dim: usize,
    pub encoder: ToyEncoder,
    pub decoder: ToyDecoder,
    pub tokenizer_encoder: ToyTokenizerEncoder,
    pub estimator: ToyEstimator,
    pub quantizer: ResidualQuantizer64,
    pub ema: Vec<EmaState64>,
}

impl TrainState {
    /// Seeds the four models and fits initial codebooks on the leading
    /// training sequences. With `trainable_tokenizer` false the tokenizer
    /// encoder starts cold: frozen at its random draw, the state the first
    /// interleave iteration trains the encoder against.
    pub fn new(
        cfg: &HarnessConfig,
        feature_dim: usize,
        train: &[Sequence],
        trainable_tokenizer: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(HarnessError::InvalidConfig {
                name: "train",
                reason: "need at least one training sequence".into(),
            });
        }
        let encoder = ToyEncoder::new(feature_dim, cfg.dim, derive_seed(cfg.seed, SALT_ENCODER));
        let decoder = ToyDecoder::new(
            cfg.dim,
            &cfg.quantizer.stage_sizes,
            derive_seed(cfg.seed, SALT_DECODER),
        );
        let tokenizer_encoder = ToyTokenizerEncoder::new(
            feature_dim,
            cfg.dim,
            derive_seed(cfg.seed, SALT_TOKENIZER),
            !trainable_tokenizer,
        );
        let estimator = ToyEstimator::new(cfg.dim, derive_seed(cfg.seed, SALT_ESTIMATOR));
        let (quantizer, ema) =
            fit_codebooks(&tokenizer_encoder, cfg, train, codebook_seed(cfg.seed, 1))?;
        Ok(Self {
            feature_dim,
            encoder,
            decoder,
            tokenizer_encoder,
            estimator,
            quantizer,
            ema,
        })
    }

    /// Tokenizer latents and their quantization for one sequence — the
    /// token targets the encoder is trained to predict. Computed on the
    /// unmasked input, so targets never depend on any mask.
    pub fn token_targets(&self, seq: &Sequence) -> Result<(TokenGrid, f64)> {
        let v = self.tokenizer_encoder.forward(&seq.features)?;
        let v_seq = LatentSequence64::from_flat(self.quantizer.dim(), v)
            .map_err(HarnessError::Core)?;
        let out = self.quantizer.quantize(&v_seq).map_err(HarnessError::Core)?;
        Ok((out.token_grid().clone(), out.mean_squared_error()))
    }
}

/// Gathers leading training sequences through the tokenizer encoder until
/// the row count can seed every stage (distinct-point seeding needs at
/// least K rows; one desk sequence is usually shorter), then fits the
/// staged codebooks and fresh EMA statistics.
fn fit_codebooks(
    te: &ToyTokenizerEncoder,
    cfg: &HarnessConfig,
    train: &[Sequence],
    seed: u64,
) -> Result<(ResidualQuantizer64, Vec<EmaState64>)> {
    let max_k = *cfg
        .quantizer
        .stage_sizes
        .iter()
        .max()
        .expect("validated nonempty");
    let target_rows = 2 * max_k;
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for seq in train {
        let v = te.forward(&seq.features)?;
        rows += v.len() / cfg.dim;
        flat.extend_from_slice(&v);
        if rows >= target_rows {
            break;
        }
    }
    let batch = LatentSequence64::from_flat(cfg.dim, flat).map_err(HarnessError::Core)?;
    let quantizer = fit_rq_init(
        &batch,
        &cfg.quantizer,
        cfg.init_method,
        cfg.kmeans_steps,
        seed,
    )
    .map_err(HarnessError::Core)?;
    let ema = quantizer
        .stages()
        .iter()
        .map(|cb| EmaState64::new(cb, cfg.gamma, cfg.epsilon))
        .collect::<resq_core::Result<Vec<_>>>()
        .map_err(HarnessError::Core)?;
    Ok((quantizer, ema))
}

/// First-batch bookkeeping of a tokenizer phase: refit the codebooks, then
/// give every unused code one chance to move onto a live latent. Stages
/// are swept in order, re-quantizing after any reset so later stages see
/// entry residuals consistent with the new earlier codes.
fn refit_and_reset(state: &mut TrainState, cfg: &HarnessConfig, train: &[Sequence], iteration: usize) -> Result<()> {
    let (quantizer, ema) = fit_codebooks(
        &state.tokenizer_encoder,
        cfg,
        train,
        codebook_seed(cfg.seed, iteration),
    )?;
    state.quantizer = quantizer;
    state.ema = ema;

    // Usage is counted on the same rows the fit saw.
    let max_k = *cfg.quantizer.stage_sizes.iter().max().expect("nonempty");
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for seq in train {
        let v = state.tokenizer_encoder.forward(&seq.features)?;
        rows += v.len() / cfg.dim;
        flat.extend_from_slice(&v);
        if rows >= 2 * max_k {
            break;
        }
    }
    let batch = LatentSequence64::from_flat(cfg.dim, flat).map_err(HarnessError::Core)?;
    let sizes = state.quantizer.stage_sizes();
    let mut out = state.quantizer.quantize(&batch).map_err(HarnessError::Core)?;
    for m0 in 0..sizes.len() {
        let stats: Vec<UsageStats<f64>> =
            usage_histogram(out.token_grid(), &sizes).map_err(HarnessError::Core)?;
        let entry = LatentSequence64::from_flat(cfg.dim, out.residual_stage(m0 + 1).to_vec())
            .map_err(HarnessError::Core)?;
        let flags = reset_unused(
            state.quantizer.stage_mut(m0),
            &mut state.ema[m0],
            stats[m0].counts(),
            &entry,
            cfg.reset_threshold,
            reset_seed(cfg.seed, iteration, m0),
        )
        .map_err(HarnessError::Core)?;
        if flags.iter().any(|&f| f) && m0 + 1 < sizes.len() {
            out = state.quantizer.quantize(&batch).map_err(HarnessError::Core)?;
        }
    }
    Ok(())
}

/// Gradient of the quantizer-entry normalization. For unit normalization
/// the per-row Jacobian is (I − uuᵀ)/‖v‖ with u = v/‖v‖; zero-norm rows
/// pass through untouched, matching the forward. In per-stage mode only
/// the entry normalization is differentiated — the re-normalizations deep
/// in the lookup sit behind the straight-through boundary.
pub fn normalization_backward(
    mode: NormalizationMode,
    raw: &[f64],
    d_normalized: &[f64],
    dim: usize,
) -> Vec<f64> {
    match mode {
        NormalizationMode::None => d_normalized.to_vec(),
        NormalizationMode::InputOnly | NormalizationMode::PerStage => {
            let mut out = vec![0.0; d_normalized.len()];
            for t in 0..raw.len() / dim {
                let v = &raw[t * dim..(t + 1) * dim];
                let g = &d_normalized[t * dim..(t + 1) * dim];
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let slot = &mut out[t * dim..(t + 1) * dim];
                if norm == 0.0 {
                    slot.copy_from_slice(g);
                    continue;
                }
                let mut g_dot_u = 0.0;
                for (gi, vi) in g.iter().zip(v.iter()) {
                    g_dot_u += gi * vi / norm;
                }
                for (o, (gi, vi)) in slot.iter_mut().zip(g.iter().zip(v.iter())) {
                    *o = (gi - g_dot_u * vi / norm) / norm;
                }
            }
            out
        }
    }
}

/// Catches parameter explosions where they first become visible — in the
/// produced latents or probabilities — so a diverged run fails as a
/// divergence, not as a shape or validation error further downstream.
fn check_finite(
    values: &[f64],
    what: &str,
    phase: &'static str,
    epoch: usize,
    idx: usize,
) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HarnessError::Diverged {
            phase,
            epoch,
            detail: format!("{what} became non-finite at sequence {idx}"),
        })
    }
}

/// One tokenizer-side batch step: quantize the tokenizer latents, compute
/// the commitment and alignment losses against the frozen encoder's
/// latents, run the EMA codebook update, then apply the scaled gradients.
/// `weight` is 1 in a tokenizer phase and α in joint mode. Returns the
/// unscaled (codebook, alignment) loss pair.
#[allow(clippy::too_many_arguments)]
fn tokenizer_batch_step(
    state: &mut TrainState,
    cfg: &HarnessConfig,
    seq: &Sequence,
    weight: f64,
    lr: f64,
    phase: &'static str,
    epoch: usize,
    idx: usize,
) -> Result<(f64, f64)> {
    let x = &seq.features;
    let dim = cfg.dim;
    let z_teacher = state.encoder.forward(x, None)?.latents;
    check_finite(&z_teacher, "encoder latents", phase, epoch, idx)?;
    let v = state.tokenizer_encoder.forward(x)?;
    check_finite(&v, "tokenizer latents", phase, epoch, idx)?;
    let v_seq = LatentSequence64::from_flat(dim, v.clone()).map_err(HarnessError::Core)?;
    let out = state.quantizer.quantize(&v_seq).map_err(HarnessError::Core)?;

    let entry = out.residual_stage(1).to_vec();
    let entry_seq = LatentSequence64::from_flat(dim, entry).map_err(HarnessError::Core)?;
    let quantized = out.quantized().to_vec();
    let cb = codebook_loss(&entry_seq, &quantized, cfg.beta).map_err(HarnessError::Core)?;
    let passed = straight_through(&entry_seq, &quantized).map_err(HarnessError::Core)?;
    let estimates = state.estimator.forward(&passed)?;
    let est_seq = LatentSequence64::from_flat(dim, estimates).map_err(HarnessError::Core)?;
    let teacher_seq = LatentSequence64::from_flat(dim, z_teacher).map_err(HarnessError::Core)?;
    let cos = cosine_alignment_loss(&est_seq, &teacher_seq).map_err(HarnessError::Core)?;

    // Gradients: the alignment path runs estimator → straight-through →
    // entry normalization; the commitment path joins at the entry latents.
    let du: Vec<f64> = cos
        .d_estimates
        .iter()
        .map(|&g| weight * cfg.lambda_cos * g)
        .collect();
    let (est_grads, d_passed) = state.estimator.backward(&passed, &du)?;
    let d_from_alignment = straight_through_backward(&d_passed);
    let d_entry: Vec<f64> = cb
        .d_latents
        .iter()
        .zip(d_from_alignment.iter())
        .map(|(&c, &a)| weight * c + a)
        .collect();
    let d_v = normalization_backward(cfg.quantizer.normalization, &v, &d_entry, dim);
    let te_grads = state.tokenizer_encoder.backward(x, &d_v)?;

    // EMA update per stage on this quantization, before any parameter
    // moves; stage m learns from its entry residuals and token column.
    let t_len = out.token_grid().positions();
    for m0 in 0..state.quantizer.num_stages() {
        let entry = LatentSequence64::from_flat(dim, out.residual_stage(m0 + 1).to_vec())
            .map_err(HarnessError::Core)?;
        let assigned: Vec<usize> = (0..t_len).map(|t| out.token_grid().get(t, m0)).collect();
        let batch = BatchAssignment64::new(entry, assigned).map_err(HarnessError::Core)?;
        ema_step(&mut state.ema[m0], state.quantizer.stage_mut(m0), &batch)
            .map_err(HarnessError::Core)?;
        state.ema[m0]
            .check_lemma_bounds(false)
            .map_err(HarnessError::Core)?;
    }

    state.estimator.apply(&est_grads, lr);
    state.tokenizer_encoder.apply(&te_grads, lr);
    Ok((cb.loss, cos.loss))
}

/// One encoder-side batch step: token targets from the unmasked input,
/// masked forward through encoder and decoder, masked cross-entropy, SGD
/// on both. Returns the prediction loss.
fn encoder_batch_step(
    state: &mut TrainState,
    cfg: &HarnessConfig,
    seq: &Sequence,
    mask: &[bool],
    phase: &'static str,
    epoch: usize,
    idx: usize,
) -> Result<f64> {
    let (grid, _) = state.token_targets(seq)?;
    let targets = TokenTargets::new(grid, mask.to_vec()).map_err(HarnessError::Core)?;
    let fwd = state.encoder.forward(&seq.features, Some(mask))?;
    check_finite(&fwd.latents, "encoder latents", phase, epoch, idx)?;
    let cells = state.decoder.forward(&fwd.latents)?;
    // Finite latents can still overflow the decoder's logits, in which case
    // the softmax yields NaN cells; classify that as the divergence it is.
    for cell in &cells {
        check_finite(cell, "decoder probabilities", phase, epoch, idx)?;
    }
    let preds = TokenPredictions::new(mask.len(), state.quantizer.num_stages(), cells)
        .map_err(HarnessError::Core)?;
    let ce = masked_cross_entropy(&targets, &preds).map_err(HarnessError::Core)?;
    let (dec_grads, d_latents) = state.decoder.backward(&fwd.latents, &ce.grad_logits)?;
    let enc_grads = state.encoder.backward(&fwd, &d_latents)?;
    state.decoder.apply(&dec_grads, cfg.schedule.encoder_lr);
    state.encoder.apply(&enc_grads, cfg.schedule.encoder_lr);
    Ok(ce.loss)
}

fn guard_finite(loss: f64, phase: &'static str, epoch: usize, idx: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(HarnessError::Diverged {
            phase,
            epoch,
            detail: format!("loss became {loss} at sequence {idx}"),
        })
    }
}

/// Trains the tokenizer side with the encoder and decoder frozen: fresh
/// codebooks are fitted on the first batch (with one unused-code reset
/// sweep), then every batch runs the commitment/alignment step on
/// unmasked inputs. With zero epochs nothing at all is touched.
pub fn train_tokenizer_phase(
    state: &mut TrainState,
    train: &[Sequence],
    cfg: &HarnessConfig,
    iteration: usize,
) -> Result<PhaseRecord> {
    let mut record = PhaseRecord {
        kind: "tokenizer".to_string(),
        iteration,
        epochs: Vec::new(),
    };
    if cfg.schedule.tokenizer_epochs == 0 || train.is_empty() {
        return Ok(record);
    }
    refit_and_reset(state, cfg, train, iteration)?;
    for epoch in 1..=cfg.schedule.tokenizer_epochs {
        let mut cb_sum = 0.0;
        let mut cos_sum = 0.0;
        for (idx, seq) in train.iter().enumerate() {
            let (cb, cos) = tokenizer_batch_step(
                state,
                cfg,
                seq,
                1.0,
                cfg.schedule.tokenizer_lr,
                "tokenizer",
                epoch,
                idx,
            )?;
            guard_finite(
                tokenizer_loss(cb, cos, cfg.lambda_cos),
                "tokenizer",
                epoch,
                idx,
            )?;
            cb_sum += cb;
            cos_sum += cos;
        }
        let n = train.len() as f64;
        record.epochs.push(EpochRecord {
            epoch,
            prediction_loss: None,
            quantization_loss: Some(cb_sum / n),
            alignment_loss: Some(cos_sum / n),
            combined_loss: Some(tokenizer_loss(cb_sum / n, cos_sum / n, cfg.lambda_cos)),
        });
    }
    Ok(record)
}

/// Trains the encoder and decoder with the whole tokenizer side frozen:
/// targets come from the unmasked input, the encoder sees the masked one.
/// With zero epochs every parameter is left bit-identical.
pub fn train_encoder_phase(
    state: &mut TrainState,
    train: &[Sequence],
    cfg: &HarnessConfig,
    iteration: usize,
) -> Result<PhaseRecord> {
    let mut record = PhaseRecord {
        kind: "encoder".to_string(),
        iteration,
        epochs: Vec::new(),
    };
    for epoch in 1..=cfg.schedule.encoder_epochs {
        let mut loss_sum = 0.0;
        for (idx, seq) in train.iter().enumerate() {
            let t_len = seq.fine_labels.len();
            let mask = sample_mask(
                t_len,
                cfg.schedule.mask_ratio,
                train_mask_seed(cfg.seed, iteration, epoch, idx),
            )?;
            let loss = encoder_batch_step(state, cfg, seq, &mask, "encoder", epoch, idx)?;
            guard_finite(loss, "encoder", epoch, idx)?;
            loss_sum += loss;
        }
        record.epochs.push(EpochRecord {
            epoch,
            prediction_loss: Some(loss_sum / train.len() as f64),
            quantization_loss: None,
            alignment_loss: None,
            combined_loss: None,
        });
    }
    Ok(record)
}

/// Held-out snapshot: masked-token accuracy (argmax over each stage's
/// probabilities at masked positions, ties to the lowest index), mean
/// quantization error, and per-stage usage metrics over all evaluation
/// sequences' token grids.
pub fn evaluate(
    state: &TrainState,
    eval: &[Sequence],
    eval_masks: &[Vec<bool>],
    iteration: usize,
) -> Result<EvalRecord> {
    let sizes = state.quantizer.stage_sizes();
    let stages = sizes.len();
    let mut counts: Vec<Vec<f64>> = sizes.iter().map(|&k| vec![0.0; k]).collect();
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut mse_sum = 0.0;
    for (seq, mask) in eval.iter().zip(eval_masks.iter()) {
        let v = state.tokenizer_encoder.forward(&seq.features)?;
        let v_seq = LatentSequence64::from_flat(state.quantizer.dim(), v)
            .map_err(HarnessError::Core)?;
        let out = state.quantizer.quantize(&v_seq).map_err(HarnessError::Core)?;
        mse_sum += out.mean_squared_error();
        let stats: Vec<UsageStats<f64>> =
            usage_histogram(out.token_grid(), &sizes).map_err(HarnessError::Core)?;
        for (acc, st) in counts.iter_mut().zip(stats.iter()) {
            for (a, &c) in acc.iter_mut().zip(st.counts().iter()) {
                *a += c;
            }
        }
        let fwd = state.encoder.forward(&seq.features, Some(mask))?;
        let cells = state.decoder.forward(&fwd.latents)?;
        for (t, &hidden) in mask.iter().enumerate() {
            if !hidden {
                continue;
            }
            for m0 in 0..stages {
                let cell = &cells[t * stages + m0];
                let mut best = 0usize;
                for (i, &p) in cell.iter().enumerate() {
                    if p > cell[best] {
                        best = i;
                    }
                }
                if best == out.token_grid().get(t, m0) {
                    correct += 1;
                }
                scored += 1;
            }
        }
    }
    let stats = counts
        .into_iter()
        .enumerate()
        .map(|(m0, c)| UsageStats::new(m0 + 1, c))
        .collect::<resq_core::Result<Vec<_>>>()
        .map_err(HarnessError::Core)?;
    let metrics =
        MetricsReport::from_stats(&stats, Provenance::PostTraining).map_err(HarnessError::Core)?;
    let chance = sizes.iter().map(|&k| 1.0 / k as f64).sum::<f64>() / stages as f64;
    Ok(EvalRecord {
        iteration,
        masked_token_accuracy: correct as f64 / scored as f64,
        chance_accuracy: chance,
        quantization_mse: mse_sum / eval.len() as f64,
        stages: metrics.stages.iter().map(Into::into).collect(),
    })
}

fn fixed_eval_masks(cfg: &HarnessConfig, eval: &[Sequence]) -> Result<Vec<Vec<bool>>> {
    eval.iter()
        .enumerate()
        .map(|(idx, seq)| {
            sample_mask(
                seq.fine_labels.len(),
                cfg.schedule.mask_ratio,
                eval_mask_seed(cfg.seed, idx),
            )
        })
        .collect()
}

fn finish_report(
    spec: &SyntheticDatasetSpec,
    cfg: &HarnessConfig,
    mode: &str,
    phases: Vec<PhaseRecord>,
    evals: Vec<EvalRecord>,
) -> RunReport {
    let (final_accuracy, final_mse) = evals
        .last()
        .map(|e| (e.masked_token_accuracy, e.quantization_mse))
        .unwrap_or((0.0, f64::INFINITY));
    RunReport {
        seed: cfg.seed,
        mode: mode.to_string(),
        final_accuracy,
        final_quantization_mse: final_mse,
        dataset: spec.clone(),
        quantizer: cfg.quantizer_echo(),
        schedule: cfg.schedule_echo(),
        phases,
        evals,
    }
}

/// The alternating schedule: one encoder phase against the cold-start
/// tokenizer, then per extra iteration a fresh tokenizer retrained against
/// the current encoder followed by another encoder phase. Evaluation runs
/// after every encoder phase on fixed held-out masks.
pub fn interleave(spec: &SyntheticDatasetSpec, cfg: &HarnessConfig) -> Result<RunReport> {
    interleave_with_state(spec, cfg).map(|(report, _)| report)
}

/// As [`interleave`], but also returns the final models, quantizer, and
/// averaging statistics so callers can persist or further drive them.
pub fn interleave_with_state(
    spec: &SyntheticDatasetSpec,
    cfg: &HarnessConfig,
) -> Result<(RunReport, TrainState)> {
    cfg.validate()?;
    if cfg.schedule.joint_mode {
        return Err(HarnessError::InvalidConfig {
            name: "joint_mode",
            reason: "interleave drives alternating phases; use joint_train for joint mode".into(),
        });
    }
    let dataset: Dataset = gen_synthetic(spec)?;
    let (train, eval) = dataset.split();
    let mut state = TrainState::new(cfg, dataset.feature_dim, train, false)?;
    let eval_masks = fixed_eval_masks(cfg, eval)?;

    let mut phases = Vec::new();
    let mut evals = Vec::new();
    phases.push(train_encoder_phase(&mut state, train, cfg, 1)?);
    evals.push(evaluate(&state, eval, &eval_masks, 1)?);
    for iteration in 2..=cfg.schedule.iterations {
        // The tokenizer side restarts from scratch each iteration; only
        // the encoder and decoder carry over.
        state.tokenizer_encoder = ToyTokenizerEncoder::new(
            dataset.feature_dim,
            cfg.dim,
            tokenizer_seed(cfg.seed, iteration),
            false,
        );
        state.estimator = ToyEstimator::new(cfg.dim, estimator_seed(cfg.seed, iteration));
        phases.push(train_tokenizer_phase(&mut state, train, cfg, iteration)?);
        phases.push(train_encoder_phase(&mut state, train, cfg, iteration)?);
        evals.push(evaluate(&state, eval, &eval_masks, iteration)?);
    }
    Ok((finish_report(spec, cfg, "interleaved", phases, evals), state))
}

/// The single-objective driver: every batch updates the encoder and
/// decoder; every `tokenizer_update_every`-th batch additionally runs the
/// α-weighted tokenizer-side step (gradients and EMA) on the same
/// sequence. Cadence 0 never touches the tokenizer side, which reduces
/// the run to encoder-only training against the frozen initial tokenizer.
pub fn joint_train(spec: &SyntheticDatasetSpec, cfg: &HarnessConfig) -> Result<RunReport> {
    joint_train_with_state(spec, cfg).map(|(report, _)| report)
}

/// As [`joint_train`], but also returns the final models, quantizer, and
/// averaging statistics so callers can persist or further drive them.
pub fn joint_train_with_state(
    spec: &SyntheticDatasetSpec,
    cfg: &HarnessConfig,
) -> Result<(RunReport, TrainState)> {
    cfg.validate()?;
    if !cfg.schedule.joint_mode {
        return Err(HarnessError::InvalidConfig {
            name: "joint_mode",
            reason: "joint_train needs joint_mode set; use interleave otherwise".into(),
        });
    }
    let dataset: Dataset = gen_synthetic(spec)?;
    let (train, eval) = dataset.split();
    let mut state = TrainState::new(cfg, dataset.feature_dim, train, true)?;
    let eval_masks = fixed_eval_masks(cfg, eval)?;
    let cadence = cfg.schedule.tokenizer_update_every;

    let mut phases = Vec::new();
    let mut evals = Vec::new();
    let mut step = 0u64;
    for block in 1..=cfg.schedule.iterations {
        let mut record = PhaseRecord {
            kind: "joint".to_string(),
            iteration: block,
            epochs: Vec::new(),
        };
        for epoch in 1..=cfg.schedule.encoder_epochs {
            let mut pred_sum = 0.0;
            let mut cb_sum = 0.0;
            let mut cos_sum = 0.0;
            let mut joint_sum = 0.0;
            let mut tokenizer_steps = 0usize;
            for (idx, seq) in train.iter().enumerate() {
                let t_len = seq.fine_labels.len();
                let mask = sample_mask(
                    t_len,
                    cfg.schedule.mask_ratio,
                    train_mask_seed(cfg.seed, block, epoch, idx),
                )?;
                let ce = encoder_batch_step(&mut state, cfg, seq, &mask, "joint", epoch, idx)?;
                guard_finite(ce, "joint", epoch, idx)?;
                pred_sum += ce;
                step += 1;
                if cadence > 0 && step.is_multiple_of(cadence) {
                    let (cb, cos) = tokenizer_batch_step(
                        &mut state,
                        cfg,
                        seq,
                        cfg.schedule.alpha,
                        cfg.schedule.tokenizer_lr,
                        "joint",
                        epoch,
                        idx,
                    )?;
                    let tok = tokenizer_loss(cb, cos, cfg.lambda_cos);
                    guard_finite(tok, "joint", epoch, idx)?;
                    cb_sum += cb;
                    cos_sum += cos;
                    joint_sum += joint_loss(ce, tok, cfg.schedule.alpha);
                    tokenizer_steps += 1;
                }
            }
            let n = train.len() as f64;
            let k = tokenizer_steps as f64;
            record.epochs.push(EpochRecord {
                epoch: (block - 1) * cfg.schedule.encoder_epochs + epoch,
                prediction_loss: Some(pred_sum / n),
                quantization_loss: (tokenizer_steps > 0).then_some(cb_sum / k),
                alignment_loss: (tokenizer_steps > 0).then_some(cos_sum / k),
                combined_loss: (tokenizer_steps > 0).then_some(joint_sum / k),
            });
        }
        phases.push(record);
        evals.push(evaluate(&state, eval, &eval_masks, block)?);
    }
    Ok((finish_report(spec, cfg, "joint", phases, evals), state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> HarnessConfig {
        HarnessConfig {
            seed: 7,
            dim: 4,
            quantizer: QuantizerSpec::uniform_stages(2, 4, NormalizationMode::InputOnly),
            init_method: InitMethod::KMeans,
            kmeans_steps: 5,
            gamma: 0.99,
            epsilon: 1e-5,
            beta: 0.25,
            lambda_cos: 1.0,
            reset_threshold: 1.0,
            schedule: PhaseSchedule {
                iterations: 2,
                encoder_epochs: 2,
                tokenizer_epochs: 2,
                mask_ratio: 0.5,
                encoder_lr: 0.1,
                tokenizer_lr: 0.05,
                joint_mode: false,
                tokenizer_update_every: 5,
                alpha: 0.5,
            },
        }
    }

    #[test]
    fn config_validation_rejects_out_of_range_constants() {
        let mut cfg = base_config();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.schedule.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.schedule.iterations = 0;
        assert!(cfg.validate().is_err());
        assert!(base_config().validate().is_ok());
    }

    #[test]
    fn normalization_gradient_is_tangent_to_the_unit_sphere() {
        // For e = v/‖v‖ the pulled-back gradient must be orthogonal to v.
        let v = [3.0, 4.0];
        let g = [1.0, -2.0];
        let d = normalization_backward(NormalizationMode::InputOnly, &v, &g, 2);
        let dot: f64 = d.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12, "radial component must vanish, got {dot}");
    }

    #[test]
    fn no_normalization_passes_gradients_through_unchanged() {
        let v = [3.0, 4.0];
        let g = [1.0, -2.0];
        let d = normalization_backward(NormalizationMode::None, &v, &g, 2);
        assert_eq!(d, g);
    }

    #[test]
    fn zero_rows_pass_normalization_gradients_unchanged() {
        let v = [0.0, 0.0];
        let g = [1.0, -2.0];
        let d = normalization_backward(NormalizationMode::InputOnly, &v, &g, 2);
        assert_eq!(d, g);
    }

    #[test]
    fn drivers_enforce_their_mode_flag() {
        let spec = SyntheticDatasetSpec {
            n_samples: 4,
            seq_len: 6,
            feature_dim: 3,
            coarse_centers: 2,
            fine_offsets: 2,
            noise_sigma: 0.05,
            seed: 1,
        };
        let cfg = base_config();
        assert!(joint_train(&spec, &cfg).is_err());
        let mut joint_cfg = base_config();
        joint_cfg.schedule.joint_mode = true;
        assert!(interleave(&spec, &joint_cfg).is_err());
    }
}
