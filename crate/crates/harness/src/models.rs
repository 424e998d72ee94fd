//! Four deliberately small affine models with exact analytic gradients.
//!
//! Sizes are desk-scale, so every backward pass is written out by hand and
//! checked against finite differences in the integration tests. All
//! parameters are public: the training drivers update them through
//! [`apply`](ToyEncoder::apply)-style SGD steps, and the gradient tests
//! perturb them directly.
//!
//! Seeded initialization draws every weight uniformly from [-s, s) with
//! s = 1/√fan_in on a ChaCha8 stream; biases start at zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;
use resq_core::Error;

fn dim_error(context: &'static str, expected: usize, actual: usize) -> crate::HarnessError {
    Error::DimensionMismatch {
        context,
        expected,
        actual,
    }
    .into()
}

fn uniform_params(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn sgd(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, &g) in params.iter_mut().zip(grads.iter()) {
        *p -= lr * g;
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Context-mixing affine encoder. Per position t of a T×F input:
///
///   z_t = W_local · x̃_t + W_ctx · x̄ + b
///
/// where x̃ is the input with masked positions replaced by the learned
/// `mask_vector` and x̄ = (1/T) Σ_t x̃_t. The context term is what lets a
/// masked position be predicted at all: its own frame is hidden, but the
/// sequence mean still carries the shared structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub feature_dim: usize,
    pub dim: usize,
    /// Row-major D×F position-local weights.
    pub w_local: Vec<f64>,
    /// Row-major D×F context (sequence-mean) weights.
    pub w_ctx: Vec<f64>,
    /// Length-D bias.
    pub bias: Vec<f64>,
    /// Length-F learned replacement for masked frames.
    pub mask_vector: Vec<f64>,
}

/// Cached forward activations the encoder backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderForward {
    /// Row-major T×D latents.
    pub latents: Vec<f64>,
    /// Row-major T×F inputs after mask substitution (x̃).
    pub inputs: Vec<f64>,
    /// Length-F sequence mean of the substituted inputs (x̄).
    pub context: Vec<f64>,
    /// Which positions were replaced; all-false when no mask was given.
    pub mask: Vec<bool>,
}

/// Encoder parameter gradients, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub d_w_local: Vec<f64>,
    pub d_w_ctx: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_mask_vector: Vec<f64>,
}

impl ToyEncoder {
    /// Seeded init: draws W_local, then W_ctx, then the mask vector, all
    /// uniform with scale 1/√F; the bias starts at zero.
    pub fn new(feature_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_local = uniform_params(&mut rng, dim * feature_dim, feature_dim);
        let w_ctx = uniform_params(&mut rng, dim * feature_dim, feature_dim);
        let mask_vector = uniform_params(&mut rng, feature_dim, feature_dim);
        Self {
            feature_dim,
            dim,
            w_local,
            w_ctx,
            bias: vec![0.0; dim],
            mask_vector,
        }
    }

    /// Runs the encoder over a row-major T×F sequence. A mask (length T)
    /// replaces the flagged frames with the learned mask vector before
    /// anything else; `None` leaves the input untouched.
    pub fn forward(&self, features: &[f64], mask: Option<&[bool]>) -> Result<EncoderForward> {
        let f = self.feature_dim;
        if f == 0 || !features.len().is_multiple_of(f) || features.is_empty() {
            return Err(dim_error("encoder forward", f, features.len()));
        }
        let t_len = features.len() / f;
        let mask = match mask {
            Some(m) if m.len() != t_len => {
                return Err(dim_error("encoder mask", t_len, m.len()));
            }
            Some(m) => m.to_vec(),
            None => vec![false; t_len],
        };

        let mut inputs = features.to_vec();
        for (t, &hidden) in mask.iter().enumerate() {
            if hidden {
                inputs[t * f..(t + 1) * f].copy_from_slice(&self.mask_vector);
            }
        }
        let mut context = vec![0.0; f];
        for t in 0..t_len {
            for (c, &x) in context.iter_mut().zip(&inputs[t * f..(t + 1) * f]) {
                *c += x;
            }
        }
        for c in context.iter_mut() {
            *c /= t_len as f64;
        }

        let d = self.dim;
        let mut latents = vec![0.0; t_len * d];
        for t in 0..t_len {
            let frame = &inputs[t * f..(t + 1) * f];
            for i in 0..d {
                let mut acc = self.bias[i];
                let local_row = &self.w_local[i * f..(i + 1) * f];
                let ctx_row = &self.w_ctx[i * f..(i + 1) * f];
                for j in 0..f {
                    acc += local_row[j] * frame[j] + ctx_row[j] * context[j];
                }
                latents[t * d + i] = acc;
            }
        }
        Ok(EncoderForward {
            latents,
            inputs,
            context,
            mask,
        })
    }

    /// Exact gradients for a loss L given d_latents = ∂L/∂z (row-major T×D):
    ///
    ///   ∂L/∂W_local = Σ_t dz_t ⊗ x̃_t          ∂L/∂b = Σ_t dz_t
    ///   ∂L/∂W_ctx   = (Σ_t dz_t) ⊗ x̄
    ///   ∂L/∂x̃_s    = W_localᵀ dz_s + (1/T) W_ctxᵀ (Σ_t dz_t)
    ///
    /// and the mask vector collects ∂L/∂x̃_s over the masked positions only
    /// (unmasked frames are data, not parameters).
    pub fn backward(&self, fwd: &EncoderForward, d_latents: &[f64]) -> Result<EncoderGrads> {
        let (f, d) = (self.feature_dim, self.dim);
        if d_latents.len() != fwd.latents.len() {
            return Err(dim_error(
                "encoder backward",
                fwd.latents.len(),
                d_latents.len(),
            ));
        }
        let t_len = fwd.mask.len();

        let mut dz_sum = vec![0.0; d];
        for t in 0..t_len {
            for (acc, &g) in dz_sum.iter_mut().zip(&d_latents[t * d..(t + 1) * d]) {
                *acc += g;
            }
        }

        let mut d_w_local = vec![0.0; d * f];
        for t in 0..t_len {
            let dz = &d_latents[t * d..(t + 1) * d];
            let frame = &fwd.inputs[t * f..(t + 1) * f];
            for i in 0..d {
                for j in 0..f {
                    d_w_local[i * f + j] += dz[i] * frame[j];
                }
            }
        }
        let mut d_w_ctx = vec![0.0; d * f];
        for i in 0..d {
            for j in 0..f {
                d_w_ctx[i * f + j] = dz_sum[i] * fwd.context[j];
            }
        }

        // Context-path input gradient, shared by every position.
        let mut ctx_part = vec![0.0; f];
        for (row, &gz) in self.w_ctx.chunks_exact(f).zip(&dz_sum) {
            for (acc, &w) in ctx_part.iter_mut().zip(row) {
                *acc += w * gz / t_len as f64;
            }
        }
        let mut d_mask_vector = vec![0.0; f];
        for (t, &hidden) in fwd.mask.iter().enumerate() {
            if !hidden {
                continue;
            }
            let dz = &d_latents[t * d..(t + 1) * d];
            for j in 0..f {
                let mut local_part = 0.0;
                for (&w, &gz) in self.w_local[j..].iter().step_by(f).zip(dz) {
                    local_part += w * gz;
                }
                d_mask_vector[j] += local_part + ctx_part[j];
            }
        }

        Ok(EncoderGrads {
            d_w_local,
            d_w_ctx,
            d_bias: dz_sum,
            d_mask_vector,
        })
    }

    /// Plain SGD step: p ← p − lr·g on every parameter group.
    pub fn apply(&mut self, grads: &EncoderGrads, lr: f64) {
        sgd(&mut self.w_local, &grads.d_w_local, lr);
        sgd(&mut self.w_ctx, &grads.d_w_ctx, lr);
        sgd(&mut self.bias, &grads.d_bias, lr);
        sgd(&mut self.mask_vector, &grads.d_mask_vector, lr);
    }

    /// All parameters as little-endian bytes, for exact freeze checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        push_f64s(&mut out, &self.w_local);
        push_f64s(&mut out, &self.w_ctx);
        push_f64s(&mut out, &self.bias);
        push_f64s(&mut out, &self.mask_vector);
        out
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// One per-stage prediction head: K_m×D weights plus a K_m bias, followed
/// by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub k: usize,
    /// Row-major K×D weights.
    pub w: Vec<f64>,
    /// Length-K bias.
    pub b: Vec<f64>,
}

/// Per-stage softmax heads over shared latents: head m scores every code
/// of stage m independently of the other stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub dim: usize,
    pub heads: Vec<DecoderHead>,
}

/// Decoder head gradients, one entry per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub d_w: Vec<Vec<f64>>,
    pub d_b: Vec<Vec<f64>>,
}

impl ToyDecoder {
    /// Seeded init: heads are drawn in stage order, weights before bias is
    /// skipped (biases start at zero), scale 1/√D.
    pub fn new(dim: usize, stage_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = stage_sizes
            .iter()
            .map(|&k| DecoderHead {
                k,
                w: uniform_params(&mut rng, k * dim, dim),
                b: vec![0.0; k],
            })
            .collect();
        Self { dim, heads }
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.k).collect()
    }

    /// Softmax probabilities per position and stage, position-major: cell
    /// (t, m) sits at index t·M + m and has length K_m. This is exactly the
    /// cell layout the cross-entropy loss consumes.
    pub fn forward(&self, latents: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.dim;
        if d == 0 || !latents.len().is_multiple_of(d) || latents.is_empty() {
            return Err(dim_error("decoder forward", d, latents.len()));
        }
        let t_len = latents.len() / d;
        let mut cells = Vec::with_capacity(t_len * self.heads.len());
        for t in 0..t_len {
            let z = &latents[t * d..(t + 1) * d];
            for head in &self.heads {
                let mut logits = vec![0.0; head.k];
                for (i, logit) in logits.iter_mut().enumerate() {
                    let mut acc = head.b[i];
                    for (j, &zj) in z.iter().enumerate() {
                        acc += head.w[i * d + j] * zj;
                    }
                    *logit = acc;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for logit in logits.iter_mut() {
                    *logit = (*logit - max).exp();
                    sum += *logit;
                }
                for p in logits.iter_mut() {
                    *p /= sum;
                }
                cells.push(logits);
            }
        }
        Ok(cells)
    }

    /// Backward from per-cell logit gradients (position-major, as produced
    /// by the cross-entropy): head grads plus the latent gradient
    /// dz_t = Σ_m W_mᵀ g_{t,m}.
    pub fn backward(
        &self,
        latents: &[f64],
        grad_logits: &[Vec<f64>],
    ) -> Result<(DecoderGrads, Vec<f64>)> {
        let d = self.dim;
        let m_stages = self.heads.len();
        let t_len = latents.len() / d;
        if grad_logits.len() != t_len * m_stages {
            return Err(dim_error(
                "decoder backward",
                t_len * m_stages,
                grad_logits.len(),
            ));
        }
        let mut d_w: Vec<Vec<f64>> = self.heads.iter().map(|h| vec![0.0; h.k * d]).collect();
        let mut d_b: Vec<Vec<f64>> = self.heads.iter().map(|h| vec![0.0; h.k]).collect();
        let mut d_latents = vec![0.0; latents.len()];
        for t in 0..t_len {
            let z = &latents[t * d..(t + 1) * d];
            for (m, head) in self.heads.iter().enumerate() {
                let g = &grad_logits[t * m_stages + m];
                if g.len() != head.k {
                    return Err(dim_error("decoder grad cell", head.k, g.len()));
                }
                for (i, &gi) in g.iter().enumerate() {
                    d_b[m][i] += gi;
                    for (j, &zj) in z.iter().enumerate() {
                        d_w[m][i * d + j] += gi * zj;
                        d_latents[t * d + j] += head.w[i * d + j] * gi;
                    }
                }
            }
        }
        Ok((DecoderGrads { d_w, d_b }, d_latents))
    }

    pub fn apply(&mut self, grads: &DecoderGrads, lr: f64) {
        for (head, (dw, db)) in self
            .heads
            .iter_mut()
            .zip(grads.d_w.iter().zip(grads.d_b.iter()))
        {
            sgd(&mut head.w, dw, lr);
            sgd(&mut head.b, db, lr);
        }
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for head in &self.heads {
            push_f64s(&mut out, &head.w);
            push_f64s(&mut out, &head.b);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tokenizer encoder
// ---------------------------------------------------------------------------

/// Per-frame affine map F→D producing the latents the quantizer discretizes:
/// v_t = P·x_t + c. With `cold_start` set the parameters are frozen at their
/// seeded random draw — [`apply`](Self::apply) becomes a no-op — which is how
/// the first interleaved iteration runs before any tokenizer phase exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTokenizerEncoder {
    pub feature_dim: usize,
    pub dim: usize,
    /// Row-major D×F weights.
    pub w: Vec<f64>,
    /// Length-D bias.
    pub b: Vec<f64>,
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerEncoderGrads {
    pub d_w: Vec<f64>,
    pub d_b: Vec<f64>,
}

impl ToyTokenizerEncoder {
    pub fn new(feature_dim: usize, dim: usize, seed: u64, cold_start: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            feature_dim,
            dim,
            w: uniform_params(&mut rng, dim * feature_dim, feature_dim),
            b: vec![0.0; dim],
            cold_start,
        }
    }

    /// Maps a row-major T×F sequence to T×D latents.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let f = self.feature_dim;
        if f == 0 || !features.len().is_multiple_of(f) || features.is_empty() {
            return Err(dim_error("tokenizer encoder forward", f, features.len()));
        }
        let t_len = features.len() / f;
        let d = self.dim;
        let mut latents = vec![0.0; t_len * d];
        for t in 0..t_len {
            let frame = &features[t * f..(t + 1) * f];
            for i in 0..d {
                let mut acc = self.b[i];
                for (j, &x) in frame.iter().enumerate() {
                    acc += self.w[i * f + j] * x;
                }
                latents[t * d + i] = acc;
            }
        }
        Ok(latents)
    }

    /// dP = Σ_t dv_t ⊗ x_t, dc = Σ_t dv_t.
    pub fn backward(&self, features: &[f64], d_latents: &[f64]) -> Result<TokenizerEncoderGrads> {
        let (f, d) = (self.feature_dim, self.dim);
        let t_len = features.len() / f;
        if d_latents.len() != t_len * d {
            return Err(dim_error(
                "tokenizer encoder backward",
                t_len * d,
                d_latents.len(),
            ));
        }
        let mut d_w = vec![0.0; d * f];
        let mut d_b = vec![0.0; d];
        for t in 0..t_len {
            let frame = &features[t * f..(t + 1) * f];
            let dv = &d_latents[t * d..(t + 1) * d];
            for i in 0..d {
                d_b[i] += dv[i];
                for (j, &x) in frame.iter().enumerate() {
                    d_w[i * f + j] += dv[i] * x;
                }
            }
        }
        Ok(TokenizerEncoderGrads { d_w, d_b })
    }

    /// SGD step, unless the model is cold-start frozen.
    pub fn apply(&mut self, grads: &TokenizerEncoderGrads, lr: f64) {
        if self.cold_start {
            return;
        }
        sgd(&mut self.w, &grads.d_w, lr);
        sgd(&mut self.b, &grads.d_b, lr);
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        push_f64s(&mut out, &self.w);
        push_f64s(&mut out, &self.b);
        out
    }
}

// ---------------------------------------------------------------------------
// Estimator
// ---------------------------------------------------------------------------

/// Affine D→D head that predicts encoder latents from summed quantized
/// codes: u_t = A·q_t + b. Trained with the alignment loss on the tokenizer
/// side.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEstimator {
    pub dim: usize,
    /// Row-major D×D weights.
    pub a: Vec<f64>,
    /// Length-D bias.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGrads {
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
}

impl ToyEstimator {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            a: uniform_params(&mut rng, dim * dim, dim),
            b: vec![0.0; dim],
        }
    }

    pub fn forward(&self, quantized: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if d == 0 || !quantized.len().is_multiple_of(d) || quantized.is_empty() {
            return Err(dim_error("estimator forward", d, quantized.len()));
        }
        let t_len = quantized.len() / d;
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let q = &quantized[t * d..(t + 1) * d];
            for i in 0..d {
                let mut acc = self.b[i];
                for (j, &qj) in q.iter().enumerate() {
                    acc += self.a[i * d + j] * qj;
                }
                out[t * d + i] = acc;
            }
        }
        Ok(out)
    }

    /// dA = Σ_t du_t ⊗ q_t, db = Σ_t du_t, and the input gradient
    /// dq_t = Aᵀ du_t that continues toward the quantizer.
    pub fn backward(
        &self,
        quantized: &[f64],
        d_out: &[f64],
    ) -> Result<(EstimatorGrads, Vec<f64>)> {
        let d = self.dim;
        if d_out.len() != quantized.len() {
            return Err(dim_error("estimator backward", quantized.len(), d_out.len()));
        }
        let t_len = quantized.len() / d;
        let mut d_a = vec![0.0; d * d];
        let mut d_b = vec![0.0; d];
        let mut d_in = vec![0.0; quantized.len()];
        for t in 0..t_len {
            let q = &quantized[t * d..(t + 1) * d];
            let du = &d_out[t * d..(t + 1) * d];
            for i in 0..d {
                d_b[i] += du[i];
                for j in 0..d {
                    d_a[i * d + j] += du[i] * q[j];
                    d_in[t * d + j] += self.a[i * d + j] * du[i];
                }
            }
        }
        Ok((EstimatorGrads { d_a, d_b }, d_in))
    }

    pub fn apply(&mut self, grads: &EstimatorGrads, lr: f64) {
        sgd(&mut self.a, &grads.d_a, lr);
        sgd(&mut self.b, &grads.d_b, lr);
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        push_f64s(&mut out, &self.a);
        push_f64s(&mut out, &self.b);
        out
    }
}
