//! Training losses with hand-derived analytic gradients.
//!
//! Every gradient here is checked against central finite differences in the
//! test suite. The quantizer's discrete selection never differentiates; the
//! stop-gradient convention is explicit in each function's contract:
//! the codebook loss routes its first term's gradient to the quantized side
//! and its commitment term's gradient to the latent side, and the
//! straight-through pair copies downstream gradients across the quantization
//! boundary unchanged.

use crate::error::{Error, Result};
use crate::quantizer::{LatentSequence, TokenGrid};
use crate::scalar::{norm, real, Real};

/// Probabilities below this are clamped before the log; clamped cells are
/// counted in [`MaskedCrossEntropy::floored_cells`].
const PROB_FLOOR: f64 = 1e-12;

/// Token labels for a sequence plus the boolean mask of predicted positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTargets {
    grid: TokenGrid,
    mask: Vec<bool>,
}

impl TokenTargets {
    /// `mask[t]` marks positions whose tokens are predicted and scored.
    /// Masking every position reproduces the unmasked all-positions loss with
    /// normalizer T.
    pub fn new(grid: TokenGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.positions() {
            return Err(Error::DimensionMismatch {
                context: "token targets mask",
                expected: grid.positions(),
                actual: mask.len(),
            });
        }
        Ok(Self { grid, mask })
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-position, per-stage probability vectors over each stage's codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPredictions<F> {
    positions: usize,
    stages: usize,
    /// Position-major T×M cells; cell (t, m) has that stage's codebook size.
    cells: Vec<Vec<F>>,
}

impl<F: Real> TokenPredictions<F> {
    /// Validates shape and that every cell is a probability vector: entries
    /// nonnegative, summing to 1 within 1e-9 (widened to a few ulps-per-entry
    /// for narrow scalar types).
    pub fn new(positions: usize, stages: usize, cells: Vec<Vec<F>>) -> Result<Self> {
        if positions == 0 || stages == 0 || cells.len() != positions * stages {
            return Err(Error::DimensionMismatch {
                context: "token predictions",
                expected: positions * stages,
                actual: cells.len(),
            });
        }
        for m in 0..stages {
            let k = cells[m].len();
            for t in 0..positions {
                let cell = &cells[t * stages + m];
                if cell.is_empty() || cell.len() != k {
                    return Err(Error::DimensionMismatch {
                        context: "token predictions cell",
                        expected: k,
                        actual: cell.len(),
                    });
                }
                let mut sum = F::zero();
                for (i, &p) in cell.iter().enumerate() {
                    if !(p >= F::zero() && p.is_finite()) {
                        return Err(Error::InvalidParameter {
                            name: "predictions",
                            reason: format!(
                                "probability at position {t}, stage {m}, code {i} is {p}"
                            ),
                        });
                    }
                    sum = sum + p;
                }
                let tol = real::<F>(1e-9).max(F::epsilon() * real::<F>(8.0 * k as f64));
                if (sum - F::one()).abs() > tol {
                    return Err(Error::InvalidParameter {
                        name: "predictions",
                        reason: format!(
                            "cell at position {t}, stage {m} sums to {sum}, not 1"
                        ),
                    });
                }
            }
        }
        Ok(Self {
            positions,
            stages,
            cells,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn cell(&self, t: usize, m: usize) -> &[F] {
        &self.cells[t * self.stages + m]
    }
}

/// Masked cross-entropy value and its gradient with respect to the
/// pre-softmax logits that produced the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCrossEntropy<F> {
    pub loss: F,
    /// Same ragged T×M shape as the predictions; zero at unmasked positions.
    /// Cell (t, m) holds (ŷ − onehot(y)) / T′ for masked t.
    pub grad_logits: Vec<Vec<F>>,
    /// Number of scored cells whose target probability hit the clamp floor.
    pub floored_cells: usize,
}

/// Mean negative log-probability of the target tokens over masked positions,
/// summed across stages: −(1/T′) Σ_{t masked} Σ_m ln ŷ_{t,m}[y_{t,m}].
///
/// T′ is the number of masked positions; masking everything yields the
/// literal all-positions loss with normalizer T.
pub fn masked_cross_entropy<F: Real>(
    targets: &TokenTargets,
    preds: &TokenPredictions<F>,
) -> Result<MaskedCrossEntropy<F>> {
    if preds.positions() != targets.grid().positions()
        || preds.stages() != targets.grid().stages()
    {
        return Err(Error::DimensionMismatch {
            context: "masked_cross_entropy",
            expected: targets.grid().positions() * targets.grid().stages(),
            actual: preds.positions() * preds.stages(),
        });
    }
    let masked = targets.masked_count();
    if masked == 0 {
        return Err(Error::DegenerateInput {
            context: "masked_cross_entropy",
            reason: "mask selects no positions".into(),
        });
    }
    let t_prime = real::<F>(masked as f64);
    let floor = real::<F>(PROB_FLOOR);

    let mut loss = F::zero();
    let mut floored_cells = 0usize;
    let mut grad: Vec<Vec<F>> = Vec::with_capacity(preds.positions() * preds.stages());
    for t in 0..preds.positions() {
        for m in 0..preds.stages() {
            let cell = preds.cell(t, m);
            if !targets.mask()[t] {
                grad.push(vec![F::zero(); cell.len()]);
                continue;
            }
            let y = targets.grid().get(t, m);
            if y >= cell.len() {
                return Err(Error::IndexOutOfRange {
                    context: "masked_cross_entropy target",
                    index: y,
                    len: cell.len(),
                });
            }
            let mut p = cell[y];
            if p < floor {
                p = floor;
                floored_cells += 1;
            }
            loss = loss - p.ln() / t_prime;
            let mut g: Vec<F> = cell.iter().map(|&pi| pi / t_prime).collect();
            g[y] = g[y] - F::one() / t_prime;
            grad.push(g);
        }
    }
    Ok(MaskedCrossEntropy {
        loss,
        grad_logits: grad,
        floored_cells,
    })
}

/// Codebook loss value and its two one-sided gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookLoss<F> {
    pub loss: F,
    /// Gradient through the commitment term only: (2β/T)(z − q), row-major T×D.
    pub d_latents: Vec<F>,
    /// Gradient through the code-fitting term only: (2/T)(q − z), row-major T×D.
    pub d_quantized: Vec<F>,
}

/// Mean squared code-fitting plus commitment penalty:
/// (1/T) Σ_t (‖z_t − q_t‖² + β‖z_t − q_t‖²).
///
/// The two terms are numerically identical; they differ in where their
/// gradient flows. The first term's gradient goes only to the quantized side
/// (`d_quantized`), the β-scaled commitment term's only to the latent side
/// (`d_latents`) — the other factor is held fixed in each, which is what the
/// returned gradients implement.
pub fn codebook_loss<F: Real>(
    latents: &LatentSequence<F>,
    quantized: &[F],
    beta: F,
) -> Result<CodebookLoss<F>> {
    if quantized.len() != latents.data().len() {
        return Err(Error::DimensionMismatch {
            context: "codebook_loss",
            expected: latents.data().len(),
            actual: quantized.len(),
        });
    }
    for (i, &q) in quantized.iter().enumerate() {
        if !q.is_finite() {
            return Err(Error::NonFinite {
                context: "codebook_loss quantized",
                index: i,
            });
        }
    }
    if !(beta >= F::zero() && beta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "beta",
            reason: format!("commitment weight must be a finite nonnegative real, got {beta}"),
        });
    }
    let t_len = real::<F>(latents.len() as f64);
    let two = real::<F>(2.0);

    let mut sq = F::zero();
    let mut d_latents = vec![F::zero(); quantized.len()];
    let mut d_quantized = vec![F::zero(); quantized.len()];
    for (i, (&z, &q)) in latents.data().iter().zip(quantized.iter()).enumerate() {
        let diff = z - q;
        sq = sq + diff * diff;
        d_latents[i] = two * beta / t_len * diff;
        d_quantized[i] = two / t_len * (q - z);
    }
    Ok(CodebookLoss {
        loss: (sq + beta * sq) / t_len,
        d_latents,
        d_quantized,
    })
}

/// Cosine-alignment loss value and its gradient w.r.t. the estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineAlignment<F> {
    pub loss: F,
    /// Row-major T×D gradient with respect to the estimate rows.
    pub d_estimates: Vec<F>,
}

/// One minus the ratio-of-sums cosine:
/// 1 − (Σ_t u_t·z_t) / (Σ_t ‖u_t‖‖z_t‖), bounded in [0, 2].
///
/// This is the aggregate form (a single ratio over the whole sequence), not a
/// mean of per-position cosines. Zero-norm rows on either side are rejected.
pub fn cosine_alignment_loss<F: Real>(
    estimates: &LatentSequence<F>,
    targets: &LatentSequence<F>,
) -> Result<CosineAlignment<F>> {
    if estimates.len() != targets.len() || estimates.dim() != targets.dim() {
        return Err(Error::DimensionMismatch {
            context: "cosine_alignment_loss",
            expected: targets.data().len(),
            actual: estimates.data().len(),
        });
    }
    let dim = estimates.dim();
    let mut dot_sum = F::zero();
    let mut norm_sum = F::zero();
    let mut est_norms = Vec::with_capacity(estimates.len());
    let mut tgt_norms = Vec::with_capacity(targets.len());
    for (t, (u, z)) in estimates.rows().zip(targets.rows()).enumerate() {
        let nu = norm(u);
        let nz = norm(z);
        if nu == F::zero() || nz == F::zero() {
            return Err(Error::DegenerateInput {
                context: "cosine_alignment_loss",
                reason: format!("row {t} has zero norm; cosine is undefined"),
            });
        }
        let mut dot = F::zero();
        for (&ui, &zi) in u.iter().zip(z.iter()) {
            dot = dot + ui * zi;
        }
        dot_sum = dot_sum + dot;
        norm_sum = norm_sum + nu * nz;
        est_norms.push(nu);
        tgt_norms.push(nz);
    }

    // d/du_t [1 − A/B] = −z_t/B + (A/B²)·‖z_t‖·u_t/‖u_t‖
    let mut d_estimates = vec![F::zero(); estimates.data().len()];
    let a_over_b2 = dot_sum / (norm_sum * norm_sum);
    for (t, (u, z)) in estimates.rows().zip(targets.rows()).enumerate() {
        for d in 0..dim {
            d_estimates[t * dim + d] =
                -z[d] / norm_sum + a_over_b2 * tgt_norms[t] * u[d] / est_norms[t];
        }
    }
    Ok(CosineAlignment {
        loss: F::one() - dot_sum / norm_sum,
        d_estimates,
    })
}

/// Combined tokenizer-side objective: codebook loss plus weighted cosine
/// alignment.
pub fn tokenizer_loss<F: Real>(cb_loss: F, cos_loss: F, lambda_cos: F) -> F {
    cb_loss + lambda_cos * cos_loss
}

/// Combined single-objective loss: encoder loss plus weighted tokenizer loss.
pub fn joint_loss<F: Real>(encoder_loss: F, tokenizer_loss: F, alpha: F) -> F {
    encoder_loss + alpha * tokenizer_loss
}

/// Straight-through forward: downstream consumers see the quantized values.
/// Shapes must match; the latents only fix the shape and the backward
/// contract.
pub fn straight_through<F: Real>(latents: &LatentSequence<F>, quantized: &[F]) -> Result<Vec<F>> {
    if quantized.len() != latents.data().len() {
        return Err(Error::DimensionMismatch {
            context: "straight_through",
            expected: latents.data().len(),
            actual: quantized.len(),
        });
    }
    Ok(quantized.to_vec())
}

/// Straight-through backward: the downstream gradient passes to the latents
/// unchanged (the quantizer is treated as the identity); the quantized side
/// receives nothing here.
pub fn straight_through_backward<F: Real>(d_output: &[F]) -> Vec<F> {
    d_output.to_vec()
}

/// One row of the per-step loss log; assembles the combined objectives from
/// the component losses so the identities hold by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<F> {
    pub encoder_loss: F,
    pub codebook_loss: F,
    pub cosine_loss: F,
    pub tokenizer_loss: F,
    pub joint_loss: F,
    pub beta: F,
    pub lambda_cos: F,
    pub alpha: F,
}

impl<F: Real> LossReport<F> {
    pub fn assemble(
        encoder_loss: F,
        codebook_loss: F,
        cosine_loss: F,
        beta: F,
        lambda_cos: F,
        alpha: F,
    ) -> Self {
        let tok = tokenizer_loss(codebook_loss, cosine_loss, lambda_cos);
        Self {
            encoder_loss,
            codebook_loss,
            cosine_loss,
            tokenizer_loss: tok,
            joint_loss: joint_loss(encoder_loss, tok, alpha),
            beta,
            lambda_cos,
            alpha,
        }
    }
}
