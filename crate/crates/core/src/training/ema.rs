//! Exponential-moving-average codebook updates.
//!
//! Codes are not trained by gradient descent: per batch, each code's assignment
//! count and assigned-vector sum decay into running statistics, and the code is
//! re-estimated as a smoothed cluster mean. Two algebraically different update
//! forms are provided:
//!
//! * [`ema_step`] — the operational form: raw counts decay untouched and a
//!   Laplace-smoothed copy is used only in the code update.
//! * [`ema_step_proof_form`] — the analysis form: the smoothing constant is
//!   folded into the stored count recurrence itself, which makes the update a
//!   contraction with the closed-form fixed point of [`closed_form_limit`].
//!
//! The two forms produce different count sequences by design; no equivalence is
//! claimed or asserted. Both track the analytic bounds on their running sums
//! (initial code norm plus accumulated per-slot suprema of batch-vector norms)
//! and counts (max batch size, plus the ε/(1−γ) inflation for the proof form),
//! so divergence is detectable as a hard bound violation.

use crate::error::{Error, Result};
use crate::quantizer::{Codebook, LatentSequence};
use crate::scalar::{norm, real, Real};

/// One batch of latents with their selected code index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment<F> {
    latents: LatentSequence<F>,
    assigned: Vec<usize>,
}

impl<F: Real> BatchAssignment<F> {
    pub fn new(latents: LatentSequence<F>, assigned: Vec<usize>) -> Result<Self> {
        if assigned.len() != latents.len() {
            return Err(Error::DimensionMismatch {
                context: "batch assignment",
                expected: latents.len(),
                actual: assigned.len(),
            });
        }
        Ok(Self { latents, assigned })
    }

    pub fn latents(&self) -> &LatentSequence<F> {
        &self.latents
    }

    pub fn assigned(&self) -> &[usize] {
        &self.assigned
    }

    /// Batch size S.
    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }
}

/// Decayed assignment statistics for one codebook.
///
/// `counts` starts at zero and `running` at the initial codes, so the very
/// first update already moves every assigned code onto (a smoothed version of)
/// its batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<F> {
    gamma: F,
    epsilon: F,
    dim: usize,
    /// Decayed assignment counts N, one per code.
    counts: Vec<F>,
    /// Decayed assigned-vector sums m, row-major K×D.
    running: Vec<F>,
    /// Completed update steps.
    step: u64,
    /// ‖c_{i,0}‖ per code; refreshed when a code is reset.
    initial_code_norms: Vec<F>,
    /// Per batch-slot suprema of ‖z_j‖ observed so far; grows with batch size.
    sample_norm_sups: Vec<F>,
    /// Largest batch size observed so far.
    max_batch: usize,
}

impl<F: Real> EmaState<F> {
    /// Fresh statistics for `cb`: zero counts, running sums seeded with the
    /// current codes. `gamma` must lie in [0, 1) (0 is the memoryless limit),
    /// `epsilon` must be positive.
    pub fn new(cb: &Codebook<F>, gamma: F, epsilon: F) -> Result<Self> {
        if !(gamma >= F::zero() && gamma < F::one()) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                reason: format!("decay must lie in [0, 1), got {gamma}"),
            });
        }
        if !(epsilon > F::zero() && epsilon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("smoothing constant must be positive, got {epsilon}"),
            });
        }
        let k = cb.len();
        Ok(Self {
            gamma,
            epsilon,
            dim: cb.dim(),
            counts: vec![F::zero(); k],
            running: cb.codes().to_vec(),
            step: 0,
            initial_code_norms: (0..k).map(|i| norm(cb.code(i))).collect(),
            sample_norm_sups: Vec::new(),
            max_batch: 0,
        })
    }

    /// Rebuilds statistics previously captured through the accessors, so a
    /// persisted training run resumes bit-exactly. `counts` has one entry per
    /// code, `running` is the matching K×D row-major matrix, and
    /// `initial_code_norms` one anchor per code; counts, norms, and suprema
    /// must be finite and nonnegative. The largest observed batch size is
    /// recovered from the length of `sample_norm_sups`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        gamma: F,
        epsilon: F,
        dim: usize,
        counts: Vec<F>,
        running: Vec<F>,
        step: u64,
        initial_code_norms: Vec<F>,
        sample_norm_sups: Vec<F>,
    ) -> Result<Self> {
        if !(gamma >= F::zero() && gamma < F::one()) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                reason: format!("decay must lie in [0, 1), got {gamma}"),
            });
        }
        if !(epsilon > F::zero() && epsilon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("smoothing constant must be positive, got {epsilon}"),
            });
        }
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "code dimension must be positive".into(),
            });
        }
        let k = counts.len();
        if running.len() != k * dim {
            return Err(Error::DimensionMismatch {
                context: "ema from_parts running",
                expected: k * dim,
                actual: running.len(),
            });
        }
        if initial_code_norms.len() != k {
            return Err(Error::DimensionMismatch {
                context: "ema from_parts norms",
                expected: k,
                actual: initial_code_norms.len(),
            });
        }
        for (name, values, signed) in [
            ("counts", &counts, false),
            ("running", &running, true),
            ("initial_code_norms", &initial_code_norms, false),
            ("sample_norm_sups", &sample_norm_sups, false),
        ] {
            for (i, &v) in values.iter().enumerate() {
                if !v.is_finite() || (!signed && v < F::zero()) {
                    return Err(Error::InvalidParameter {
                        name,
                        reason: format!("entry {i} must be a finite real in range, got {v}"),
                    });
                }
            }
        }
        let max_batch = sample_norm_sups.len();
        Ok(Self {
            gamma,
            epsilon,
            dim,
            counts,
            running,
            step,
            initial_code_norms,
            sample_norm_sups,
            max_batch,
        })
    }

    pub fn gamma(&self) -> F {
        self.gamma
    }

    pub fn epsilon(&self) -> F {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of codes K.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[F] {
        &self.counts
    }

    /// Running sum m_i for code `i`.
    pub fn running(&self, i: usize) -> &[F] {
        &self.running[i * self.dim..(i + 1) * self.dim]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    /// ‖c_{i,0}‖ anchors of the running-sum norm bound, one per code;
    /// refreshed whenever a code is reset.
    pub fn initial_code_norms(&self) -> &[F] {
        &self.initial_code_norms
    }

    /// Per batch-slot suprema of ‖z_j‖ observed so far. The vector grows
    /// exactly to the largest batch size seen, so its length always equals
    /// [`max_batch`](Self::max_batch).
    pub fn sample_norm_sups(&self) -> &[F] {
        &self.sample_norm_sups
    }

    /// Re-zeroes one code's statistics after the code was replaced: count to
    /// zero, running sum to the new code, norm bound re-anchored on it.
    pub fn reset_code(&mut self, i: usize, code: &[F]) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                context: "ema reset_code",
                index: i,
                len: self.len(),
            });
        }
        if code.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "ema reset_code",
                expected: self.dim,
                actual: code.len(),
            });
        }
        self.counts[i] = F::zero();
        self.running[i * self.dim..(i + 1) * self.dim].copy_from_slice(code);
        self.initial_code_norms[i] = norm(code);
        Ok(())
    }

    /// Upper bound on every count under the given update form.
    pub fn count_bound(&self, proof_form: bool) -> F {
        let s = real::<F>(self.max_batch as f64);
        if proof_form {
            s + self.epsilon / (F::one() - self.gamma)
        } else {
            s
        }
    }

    /// Upper bound on ‖m_i‖: initial code norm plus the summed per-slot
    /// suprema of batch-vector norms.
    pub fn running_norm_bound(&self, i: usize) -> F {
        let sup_sum = self.sample_norm_sups.iter().fold(F::zero(), |a, &b| a + b);
        self.initial_code_norms[i] + sup_sum
    }

    /// Asserts the analytic bounds on counts and running-sum norms, with a
    /// small floating-point headroom. A violation means the update recursion
    /// has numerically diverged.
    pub fn check_lemma_bounds(&self, proof_form: bool) -> Result<()> {
        let slack = |bound: F| real::<F>(64.0) * F::epsilon() * (F::one() + bound);
        let count_bound = self.count_bound(proof_form);
        for (i, &n) in self.counts.iter().enumerate() {
            if n > count_bound + slack(count_bound) {
                return Err(Error::BoundViolation {
                    step: self.step,
                    detail: format!("count {n} of code {i} exceeds bound {count_bound}"),
                });
            }
        }
        for i in 0..self.len() {
            let bound = self.running_norm_bound(i);
            let m_norm = norm(self.running(i));
            if m_norm > bound + slack(bound) {
                return Err(Error::BoundViolation {
                    step: self.step,
                    detail: format!("running-sum norm {m_norm} of code {i} exceeds bound {bound}"),
                });
            }
        }
        Ok(())
    }

    /// Batch statistics (counts n, sums ℓ) plus bound-tracking updates shared
    /// by both step forms.
    fn batch_stats(&mut self, cb: &Codebook<F>, batch: &BatchAssignment<F>) -> Result<(Vec<F>, Vec<F>)> {
        if cb.len() != self.len() || cb.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "ema step codebook",
                expected: self.len(),
                actual: cb.len(),
            });
        }
        if batch.latents().dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "ema step batch",
                expected: self.dim,
                actual: batch.latents().dim(),
            });
        }
        let k = self.len();
        let mut n = vec![F::zero(); k];
        let mut l = vec![F::zero(); k * self.dim];
        for (j, (&q, z)) in batch
            .assigned()
            .iter()
            .zip(batch.latents().rows())
            .enumerate()
        {
            if q >= k {
                return Err(Error::IndexOutOfRange {
                    context: "ema step assignment",
                    index: q,
                    len: k,
                });
            }
            n[q] = n[q] + F::one();
            for (acc, &zi) in l[q * self.dim..(q + 1) * self.dim].iter_mut().zip(z.iter()) {
                *acc = *acc + zi;
            }
            let z_norm = norm(z);
            if j < self.sample_norm_sups.len() {
                if z_norm > self.sample_norm_sups[j] {
                    self.sample_norm_sups[j] = z_norm;
                }
            } else {
                self.sample_norm_sups.push(z_norm);
            }
        }
        self.max_batch = self.max_batch.max(batch.len());
        Ok((n, l))
    }

    fn decay_running(&mut self, l: &[F]) {
        let g = self.gamma;
        let one_minus = F::one() - g;
        for (m, &li) in self.running.iter_mut().zip(l.iter()) {
            *m = g * *m + one_minus * li;
        }
    }
}

/// Laplace-smooths nonnegative counts: N̂_i = (N_i + ε) · ΣN / (ΣN + Kε).
///
/// The smoothing preserves the total (Σ N̂ = Σ N) while bounding every entry
/// away from zero — except in the degenerate all-zero case, where the result
/// is all zeros and the returned flag is set.
pub fn laplace_smooth<F: Real>(counts: &[F], epsilon: F) -> Result<(Vec<F>, bool)> {
    if !(epsilon > F::zero() && epsilon.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("smoothing constant must be positive, got {epsilon}"),
        });
    }
    for (i, &c) in counts.iter().enumerate() {
        if !(c >= F::zero() && c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "counts",
                reason: format!("count {i} must be a finite nonnegative real, got {c}"),
            });
        }
    }
    let total: F = counts.iter().fold(F::zero(), |a, &b| a + b);
    if total == F::zero() {
        return Ok((vec![F::zero(); counts.len()], true));
    }
    let k = real::<F>(counts.len() as f64);
    let scale = total / (total + k * epsilon);
    Ok((counts.iter().map(|&c| (c + epsilon) * scale).collect(), false))
}

/// One operational EMA update: decay counts and running sums with the batch
/// statistics, then re-estimate every code as m_i / N̂_i with Laplace-smoothed
/// counts. Requires a total assignment mass > 0 (fresh state + empty batch is
/// degenerate).
pub fn ema_step<F: Real>(
    state: &mut EmaState<F>,
    cb: &mut Codebook<F>,
    batch: &BatchAssignment<F>,
) -> Result<()> {
    let (n, l) = state.batch_stats(cb, batch)?;
    let g = state.gamma;
    let one_minus = F::one() - g;
    for (big_n, &ni) in state.counts.iter_mut().zip(n.iter()) {
        *big_n = g * *big_n + one_minus * ni;
    }
    let (smoothed, degenerate) = laplace_smooth(&state.counts, state.epsilon)?;
    if degenerate {
        return Err(Error::DegenerateInput {
            context: "ema_step",
            reason: "total assignment mass is zero; codes would be undefined".into(),
        });
    }
    state.decay_running(&l);
    for (i, &denom) in smoothed.iter().enumerate() {
        let code: Vec<F> = state.running(i).iter().map(|&m| m / denom).collect();
        cb.set_code(i, &code)?;
    }
    state.step += 1;
    Ok(())
}

/// One analysis-form EMA update: the smoothing constant is added into the
/// stored count recurrence (N ← γN + (1−γ)n + ε) and the code update carries
/// the matching total-mass correction factor.
pub fn ema_step_proof_form<F: Real>(
    state: &mut EmaState<F>,
    cb: &mut Codebook<F>,
    batch: &BatchAssignment<F>,
) -> Result<()> {
    let (n, l) = state.batch_stats(cb, batch)?;
    let g = state.gamma;
    let one_minus = F::one() - g;
    let eps = state.epsilon;
    let k = real::<F>(state.len() as f64);

    // s_i = γN_i + (1−γ)n_i is the pre-smoothing decayed count.
    let s: Vec<F> = state
        .counts
        .iter()
        .zip(n.iter())
        .map(|(&big_n, &ni)| g * big_n + one_minus * ni)
        .collect();
    let s_total: F = s.iter().fold(F::zero(), |a, &b| a + b);
    if s_total == F::zero() {
        return Err(Error::DegenerateInput {
            context: "ema_step_proof_form",
            reason: "total decayed assignment mass is zero".into(),
        });
    }
    let ratio = (s_total + k * eps) / s_total;
    for (big_n, &si) in state.counts.iter_mut().zip(s.iter()) {
        *big_n = si + eps;
    }
    state.decay_running(&l);
    for (i, &si) in s.iter().enumerate() {
        let denom = si + eps;
        let code: Vec<F> = state
            .running(i)
            .iter()
            .map(|&m| m / denom * ratio)
            .collect();
        cb.set_code(i, &code)?;
    }
    state.step += 1;
    Ok(())
}

/// Fixed point of the proof-form recursion under a constant batch stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormLimit<F> {
    dim: usize,
    /// Constant per-code assignment counts n_∞ fed to the recursion.
    pub n_inf: Vec<F>,
    /// Constant per-code assigned sums ℓ_∞, row-major K×D. The running sums
    /// converge to exactly these.
    pub l_inf: Vec<F>,
    /// Limiting counts N_∞ = n_∞ + ε/(1−γ).
    pub count_limit: Vec<F>,
    /// Limiting codes, row-major K×D.
    pub code_limit: Vec<F>,
}

impl<F: Real> ClosedFormLimit<F> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code_limit_row(&self, i: usize) -> &[F] {
        &self.code_limit[i * self.dim..(i + 1) * self.dim]
    }
}

/// Evaluates the closed-form limit of the proof-form recursion for a constant
/// batch stream with per-code counts `n_inf` and assigned sums `l_inf`:
///
///   N_∞ = n_∞ + ε/(1−γ)
///   c_∞ = ℓ_∞ / (n_∞ + γε/(1−γ) + ε) · Σ(n + γε/(1−γ) + ε) / Σ(n + γε/(1−γ))
///
/// `epsilon = 0` is allowed as the smoothing-free limit but then requires every
/// count positive (the quotient is otherwise undefined).
pub fn closed_form_limit<F: Real>(
    n_inf: &[F],
    l_inf: &[F],
    dim: usize,
    gamma: F,
    epsilon: F,
) -> Result<ClosedFormLimit<F>> {
    if !(gamma >= F::zero() && gamma < F::one()) {
        return Err(Error::InvalidParameter {
            name: "gamma",
            reason: format!("decay must lie in [0, 1), got {gamma}"),
        });
    }
    if !(epsilon >= F::zero() && epsilon.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("smoothing constant must be nonnegative, got {epsilon}"),
        });
    }
    if dim == 0 || n_inf.is_empty() || l_inf.len() != n_inf.len() * dim {
        return Err(Error::DimensionMismatch {
            context: "closed_form_limit",
            expected: n_inf.len() * dim,
            actual: l_inf.len(),
        });
    }
    for (i, &ni) in n_inf.iter().enumerate() {
        if !(ni >= F::zero() && ni.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "n_inf",
                reason: format!("count {i} must be a finite nonnegative real, got {ni}"),
            });
        }
        if epsilon == F::zero() && ni == F::zero() {
            return Err(Error::DegenerateInput {
                context: "closed_form_limit",
                reason: format!("code {i} has zero count and ε = 0; its limit is undefined"),
            });
        }
    }
    for (i, &li) in l_inf.iter().enumerate() {
        if !li.is_finite() {
            return Err(Error::NonFinite {
                context: "closed_form_limit l_inf",
                index: i,
            });
        }
    }

    let inflation = gamma * epsilon / (F::one() - gamma);
    let denoms: Vec<F> = n_inf.iter().map(|&ni| ni + inflation + epsilon).collect();
    let s1: F = denoms.iter().fold(F::zero(), |a, &b| a + b);
    let s0: F = n_inf.iter().fold(F::zero(), |a, &ni| a + ni + inflation);
    if s0 == F::zero() {
        return Err(Error::DegenerateInput {
            context: "closed_form_limit",
            reason: "total limiting assignment mass is zero".into(),
        });
    }
    let ratio = s1 / s0;

    let count_limit: Vec<F> = n_inf
        .iter()
        .map(|&ni| ni + epsilon / (F::one() - gamma))
        .collect();
    let mut code_limit = vec![F::zero(); l_inf.len()];
    for i in 0..n_inf.len() {
        for d in 0..dim {
            code_limit[i * dim + d] = l_inf[i * dim + d] / denoms[i] * ratio;
        }
    }
    Ok(ClosedFormLimit {
        dim,
        n_inf: n_inf.to_vec(),
        l_inf: l_inf.to_vec(),
        count_limit,
        code_limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_codebook() -> Codebook<f64> {
        Codebook::from_rows(1, &[vec![0.0, 0.0]]).unwrap()
    }

    fn batch(rows: &[Vec<f64>], assigned: &[usize]) -> BatchAssignment<f64> {
        BatchAssignment::new(LatentSequence::from_rows(rows).unwrap(), assigned.to_vec()).unwrap()
    }

    #[test]
    fn state_starts_at_zero_counts_and_code_valued_running_sums() {
        let cb = Codebook::from_rows(1, &[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let state = EmaState::new(&cb, 0.99, 1e-5).unwrap();
        assert_eq!(state.counts(), &[0.0, 0.0]);
        assert_eq!(state.running(0), &[1.0, 2.0]);
        assert_eq!(state.running(1), &[-1.0, 0.5]);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn from_parts_inverts_the_accessors_after_real_updates() {
        let mut cb = Codebook::from_rows(1, &[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let mut state = EmaState::new(&cb, 0.9, 1e-4).unwrap();
        ema_step(
            &mut state,
            &mut cb,
            &batch(&[vec![0.5, 0.25], vec![-2.0, 1.0], vec![3.0, 0.0]], &[0, 1, 0]),
        )
        .unwrap();
        ema_step(&mut state, &mut cb, &batch(&[vec![1.0, -1.0]], &[1])).unwrap();

        let running: Vec<f64> = (0..state.len()).flat_map(|i| state.running(i).to_vec()).collect();
        let rebuilt = EmaState::from_parts(
            state.gamma(),
            state.epsilon(),
            state.dim(),
            state.counts().to_vec(),
            running,
            state.step(),
            state.initial_code_norms().to_vec(),
            state.sample_norm_sups().to_vec(),
        )
        .unwrap();
        assert_eq!(rebuilt, state);
        assert_eq!(rebuilt.max_batch(), 3);
    }

    #[test]
    fn from_parts_rejects_shape_and_range_errors() {
        // Running matrix shorter than K×D.
        assert!(EmaState::from_parts(0.9, 1e-4, 2, vec![0.0; 2], vec![0.0; 3], 0, vec![0.0; 2], vec![]).is_err());
        // Norm anchors missing a code.
        assert!(EmaState::from_parts(0.9, 1e-4, 2, vec![0.0; 2], vec![0.0; 4], 0, vec![0.0; 1], vec![]).is_err());
        // Negative count.
        assert!(EmaState::from_parts(0.9, 1e-4, 2, vec![-1.0, 0.0], vec![0.0; 4], 0, vec![0.0; 2], vec![]).is_err());
        // Decay at the closed end of its range.
        assert!(EmaState::from_parts(1.0, 1e-4, 2, vec![0.0; 2], vec![0.0; 4], 0, vec![0.0; 2], vec![]).is_err());
    }

    #[test]
    fn gamma_zero_is_the_memoryless_one_step_limit() {
        let mut cb = Codebook::from_rows(1, &[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let mut state = EmaState::new(&cb, 0.0, 1e-9).unwrap();
        let b = batch(&[vec![2.0, 0.0], vec![4.0, 0.0]], &[0, 0]);
        ema_step(&mut state, &mut cb, &b).unwrap();
        // After one memoryless step the stored statistics equal the batch's.
        assert_eq!(state.counts(), &[2.0, 0.0]);
        assert_eq!(state.running(0), &[6.0, 0.0]);
        assert_eq!(state.running(1), &[0.0, 0.0]);
    }

    #[test]
    fn unassigned_codes_decay_by_exactly_gamma() {
        let mut cb = Codebook::from_rows(1, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut state = EmaState::new(&cb, 0.5, 1e-5).unwrap();
        let b = batch(&[vec![1.0, 0.0]], &[0]);
        ema_step(&mut state, &mut cb, &b).unwrap();
        let n1_before = state.counts()[1];
        let m1_before = state.running(1).to_vec();
        ema_step(&mut state, &mut cb, &b).unwrap();
        assert_eq!(state.counts()[1], 0.5 * n1_before);
        assert_eq!(state.running(1)[0], 0.5 * m1_before[0]);
        assert_eq!(state.running(1)[1], 0.5 * m1_before[1]);
    }

    #[test]
    fn first_step_pulls_the_code_toward_the_batch_and_respects_bounds() {
        let mut cb = unit_codebook();
        let mut state = EmaState::new(&cb, 0.99, 1e-5).unwrap();
        let b = batch(&[vec![2.0, 0.0]], &[0]);
        ema_step(&mut state, &mut cb, &b).unwrap();
        // With a single code the smoothing ratio is exactly 1, so the update
        // is c = m/N = (1-γ)·ℓ / ((1-γ)·n + ε·corrections); the code moves
        // off the origin toward the sample and stays finite.
        assert!(cb.code(0)[0] > 0.0 && cb.code(0)[0] <= 2.0);
        assert_eq!(cb.code(0)[1], 0.0);
        assert_eq!(state.step(), 1);
        state.check_lemma_bounds(false).unwrap();
    }

    #[test]
    fn laplace_smoothing_matches_hand_computed_values() {
        let (smoothed, degenerate) = laplace_smooth(&[2.0, 0.0], 1.0).unwrap();
        assert_eq!(smoothed, vec![1.5, 0.5]);
        assert!(!degenerate);
    }

    #[test]
    fn laplace_smoothing_of_all_zeros_is_flagged_degenerate() {
        let (smoothed, degenerate) = laplace_smooth(&[0.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(smoothed, vec![0.0, 0.0, 0.0]);
        assert!(degenerate);
    }

    #[test]
    fn laplace_rejects_negative_counts_and_bad_epsilon() {
        assert!(laplace_smooth(&[-1.0, 2.0], 1e-5).is_err());
        assert!(laplace_smooth(&[1.0], 0.0).is_err());
    }

    #[test]
    fn closed_form_limit_matches_the_worked_single_code_case() {
        let lim = closed_form_limit::<f64>(&[1.0], &[2.0, 0.0], 2, 0.99, 1e-5).unwrap();
        assert!((lim.count_limit[0] - 1.001).abs() < 1e-12);
        let expected = 2.0 / 1.00099;
        assert!((lim.code_limit[0] - expected).abs() < 1e-12);
        assert_eq!(lim.code_limit[1], 0.0);
    }

    #[test]
    fn closed_form_limit_with_zero_epsilon_is_the_cluster_mean() {
        let lim = closed_form_limit(&[2.0, 4.0], &[4.0, 0.0, 0.0, 8.0], 2, 0.9, 0.0).unwrap();
        assert_eq!(lim.count_limit, vec![2.0, 4.0]);
        assert_eq!(lim.code_limit_row(0), &[2.0, 0.0]);
        assert_eq!(lim.code_limit_row(1), &[0.0, 2.0]);
    }

    #[test]
    fn closed_form_limit_rejects_zero_count_with_zero_epsilon() {
        let err = closed_form_limit(&[0.0, 1.0], &[0.0; 4], 2, 0.9, 0.0);
        assert!(matches!(err, Err(Error::DegenerateInput { .. })));
    }

    #[test]
    fn proof_form_counts_include_the_epsilon_inflation() {
        let mut cb = unit_codebook();
        let mut state = EmaState::new(&cb, 0.5, 0.25).unwrap();
        let b = batch(&[vec![2.0, 0.0]], &[0]);
        ema_step_proof_form(&mut state, &mut cb, &b).unwrap();
        // N_1 = 0.5·0 + 0.5·1 + 0.25
        assert_eq!(state.counts(), &[0.75]);
        // Proof-form bound is S + ε/(1−γ) = 1 + 0.5.
        assert_eq!(state.count_bound(true), 1.5);
        state.check_lemma_bounds(true).unwrap();
    }

    #[test]
    fn reset_code_reanchors_the_norm_bound() {
        let cb = unit_codebook();
        let mut state = EmaState::new(&cb, 0.99, 1e-5).unwrap();
        state.reset_code(0, &[3.0, 4.0]).unwrap();
        assert_eq!(state.counts(), &[0.0]);
        assert_eq!(state.running(0), &[3.0, 4.0]);
        assert_eq!(state.running_norm_bound(0), 5.0);
    }
}
