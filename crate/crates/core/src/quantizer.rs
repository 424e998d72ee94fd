//! Residual quantization over staged codebooks.
//!
//! A [`ResidualQuantizer`] holds M codebooks. Quantizing a vector runs a greedy
//! cascade: stage m picks the nearest code to the current residual (squared
//! Euclidean, ties to the lowest index), subtracts it, and hands the remainder
//! to stage m+1. The reconstruction is the sum of the selected codes. A single
//! stage is plain vector quantization.

use crate::error::{Error, Result};
use crate::scalar::{norm, real, squared_distance, Real};

/// How inputs are normalized before codebook lookup.
///
/// `InputOnly` L2-normalizes each input vector once before stage 1 and keeps the
/// usual residual recurrence afterwards, so the telescoping identity holds with
/// respect to the normalized input. `PerStage` re-normalizes the residual at the
/// entry of every stage; that breaks telescoping and is provided for pipelines
/// that normalize at every codebook layer. Zero vectors are passed through
/// unnormalized in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationMode {
    None,
    #[default]
    InputOnly,
    PerStage,
}

/// One stage's codebook: K code vectors of dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    /// 1-based position of this codebook within its quantizer.
    stage_index: usize,
    dim: usize,
    /// Row-major K×D storage.
    codes: Vec<F>,
}

impl<F: Real> Codebook<F> {
    /// Builds a codebook from row-major `codes` (length must be a positive
    /// multiple of `dim`). All components must be finite.
    pub fn new(stage_index: usize, dim: usize, codes: Vec<F>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "codebook dimension must be positive".into(),
            });
        }
        if codes.is_empty() || !codes.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "codebook storage",
                expected: dim,
                actual: codes.len(),
            });
        }
        for (i, c) in codes.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::NonFinite {
                    context: "codebook",
                    index: i,
                });
            }
        }
        Ok(Self {
            stage_index,
            dim,
            codes,
        })
    }

    /// Builds a codebook from one row per code vector.
    pub fn from_rows(stage_index: usize, rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "codebook row",
                    expected: dim,
                    actual: rows[i].len(),
                });
            }
        }
        Self::new(stage_index, dim, rows.concat())
    }

    /// Number of codes K.
    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one code
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub(crate) fn set_stage_index(&mut self, stage_index: usize) {
        self.stage_index = stage_index;
    }

    /// The i-th code vector.
    pub fn code(&self, i: usize) -> &[F] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major view of all codes.
    pub fn codes(&self) -> &[F] {
        &self.codes
    }

    /// Overwrites code `i`; the replacement must be finite and D-dimensional.
    pub fn set_code(&mut self, i: usize, code: &[F]) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                context: "set_code",
                index: i,
                len: self.len(),
            });
        }
        if code.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "set_code",
                expected: self.dim,
                actual: code.len(),
            });
        }
        for (j, c) in code.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::NonFinite {
                    context: "set_code",
                    index: j,
                });
            }
        }
        self.codes[i * self.dim..(i + 1) * self.dim].copy_from_slice(code);
        Ok(())
    }

    /// Index of the nearest code to `e` and its squared Euclidean distance.
    /// Distance ties resolve to the lowest index.
    pub fn nearest(&self, e: &[F]) -> Result<(usize, F)> {
        self.check_query(e, "nearest")?;
        let mut best = 0usize;
        let mut best_dist = squared_distance(e, self.code(0));
        for i in 1..self.len() {
            let d = squared_distance(e, self.code(i));
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        Ok((best, best_dist))
    }

    /// Runs one stage: nearest-code lookup plus residual subtraction.
    pub fn quantize_stage(&self, e: &[F]) -> Result<StageQuantization<F>> {
        let (index, distance) = self.nearest(e)?;
        let code = self.code(index);
        let next_residual = e.iter().zip(code.iter()).map(|(&x, &c)| x - c).collect();
        Ok(StageQuantization {
            index,
            distance,
            next_residual,
        })
    }

    /// Top-`k` nearest codes (distance order, ties by index) with uniform
    /// weights 1/k. `k = 1` coincides with the hard assignment.
    pub fn soft_assign(&self, e: &[F], k: usize) -> Result<SoftAssignment<F>> {
        self.check_query(e, "soft_assign")?;
        if k < 1 || k > self.len() {
            return Err(Error::InvalidParameter {
                name: "soft_k",
                reason: format!("k must be in [1, {}], got {k}", self.len()),
            });
        }
        let mut order: Vec<(usize, F)> = (0..self.len())
            .map(|i| (i, squared_distance(e, self.code(i))))
            .collect();
        // Stable sort on distance keeps index order among exact ties.
        order.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
        order.truncate(k);
        let weight = F::one() / real::<F>(k as f64);
        Ok(SoftAssignment {
            indices: order.iter().map(|&(i, _)| i).collect(),
            weights: vec![weight; k],
        })
    }

    fn check_query(&self, e: &[F], context: &'static str) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim,
                actual: e.len(),
            });
        }
        for (i, x) in e.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { context, index: i });
            }
        }
        Ok(())
    }
}

/// Outcome of a single-stage quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct StageQuantization<F> {
    pub index: usize,
    /// Squared distance between the input and the selected code.
    pub distance: F,
    /// Input minus selected code; the next stage's input.
    pub next_residual: Vec<F>,
}

/// Top-k soft assignment for one vector against one codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment<F> {
    pub indices: Vec<usize>,
    /// Nonnegative, sums to 1; uniform 1/k.
    pub weights: Vec<F>,
}

/// A sequence of T latent vectors of dimension D, validated finite on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<F> {
    dim: usize,
    /// Row-major T×D storage.
    data: Vec<F>,
}

impl<F: Real> LatentSequence<F> {
    /// Builds a sequence from row-major data; `data.len()` must be a positive
    /// multiple of `dim` and every component finite.
    pub fn from_flat(dim: usize, data: Vec<F>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "latent dimension must be positive".into(),
            });
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "latent sequence storage",
                expected: dim,
                actual: data.len(),
            });
        }
        for (i, x) in data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    context: "latent sequence",
                    index: i,
                });
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "latent sequence row",
                    expected: dim,
                    actual: row.len(),
                });
            }
        }
        Self::from_flat(dim, rows.concat())
    }

    /// Number of vectors T.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one row
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[F] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }
}

/// T×M grid of selected code indices: one row per position, one column per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    positions: usize,
    stages: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(positions: usize, stages: usize, tokens: Vec<usize>) -> Result<Self> {
        if positions == 0 || stages == 0 || tokens.len() != positions * stages {
            return Err(Error::DimensionMismatch {
                context: "token grid",
                expected: positions * stages,
                actual: tokens.len(),
            });
        }
        Ok(Self {
            positions,
            stages,
            tokens,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn get(&self, t: usize, m: usize) -> usize {
        self.tokens[t * self.stages + m]
    }

    /// All stage tokens for position `t`.
    pub fn row(&self, t: usize) -> &[usize] {
        &self.tokens[t * self.stages..(t + 1) * self.stages]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.tokens.chunks_exact(self.stages)
    }
}

/// Per-position soft-assignment detail (present only when `soft_k > 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDetail<F> {
    pub soft_k: usize,
    /// T×M×k selected indices, position-major.
    pub indices: Vec<usize>,
    /// T×M×k weights, nonnegative, summing to 1 per (t, m) cell.
    pub weights: Vec<F>,
}

/// Everything produced by quantizing a latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<F> {
    dim: usize,
    grid: TokenGrid,
    /// T×D reconstructions q_t (sum of the selected codes per position).
    quantized: Vec<F>,
    /// (M+1)×T×D stage-entry residuals, stage-major: entry m (0-based) holds
    /// e_{m+1}. e_1 is the (possibly normalized) input; e_{M+1} is the final
    /// residual after the last subtraction. Under `PerStage` normalization the
    /// stored vectors are the renormalized stage inputs.
    residuals: Vec<F>,
    soft: Option<SoftDetail<F>>,
}

impl<F: Real> QuantizationResult<F> {
    pub fn token_grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reconstruction q_t for position `t`.
    pub fn quantized_row(&self, t: usize) -> &[F] {
        &self.quantized[t * self.dim..(t + 1) * self.dim]
    }

    /// Row-major T×D reconstructions.
    pub fn quantized(&self) -> &[F] {
        &self.quantized
    }

    /// Residual e_m at position `t`, for m in [1, M+1]. m = 1 is the
    /// (possibly normalized) input; m = M+1 the final residual.
    pub fn residual(&self, m: usize, t: usize) -> &[F] {
        let stages = self.grid.stages();
        assert!(
            (1..=stages + 1).contains(&m),
            "residual stage {m} out of range [1, {}]",
            stages + 1
        );
        let base = ((m - 1) * self.grid.positions() + t) * self.dim;
        &self.residuals[base..base + self.dim]
    }

    /// All rows of residual e_m as a flat T×D slice.
    pub fn residual_stage(&self, m: usize) -> &[F] {
        let stages = self.grid.stages();
        assert!((1..=stages + 1).contains(&m));
        let per_stage = self.grid.positions() * self.dim;
        &self.residuals[(m - 1) * per_stage..m * per_stage]
    }

    pub fn soft(&self) -> Option<&SoftDetail<F>> {
        self.soft.as_ref()
    }

    /// Mean squared final residual: (1/T) Σ_t ‖e_{M+1,t}‖².
    pub fn mean_squared_error(&self) -> F {
        let t_len = self.grid.positions();
        let last = self.residual_stage(self.grid.stages() + 1);
        let mut acc = F::zero();
        for &x in last {
            acc = acc + x * x;
        }
        acc / real::<F>(t_len as f64)
    }
}

/// M staged codebooks applied greedily, nearest-first.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualQuantizer<F> {
    stages: Vec<Codebook<F>>,
    normalization: NormalizationMode,
    /// Number of codes blended per stage; 1 = hard assignment.
    soft_k: usize,
}

impl<F: Real> ResidualQuantizer<F> {
    /// Assembles a quantizer. All stages must share one dimension; stage
    /// indices must be unique and lie in [1, M]; `soft_k` must not exceed any
    /// stage's code count.
    pub fn new(
        stages: Vec<Codebook<F>>,
        normalization: NormalizationMode,
        soft_k: usize,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidParameter {
                name: "stages",
                reason: "a residual quantizer needs at least one codebook".into(),
            });
        }
        let dim = stages[0].dim();
        let m = stages.len();
        let mut seen = vec![false; m];
        for cb in &stages {
            if cb.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "quantizer stages",
                    expected: dim,
                    actual: cb.dim(),
                });
            }
            let idx = cb.stage_index();
            if idx < 1 || idx > m {
                return Err(Error::InvalidParameter {
                    name: "stage_index",
                    reason: format!("stage index {idx} outside [1, {m}]"),
                });
            }
            if seen[idx - 1] {
                return Err(Error::InvalidParameter {
                    name: "stage_index",
                    reason: format!("stage index {idx} appears twice"),
                });
            }
            seen[idx - 1] = true;
        }
        if soft_k < 1 || stages.iter().any(|cb| soft_k > cb.len()) {
            return Err(Error::InvalidParameter {
                name: "soft_k",
                reason: format!("soft_k {soft_k} must be in [1, min stage size]"),
            });
        }
        Ok(Self {
            stages,
            normalization,
            soft_k,
        })
    }

    /// Builds a quantizer from bare code matrices, assigning stage indices 1..=M
    /// in list order.
    pub fn from_stage_codes(
        stage_codes: Vec<(usize, Vec<F>)>,
        dim: usize,
        normalization: NormalizationMode,
        soft_k: usize,
    ) -> Result<Self> {
        let stages = stage_codes
            .into_iter()
            .enumerate()
            .map(|(i, (_k, codes))| Codebook::new(i + 1, dim, codes))
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages, normalization, soft_k)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    pub fn normalization(&self) -> NormalizationMode {
        self.normalization
    }

    pub fn soft_k(&self) -> usize {
        self.soft_k
    }

    /// Stage codebook by list position (0-based).
    pub fn stage(&self, m: usize) -> &Codebook<F> {
        &self.stages[m]
    }

    pub fn stage_mut(&mut self, m: usize) -> &mut Codebook<F> {
        &mut self.stages[m]
    }

    pub fn stages(&self) -> &[Codebook<F>] {
        &self.stages
    }

    /// Code count per stage, in application order.
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(Codebook::len).collect()
    }

    /// Quantizes every position of `z` through all stages.
    pub fn quantize(&self, z: &LatentSequence<F>) -> Result<QuantizationResult<F>> {
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "quantize",
                expected: self.dim(),
                actual: z.dim(),
            });
        }
        let t_len = z.len();
        let m_len = self.num_stages();
        let dim = self.dim();
        let soft = self.soft_k > 1;

        let mut tokens = vec![0usize; t_len * m_len];
        let mut quantized = vec![F::zero(); t_len * dim];
        let mut residuals = vec![F::zero(); (m_len + 1) * t_len * dim];
        let mut soft_indices = Vec::new();
        let mut soft_weights: Vec<F> = Vec::new();

        for t in 0..t_len {
            let mut e: Vec<F> = z.row(t).to_vec();
            if self.normalization != NormalizationMode::None {
                normalize_in_place(&mut e);
            }
            let q_row = &mut quantized[t * dim..(t + 1) * dim];
            for (m, cb) in self.stages.iter().enumerate() {
                if m > 0 && self.normalization == NormalizationMode::PerStage {
                    normalize_in_place(&mut e);
                }
                residuals[(m * t_len + t) * dim..(m * t_len + t + 1) * dim].copy_from_slice(&e);
                if soft {
                    let assign = cb.soft_assign(&e, self.soft_k)?;
                    // Effective code: weighted blend of the selected codes.
                    let mut blend = vec![F::zero(); dim];
                    for (&i, &w) in assign.indices.iter().zip(assign.weights.iter()) {
                        for (b, &c) in blend.iter_mut().zip(cb.code(i).iter()) {
                            *b = *b + w * c;
                        }
                    }
                    tokens[t * m_len + m] = assign.indices[0];
                    soft_indices.extend_from_slice(&assign.indices);
                    soft_weights.extend_from_slice(&assign.weights);
                    for ((ei, qi), &bi) in e.iter_mut().zip(q_row.iter_mut()).zip(blend.iter()) {
                        *ei = *ei - bi;
                        *qi = *qi + bi;
                    }
                } else {
                    let (index, _) = cb.nearest(&e)?;
                    tokens[t * m_len + m] = index;
                    let code = cb.code(index);
                    for ((ei, qi), &ci) in e.iter_mut().zip(q_row.iter_mut()).zip(code.iter()) {
                        *ei = *ei - ci;
                        *qi = *qi + ci;
                    }
                }
            }
            residuals[(m_len * t_len + t) * dim..(m_len * t_len + t + 1) * dim]
                .copy_from_slice(&e);
        }

        Ok(QuantizationResult {
            dim,
            grid: TokenGrid::new(t_len, m_len, tokens)?,
            quantized,
            residuals,
            soft: soft.then_some(SoftDetail {
                soft_k: self.soft_k,
                indices: soft_indices,
                weights: soft_weights,
            }),
        })
    }

    /// Sums the codes selected by one position's token row (hard assignment).
    pub fn reconstruct(&self, tokens: &[usize]) -> Result<Vec<F>> {
        if tokens.len() != self.num_stages() {
            return Err(Error::DimensionMismatch {
                context: "reconstruct",
                expected: self.num_stages(),
                actual: tokens.len(),
            });
        }
        let mut q = vec![F::zero(); self.dim()];
        for (cb, &i) in self.stages.iter().zip(tokens.iter()) {
            if i >= cb.len() {
                return Err(Error::IndexOutOfRange {
                    context: "reconstruct",
                    index: i,
                    len: cb.len(),
                });
            }
            for (qi, &ci) in q.iter_mut().zip(cb.code(i).iter()) {
                *qi = *qi + ci;
            }
        }
        Ok(q)
    }
}

/// L2-normalizes `v` in place; zero vectors are left untouched.
pub(crate) fn normalize_in_place<F: Real>(v: &mut [F]) {
    let n = norm(v);
    if n > F::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb2(stage: usize) -> Codebook<f64> {
        // Three 2-d codes.
        Codebook::from_rows(stage, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn nearest_returns_exact_zero_for_a_stored_code() {
        let cb = cb2(1);
        let (i, d) = cb.nearest(&[0.0, 1.0]).unwrap();
        assert_eq!(i, 2);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn nearest_breaks_ties_toward_the_lowest_index() {
        // (0.6, 0.6) is equidistant from codes 1 and 2 (0.52 each) and
        // farther from code 0 (0.72); the tie must resolve to index 1.
        let cb = cb2(1);
        let (i, d) = cb.nearest(&[0.6, 0.6]).unwrap();
        assert_eq!(i, 1);
        assert!((d - 0.52).abs() < 1e-15);
    }

    #[test]
    fn nearest_rejects_dimension_mismatch() {
        let cb = cb2(1);
        assert!(matches!(
            cb.nearest(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nearest_rejects_non_finite_queries() {
        let cb = cb2(1);
        assert!(matches!(
            cb.nearest(&[f64::NAN, 0.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn quantize_stage_computes_the_residual() {
        let cb = cb2(1);
        let out = cb.quantize_stage(&[1.25, -0.25]).unwrap();
        assert_eq!(out.index, 1);
        assert_eq!(out.next_residual, vec![0.25, -0.25]);
    }

    #[test]
    fn soft_assign_k1_matches_hard_assignment() {
        let cb = cb2(1);
        let e = [0.9, 0.2];
        let soft = cb.soft_assign(&e, 1).unwrap();
        let (hard, _) = cb.nearest(&e).unwrap();
        assert_eq!(soft.indices, vec![hard]);
        assert_eq!(soft.weights, vec![1.0]);
    }

    #[test]
    fn soft_assign_orders_ties_by_index_and_weights_uniformly() {
        // Codes 1 and 2 tie for nearest; the pair comes back index-ordered
        // with equal weight on each.
        let cb = cb2(1);
        let soft = cb.soft_assign(&[0.6, 0.6], 2).unwrap();
        assert_eq!(soft.indices, vec![1, 2]);
        assert_eq!(soft.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn soft_assign_rejects_out_of_range_k() {
        let cb = cb2(1);
        assert!(cb.soft_assign(&[0.0, 0.0], 0).is_err());
        assert!(cb.soft_assign(&[0.0, 0.0], 4).is_err());
    }

    #[test]
    fn single_stage_quantizer_is_plain_vq() {
        let rq =
            ResidualQuantizer::new(vec![cb2(1)], NormalizationMode::None, 1).unwrap();
        let z = LatentSequence::from_rows(&[vec![0.9, 0.1], vec![-0.1, 0.8]]).unwrap();
        let out = rq.quantize(&z).unwrap();
        assert_eq!(out.token_grid().row(0), &[1]);
        assert_eq!(out.token_grid().row(1), &[2]);
        assert_eq!(out.quantized_row(0), &[1.0, 0.0]);
        // Final residual is input minus code.
        assert_eq!(out.residual(2, 0), &[0.9 - 1.0, 0.1]);
    }

    #[test]
    fn reconstruct_matches_quantized_rows() {
        let stages = vec![cb2(1), cb2(2)];
        let rq = ResidualQuantizer::new(stages, NormalizationMode::None, 1).unwrap();
        let z = LatentSequence::from_rows(&[vec![1.3, 0.9], vec![0.2, -0.4]]).unwrap();
        let out = rq.quantize(&z).unwrap();
        for t in 0..z.len() {
            let rec = rq.reconstruct(out.token_grid().row(t)).unwrap();
            assert_eq!(rec.as_slice(), out.quantized_row(t));
        }
    }

    #[test]
    fn reconstruct_rejects_bad_token_rows() {
        let rq = ResidualQuantizer::new(vec![cb2(1)], NormalizationMode::None, 1).unwrap();
        assert!(matches!(
            rq.reconstruct(&[0, 1]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            rq.reconstruct(&[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn quantizer_rejects_duplicate_stage_indices() {
        let err = ResidualQuantizer::new(vec![cb2(1), cb2(1)], NormalizationMode::None, 1);
        assert!(matches!(err, Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn input_only_normalization_stores_the_normalized_input_as_e1() {
        let rq = ResidualQuantizer::new(vec![cb2(1)], NormalizationMode::InputOnly, 1).unwrap();
        let z = LatentSequence::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = rq.quantize(&z).unwrap();
        assert_eq!(out.residual(1, 0), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vectors_pass_through_normalization_unchanged() {
        let rq = ResidualQuantizer::new(vec![cb2(1)], NormalizationMode::InputOnly, 1).unwrap();
        let z = LatentSequence::from_flat(2, vec![0.0, 0.0]).unwrap();
        let out = rq.quantize(&z).unwrap();
        assert_eq!(out.residual(1, 0), &[0.0, 0.0]);
        assert_eq!(out.token_grid().get(0, 0), 0);
    }

    #[test]
    fn latent_sequence_rejects_non_finite_rows() {
        let err = LatentSequence::from_rows(&[vec![1.0, f64::INFINITY]]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
