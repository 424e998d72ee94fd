//! Codebook usage metrics: usage rate, usage entropy, and their product
//! normalized to [0, 1] (effective codebook usage).

use crate::error::{Error, Result};
use crate::quantizer::TokenGrid;
use crate::scalar::{real, Real};

/// Where the counted tokens came from; carried through to reports so pre- and
/// post-training snapshots are distinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    PreTraining,
    PostTraining,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::PreTraining => "pre-training",
            Provenance::PostTraining => "post-training",
        }
    }
}

/// Per-stage assignment counts. Counts are reals so the same type carries raw
/// evaluation-set tallies (the default) and smoothed EMA cluster sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats<F> {
    stage_index: usize,
    counts: Vec<F>,
    total: F,
}

impl<F: Real> UsageStats<F> {
    /// Wraps nonnegative per-code counts for one stage.
    pub fn new(stage_index: usize, counts: Vec<F>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidParameter {
                name: "counts",
                reason: "need at least one code".into(),
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
        let total = counts.iter().fold(F::zero(), |a, &b| a + b);
        Ok(Self {
            stage_index,
            counts,
            total,
        })
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    /// Codebook size K.
    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[F] {
        &self.counts
    }

    pub fn total(&self) -> F {
        self.total
    }

    /// True when no code was used at all; entropy is undefined on such stats.
    pub fn is_degenerate(&self) -> bool {
        self.total == F::zero()
    }
}

/// Tallies each stage's token column of `grid` against its codebook size.
/// Tokens at or beyond a stage's size are rejected. Zero counts (an empty
/// column cannot happen; unused codes can) are fine and reported as given.
pub fn usage_histogram<F: Real>(
    grid: &TokenGrid,
    stage_sizes: &[usize],
) -> Result<Vec<UsageStats<F>>> {
    if stage_sizes.len() != grid.stages() {
        return Err(Error::DimensionMismatch {
            context: "usage_histogram",
            expected: grid.stages(),
            actual: stage_sizes.len(),
        });
    }
    let mut per_stage: Vec<Vec<u64>> = stage_sizes.iter().map(|&k| vec![0u64; k]).collect();
    for t in 0..grid.positions() {
        for m in 0..grid.stages() {
            let token = grid.get(t, m);
            if token >= stage_sizes[m] {
                return Err(Error::IndexOutOfRange {
                    context: "usage_histogram token",
                    index: token,
                    len: stage_sizes[m],
                });
            }
            per_stage[m][token] += 1;
        }
    }
    per_stage
        .into_iter()
        .enumerate()
        .map(|(m, counts)| {
            UsageStats::new(m + 1, counts.into_iter().map(|c| real(c as f64)).collect())
        })
        .collect()
}

/// Codebook usage rate: the fraction of codes with a strictly positive count.
pub fn cur<F: Real>(stats: &UsageStats<F>) -> F {
    let used = stats.counts().iter().filter(|&&c| c > F::zero()).count();
    real::<F>(used as f64) / real::<F>(stats.codebook_size() as f64)
}

/// Usage entropy −Σ p_i ln p_i with p_i = counts_i / total and 0·ln 0 := 0.
///
/// Terms accumulate with Neumaier compensation so that exactly uniform usage
/// over a power-of-two codebook yields ln K bit-exactly (sequential summation
/// already loses the last ulp at K = 64). All-zero counts are rejected: the
/// distribution is undefined.
pub fn usage_entropy<F: Real>(stats: &UsageStats<F>) -> Result<F> {
    if stats.is_degenerate() {
        return Err(Error::DegenerateInput {
            context: "usage_entropy",
            reason: "total count is zero; usage distribution is undefined".into(),
        });
    }
    let mut sum = F::zero();
    let mut comp = F::zero();
    for &c in stats.counts() {
        if c > F::zero() {
            let p = c / stats.total();
            let term = -(p * p.ln());
            let next = sum + term;
            if sum.abs() >= term.abs() {
                comp = comp + ((sum - next) + term);
            } else {
                comp = comp + ((term - next) + sum);
            }
            sum = next;
        }
    }
    Ok(sum + comp)
}

/// Effective codebook usage: cur · ue / ln K, in [0, 1]. Undefined for a
/// single-code book (ln 1 = 0), hence K ≥ 2 is required.
pub fn ecu<F: Real>(cur: F, usage_entropy: F, codebook_size: usize) -> Result<F> {
    if codebook_size < 2 {
        return Err(Error::InvalidParameter {
            name: "codebook_size",
            reason: format!("effective usage needs K >= 2, got {codebook_size}"),
        });
    }
    Ok(cur * usage_entropy / real::<F>(codebook_size as f64).ln())
}

/// One stage's metric triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics<F> {
    pub stage_index: usize,
    pub codebook_size: usize,
    pub cur: F,
    pub usage_entropy: F,
    pub ecu: F,
}

/// Usage metrics for every stage of a quantizer, tagged with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<F> {
    pub provenance: Provenance,
    pub stages: Vec<StageMetrics<F>>,
}

impl<F: Real> MetricsReport<F> {
    /// Computes cur/ue/ecu per stage; ecu is derived from the other two, so
    /// the defining identity holds bit-exactly in the report.
    pub fn from_stats(stats: &[UsageStats<F>], provenance: Provenance) -> Result<Self> {
        let stages = stats
            .iter()
            .map(|s| {
                let c = cur(s);
                let ue = usage_entropy(s)?;
                Ok(StageMetrics {
                    stage_index: s.stage_index(),
                    codebook_size: s.codebook_size(),
                    cur: c,
                    usage_entropy: ue,
                    ecu: ecu(c, ue, s.codebook_size())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { provenance, stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(counts: &[f64]) -> UsageStats<f64> {
        UsageStats::new(1, counts.to_vec()).unwrap()
    }

    #[test]
    fn single_used_code_has_zero_entropy_and_zero_ecu() {
        let s = stats(&[7.0, 0.0, 0.0, 0.0]);
        let ue = usage_entropy(&s).unwrap();
        assert_eq!(ue, 0.0);
        assert_eq!(cur(&s), 0.25);
        assert_eq!(ecu(cur(&s), ue, 4).unwrap(), 0.0);
    }

    #[test]
    fn uniform_usage_maximizes_every_metric_exactly() {
        for k in [2usize, 4, 16, 64, 256] {
            let s = stats(&vec![3.0; k]);
            assert_eq!(cur(&s), 1.0);
            let ue = usage_entropy(&s).unwrap();
            assert_eq!(ue, (k as f64).ln(), "entropy must be exactly ln {k}");
            assert_eq!(ecu(1.0, ue, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn entropy_of_three_to_one_counts_matches_the_frozen_value() {
        let ue = usage_entropy(&stats(&[3.0, 1.0])).unwrap();
        assert!((ue - 0.562335144619).abs() < 1e-6);
    }

    #[test]
    fn all_zero_counts_are_degenerate_for_entropy() {
        let s = stats(&[0.0, 0.0]);
        assert!(s.is_degenerate());
        assert!(matches!(
            usage_entropy(&s),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn ecu_requires_at_least_two_codes() {
        assert!(matches!(
            ecu(1.0, 0.0, 1),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn histogram_counts_tokens_per_stage() {
        // Rows are (stage-1 token, stage-2 token) per position:
        // (0,1), (0,0), (2,1).
        let grid = TokenGrid::new(3, 2, vec![0, 1, 0, 0, 2, 1]).unwrap();
        let stats: Vec<UsageStats<f64>> = usage_histogram(&grid, &[3, 2]).unwrap();
        assert_eq!(stats[0].counts(), &[2.0, 0.0, 1.0]);
        assert_eq!(stats[1].counts(), &[1.0, 2.0]);
        assert_eq!(stats[0].stage_index(), 1);
        assert_eq!(stats[1].stage_index(), 2);
    }

    #[test]
    fn histogram_rejects_tokens_beyond_the_stage_size() {
        let grid = TokenGrid::new(1, 1, vec![5]).unwrap();
        assert!(matches!(
            usage_histogram::<f64>(&grid, &[4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn report_preserves_the_ecu_identity_bit_exactly() {
        let grid = TokenGrid::new(8, 1, vec![0, 1, 2, 3, 0, 1, 0, 2]).unwrap();
        let stats: Vec<UsageStats<f64>> = usage_histogram(&grid, &[5]).unwrap();
        let report = MetricsReport::from_stats(&stats, Provenance::PostTraining).unwrap();
        let s = &report.stages[0];
        assert_eq!(s.ecu, s.cur * s.usage_entropy / 5f64.ln());
    }
}
