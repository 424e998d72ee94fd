//! Codebook initialization and dead-code recovery.
//!
//! Everything here is deterministic given a seed: sampling runs on ChaCha8,
//! whose stream is stable across platforms, and all tie-breaks go to the
//! lowest index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantizer::{
    normalize_in_place, Codebook, LatentSequence, NormalizationMode, ResidualQuantizer,
};
use crate::scalar::{real, squared_distance, Real};
use crate::training::ema::EmaState;

/// Derives an independent stream seed from a base seed and a salt
/// (splitmix64 finalizer). Used to give every stage, phase, and batch its own
/// reproducible RNG without correlating streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `k` distinct indices from `0..population` (partial Fisher–Yates),
/// in sampled order.
pub fn sample_without_replacement<R: Rng>(rng: &mut R, population: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= population);
    let mut idx: Vec<usize> = (0..population).collect();
    for i in 0..k {
        let j = rng.random_range(i..population);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// How stage codebooks are initialized before EMA training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMethod {
    /// Components i.i.d. uniform on [-1, 1).
    Uniform,
    /// Lloyd's iterations seeded with distinct batch points.
    #[default]
    KMeans,
}

/// Codebook with components drawn i.i.d. uniform on [-1, 1).
pub fn init_uniform<F: Real>(k: usize, dim: usize, seed: u64) -> Result<Codebook<F>> {
    if k == 0 || dim == 0 {
        return Err(Error::InvalidParameter {
            name: "codebook shape",
            reason: format!("need k >= 1 and dim >= 1, got k={k}, dim={dim}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<F> = (0..k * dim)
        .map(|_| real::<F>(rng.random_range(-1.0..1.0)))
        .collect();
    Codebook::new(1, dim, codes)
}

/// Lloyd's k-means on a batch of latents.
///
/// Centroids are seeded by sampling `k` distinct batch points; each of the
/// `steps` iterations assigns every point to its nearest centroid (ties to the
/// lowest index) and recomputes means. A cluster left empty by an assignment
/// round is re-seeded with the point farthest from its current centroid
/// (donor clusters keep at least one point, so every cluster stays nonempty).
pub fn init_kmeans<F: Real>(
    batch: &LatentSequence<F>,
    k: usize,
    steps: usize,
    seed: u64,
) -> Result<Codebook<F>> {
    if k == 0 {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: "cluster count must be positive".into(),
        });
    }
    let s = batch.len();
    if s < k {
        return Err(Error::InsufficientData {
            context: "init_kmeans",
            needed: k,
            got: s,
        });
    }
    let dim = batch.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<F> = Vec::with_capacity(k * dim);
    for &p in &sample_without_replacement(&mut rng, s, k) {
        centroids.extend_from_slice(batch.row(p));
    }

    let mut assignment = vec![0usize; s];
    for _ in 0..steps {
        // Assignment pass.
        let mut sizes = vec![0usize; k];
        for (j, point) in batch.rows().enumerate() {
            let mut best = 0usize;
            let mut best_d = squared_distance(point, &centroids[..dim]);
            for c in 1..k {
                let d = squared_distance(point, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assignment[j] = best;
            sizes[best] += 1;
        }
        // Re-seed empty clusters with the farthest point whose donor cluster
        // can spare it; scan order (ascending cluster, then point index) keeps
        // this deterministic.
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let mut donor: Option<(usize, F)> = None;
            for (j, point) in batch.rows().enumerate() {
                if sizes[assignment[j]] < 2 {
                    continue;
                }
                let c = assignment[j];
                let d = squared_distance(point, &centroids[c * dim..(c + 1) * dim]);
                if donor.map(|(_, best)| d > best).unwrap_or(true) {
                    donor = Some((j, d));
                }
            }
            let (j, _) = donor.expect("s >= k guarantees a donor cluster with >= 2 points");
            sizes[assignment[j]] -= 1;
            assignment[j] = empty;
            sizes[empty] = 1;
        }
        // Update pass: centroid = mean of assigned points.
        let mut sums = vec![F::zero(); k * dim];
        for (j, point) in batch.rows().enumerate() {
            let c = assignment[j];
            for (acc, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point.iter()) {
                *acc = *acc + x;
            }
        }
        for c in 0..k {
            let count = real::<F>(sizes[c] as f64);
            for d in 0..dim {
                centroids[c * dim + d] = sums[c * dim + d] / count;
            }
        }
    }
    Codebook::new(1, dim, centroids)
}

/// Stage layout plus lookup behavior of a quantizer to be fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    /// Codes per stage, K_1..K_M, in application order.
    pub stage_sizes: Vec<usize>,
    pub normalization: NormalizationMode,
    /// Codes blended per lookup; 1 = hard assignment.
    pub soft_k: usize,
}

impl QuantizerSpec {
    /// Hard-assignment layout with `stages` equal stages of size `k`.
    pub fn uniform_stages(stages: usize, k: usize, normalization: NormalizationMode) -> Self {
        Self {
            stage_sizes: vec![k; stages],
            normalization,
            soft_k: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_sizes.is_empty() {
            return Err(Error::InvalidParameter {
                name: "stage_sizes",
                reason: "need at least one stage".into(),
            });
        }
        if let Some(&k) = self.stage_sizes.iter().find(|&&k| k == 0) {
            return Err(Error::InvalidParameter {
                name: "stage_sizes",
                reason: format!("stage size must be positive, got {k}"),
            });
        }
        let min_k = *self.stage_sizes.iter().min().expect("nonempty");
        if self.soft_k < 1 || self.soft_k > min_k {
            return Err(Error::InvalidParameter {
                name: "soft_k",
                reason: format!(
                    "soft_k must lie in [1, {min_k}] for this layout, got {}",
                    self.soft_k
                ),
            });
        }
        Ok(())
    }
}

/// Fits a full residual quantizer on one batch: stage 1 is initialized on the
/// (possibly normalized) latents, each later stage on the residuals left by
/// the stages before it. Stage seeds are derived independently from `seed`.
pub fn fit_rq_init<F: Real>(
    batch: &LatentSequence<F>,
    spec: &QuantizerSpec,
    method: InitMethod,
    kmeans_steps: usize,
    seed: u64,
) -> Result<ResidualQuantizer<F>> {
    spec.validate()?;
    let dim = batch.dim();
    let mut current: Vec<Vec<F>> = batch.rows().map(<[F]>::to_vec).collect();
    let mut stages = Vec::with_capacity(spec.stage_sizes.len());
    for (m, &k) in spec.stage_sizes.iter().enumerate() {
        let normalize_entry = match spec.normalization {
            NormalizationMode::None => false,
            NormalizationMode::InputOnly => m == 0,
            NormalizationMode::PerStage => true,
        };
        if normalize_entry {
            for row in current.iter_mut() {
                normalize_in_place(row);
            }
        }
        let stage_seed = derive_seed(seed, m as u64);
        let mut cb = match method {
            InitMethod::Uniform => init_uniform(k, dim, stage_seed)?,
            InitMethod::KMeans => {
                let rows = LatentSequence::from_rows(&current)?;
                init_kmeans(&rows, k, kmeans_steps, stage_seed)?
            }
        };
        cb.set_stage_index(m + 1);
        for row in current.iter_mut() {
            let (idx, _) = cb.nearest(row)?;
            for (x, &c) in row.iter_mut().zip(cb.code(idx).iter()) {
                *x = *x - c;
            }
        }
        stages.push(cb);
    }
    ResidualQuantizer::new(stages, spec.normalization, spec.soft_k)
}

/// Replaces every code whose usage count is below `threshold` with a batch
/// latent drawn uniformly (with replacement, seeded), re-zeroing the matching
/// EMA statistics. Returns one flag per code: true where a reset happened.
pub fn reset_unused<F: Real>(
    cb: &mut Codebook<F>,
    ema: &mut EmaState<F>,
    usage_counts: &[F],
    batch: &LatentSequence<F>,
    threshold: F,
    seed: u64,
) -> Result<Vec<bool>> {
    if usage_counts.len() != cb.len() || ema.len() != cb.len() {
        return Err(Error::DimensionMismatch {
            context: "reset_unused",
            expected: cb.len(),
            actual: usage_counts.len(),
        });
    }
    if batch.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            context: "reset_unused batch",
            expected: cb.dim(),
            actual: batch.dim(),
        });
    }
    if !(threshold >= F::zero() && threshold.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "threshold",
            reason: format!("usage threshold must be a finite nonnegative real, got {threshold}"),
        });
    }
    for (i, &u) in usage_counts.iter().enumerate() {
        if !(u >= F::zero() && u.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "usage_counts",
                reason: format!("count {i} must be a finite nonnegative real, got {u}"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; cb.len()];
    for i in 0..cb.len() {
        if usage_counts[i] < threshold {
            let j = rng.random_range(0..batch.len());
            let replacement = batch.row(j).to_vec();
            cb.set_code(i, &replacement)?;
            ema.reset_code(i, &replacement)?;
            mask[i] = true;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_salts() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
    }

    #[test]
    fn sample_without_replacement_is_distinct_and_complete_at_full_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut got = sample_without_replacement(&mut rng, 5, 5);
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn init_uniform_is_seed_deterministic_and_centered() {
        let a: Codebook<f64> = init_uniform(1000, 2, 9).unwrap();
        let b: Codebook<f64> = init_uniform(1000, 2, 9).unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.codes().iter().sum::<f64>() / a.codes().len() as f64;
        assert!(mean.abs() < 0.1, "sample mean {mean} too far from 0");
        assert!(a.codes().iter().all(|c| (-1.0..1.0).contains(c)));
    }

    #[test]
    fn kmeans_rejects_fewer_points_than_clusters() {
        let batch = LatentSequence::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            init_kmeans(&batch, 3, 5, 0),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn kmeans_with_k_equal_to_distinct_points_recovers_them() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let batch = LatentSequence::from_rows(&pts).unwrap();
        let cb = init_kmeans(&batch, 3, 5, 17).unwrap();
        for p in &pts {
            let (_, d) = cb.nearest(p).unwrap();
            assert_eq!(d, 0.0, "point {p:?} should be a centroid");
        }
    }

    #[test]
    fn fit_rq_init_respects_stage_layout() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64 * 0.1, (i % 5) as f64])
            .collect();
        let batch = LatentSequence::from_rows(&rows).unwrap();
        let spec = QuantizerSpec {
            stage_sizes: vec![4, 2],
            normalization: NormalizationMode::None,
            soft_k: 1,
        };
        let rq = fit_rq_init(&batch, &spec, InitMethod::KMeans, 10, 5).unwrap();
        assert_eq!(rq.num_stages(), 2);
        assert_eq!(rq.stage_sizes(), vec![4, 2]);
        assert_eq!(rq.stage(0).stage_index(), 1);
        assert_eq!(rq.stage(1).stage_index(), 2);
    }

    #[test]
    fn reset_unused_with_all_counts_above_threshold_changes_nothing() {
        let mut cb = Codebook::from_rows(1, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let before = cb.clone();
        let mut ema = EmaState::new(&cb, 0.99, 1e-5).unwrap();
        let batch = LatentSequence::from_rows(&[vec![5.0, 5.0]]).unwrap();
        let mask = reset_unused(&mut cb, &mut ema, &[3.0, 2.0], &batch, 1.0, 0).unwrap();
        assert_eq!(mask, vec![false, false]);
        assert_eq!(cb, before);
    }

    #[test]
    fn reset_unused_replaces_starved_codes_with_batch_latents() {
        let mut cb = Codebook::from_rows(1, &[vec![100.0, 100.0], vec![0.0, 1.0]]).unwrap();
        let mut ema = EmaState::new(&cb, 0.99, 1e-5).unwrap();
        let batch = LatentSequence::from_rows(&[vec![5.0, 5.0], vec![6.0, 6.0]]).unwrap();
        let mask = reset_unused(&mut cb, &mut ema, &[0.0, 2.0], &batch, 1.0, 11).unwrap();
        assert_eq!(mask, vec![true, false]);
        let replaced = cb.code(0);
        assert!(replaced == batch.row(0) || replaced == batch.row(1));
        assert_eq!(ema.counts()[0], 0.0);
        assert_eq!(ema.running(0), replaced);
    }
}
