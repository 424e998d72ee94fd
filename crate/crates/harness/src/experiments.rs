//! Standing experiments: driving the analysis-form EMA recursion against
//! its closed-form limit on a constant stream, and the paired comparison
//! of a single-stage versus a residual quantizer at the same total code
//! budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SyntheticDatasetSpec;
use crate::phases::{interleave, HarnessConfig};
use crate::report::{ComparisonReport, ComparisonRow, ConvergenceReport};
use crate::{HarnessError, Result};

use resq_core::training::{
    closed_form_limit, derive_seed, ema_step_proof_form, init_uniform,
};
use resq_core::{BatchAssignment64, Codebook64, EmaState64, LatentSequence64};

/// Per-code and maximum deviations from the closed-form limit after a
/// constant-stream run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceOutcome {
    pub max_count_deviation: f64,
    pub max_code_deviation: f64,
    /// |N_i − N_i^∞| per code.
    pub count_deviations: Vec<f64>,
    /// ‖c_i − c_i^∞‖₂ per code.
    pub code_deviations: Vec<f64>,
}

/// Feeds the same batch into the analysis-form EMA recursion `steps`
/// times, re-verifying the count and running-sum bounds after every step,
/// and measures the final distance from the closed-form limit implied by
/// the batch. With zero steps the distances are those of the initial
/// state: counts start at zero, codes at their initial values.
pub fn run_constant_stream(
    cb: &mut Codebook64,
    state: &mut EmaState64,
    batch: &BatchAssignment64,
    steps: u64,
) -> Result<ConvergenceOutcome> {
    let k = cb.len();
    let dim = cb.dim();

    // The limit is fixed by the per-code mass and assigned sums of the
    // repeated batch.
    let mut n_inf = vec![0.0f64; k];
    let mut l_inf = vec![0.0f64; k * dim];
    for (row, &code) in batch.latents().rows().zip(batch.assigned().iter()) {
        n_inf[code] += 1.0;
        for (acc, &x) in l_inf[code * dim..(code + 1) * dim].iter_mut().zip(row) {
            *acc += x;
        }
    }
    let limit = closed_form_limit(&n_inf, &l_inf, dim, state.gamma(), state.epsilon())
        .map_err(HarnessError::Core)?;

    for _ in 0..steps {
        ema_step_proof_form(state, cb, batch).map_err(HarnessError::Core)?;
        state.check_lemma_bounds(true).map_err(HarnessError::Core)?;
    }

    let count_deviations: Vec<f64> = state
        .counts()
        .iter()
        .zip(limit.count_limit.iter())
        .map(|(&n, &n_lim)| (n - n_lim).abs())
        .collect();
    let code_deviations: Vec<f64> = (0..k)
        .map(|i| {
            cb.code(i)
                .iter()
                .zip(limit.code_limit_row(i).iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ConvergenceOutcome {
        max_count_deviation: count_deviations.iter().cloned().fold(0.0, f64::max),
        max_code_deviation: code_deviations.iter().cloned().fold(0.0, f64::max),
        count_deviations,
        code_deviations,
    })
}

/// Seeds a random K×D codebook and a constant batch (standard-normal
/// latents, each row assigned uniformly at random), then runs
/// [`run_constant_stream`]. The batch has 2K rows, so total mass is
/// always positive; individual codes may stay empty, which the limit
/// handles through the smoothing constant.
pub fn convergence_experiment(
    codebook_size: usize,
    dim: usize,
    gamma: f64,
    epsilon: f64,
    steps: u64,
    seed: u64,
) -> Result<ConvergenceReport> {
    if codebook_size == 0 || dim == 0 {
        return Err(HarnessError::InvalidConfig {
            name: "codebook_size",
            reason: "codebook size and dimension must be positive".into(),
        });
    }
    let mut cb = init_uniform::<f64>(codebook_size, dim, derive_seed(seed, 1))
        .map_err(HarnessError::Core)?;
    let mut state = EmaState64::new(&cb, gamma, epsilon).map_err(HarnessError::Core)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let rows = 2 * codebook_size;
    let latents: Vec<f64> = (0..rows * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let assigned: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(0..codebook_size))
        .collect();
    let batch = BatchAssignment64::new(
        LatentSequence64::from_flat(dim, latents).map_err(HarnessError::Core)?,
        assigned,
    )
    .map_err(HarnessError::Core)?;

    let outcome = run_constant_stream(&mut cb, &mut state, &batch, steps)?;
    Ok(ConvergenceReport {
        codebook_size,
        dim,
        gamma,
        epsilon,
        steps,
        seed,
        max_count_deviation: outcome.max_count_deviation,
        max_code_deviation: outcome.max_code_deviation,
        bounds_checked_every_step: true,
    })
}

/// Stage layouts of the two arms of the comparison. Both must spend the
/// same total number of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonBudget {
    pub vq_stage_sizes: Vec<usize>,
    pub rq_stage_sizes: Vec<usize>,
}

impl ComparisonBudget {
    /// The desk-scale default: one stage of 64 codes against four stages
    /// of 16.
    pub fn desk() -> Self {
        Self {
            vq_stage_sizes: vec![64],
            rq_stage_sizes: vec![16; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, sizes) in [
            ("vq_stage_sizes", &self.vq_stage_sizes),
            ("rq_stage_sizes", &self.rq_stage_sizes),
        ] {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(HarnessError::InvalidConfig {
                    name,
                    reason: "stage sizes must be nonempty and positive".into(),
                });
            }
        }
        let vq: usize = self.vq_stage_sizes.iter().sum();
        let rq: usize = self.rq_stage_sizes.iter().sum();
        if vq != rq {
            return Err(HarnessError::InvalidConfig {
                name: "budget",
                reason: format!("total code budgets differ: {vq} versus {rq}"),
            });
        }
        Ok(())
    }
}

/// Runs the full interleaved pipeline twice per seed — once per stage
/// layout — on identical data, and collects final reconstruction error,
/// masked-token accuracy, and per-stage usage for each arm.
pub fn vq_vs_rq_experiment(
    spec: &SyntheticDatasetSpec,
    budget: &ComparisonBudget,
    base: &HarnessConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    budget.validate()?;
    if seeds.is_empty() {
        return Err(HarnessError::InvalidConfig {
            name: "seeds",
            reason: "need at least one seed".into(),
        });
    }
    let mut rows = Vec::with_capacity(seeds.len());
    let mut rq_lower_mse = 0usize;
    let mut rq_cur_at_least = 0usize;
    for &seed in seeds {
        // Both arms see the same data draw and the same run seed; only the
        // stage layout differs.
        let data_spec = SyntheticDatasetSpec {
            seed: derive_seed(seed, 3),
            ..spec.clone()
        };
        let mut vq_cfg = base.clone();
        vq_cfg.seed = seed;
        vq_cfg.quantizer.stage_sizes = budget.vq_stage_sizes.clone();
        let mut rq_cfg = base.clone();
        rq_cfg.seed = seed;
        rq_cfg.quantizer.stage_sizes = budget.rq_stage_sizes.clone();

        let vq_report = interleave(&data_spec, &vq_cfg)?;
        let rq_report = interleave(&data_spec, &rq_cfg)?;
        let vq_eval = vq_report.evals.last().expect("at least one iteration");
        let rq_eval = rq_report.evals.last().expect("at least one iteration");

        if rq_eval.quantization_mse < vq_eval.quantization_mse {
            rq_lower_mse += 1;
        }
        let vq_cur = vq_eval.stages[0].cur;
        if rq_eval.stages.iter().all(|s| s.cur >= vq_cur) {
            rq_cur_at_least += 1;
        }
        rows.push(ComparisonRow {
            seed,
            vq_mse: vq_eval.quantization_mse,
            rq_mse: rq_eval.quantization_mse,
            vq_accuracy: vq_eval.masked_token_accuracy,
            rq_accuracy: rq_eval.masked_token_accuracy,
            vq_stages: vq_eval.stages.clone(),
            rq_stages: rq_eval.stages.clone(),
        });
    }
    Ok(ComparisonReport {
        vq_stage_sizes: budget.vq_stage_sizes.clone(),
        rq_stage_sizes: budget.rq_stage_sizes.clone(),
        rq_lower_mse,
        rq_cur_at_least,
        rows,
    })
}
