//! Finite-difference verification of the toy models' analytic gradients.
//!
//! Every parameter group of the four models is perturbed one entry at a
//! time with central differences through a real downstream loss, and the
//! numeric slope is compared against the model's backward pass under a
//! mixed absolute/relative tolerance. Two composite checks drive whole
//! training-step gradient chains: the masked prediction loss through
//! decoder and encoder together, and the tokenizer-side loss through the
//! estimator, the pass-through quantization boundary, the entry
//! normalization, and the tokenizer encoder. Across the file the seeded
//! random configurations cover more than a hundred distinct shapes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resq_core::losses::{
    codebook_loss, cosine_alignment_loss, masked_cross_entropy, straight_through,
    straight_through_backward, TokenPredictions, TokenTargets,
};
use resq_core::training::fit_rq_init;
use resq_core::{InitMethod, LatentSequence64, NormalizationMode, QuantizerSpec, TokenGrid};
use resq_harness::{
    normalization_backward, ToyDecoder, ToyEncoder, ToyEstimator, ToyTokenizerEncoder,
};

const FD_STEP: f64 = 1e-5;

/// |analytic − numeric| ≤ 1e-8 + 1e-5·max(|analytic|, |numeric|).
fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-8 + 1e-5 * analytic.abs().max(numeric.abs());
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} vs numeric {numeric} (tol {tol})"
    );
}

fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// A generic smooth downstream loss with a simple hand gradient:
/// L(v) = Σ_i (w_i·v_i + ½v_i²), so ∂L/∂v_i = w_i + v_i.
fn downstream_loss(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(&vi, &wi)| wi * vi + 0.5 * vi * vi).sum()
}

fn downstream_grad(v: &[f64], w: &[f64]) -> Vec<f64> {
    v.iter().zip(w).map(|(&vi, &wi)| wi + vi).collect()
}

/// A mask with at least one hidden and one visible position.
fn random_mask(rng: &mut ChaCha8Rng, t_len: usize) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..t_len).map(|_| rng.random_bool(0.5)).collect();
        if mask.iter().any(|&b| b) && mask.iter().any(|&b| !b) {
            return mask;
        }
    }
}

/// All four context-mixing encoder parameter groups, including the learned
/// mask vector whose influence flows through both the substituted frames
/// and the sequence mean.
#[test]
fn encoder_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0C);
    for case in 0..20u32 {
        let t_len = rng.random_range(2..=5usize);
        let f = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=4usize);
        let enc = ToyEncoder::new(f, d, rng.random());
        let x = random_vec(&mut rng, t_len * f, -2.0, 2.0);
        let mask = random_mask(&mut rng, t_len);
        let w = random_vec(&mut rng, t_len * d, -1.0, 1.0);

        let fwd = enc.forward(&x, Some(&mask)).unwrap();
        let grads = enc.backward(&fwd, &downstream_grad(&fwd.latents, &w)).unwrap();

        let loss_at = |enc: &ToyEncoder| {
            let fwd = enc.forward(&x, Some(&mask)).unwrap();
            downstream_loss(&fwd.latents, &w)
        };
        let groups: [(&str, &[f64], fn(&mut ToyEncoder) -> &mut Vec<f64>); 4] = [
            ("w_local", &grads.d_w_local, |e| &mut e.w_local),
            ("w_ctx", &grads.d_w_ctx, |e| &mut e.w_ctx),
            ("bias", &grads.d_bias, |e| &mut e.bias),
            ("mask_vector", &grads.d_mask_vector, |e| &mut e.mask_vector),
        ];
        for (name, analytic, field) in groups {
            for i in 0..analytic.len() {
                let mut probe = enc.clone();
                let base = field(&mut probe)[i];
                let numeric = central_difference(
                    |v| {
                        field(&mut probe)[i] = v;
                        loss_at(&probe)
                    },
                    base,
                );
                assert_close(analytic[i], numeric, &format!("case {case}, {name}[{i}]"));
            }
        }
    }
}

/// Decoder head parameters and the latent gradient, differenced through
/// the softmax heads and the masked prediction loss.
#[test]
fn decoder_gradients_match_finite_differences_through_the_prediction_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDEC);
    for case in 0..20u32 {
        let t_len = rng.random_range(2..=4usize);
        let d = rng.random_range(1..=3usize);
        let sizes: Vec<usize> = (0..rng.random_range(1..=3usize))
            .map(|_| rng.random_range(2..=4))
            .collect();
        let stages = sizes.len();
        let dec = ToyDecoder::new(d, &sizes, rng.random());
        let latents = random_vec(&mut rng, t_len * d, -2.0, 2.0);
        let tokens: Vec<usize> = (0..t_len * stages)
            .map(|i| rng.random_range(0..sizes[i % stages]))
            .collect();
        let grid = TokenGrid::new(t_len, stages, tokens).unwrap();
        let targets = TokenTargets::new(grid, random_mask(&mut rng, t_len)).unwrap();

        let loss_at = |dec: &ToyDecoder, latents: &[f64]| {
            let cells = dec.forward(latents).unwrap();
            let preds = TokenPredictions::new(t_len, stages, cells).unwrap();
            masked_cross_entropy(&targets, &preds).unwrap().loss
        };

        let cells = dec.forward(&latents).unwrap();
        let preds = TokenPredictions::new(t_len, stages, cells).unwrap();
        let ce = masked_cross_entropy(&targets, &preds).unwrap();
        let (grads, d_latents) = dec.backward(&latents, &ce.grad_logits).unwrap();

        for m in 0..stages {
            for i in 0..grads.d_w[m].len() {
                let mut probe = dec.clone();
                let base = probe.heads[m].w[i];
                let numeric = central_difference(
                    |v| {
                        probe.heads[m].w[i] = v;
                        loss_at(&probe, &latents)
                    },
                    base,
                );
                assert_close(grads.d_w[m][i], numeric, &format!("case {case}, head {m} w[{i}]"));
            }
            for i in 0..grads.d_b[m].len() {
                let mut probe = dec.clone();
                let base = probe.heads[m].b[i];
                let numeric = central_difference(
                    |v| {
                        probe.heads[m].b[i] = v;
                        loss_at(&probe, &latents)
                    },
                    base,
                );
                assert_close(grads.d_b[m][i], numeric, &format!("case {case}, head {m} b[{i}]"));
            }
        }
        let mut probe = latents.clone();
        for i in 0..probe.len() {
            let base = probe[i];
            let numeric = central_difference(
                |v| {
                    probe[i] = v;
                    let loss = loss_at(&dec, &probe);
                    probe[i] = base;
                    loss
                },
                base,
            );
            assert_close(d_latents[i], numeric, &format!("case {case}, latent [{i}]"));
        }
    }
}

/// Tokenizer-encoder weights and bias under a generic downstream loss.
#[test]
fn tokenizer_encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E);
    for case in 0..20u32 {
        let t_len = rng.random_range(1..=5usize);
        let f = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=4usize);
        let te = ToyTokenizerEncoder::new(f, d, rng.random(), false);
        let x = random_vec(&mut rng, t_len * f, -2.0, 2.0);
        let w = random_vec(&mut rng, t_len * d, -1.0, 1.0);

        let v = te.forward(&x).unwrap();
        let grads = te.backward(&x, &downstream_grad(&v, &w)).unwrap();

        let loss_at = |te: &ToyTokenizerEncoder| downstream_loss(&te.forward(&x).unwrap(), &w);
        for i in 0..grads.d_w.len() {
            let mut probe = te.clone();
            let base = probe.w[i];
            let numeric = central_difference(
                |v| {
                    probe.w[i] = v;
                    loss_at(&probe)
                },
                base,
            );
            assert_close(grads.d_w[i], numeric, &format!("case {case}, w[{i}]"));
        }
        for i in 0..grads.d_b.len() {
            let mut probe = te.clone();
            let base = probe.b[i];
            let numeric = central_difference(
                |v| {
                    probe.b[i] = v;
                    loss_at(&probe)
                },
                base,
            );
            assert_close(grads.d_b[i], numeric, &format!("case {case}, b[{i}]"));
        }
    }
}

/// Estimator weights, bias, and the input gradient it hands back toward
/// the quantizer.
#[test]
fn estimator_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE57);
    for case in 0..20u32 {
        let t_len = rng.random_range(1..=5usize);
        let d = rng.random_range(1..=4usize);
        let est = ToyEstimator::new(d, rng.random());
        let q = random_vec(&mut rng, t_len * d, -2.0, 2.0);
        let w = random_vec(&mut rng, t_len * d, -1.0, 1.0);

        let u = est.forward(&q).unwrap();
        let (grads, d_in) = est.backward(&q, &downstream_grad(&u, &w)).unwrap();

        let loss_at =
            |est: &ToyEstimator, q: &[f64]| downstream_loss(&est.forward(q).unwrap(), &w);
        for i in 0..grads.d_a.len() {
            let mut probe = est.clone();
            let base = probe.a[i];
            let numeric = central_difference(
                |v| {
                    probe.a[i] = v;
                    loss_at(&probe, &q)
                },
                base,
            );
            assert_close(grads.d_a[i], numeric, &format!("case {case}, a[{i}]"));
        }
        for i in 0..grads.d_b.len() {
            let mut probe = est.clone();
            let base = probe.b[i];
            let numeric = central_difference(
                |v| {
                    probe.b[i] = v;
                    loss_at(&probe, &q)
                },
                base,
            );
            assert_close(grads.d_b[i], numeric, &format!("case {case}, b[{i}]"));
        }
        let mut probe = q.clone();
        for i in 0..probe.len() {
            let base = probe[i];
            let numeric = central_difference(
                |v| {
                    probe[i] = v;
                    let loss = loss_at(&est, &probe);
                    probe[i] = base;
                    loss
                },
                base,
            );
            assert_close(d_in[i], numeric, &format!("case {case}, input [{i}]"));
        }
    }
}

/// The whole prediction pipeline at once: masked cross-entropy through the
/// decoder heads and the context-mixing encoder, checked for every
/// parameter of both models against differencing the end-to-end loss.
#[test]
fn masked_prediction_pipeline_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1FE);
    for case in 0..12u32 {
        let t_len = rng.random_range(2..=4usize);
        let f = rng.random_range(1..=3usize);
        let d = rng.random_range(1..=3usize);
        let sizes: Vec<usize> = (0..rng.random_range(1..=2usize))
            .map(|_| rng.random_range(2..=4))
            .collect();
        let stages = sizes.len();
        let enc = ToyEncoder::new(f, d, rng.random());
        let dec = ToyDecoder::new(d, &sizes, rng.random());
        let x = random_vec(&mut rng, t_len * f, -2.0, 2.0);
        let mask = random_mask(&mut rng, t_len);
        let tokens: Vec<usize> = (0..t_len * stages)
            .map(|i| rng.random_range(0..sizes[i % stages]))
            .collect();
        let grid = TokenGrid::new(t_len, stages, tokens).unwrap();
        let targets = TokenTargets::new(grid, mask.clone()).unwrap();

        let loss_at = |enc: &ToyEncoder, dec: &ToyDecoder| {
            let fwd = enc.forward(&x, Some(&mask)).unwrap();
            let cells = dec.forward(&fwd.latents).unwrap();
            let preds = TokenPredictions::new(t_len, stages, cells).unwrap();
            masked_cross_entropy(&targets, &preds).unwrap().loss
        };

        let fwd = enc.forward(&x, Some(&mask)).unwrap();
        let cells = dec.forward(&fwd.latents).unwrap();
        let preds = TokenPredictions::new(t_len, stages, cells).unwrap();
        let ce = masked_cross_entropy(&targets, &preds).unwrap();
        let (dec_grads, d_latents) = dec.backward(&fwd.latents, &ce.grad_logits).unwrap();
        let enc_grads = enc.backward(&fwd, &d_latents).unwrap();

        let enc_groups: [(&str, &[f64], fn(&mut ToyEncoder) -> &mut Vec<f64>); 4] = [
            ("w_local", &enc_grads.d_w_local, |e| &mut e.w_local),
            ("w_ctx", &enc_grads.d_w_ctx, |e| &mut e.w_ctx),
            ("bias", &enc_grads.d_bias, |e| &mut e.bias),
            ("mask_vector", &enc_grads.d_mask_vector, |e| &mut e.mask_vector),
        ];
        for (name, analytic, field) in enc_groups {
            for i in 0..analytic.len() {
                let mut probe = enc.clone();
                let base = field(&mut probe)[i];
                let numeric = central_difference(
                    |v| {
                        field(&mut probe)[i] = v;
                        loss_at(&probe, &dec)
                    },
                    base,
                );
                assert_close(
                    analytic[i],
                    numeric,
                    &format!("case {case}, encoder {name}[{i}]"),
                );
            }
        }
        for m in 0..stages {
            for i in 0..dec_grads.d_w[m].len() {
                let mut probe = dec.clone();
                let base = probe.heads[m].w[i];
                let numeric = central_difference(
                    |v| {
                        probe.heads[m].w[i] = v;
                        loss_at(&enc, &probe)
                    },
                    base,
                );
                assert_close(
                    dec_grads.d_w[m][i],
                    numeric,
                    &format!("case {case}, decoder head {m} w[{i}]"),
                );
            }
            for i in 0..dec_grads.d_b[m].len() {
                let mut probe = dec.clone();
                let base = probe.heads[m].b[i];
                let numeric = central_difference(
                    |v| {
                        probe.heads[m].b[i] = v;
                        loss_at(&enc, &probe)
                    },
                    base,
                );
                assert_close(
                    dec_grads.d_b[m][i],
                    numeric,
                    &format!("case {case}, decoder head {m} b[{i}]"),
                );
            }
        }
    }
}

/// Rowwise unit normalization, or the identity when the mode applies none.
fn normalize_rows(mode: NormalizationMode, v: &[f64], dim: usize) -> Vec<f64> {
    match mode {
        NormalizationMode::None => v.to_vec(),
        NormalizationMode::InputOnly | NormalizationMode::PerStage => {
            let mut out = v.to_vec();
            for row in out.chunks_mut(dim) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in row.iter_mut() {
                        *x /= norm;
                    }
                }
            }
            out
        }
    }
}

/// Cosine alignment as a plain closure for the numeric side: one global
/// ratio of sums, exactly the loss the library computes.
fn cosine_of(estimates: &[f64], teacher: &[f64], dim: usize) -> f64 {
    let mut dot = 0.0;
    let mut norms = 0.0;
    for (u, z) in estimates.chunks(dim).zip(teacher.chunks(dim)) {
        dot += u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        norms += nu * nz;
    }
    1.0 - dot / norms
}

/// The tokenizer-side gradient chain end to end: commitment plus weighted
/// alignment, back through the estimator, the pass-through boundary with
/// its frozen quantization offset, the entry normalization, and the
/// tokenizer encoder's parameters. The numeric oracle recomputes the loss
/// with the token assignment held fixed (quantized values move rigidly
/// with the entry latents, codes themselves stay put), which is precisely
/// the surrogate whose gradient the analytic chain claims to produce.
#[test]
fn tokenizer_chain_gradients_match_the_frozen_assignment_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4A1);
    let modes = [
        NormalizationMode::None,
        NormalizationMode::InputOnly,
        NormalizationMode::PerStage,
    ];
    for case in 0..15u32 {
        let mode = modes[case as usize % modes.len()];
        let t_len = rng.random_range(2..=4usize);
        let f = rng.random_range(2..=4usize);
        let d = rng.random_range(2..=4usize);
        let stages = rng.random_range(1..=3usize);
        let k = rng.random_range(2..=4usize);
        let beta = rng.random_range(0.05..1.0);
        let lambda = rng.random_range(0.2..2.0);

        let te = ToyTokenizerEncoder::new(f, d, rng.random(), false);
        let est = ToyEstimator::new(d, rng.random());
        let x = random_vec(&mut rng, t_len * f, -2.0, 2.0);
        // Teacher rows bounded away from zero norm keep the alignment
        // loss smooth under the perturbation.
        let teacher_flat = random_vec(&mut rng, t_len * d, 0.5, 2.0);
        let teacher = LatentSequence64::from_flat(d, teacher_flat.clone()).unwrap();

        // Codebooks fitted on an unrelated seeded batch; the test only
        // needs a fixed quantizer, not a good one.
        let fit_batch =
            LatentSequence64::from_flat(d, random_vec(&mut rng, 3 * k * d, -1.5, 1.5)).unwrap();
        let spec = QuantizerSpec::uniform_stages(stages, k, mode);
        let quantizer =
            fit_rq_init(&fit_batch, &spec, InitMethod::KMeans, 5, rng.random()).unwrap();

        // Analytic chain, assembled exactly as the tokenizer phase does.
        let v = te.forward(&x).unwrap();
        let v_seq = LatentSequence64::from_flat(d, v.clone()).unwrap();
        let out = quantizer.quantize(&v_seq).unwrap();
        let entry = out.residual_stage(1).to_vec();
        let entry_seq = LatentSequence64::from_flat(d, entry.clone()).unwrap();
        let quantized = out.quantized().to_vec();
        let cb = codebook_loss(&entry_seq, &quantized, beta).unwrap();
        let passed = straight_through(&entry_seq, &quantized).unwrap();
        let estimates = LatentSequence64::from_flat(d, est.forward(&passed).unwrap()).unwrap();
        let cos = cosine_alignment_loss(&estimates, &teacher).unwrap();
        let du: Vec<f64> = cos.d_estimates.iter().map(|&g| lambda * g).collect();
        let (est_grads, d_passed) = est.backward(&passed, &du).unwrap();
        let d_from_alignment = straight_through_backward(&d_passed);
        let d_entry: Vec<f64> = cb
            .d_latents
            .iter()
            .zip(&d_from_alignment)
            .map(|(&c, &a)| c + a)
            .collect();
        let d_v = normalization_backward(mode, &v, &d_entry, d);
        let te_grads = te.backward(&x, &d_v).unwrap();

        // Frozen offset: perturbed entry latents carry the quantized
        // values along rigidly, so the assignment never re-resolves.
        let delta: Vec<f64> = quantized.iter().zip(&entry).map(|(&q, &e)| q - e).collect();
        let surrogate = |te: &ToyTokenizerEncoder| {
            let e1 = normalize_rows(mode, &te.forward(&x).unwrap(), d);
            let commitment: f64 = e1
                .iter()
                .zip(&quantized)
                .map(|(&e, &q)| (e - q) * (e - q))
                .sum::<f64>()
                * beta
                / t_len as f64;
            let passed: Vec<f64> = e1.iter().zip(&delta).map(|(&e, &dq)| e + dq).collect();
            let estimates = est.forward(&passed).unwrap();
            commitment + lambda * cosine_of(&estimates, &teacher_flat, d)
        };

        for i in 0..te_grads.d_w.len() {
            let mut probe = te.clone();
            let base = probe.w[i];
            let numeric = central_difference(
                |val| {
                    probe.w[i] = val;
                    surrogate(&probe)
                },
                base,
            );
            assert_close(
                te_grads.d_w[i],
                numeric,
                &format!("case {case} ({mode:?}), w[{i}]"),
            );
        }
        for i in 0..te_grads.d_b.len() {
            let mut probe = te.clone();
            let base = probe.b[i];
            let numeric = central_difference(
                |val| {
                    probe.b[i] = val;
                    surrogate(&probe)
                },
                base,
            );
            assert_close(
                te_grads.d_b[i],
                numeric,
                &format!("case {case} ({mode:?}), b[{i}]"),
            );
        }

        // Estimator parameters see the same loss with the tokenizer
        // encoder held fixed.
        let est_surrogate = |est: &ToyEstimator| {
            let estimates = est.forward(&passed).unwrap();
            lambda * cosine_of(&estimates, &teacher_flat, d)
        };
        for i in 0..est_grads.d_a.len() {
            let mut probe = est.clone();
            let base = probe.a[i];
            let numeric = central_difference(
                |val| {
                    probe.a[i] = val;
                    est_surrogate(&probe)
                },
                base,
            );
            assert_close(
                est_grads.d_a[i],
                numeric,
                &format!("case {case} ({mode:?}), estimator a[{i}]"),
            );
        }
    }
}
