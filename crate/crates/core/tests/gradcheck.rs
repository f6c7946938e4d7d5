//! Finite-difference validation of every tape primitive and of the complete
//! REINFORCE loss. Non-scalar ops are reduced through a random weighting
//! before the sum so that backward paths see a non-uniform adjoint; a
//! uniform one would cancel exactly in softmax and hide sign errors.

mod common;

use common::{fd_suite, full_loss_fd_check, rand_matrix, FdConfig, FdStats};
use commscale::env::EnvConfig;
use commscale::model::{EncoderKind, ModelConfig, Parameters};
use commscale::tape::{Tape, TensorId};
use commscale::trainer::{collect_batch, compute_loss};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::Range<u64> = 0..100;

/// Weighted reduction to a scalar. The weight matrix is the last input so
/// FD sweeps it too; its gradient is just the op output, which doubles as
/// a forward check under perturbation.
fn weighted_sum(tape: &mut Tape, out: TensorId, w: TensorId) -> TensorId {
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

#[test]
fn matmul_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 4, 2, 1.0),
                rand_matrix(rng, 3, 2, 1.0),
            ]
        },
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]).unwrap();
            weighted_sum(tape, c, ids[2])
        },
    );
}

#[test]
fn matmul_nt_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 2, 4, 1.0),
                rand_matrix(rng, 3, 2, 1.0),
            ]
        },
        |tape, ids| {
            let c = tape.matmul_nt(ids[0], ids[1]).unwrap();
            weighted_sum(tape, c, ids[2])
        },
    );
}

#[test]
fn elementwise_add_sub_mul_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            (0..4).map(|_| rand_matrix(rng, 3, 4, 1.0)).collect()
        },
        |tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let d = tape.sub(s, ids[2]).unwrap();
            let p = tape.mul(d, ids[0]).unwrap();
            weighted_sum(tape, p, ids[3])
        },
    );
}

#[test]
fn mul_col_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 3, 1, 1.0),
                rand_matrix(rng, 3, 4, 1.0),
            ]
        },
        |tape, ids| {
            let c = tape.mul_col(ids[0], ids[1]).unwrap();
            weighted_sum(tape, c, ids[2])
        },
    );
}

#[test]
fn scale_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| vec![rand_matrix(rng, 3, 4, 1.0), rand_matrix(rng, 3, 4, 1.0)],
        |tape, ids| {
            let up = tape.scale(ids[0], 0.37);
            let down = tape.scale(up, -2.5);
            weighted_sum(tape, down, ids[1])
        },
    );
}

#[test]
fn add_bias_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 1, 4, 1.0),
                rand_matrix(rng, 3, 4, 1.0),
            ]
        },
        |tape, ids| {
            let c = tape.add_bias(ids[0], ids[1]).unwrap();
            weighted_sum(tape, c, ids[2])
        },
    );
}

#[test]
fn relu_gradients_match_finite_differences() {
    // Random activations straddle zero; the stencil-consistency filter
    // drops the handful of entries that land within epsilon of the kink.
    fd_suite(
        SEEDS,
        |rng| vec![rand_matrix(rng, 3, 4, 1.0), rand_matrix(rng, 3, 4, 1.0)],
        |tape, ids| {
            let r = tape.relu(ids[0]);
            weighted_sum(tape, r, ids[1])
        },
    );
}

#[test]
fn softmax_rows_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| vec![rand_matrix(rng, 2, 5, 2.0), rand_matrix(rng, 2, 5, 1.0)],
        |tape, ids| {
            let y = tape.softmax_rows(ids[0]);
            weighted_sum(tape, y, ids[1])
        },
    );
}

#[test]
fn log_softmax_rows_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| vec![rand_matrix(rng, 2, 5, 2.0), rand_matrix(rng, 2, 5, 1.0)],
        |tape, ids| {
            let y = tape.log_softmax_rows(ids[0]);
            weighted_sum(tape, y, ids[1])
        },
    );
}

#[test]
fn exp_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| vec![rand_matrix(rng, 3, 3, 1.5), rand_matrix(rng, 3, 3, 1.0)],
        |tape, ids| {
            let y = tape.exp(ids[0]);
            weighted_sum(tape, y, ids[1])
        },
    );
}

#[test]
fn concat_and_slice_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 2, 1.0),
                rand_matrix(rng, 3, 3, 1.0),
                rand_matrix(rng, 3, 3, 1.0),
            ]
        },
        |tape, ids| {
            let wide = tape.concat_cols(ids[0], ids[1]).unwrap();
            let mid = tape.slice_cols(wide, 1, 4).unwrap();
            weighted_sum(tape, mid, ids[2])
        },
    );
}

#[test]
fn concat_rows_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 2, 4, 1.0),
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 5, 4, 1.0),
            ]
        },
        |tape, ids| {
            let tall = tape.concat_rows(ids[0], ids[1]).unwrap();
            weighted_sum(tape, tall, ids[2])
        },
    );
}

#[test]
fn row_sum_and_sum_all_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 4, 1.0),
                rand_matrix(rng, 3, 1, 1.0),
                rand_matrix(rng, 3, 4, 1.0),
            ]
        },
        |tape, ids| {
            let sums = tape.row_sum(ids[0]);
            let weighted = tape.mul(sums, ids[1]).unwrap();
            let back = tape.mul_col(ids[2], weighted).unwrap();
            tape.sum_all(back)
        },
    );
}

#[test]
fn attention_gradients_match_finite_differences() {
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 2, 3, 1.0),
                rand_matrix(rng, 4, 3, 1.0),
                rand_matrix(rng, 4, 5, 1.0),
                rand_matrix(rng, 2, 5, 1.0),
            ]
        },
        |tape, ids| {
            let out = tape.scaled_dot_attention(ids[0], ids[1], ids[2]).unwrap();
            weighted_sum(tape, out, ids[3])
        },
    );
}

#[test]
fn shared_subexpression_gradients_match_finite_differences() {
    // One leaf feeding three paths: the adjoints must accumulate, not
    // overwrite. Mirrors the model reusing hidden states as messages.
    fd_suite(
        SEEDS,
        |rng| {
            vec![
                rand_matrix(rng, 3, 3, 1.0),
                rand_matrix(rng, 3, 3, 1.0),
                rand_matrix(rng, 1, 3, 1.0),
                rand_matrix(rng, 3, 6, 1.0),
            ]
        },
        |tape, ids| {
            let lin = tape.matmul(ids[0], ids[1]).unwrap();
            let biased = tape.add_bias(lin, ids[2]).unwrap();
            let h = tape.relu(biased);
            let gated = tape.mul(h, ids[0]).unwrap();
            let both = tape.concat_cols(h, gated).unwrap();
            let probs = tape.softmax_rows(both);
            weighted_sum(tape, probs, ids[3])
        },
    );
}

// ── whole-model checks ───────────────────────────────────────────────────

#[test]
fn full_loss_gradients_match_finite_differences_across_random_cases() {
    let mut stats = FdStats::default();
    for seed in 0..6 {
        stats.absorb(&full_loss_fd_check(seed));
    }
    stats.assert_healthy(0.10);
}

#[test]
fn full_loss_gradients_hold_with_two_comm_steps() {
    for (seed, encoder) in [(11u64, EncoderKind::Mean), (12, EncoderKind::Attention)] {
        let env_cfg = EnvConfig::new(3, 3).unwrap();
        let model_cfg = ModelConfig::new(3, 3, encoder, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&model_cfg, &mut rng).unwrap();
        let batch = collect_batch(&env_cfg, &model_cfg, &params, 2, &mut rng).unwrap();
        let stats =
            common::check_loss_grads(&params, &batch, &model_cfg, 0.15, &FdConfig::default());
        stats.assert_healthy(0.10);
    }
}

#[test]
fn backward_is_deterministic_across_reruns() {
    let run = || {
        let env_cfg = EnvConfig::new(3, 3).unwrap();
        let model_cfg = ModelConfig::new(3, 3, EncoderKind::Attention, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = Parameters::init(&model_cfg, &mut rng).unwrap();
        let batch = collect_batch(&env_cfg, &model_cfg, &params, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = params.as_tape_leaves(&mut tape, true);
        let loss = compute_loss(&mut tape, &batch, &p, &model_cfg, 0.15).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = p
            .ordered()
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.data().to_vec()).unwrap_or_default())
            .collect();
        (tape.value(loss).scalar(), grads)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.len(), g2.len());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
