//! Shared helpers for the integration suites: random inputs, the central
//! finite-difference gradient checker, and a full-pipeline variant that
//! perturbs model parameters through the REINFORCE loss.

#![allow(dead_code)]

use commscale::env::EnvConfig;
use commscale::model::{EncoderKind, ModelConfig, Parameters};
use commscale::tape::{Tape, TensorId};
use commscale::tensor::Matrix;
use commscale::trainer::{collect_batch, compute_loss, Batch};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct FdConfig {
    /// Central difference step.
    pub epsilon: f64,
    pub rel_tol: f64,
    /// Absolute floor; FD noise for O(1) losses sits around 1e-11.
    pub abs_tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            epsilon: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Debug, Default)]
pub struct FdStats {
    pub checked: usize,
    /// Entries whose two FD stencils disagreed (a kink inside the step);
    /// the comparison there is meaningless, so they are skipped.
    pub skipped: usize,
    pub max_abs_err: f64,
}

impl FdStats {
    pub fn absorb(&mut self, other: &FdStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
    }

    /// Sanity bounds: something was checked and kinks stayed rare.
    pub fn assert_healthy(&self, max_skip_fraction: f64) {
        assert!(self.checked > 0, "gradient check touched no entries");
        let total = (self.checked + self.skipped) as f64;
        assert!(
            (self.skipped as f64) <= max_skip_fraction * total,
            "too many kink skips: {} of {}",
            self.skipped,
            total
        );
    }
}

/// Two central-difference stencils must agree before an entry counts;
/// disagreement flags a ReLU corner within the step.
fn stencils_consistent(fd: f64, fd_half: f64) -> bool {
    (fd - fd_half).abs() <= 1e-6 + 1e-3 * fd.abs().max(fd_half.abs())
}

/// Checks every entry of every input of a scalar-valued graph against
/// central finite differences. `build` must assemble the identical graph
/// from fresh leaves each call.
pub fn check_op_grads(
    inputs: &[Matrix],
    cfg: &FdConfig,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> FdStats {
    let eval = |mats: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).scalar()
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|m| tape.leaf_grad(m.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("scalar loss");
    let ad: Vec<Matrix> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, m)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut stats = FdStats::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            let mut fd_at = |h: f64| {
                work[i].data_mut()[k] = x0 + h;
                let fp = eval(&work);
                work[i].data_mut()[k] = x0 - h;
                let fm = eval(&work);
                work[i].data_mut()[k] = x0;
                (fp - fm) / (2.0 * h)
            };
            let fd = fd_at(cfg.epsilon);
            let fd_half = fd_at(cfg.epsilon / 2.0);
            if !stencils_consistent(fd, fd_half) {
                stats.skipped += 1;
                continue;
            }
            let a = ad[i].data()[k];
            let err = (a - fd).abs();
            assert!(
                err <= cfg.abs_tol + cfg.rel_tol * a.abs().max(fd.abs()),
                "input {i} entry {k}: autodiff {a} vs finite difference {fd} (err {err})"
            );
            stats.checked += 1;
            stats.max_abs_err = stats.max_abs_err.max(err);
        }
    }
    stats
}

pub fn rand_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Runs `check_op_grads` across many random draws of the same shape family.
pub fn fd_suite(
    seeds: std::ops::Range<u64>,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Matrix>,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> FdStats {
    let cfg = FdConfig::default();
    let mut stats = FdStats::default();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        stats.absorb(&check_op_grads(&inputs, &cfg, &build));
    }
    stats.assert_healthy(0.10);
    stats
}

// ── full-pipeline gradient check ─────────────────────────────────────────

pub fn loss_value(params: &Parameters, batch: &Batch, model_cfg: &ModelConfig, beta: f64) -> f64 {
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let loss = compute_loss(&mut tape, batch, &p, model_cfg, beta).unwrap();
    tape.value(loss).scalar()
}

/// Finite-difference check of every parameter entry through the complete
/// collect-free loss: forward over the batch, standardized advantages,
/// entropy term, the lot.
pub fn check_loss_grads(
    params: &Parameters,
    batch: &Batch,
    model_cfg: &ModelConfig,
    beta: f64,
    cfg: &FdConfig,
) -> FdStats {
    let mut tape = Tape::new();
    let pids = params.as_tape_leaves(&mut tape, true);
    let loss = compute_loss(&mut tape, batch, &pids, model_cfg, beta).unwrap();
    tape.backward(loss).unwrap();
    let ad: Vec<Matrix> = pids
        .ordered()
        .iter()
        .zip(params.named())
        .map(|(&id, (_, m))| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut stats = FdStats::default();
    let mut work = params.clone();
    let layout: Vec<(usize, usize)> = params.named().iter().map(|(_, m)| m.shape()).collect();
    for (mi, &(rows, cols)) in layout.iter().enumerate() {
        for k in 0..rows * cols {
            let x0 = params.named()[mi].1.data()[k];
            let mut fd_at = |h: f64| {
                work.named_mut()[mi].1.data_mut()[k] = x0 + h;
                let fp = loss_value(&work, batch, model_cfg, beta);
                work.named_mut()[mi].1.data_mut()[k] = x0 - h;
                let fm = loss_value(&work, batch, model_cfg, beta);
                work.named_mut()[mi].1.data_mut()[k] = x0;
                (fp - fm) / (2.0 * h)
            };
            let fd = fd_at(cfg.epsilon);
            let fd_half = fd_at(cfg.epsilon / 2.0);
            if !stencils_consistent(fd, fd_half) {
                stats.skipped += 1;
                continue;
            }
            let a = ad[mi].data()[k];
            let err = (a - fd).abs();
            assert!(
                err <= cfg.abs_tol + cfg.rel_tol * a.abs().max(fd.abs()),
                "{} entry {k}: autodiff {a} vs finite difference {fd} (err {err})",
                params.named()[mi].0
            );
            stats.checked += 1;
            stats.max_abs_err = stats.max_abs_err.max(err);
        }
    }
    stats
}

/// Small random problem for the full-loss check. Even seeds use the mean
/// encoder, odd ones attention; each family spans N, L, M, beta and batch.
pub fn random_loss_case(seed: u64) -> (EnvConfig, ModelConfig, Batch, Parameters, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let encoder = if seed % 2 == 0 {
        EncoderKind::Mean
    } else {
        EncoderKind::Attention
    };
    let n = rng.random_range(2..=4);
    let l = rng.random_range(2..=5);
    let m = rng.random_range(1..=4);
    let env_cfg = EnvConfig::new(n, l).unwrap();
    let model_cfg = ModelConfig::new(n, l, encoder, m, 1).unwrap();
    let beta = [0.0, 0.15, 0.44][rng.random_range(0..3)];
    let batch_size = rng.random_range(1..=3);
    let params = Parameters::init(&model_cfg, &mut rng).unwrap();
    let batch = collect_batch(&env_cfg, &model_cfg, &params, batch_size, &mut rng).unwrap();
    (env_cfg, model_cfg, batch, params, beta)
}

pub fn full_loss_fd_check(seed: u64) -> FdStats {
    let (_, model_cfg, batch, params, beta) = random_loss_case(seed);
    check_loss_grads(&params, &batch, &model_cfg, beta, &FdConfig::default())
}
