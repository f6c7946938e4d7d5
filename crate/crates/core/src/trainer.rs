//! REINFORCE with standardized advantages and an entropy bonus.
//!
//! Each update samples a batch of one-step episodes from the current policy,
//! standardizes the raw per-agent rewards across the whole batch, and
//! descends
//!
//!   mean over (episode, agent) of
//!     -log pi(u) * (r - mu) / (sigma + eps)  +  beta * sum_u pi(u) log pi(u)
//!
//! The entropy term (note: sum pi log pi is negative entropy, so positive
//! beta rewards exploration) keeps the policy stochastic early on, and the
//! shrinking sigma sharpens the failure signal as the batch turns mostly
//! correct, which lets runs push on toward determinism anyway.

use crate::env::{self, EnvConfig, EpisodeState, Observation};
use crate::error::{Error, Result};
use crate::model::{forward_joint_batch, ModelConfig, ParamIds, Parameters};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{Tape, TensorId};
use crate::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Guard added to sigma so all-equal reward batches stay finite.
pub const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Stored for completeness; one-step episodes never discount.
    pub discount: f64,
    /// Episodes per update.
    pub batch_size: usize,
    /// Entropy weight. See [`default_beta`] for the per-size defaults.
    pub beta: f64,
    pub total_updates: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Fraction of trailing updates scored by [`final_window_score`].
    pub eval_window_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            discount: 0.99,
            batch_size: 80,
            beta: 0.44,
            total_updates: 2500,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            eval_window_fraction: 0.10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.eval_window_fraction > 0.0 && self.eval_window_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eval window fraction must lie in (0, 1], got {}",
                self.eval_window_fraction
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "entropy weight must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Entropy weight that works well at each population size: small teams need
/// heavy exploration pressure, large teams barely any.
pub fn default_beta(n_agents: usize) -> f64 {
    match n_agents {
        0..=5 => 0.44,
        6..=11 => 0.15,
        _ => 0.01,
    }
}

/// One sampled episode with everything the loss needs to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSample {
    pub state: EpisodeState,
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    /// Raw per-agent rewards, each 0 or 1.
    pub rewards: Vec<f64>,
    pub normalized_reward: f64,
    /// Action distribution each agent sampled from.
    pub policies: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub episodes: Vec<EpisodeSample>,
}

impl Batch {
    pub fn mean_normalized_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.normalized_reward).sum::<f64>() / self.episodes.len() as f64
    }

    /// Mean policy entropy over every (episode, agent) sample, in nats.
    pub fn mean_policy_entropy(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for ep in &self.episodes {
            for pi in &ep.policies {
                total += -pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn check_configs(env_cfg: &EnvConfig, model_cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    env_cfg.validate()?;
    model_cfg.validate()?;
    if env_cfg.n_agents != model_cfg.n_agents || env_cfg.n_labels != model_cfg.n_labels {
        return Err(Error::InvalidConfig(format!(
            "environment is {}x{} but model expects {}x{}",
            env_cfg.n_agents, env_cfg.n_labels, model_cfg.n_agents, model_cfg.n_labels
        )));
    }
    let (l, m, n) = params.dims();
    if l != model_cfg.n_labels || m != model_cfg.message_size || n != model_cfg.action_count() {
        return Err(Error::InvalidConfig(format!(
            "parameter shapes imply labels {l}, message {m}, actions {n}, \
             config says {}, {}, {}",
            model_cfg.n_labels,
            model_cfg.message_size,
            model_cfg.action_count()
        )));
    }
    Ok(())
}

fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding dust can leave acc a hair under 1.
    probs.len() - 1
}

/// One-hot observation rows per agent, [batch x n_labels] each.
fn observation_blocks(
    tape: &mut Tape,
    episodes: &[(EpisodeState, Vec<Observation>)],
    cfg: &ModelConfig,
) -> Vec<TensorId> {
    (0..cfg.n_agents)
        .map(|a| {
            let mut block = Matrix::zeros(episodes.len(), cfg.n_labels);
            for (e, (_, obs)) in episodes.iter().enumerate() {
                block.set(e, obs[a].label, 1.0);
            }
            tape.leaf(block)
        })
        .collect()
}

/// Samples `batch_size` fresh episodes from the current policy.
///
/// RNG order is fixed: all episode resets first, then one action draw per
/// (episode, agent) in episode-major order. The forward pass here carries no
/// gradients; the loss recomputes it differentiably.
pub fn collect_batch<R: Rng + ?Sized>(
    env_cfg: &EnvConfig,
    model_cfg: &ModelConfig,
    params: &Parameters,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    check_configs(env_cfg, model_cfg, params)?;
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let episodes: Vec<(EpisodeState, Vec<Observation>)> =
        (0..batch_size).map(|_| env::reset(env_cfg, rng)).collect();

    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let obs_ids = observation_blocks(&mut tape, &episodes, model_cfg);
    let trace = forward_joint_batch(&mut tape, &obs_ids, &p, model_cfg)?;

    let mut out = Vec::with_capacity(batch_size);
    let mut actions = vec![vec![0usize; model_cfg.n_agents]; batch_size];
    for (e, row) in actions.iter_mut().enumerate() {
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = sample_categorical(rng, tape.value(trace.policies[a]).row(e));
        }
    }
    for (e, (state, observations)) in episodes.into_iter().enumerate() {
        let result = env::step(env_cfg, &state, &actions[e])?;
        let policies = (0..model_cfg.n_agents)
            .map(|a| tape.value(trace.policies[a]).row(e).to_vec())
            .collect();
        out.push(EpisodeSample {
            state,
            observations,
            actions: actions[e].clone(),
            rewards: result.rewards,
            normalized_reward: result.normalized_reward,
            policies,
        });
    }
    Ok(Batch { episodes: out })
}

/// Standardizes every per-agent reward against the whole batch. Returns the
/// advantages per (episode, agent) plus the batch mean and population std.
pub fn standardize_rewards(batch: &Batch) -> Result<(Vec<Vec<f64>>, f64, f64)> {
    if batch.episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut all = Vec::new();
    for ep in &batch.episodes {
        all.extend_from_slice(&ep.rewards);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = batch
        .episodes
        .iter()
        .map(|ep| ep.rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
        .collect();
    Ok((advantages, mean, std))
}

/// Builds the scalar loss on `tape`, recomputing every policy
/// differentiably from the stored observations and actions.
pub fn compute_loss(
    tape: &mut Tape,
    batch: &Batch,
    p: &ParamIds,
    model_cfg: &ModelConfig,
    beta: f64,
) -> Result<TensorId> {
    let b = batch.episodes.len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = model_cfg.n_agents;
    for ep in &batch.episodes {
        if ep.actions.len() != n || ep.rewards.len() != n || ep.observations.len() != n {
            return Err(Error::shape(
                "compute_loss",
                format!("episode holds {} agents, config says {n}", ep.actions.len()),
            ));
        }
        for &a in &ep.actions {
            if a >= model_cfg.action_count() {
                return Err(Error::ActionOutOfRange {
                    action: a,
                    n_agents: n,
                });
            }
        }
    }
    let (advantages, _, _) = standardize_rewards(batch)?;

    let episodes: Vec<(EpisodeState, Vec<Observation>)> = batch
        .episodes
        .iter()
        .map(|ep| (ep.state.clone(), ep.observations.clone()))
        .collect();
    let obs_ids = observation_blocks(tape, &episodes, model_cfg);
    let trace = forward_joint_batch(tape, &obs_ids, p, model_cfg)?;

    let mut total: Option<TensorId> = None;
    for a in 0..n {
        let lsm = tape.log_softmax_rows(trace.logits[a]);
        let mut mask = Matrix::zeros(b, model_cfg.action_count());
        let mut adv = Matrix::zeros(b, 1);
        for (e, ep) in batch.episodes.iter().enumerate() {
            mask.set(e, ep.actions[a], 1.0);
            adv.set(e, 0, advantages[e][a]);
        }
        let mask = tape.leaf(mask);
        let adv = tape.leaf(adv);
        // -log pi(chosen) * advantage, one row per episode.
        let chosen = tape.mul(lsm, mask)?;
        let log_chosen = tape.row_sum(chosen);
        let pg = tape.mul(log_chosen, adv)?;
        let neg_pg = tape.scale(pg, -1.0);
        // beta * sum_u pi(u) log pi(u); exp(lsm) keeps 0 * -inf out.
        let pi = tape.exp(lsm);
        let plogp = tape.mul(pi, lsm)?;
        let neg_entropy = tape.row_sum(plogp);
        let weighted = tape.scale(neg_entropy, beta);
        let term = tape.add(neg_pg, weighted)?;
        let summed = tape.sum_all(term);
        total = Some(match total {
            Some(t) => tape.add(t, summed)?,
            None => summed,
        });
    }
    let total = total.expect("n_agents >= 2");
    Ok(tape.scale(total, 1.0 / (b * n) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub update: usize,
    /// Episodes consumed up to and including this update.
    pub episodes: usize,
    pub mean_norm_reward: f64,
    pub policy_entropy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricHistory {
    records: Vec<MetricRecord>,
}

pub const METRICS_HEADER: &str =
    "run_id,seed,update,episodes,mean_norm_reward,policy_entropy,loss";

impl MetricHistory {
    pub fn new() -> Self {
        MetricHistory::default()
    }

    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, run_id: &str, seed: u64) -> std::io::Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{run_id},{seed},{},{},{:.6},{:.6},{:.6}",
                r.update, r.episodes, r.mean_norm_reward, r.policy_entropy, r.loss
            )?;
        }
        Ok(())
    }

    /// Parses CSV produced by [`MetricHistory::write_csv`], dropping the
    /// run_id and seed columns.
    pub fn from_csv_str(text: &str) -> Result<MetricHistory> {
        let mut lines = text.lines();
        match lines.next() {
            Some(header) if header.trim() == METRICS_HEADER => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "bad metrics header: {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::InvalidConfig(format!(
                    "metrics row {} has {} fields",
                    i + 2,
                    fields.len()
                )));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad number {s:?} in metrics row")))
            };
            let parse_u = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad index {s:?} in metrics row")))
            };
            records.push(MetricRecord {
                update: parse_u(fields[2])?,
                episodes: parse_u(fields[3])?,
                mean_norm_reward: parse_f(fields[4])?,
                policy_entropy: parse_f(fields[5])?,
                loss: parse_f(fields[6])?,
            });
        }
        Ok(MetricHistory { records })
    }
}

pub struct TrainResult {
    pub params: Parameters,
    pub history: MetricHistory,
}

/// Full training loop: collect, standardize, differentiate, step.
/// Reproducible to the bit from (configs, seed).
pub fn train(
    env_cfg: &EnvConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Parameters::init(model_cfg, &mut rng)?;
    check_configs(env_cfg, model_cfg, &params)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = MetricHistory::new();

    for update in 0..cfg.total_updates {
        let batch = collect_batch(env_cfg, model_cfg, &params, cfg.batch_size, &mut rng)?;
        let mean_norm_reward = batch.mean_normalized_reward();
        let policy_entropy = batch.mean_policy_entropy();

        let mut tape = Tape::new();
        let p = params.as_tape_leaves(&mut tape, true);
        let loss_id = compute_loss(&mut tape, &batch, &p, model_cfg, cfg.beta)?;
        tape.backward(loss_id)?;
        let loss = tape.value(loss_id).scalar();

        // Dead-ReLU corners can leave a parameter untouched; zero is the
        // correct gradient there.
        let grads: Vec<Matrix> = p
            .ordered()
            .iter()
            .zip(params.named())
            .map(|(&id, (_, m))| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
            })
            .collect();
        let grad_refs: Vec<&Matrix> = grads.iter().collect();
        let mut param_refs: Vec<&mut Matrix> =
            params.named_mut().into_iter().map(|(_, m)| m).collect();
        opt.step(&mut param_refs, &grad_refs)?;

        history.push(MetricRecord {
            update,
            episodes: (update + 1) * cfg.batch_size,
            mean_norm_reward,
            policy_entropy,
            loss,
        });
    }
    Ok(TrainResult { params, history })
}

/// Mean and population std of the normalized reward over the trailing
/// ceil(fraction * len) updates.
pub fn final_window_score(history: &MetricHistory, fraction: f64) -> Result<(f64, f64)> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "window fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let len = history.len();
    let window = ((len as f64 * fraction).ceil() as usize).clamp(1, len);
    let tail = &history.records()[len - window..];
    let mean = tail.iter().map(|r| r.mean_norm_reward).sum::<f64>() / window as f64;
    let var = tail
        .iter()
        .map(|r| (r.mean_norm_reward - mean).powi(2))
        .sum::<f64>()
        / window as f64;
    Ok((mean, var.sqrt()))
}
