//! The matrix environment.
//!
//! Each episode draws two distinct labels out of `n_labels`, hands every
//! agent one of the two uniformly at random, and asks each agent for the
//! number of OTHER agents holding its own label. An agent only observes its
//! own label, so beating the no-communication ceiling requires the agents to
//! exchange information. Episodes are a single step.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub n_labels: usize,
}

impl EnvConfig {
    pub fn new(n_agents: usize, n_labels: usize) -> Result<Self> {
        let cfg = EnvConfig { n_agents, n_labels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 agents, got {}",
                self.n_agents
            )));
        }
        if self.n_labels < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 labels, got {}",
                self.n_labels
            )));
        }
        Ok(())
    }

    /// Correct answers range over 0..n_agents-1 occupied others; the policy
    /// head gets one output per agent index so every count fits.
    pub fn action_count(&self) -> usize {
        self.n_agents
    }
}

/// Hidden episode state: the drawn label pair and each agent's assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeState {
    /// The two distinct labels active this episode, ascending.
    pub pair: (usize, usize),
    /// Label held by each agent.
    pub labels: Vec<usize>,
}

/// What a single agent sees: its own label, one-hot over all labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub label: usize,
    pub n_labels: usize,
}

impl Observation {
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_labels];
        v[self.label] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Per-agent reward, 1.0 for an exact count and 0.0 otherwise.
    pub rewards: Vec<f64>,
    /// Mean reward over agents, in [0, 1].
    pub normalized_reward: f64,
    /// Always true: episodes are one step long.
    pub done: bool,
}

/// Draws a fresh episode. RNG call order is fixed: two draws pick the label
/// pair, then one draw per agent picks its side of the pair.
pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> (EpisodeState, Vec<Observation>) {
    let l = cfg.n_labels;
    let first = rng.random_range(0..l);
    let mut second = rng.random_range(0..l - 1);
    if second >= first {
        second += 1;
    }
    let pair = (first.min(second), first.max(second));
    let sides = [pair.0, pair.1];
    let labels: Vec<usize> = (0..cfg.n_agents)
        .map(|_| sides[rng.random_range(0..2)])
        .collect();
    let observations = labels
        .iter()
        .map(|&label| Observation {
            label,
            n_labels: l,
        })
        .collect();
    (EpisodeState { pair, labels }, observations)
}

/// Number of OTHER agents sharing each agent's label.
pub fn true_counts(state: &EpisodeState) -> Vec<usize> {
    state
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            state
                .labels
                .iter()
                .enumerate()
                .filter(|&(j, &other)| j != i && other == label)
                .count()
        })
        .collect()
}

/// Scores one action per agent against the true counts.
pub fn step(cfg: &EnvConfig, state: &EpisodeState, actions: &[usize]) -> Result<StepResult> {
    if actions.len() != cfg.n_agents {
        return Err(Error::shape(
            "step",
            format!("{} actions for {} agents", actions.len(), cfg.n_agents),
        ));
    }
    for &a in actions {
        if a >= cfg.action_count() {
            return Err(Error::ActionOutOfRange {
                action: a,
                n_agents: cfg.n_agents,
            });
        }
    }
    let counts = true_counts(state);
    let rewards: Vec<f64> = counts
        .iter()
        .zip(actions)
        .map(|(&c, &a)| if a == c { 1.0 } else { 0.0 })
        .collect();
    let normalized_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(StepResult {
        rewards,
        normalized_reward,
        done: true,
    })
}

/// Expected normalized reward of uniform random guessing: 1 / n_agents.
pub fn random_policy_reward(n_agents: usize) -> f64 {
    1.0 / n_agents as f64
}

/// Best achievable expected reward without communication.
///
/// Given its own label, an agent sees the count of same-label others as
/// Binomial(n_agents - 1, 1/2), so the best fixed answer is the mode:
/// max_k C(n-1, k) / 2^(n-1).
pub fn bayes_optimal_no_comm_reward(n_agents: usize) -> f64 {
    let n = n_agents - 1;
    let denom = 2f64.powi(n as i32);
    let mut best = 0.0f64;
    let mut binom = 1.0f64; // C(n, 0)
    for k in 0..=n {
        best = best.max(binom / denom);
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    best
}
