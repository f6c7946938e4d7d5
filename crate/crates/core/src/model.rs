//! The communicating policy network.
//!
//! Every agent runs the same weights. An episode is: encode the one-hot
//! observation into a hidden state, run a fixed number of communication
//! steps in which each agent aggregates the OTHER agents' hidden states into
//! an incoming message and updates its own state, then decode the final
//! state into a distribution over count answers. Hidden states double as the
//! outgoing messages, so the whole exchange stays differentiable and the
//! communication protocol is learned, not designed.
//!
//! Aggregation is pluggable: `mean` averages the other agents' states,
//! `attention` scores them against a query built from the agent's own state
//! and observation, and `none` skips communication entirely (the ablation
//! baseline).

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mean,
    Attention,
    None,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EncoderKind::Mean => "mean",
            EncoderKind::Attention => "attention",
            EncoderKind::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EncoderKind::Mean),
            "attention" => Ok(EncoderKind::Attention),
            "none" => Ok(EncoderKind::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown encoder {other:?}, expected mean, attention or none"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub n_labels: usize,
    /// Hidden state width M; also the message width.
    pub message_size: usize,
    /// Communication rounds between encoding and decoding.
    pub n_comm_steps: usize,
    pub encoder: EncoderKind,
}

impl ModelConfig {
    pub fn new(
        n_agents: usize,
        n_labels: usize,
        encoder: EncoderKind,
        message_size: usize,
        n_comm_steps: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            n_agents,
            n_labels,
            message_size,
            n_comm_steps,
            encoder,
        };
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
        if self.message_size == 0 {
            return Err(Error::InvalidConfig("message size must be positive".into()));
        }
        // No-communication runs are exactly the zero-step pipeline, and
        // communicating encoders need at least one step to matter.
        match self.encoder {
            EncoderKind::None if self.n_comm_steps != 0 => Err(Error::InvalidConfig(format!(
                "encoder none requires 0 comm steps, got {}",
                self.n_comm_steps
            ))),
            EncoderKind::Mean | EncoderKind::Attention if self.n_comm_steps == 0 => Err(
                Error::InvalidConfig(format!("encoder {} requires at least 1 comm step", self.encoder)),
            ),
            _ => Ok(()),
        }
    }

    /// One output logit per possible count answer.
    pub fn action_count(&self) -> usize {
        self.n_agents
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommParams {
    /// [2M x M]: acts on the concatenation (own state, incoming message).
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// [(M + L) x M]: the query sees the agent's state and its observation.
    pub query_w: Matrix,
    pub query_b: Matrix,
    pub key_w: Matrix,
    pub key_b: Matrix,
    pub value_w: Matrix,
    pub value_b: Matrix,
}

/// All trainable weights, shared by every agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// [L x M] observation encoder.
    pub enc_w: Matrix,
    pub enc_b: Matrix,
    /// [M x N] decoder to count logits.
    pub dec_w: Matrix,
    pub dec_b: Matrix,
    /// Present whenever communication runs (mean or attention).
    pub comm: Option<CommParams>,
    /// Present only for the attention encoder.
    pub attention: Option<AttentionParams>,
}

/// Canonical name order used everywhere parameters are enumerated: init
/// draws, gradient gathering, optimizer slots and checkpoint layout.
fn layer_fan_in(name: &str, cfg: &ModelConfig) -> usize {
    let (m, l) = (cfg.message_size, cfg.n_labels);
    match name {
        "enc_w" | "enc_b" => l,
        "comm_w" | "comm_b" => 2 * m,
        "dec_w" | "dec_b" => m,
        "query_w" | "query_b" => m + l,
        "key_w" | "key_b" | "value_w" | "value_b" => m,
        other => unreachable!("unknown parameter {other}"),
    }
}

impl Parameters {
    /// Zero weights with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Parameters> {
        cfg.validate()?;
        let (n, l, m) = (cfg.n_agents, cfg.n_labels, cfg.message_size);
        let comm = (cfg.encoder != EncoderKind::None).then(|| CommParams {
            w: Matrix::zeros(2 * m, m),
            b: Matrix::zeros(1, m),
        });
        let attention = (cfg.encoder == EncoderKind::Attention).then(|| AttentionParams {
            query_w: Matrix::zeros(m + l, m),
            query_b: Matrix::zeros(1, m),
            key_w: Matrix::zeros(m, m),
            key_b: Matrix::zeros(1, m),
            value_w: Matrix::zeros(m, m),
            value_b: Matrix::zeros(1, m),
        });
        Ok(Parameters {
            enc_w: Matrix::zeros(l, m),
            enc_b: Matrix::zeros(1, m),
            dec_w: Matrix::zeros(m, n),
            dec_b: Matrix::zeros(1, n),
            comm,
            attention,
        })
    }

    /// Uniform init in +-1/sqrt(fan_in) per layer, biases included.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Parameters> {
        let mut p = Parameters::zeros(cfg)?;
        for (name, mat) in p.named_mut() {
            let bound = 1.0 / (layer_fan_in(name, cfg) as f64).sqrt();
            for x in mat.data_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    /// Parameters in canonical (lexicographic) name order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = Vec::new();
        if let Some(c) = &self.comm {
            out.push(("comm_b", &c.b));
            out.push(("comm_w", &c.w));
        }
        out.push(("dec_b", &self.dec_b));
        out.push(("dec_w", &self.dec_w));
        out.push(("enc_b", &self.enc_b));
        out.push(("enc_w", &self.enc_w));
        if let Some(a) = &self.attention {
            out.push(("key_b", &a.key_b));
            out.push(("key_w", &a.key_w));
            out.push(("query_b", &a.query_b));
            out.push(("query_w", &a.query_w));
            out.push(("value_b", &a.value_b));
            out.push(("value_w", &a.value_w));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out: Vec<(&'static str, &mut Matrix)> = Vec::new();
        if let Some(c) = &mut self.comm {
            out.push(("comm_b", &mut c.b));
            out.push(("comm_w", &mut c.w));
        }
        out.push(("dec_b", &mut self.dec_b));
        out.push(("dec_w", &mut self.dec_w));
        out.push(("enc_b", &mut self.enc_b));
        out.push(("enc_w", &mut self.enc_w));
        if let Some(a) = &mut self.attention {
            out.push(("key_b", &mut a.key_b));
            out.push(("key_w", &mut a.key_w));
            out.push(("query_b", &mut a.query_b));
            out.push(("query_w", &mut a.query_w));
            out.push(("value_b", &mut a.value_b));
            out.push(("value_w", &mut a.value_w));
        }
        out
    }

    /// Registers every parameter on a tape, in canonical order.
    pub fn as_tape_leaves(&self, tape: &mut Tape, requires_grad: bool) -> ParamIds {
        let mut order = Vec::new();
        let mut by_name: BTreeMap<&'static str, TensorId> = BTreeMap::new();
        for (name, mat) in self.named() {
            let id = if requires_grad {
                tape.leaf_grad(mat.clone())
            } else {
                tape.leaf(mat.clone())
            };
            order.push(id);
            by_name.insert(name, id);
        }
        let comm = self
            .comm
            .as_ref()
            .map(|_| (by_name["comm_w"], by_name["comm_b"]));
        let attention = self.attention.as_ref().map(|_| AttentionIds {
            query_w: by_name["query_w"],
            query_b: by_name["query_b"],
            key_w: by_name["key_w"],
            key_b: by_name["key_b"],
            value_w: by_name["value_w"],
            value_b: by_name["value_b"],
        });
        ParamIds {
            enc_w: by_name["enc_w"],
            enc_b: by_name["enc_b"],
            dec_w: by_name["dec_w"],
            dec_b: by_name["dec_b"],
            comm,
            attention,
            order,
        }
    }

    /// (n_labels, message_size, n_actions) implied by the stored shapes.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.enc_w.rows(), self.enc_w.cols(), self.dec_w.cols())
    }

    // ── checkpoints ──────────────────────────────────────────────────────

    pub fn to_checkpoint_json(&self) -> String {
        let map: BTreeMap<&str, ArrayEntry> = self
            .named()
            .into_iter()
            .map(|(name, m)| {
                (
                    name,
                    ArrayEntry {
                        shape: [m.rows(), m.cols()],
                        values: m.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("parameter maps always serialize")
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Parameters> {
        let map: BTreeMap<String, ArrayEntry> = serde_json::from_str(text)?;
        let known = [
            "comm_b", "comm_w", "dec_b", "dec_w", "enc_b", "enc_w", "key_b", "key_w", "query_b",
            "query_w", "value_b", "value_w",
        ];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::MalformedCheckpoint(format!("unknown key {key:?}")));
            }
        }
        let fetch = |name: &str| -> Result<Matrix> {
            let entry = map
                .get(name)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing key {name:?}")))?;
            Matrix::from_vec(entry.shape[0], entry.shape[1], entry.values.clone()).map_err(|_| {
                Error::MalformedCheckpoint(format!(
                    "{name:?}: {} values do not fill shape {:?}",
                    entry.values.len(),
                    entry.shape
                ))
            })
        };

        let enc_w = fetch("enc_w")?;
        let enc_b = fetch("enc_b")?;
        let dec_w = fetch("dec_w")?;
        let dec_b = fetch("dec_b")?;
        let (l, m) = (enc_w.rows(), enc_w.cols());
        let n = dec_w.cols();

        let comm_keys = map.contains_key("comm_w") as usize + map.contains_key("comm_b") as usize;
        let comm = match comm_keys {
            0 => None,
            2 => Some(CommParams {
                w: fetch("comm_w")?,
                b: fetch("comm_b")?,
            }),
            _ => {
                return Err(Error::MalformedCheckpoint(
                    "comm_w and comm_b must appear together".into(),
                ))
            }
        };
        let attn_names = ["key_b", "key_w", "query_b", "query_w", "value_b", "value_w"];
        let attn_keys = attn_names.iter().filter(|k| map.contains_key(**k)).count();
        let attention = match attn_keys {
            0 => None,
            6 => Some(AttentionParams {
                query_w: fetch("query_w")?,
                query_b: fetch("query_b")?,
                key_w: fetch("key_w")?,
                key_b: fetch("key_b")?,
                value_w: fetch("value_w")?,
                value_b: fetch("value_b")?,
            }),
            _ => {
                return Err(Error::MalformedCheckpoint(
                    "attention parameters must appear as a complete group".into(),
                ))
            }
        };
        if attention.is_some() && comm.is_none() {
            return Err(Error::MalformedCheckpoint(
                "attention parameters without comm parameters".into(),
            ));
        }

        let p = Parameters {
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            comm,
            attention,
        };
        // Cross-check every shape against (l, m, n).
        let expect: &[(&str, Option<(usize, usize)>, (usize, usize))] = &[
            ("enc_b", Some(p.enc_b.shape()), (1, m)),
            ("dec_w", Some(p.dec_w.shape()), (m, n)),
            ("dec_b", Some(p.dec_b.shape()), (1, n)),
            ("comm_w", p.comm.as_ref().map(|c| c.w.shape()), (2 * m, m)),
            ("comm_b", p.comm.as_ref().map(|c| c.b.shape()), (1, m)),
            (
                "query_w",
                p.attention.as_ref().map(|a| a.query_w.shape()),
                (m + l, m),
            ),
            (
                "query_b",
                p.attention.as_ref().map(|a| a.query_b.shape()),
                (1, m),
            ),
            ("key_w", p.attention.as_ref().map(|a| a.key_w.shape()), (m, m)),
            ("key_b", p.attention.as_ref().map(|a| a.key_b.shape()), (1, m)),
            (
                "value_w",
                p.attention.as_ref().map(|a| a.value_w.shape()),
                (m, m),
            ),
            (
                "value_b",
                p.attention.as_ref().map(|a| a.value_b.shape()),
                (1, m),
            ),
        ];
        for (name, got, want) in expect {
            if let Some(got) = got {
                if got != want {
                    return Err(Error::MalformedCheckpoint(format!(
                        "{name}: shape {got:?} does not match expected {want:?}"
                    )));
                }
            }
        }
        if l < 2 || n < 2 || m == 0 {
            return Err(Error::MalformedCheckpoint(format!(
                "implied dimensions are degenerate: labels {l}, message {m}, actions {n}"
            )));
        }
        Ok(p)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Parameters> {
        let text = std::fs::read_to_string(path)?;
        Parameters::from_checkpoint_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    shape: [usize; 2],
    values: Vec<f64>,
}

/// Tape handles for one registration of [`Parameters`].
pub struct ParamIds {
    pub enc_w: TensorId,
    pub enc_b: TensorId,
    pub dec_w: TensorId,
    pub dec_b: TensorId,
    pub comm: Option<(TensorId, TensorId)>,
    pub attention: Option<AttentionIds>,
    order: Vec<TensorId>,
}

#[derive(Clone, Copy)]
pub struct AttentionIds {
    pub query_w: TensorId,
    pub query_b: TensorId,
    pub key_w: TensorId,
    pub key_b: TensorId,
    pub value_w: TensorId,
    pub value_b: TensorId,
}

impl ParamIds {
    /// Ids in the same canonical order as [`Parameters::named`].
    pub fn ordered(&self) -> &[TensorId] {
        &self.order
    }
}

fn linear_t(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}

/// h = relu(obs W_enc + b_enc). Works on any batch of one-hot rows.
pub fn encode_obs_t(tape: &mut Tape, obs: TensorId, p: &ParamIds) -> Result<TensorId> {
    let z = linear_t(tape, obs, p.enc_w, p.enc_b)?;
    Ok(tape.relu(z))
}

/// Mean of the other agents' states: (sum_b h_b - h_agent) / (N - 1).
pub fn mean_encode_t(tape: &mut Tape, messages: &[TensorId], agent: usize) -> Result<TensorId> {
    let n = messages.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "mean encoding needs at least 2 agents, got {n}"
        )));
    }
    if agent >= n {
        return Err(Error::InvalidConfig(format!(
            "agent index {agent} out of range for {n} agents"
        )));
    }
    let mut total = messages[0];
    for &m in &messages[1..] {
        total = tape.add(total, m)?;
    }
    let others = tape.sub(total, messages[agent])?;
    Ok(tape.scale(others, 1.0 / (n - 1) as f64))
}

fn attention_ids(p: &ParamIds) -> Result<AttentionIds> {
    p.attention.ok_or_else(|| {
        Error::InvalidConfig("attention encoding requested without attention parameters".into())
    })
}

/// Query vector from the agent's own state and observation.
pub fn attention_query_t(
    tape: &mut Tape,
    h_agent: TensorId,
    obs_agent: TensorId,
    p: &ParamIds,
) -> Result<TensorId> {
    let attn = attention_ids(p)?;
    let cat = tape.concat_cols(h_agent, obs_agent)?;
    linear_t(tape, cat, attn.query_w, attn.query_b)
}

/// Single-episode attention over the other agents' messages: stacks their
/// states into K and V matrices and applies scaled dot-product attention.
/// Message rows must be single episodes ([1 x M]); batches go through
/// [`attention_encode_batch_t`].
pub fn attention_encode_t(
    tape: &mut Tape,
    messages: &[TensorId],
    obs_agent: TensorId,
    agent: usize,
    p: &ParamIds,
) -> Result<TensorId> {
    let attn = attention_ids(p)?;
    let n = messages.len();
    if n < 2 {
        return Err(Error::NoIncomingMessages);
    }
    if agent >= n {
        return Err(Error::InvalidConfig(format!(
            "agent index {agent} out of range for {n} agents"
        )));
    }
    for &m in messages {
        let rows = tape.value(m).rows();
        if rows != 1 {
            return Err(Error::shape(
                "attention_encode",
                format!("expected single-episode rows, got {rows}"),
            ));
        }
    }
    let q = attention_query_t(tape, messages[agent], obs_agent, p)?;
    let mut stacked: Option<TensorId> = None;
    for (b, &h) in messages.iter().enumerate() {
        if b == agent {
            continue;
        }
        stacked = Some(match stacked {
            Some(s) => tape.concat_rows(s, h)?,
            None => h,
        });
    }
    let others = stacked.expect("n >= 2 guarantees at least one other agent");
    let k = linear_t(tape, others, attn.key_w, attn.key_b)?;
    let v = linear_t(tape, others, attn.value_w, attn.value_b)?;
    tape.scaled_dot_attention(q, k, v)
}

/// Key and value projections of every agent's current message, shared by all
/// queries within one communication step.
pub fn attention_projections(
    tape: &mut Tape,
    messages: &[TensorId],
    p: &ParamIds,
) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
    let attn = attention_ids(p)?;
    let mut keys = Vec::with_capacity(messages.len());
    let mut values = Vec::with_capacity(messages.len());
    for &m in messages {
        keys.push(linear_t(tape, m, attn.key_w, attn.key_b)?);
        values.push(linear_t(tape, m, attn.value_w, attn.value_b)?);
    }
    Ok((keys, values))
}

/// Batched attention: per-episode dot products against each other agent's
/// key, one softmax row per episode, then a weighted sum of value rows.
/// Algebraically identical to [`attention_encode_t`] applied episode by
/// episode.
pub fn attention_encode_batch_t(
    tape: &mut Tape,
    messages: &[TensorId],
    obs_agent: TensorId,
    agent: usize,
    keys: &[TensorId],
    values: &[TensorId],
    p: &ParamIds,
) -> Result<TensorId> {
    let n = messages.len();
    if n < 2 {
        return Err(Error::NoIncomingMessages);
    }
    let d_k = tape.value(messages[0]).cols();
    let q = attention_query_t(tape, messages[agent], obs_agent, p)?;
    let mut score_cat: Option<TensorId> = None;
    let mut others = Vec::with_capacity(n - 1);
    for b in 0..n {
        if b == agent {
            continue;
        }
        others.push(b);
        let qk = tape.mul(q, keys[b])?;
        let s = tape.row_sum(qk);
        score_cat = Some(match score_cat {
            Some(sc) => tape.concat_cols(sc, s)?,
            None => s,
        });
    }
    let raw = score_cat.expect("n >= 2 guarantees at least one other agent");
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let mut out: Option<TensorId> = None;
    for (idx, &b) in others.iter().enumerate() {
        let w_col = tape.slice_cols(weights, idx, idx + 1)?;
        let contrib = tape.mul_col(values[b], w_col)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    Ok(out.expect("n >= 2 guarantees at least one contribution"))
}

/// h' = relu([h, c] W_comm + b_comm).
pub fn comm_step_t(tape: &mut Tape, h: TensorId, c: TensorId, p: &ParamIds) -> Result<TensorId> {
    let (w, b) = p.comm.ok_or_else(|| {
        Error::InvalidConfig("communication step requested without comm parameters".into())
    })?;
    let cat = tape.concat_cols(h, c)?;
    let z = linear_t(tape, cat, w, b)?;
    Ok(tape.relu(z))
}

/// Count logits and their softmax.
pub fn decode_t(tape: &mut Tape, h: TensorId, p: &ParamIds) -> Result<(TensorId, TensorId)> {
    let logits = linear_t(tape, h, p.dec_w, p.dec_b)?;
    let pi = tape.softmax_rows(logits);
    Ok((logits, pi))
}

/// Everything the joint forward pass produced, as tape ids.
pub struct JointForwardTrace {
    /// hidden[s][a]: agent a's state after s communication steps. Index 0
    /// holds the encodings, index n_comm_steps the decoder inputs.
    pub hidden: Vec<Vec<TensorId>>,
    /// comm[s][a]: the aggregated incoming message consumed at step s.
    pub comm: Vec<Vec<TensorId>>,
    /// Per-agent count logits, [B x N] each.
    pub logits: Vec<TensorId>,
    /// Per-agent action distributions, [B x N] each.
    pub policies: Vec<TensorId>,
}

/// Runs the full pipeline for all agents over a batch of episodes.
/// `observations[a]` holds agent a's one-hot rows, [B x L].
pub fn forward_joint_batch(
    tape: &mut Tape,
    observations: &[TensorId],
    p: &ParamIds,
    cfg: &ModelConfig,
) -> Result<JointForwardTrace> {
    cfg.validate()?;
    if observations.len() != cfg.n_agents {
        return Err(Error::shape(
            "forward_joint",
            format!(
                "{} observation blocks for {} agents",
                observations.len(),
                cfg.n_agents
            ),
        ));
    }
    let batch = tape.value(observations[0]).rows();
    for &o in observations {
        let shape = tape.value(o).shape();
        if shape != (batch, cfg.n_labels) {
            return Err(Error::shape(
                "forward_joint",
                format!("observation block {shape:?}, expected ({batch}, {})", cfg.n_labels),
            ));
        }
    }

    let mut h: Vec<TensorId> = observations
        .iter()
        .map(|&o| encode_obs_t(tape, o, p))
        .collect::<Result<_>>()?;
    let mut hidden = vec![h.clone()];
    let mut comm = Vec::with_capacity(cfg.n_comm_steps);
    for _ in 0..cfg.n_comm_steps {
        let c: Vec<TensorId> = match cfg.encoder {
            EncoderKind::Mean => (0..cfg.n_agents)
                .map(|a| mean_encode_t(tape, &h, a))
                .collect::<Result<_>>()?,
            EncoderKind::Attention => {
                let (keys, values) = attention_projections(tape, &h, p)?;
                (0..cfg.n_agents)
                    .map(|a| {
                        attention_encode_batch_t(tape, &h, observations[a], a, &keys, &values, p)
                    })
                    .collect::<Result<_>>()?
            }
            // validate() rules this out: encoder none has zero comm steps.
            EncoderKind::None => unreachable!("no comm steps for encoder none"),
        };
        let next: Vec<TensorId> = h
            .iter()
            .zip(&c)
            .map(|(&ha, &ca)| comm_step_t(tape, ha, ca, p))
            .collect::<Result<_>>()?;
        comm.push(c);
        h = next;
        hidden.push(h.clone());
    }

    let mut logits = Vec::with_capacity(cfg.n_agents);
    let mut policies = Vec::with_capacity(cfg.n_agents);
    for &ha in &h {
        let (lg, pi) = decode_t(tape, ha, p)?;
        logits.push(lg);
        policies.push(pi);
    }
    Ok(JointForwardTrace {
        hidden,
        comm,
        logits,
        policies,
    })
}

// ── value-level wrappers ─────────────────────────────────────────────────
//
// Convenience entry points that run a private tape without gradients and
// hand back plain vectors. Training and gradient checks use the tape-level
// functions above.

fn check_message_width(params: &Parameters, width: usize, what: &str) -> Result<()> {
    let (_, m, _) = params.dims();
    if width != m {
        return Err(Error::shape(
            "model",
            format!("{what} has width {width}, expected message size {m}"),
        ));
    }
    Ok(())
}

fn obs_leaf(tape: &mut Tape, obs: &Observation, params: &Parameters) -> Result<TensorId> {
    let (l, _, _) = params.dims();
    if obs.n_labels != l {
        return Err(Error::shape(
            "model",
            format!("observation over {} labels, model expects {l}", obs.n_labels),
        ));
    }
    Ok(tape.leaf(Matrix::row_vector(&obs.one_hot())))
}

pub fn encode_obs(obs: &Observation, params: &Parameters) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let o = obs_leaf(&mut tape, obs, params)?;
    let h = encode_obs_t(&mut tape, o, &p)?;
    Ok(tape.value(h).row(0).to_vec())
}

/// Mean of all messages except `messages[agent]`. Pure arithmetic; no
/// parameters involved.
pub fn mean_encode(messages: &[Vec<f64>], agent: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = messages
        .iter()
        .map(|m| tape.leaf(Matrix::row_vector(m)))
        .collect();
    let c = mean_encode_t(&mut tape, &ids, agent)?;
    Ok(tape.value(c).row(0).to_vec())
}

pub fn attention_encode(
    messages: &[Vec<f64>],
    obs: &Observation,
    agent: usize,
    params: &Parameters,
) -> Result<Vec<f64>> {
    for m in messages {
        check_message_width(params, m.len(), "message")?;
    }
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let ids: Vec<TensorId> = messages
        .iter()
        .map(|m| tape.leaf(Matrix::row_vector(m)))
        .collect();
    let o = obs_leaf(&mut tape, obs, params)?;
    let c = attention_encode_t(&mut tape, &ids, o, agent, &p)?;
    Ok(tape.value(c).row(0).to_vec())
}

pub fn comm_step(h: &[f64], c: &[f64], params: &Parameters) -> Result<Vec<f64>> {
    check_message_width(params, h.len(), "hidden state")?;
    check_message_width(params, c.len(), "incoming message")?;
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let h_id = tape.leaf(Matrix::row_vector(h));
    let c_id = tape.leaf(Matrix::row_vector(c));
    let out = comm_step_t(&mut tape, h_id, c_id, &p)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Action distribution for one hidden state.
pub fn decode(h: &[f64], params: &Parameters) -> Result<Vec<f64>> {
    check_message_width(params, h.len(), "hidden state")?;
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let h_id = tape.leaf(Matrix::row_vector(h));
    let (_, pi) = decode_t(&mut tape, h_id, &p)?;
    Ok(tape.value(pi).row(0).to_vec())
}

/// Plain-value forward pass for a single episode.
pub struct JointForwardValues {
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub comm: Vec<Vec<Vec<f64>>>,
    pub policies: Vec<Vec<f64>>,
}

pub fn forward_joint(
    observations: &[Observation],
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<JointForwardValues> {
    let mut tape = Tape::new();
    let p = params.as_tape_leaves(&mut tape, false);
    let obs_ids: Vec<TensorId> = observations
        .iter()
        .map(|o| obs_leaf(&mut tape, o, params))
        .collect::<Result<_>>()?;
    let trace = forward_joint_batch(&mut tape, &obs_ids, &p, cfg)?;
    let row = |id: TensorId| tape.value(id).row(0).to_vec();
    Ok(JointForwardValues {
        hidden: trace
            .hidden
            .iter()
            .map(|step| step.iter().map(|&id| row(id)).collect())
            .collect(),
        comm: trace
            .comm
            .iter()
            .map(|step| step.iter().map(|&id| row(id)).collect())
            .collect(),
        policies: trace.policies.iter().map(|&id| row(id)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_cfg(n: usize, l: usize, m: usize) -> ModelConfig {
        ModelConfig::new(n, l, EncoderKind::Mean, m, 1).unwrap()
    }

    #[test]
    fn config_ties_comm_steps_to_encoder() {
        assert!(ModelConfig::new(3, 3, EncoderKind::None, 16, 0).is_ok());
        assert!(ModelConfig::new(3, 3, EncoderKind::None, 16, 1).is_err());
        assert!(ModelConfig::new(3, 3, EncoderKind::Mean, 16, 0).is_err());
        assert!(ModelConfig::new(3, 3, EncoderKind::Attention, 16, 2).is_ok());
        assert!(ModelConfig::new(3, 3, EncoderKind::Mean, 0, 1).is_err());
        assert!(ModelConfig::new(1, 3, EncoderKind::Mean, 16, 1).is_err());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let cfg = ModelConfig::new(4, 9, EncoderKind::Attention, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        for (name, mat) in p.named() {
            let bound = 1.0 / (layer_fan_in(name, &cfg) as f64).sqrt();
            assert!(
                mat.data().iter().all(|x| x.abs() < bound),
                "{name} exceeds bound {bound}"
            );
            assert!(mat.data().iter().any(|&x| x != 0.0), "{name} all zero");
        }
        // Same seed, same draw.
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(p, Parameters::init(&cfg, &mut rng2).unwrap());
    }

    #[test]
    fn zero_decoder_gives_uniform_policy() {
        let cfg = mean_cfg(3, 3, 16);
        let p = Parameters::zeros(&cfg).unwrap();
        let pi = decode(&vec![0.4; 16], &p).unwrap();
        for v in pi {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_encode_excludes_self() {
        let msgs = vec![vec![1.0, 10.0], vec![2.0, 20.0], vec![6.0, 30.0]];
        assert_eq!(mean_encode(&msgs, 0).unwrap(), vec![4.0, 25.0]);
        assert_eq!(mean_encode(&msgs, 2).unwrap(), vec![1.5, 15.0]);
        assert!(mean_encode(&msgs[..1], 0).is_err());
        assert!(mean_encode(&msgs, 3).is_err());
    }

    #[test]
    fn hand_computed_two_agent_pipeline() {
        // N = 2, L = 2, M = 1, mean encoder, one step. Every number below
        // is worked out by hand from the layer definitions.
        let cfg = mean_cfg(2, 2, 1);
        let mut p = Parameters::zeros(&cfg).unwrap();
        p.enc_w = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        p.enc_b = Matrix::row_vector(&[0.5]);
        let comm = p.comm.as_mut().unwrap();
        comm.w = Matrix::from_vec(2, 1, vec![0.3, 0.7]).unwrap();
        comm.b = Matrix::row_vector(&[-0.1]);
        p.dec_w = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        p.dec_b = Matrix::row_vector(&[0.0, 0.2]);

        let obs = vec![
            Observation { label: 0, n_labels: 2 },
            Observation { label: 1, n_labels: 2 },
        ];
        let out = forward_joint(&obs, &p, &cfg).unwrap();

        // Encodings: relu(1 + 0.5) = 1.5 and relu(2 + 0.5) = 2.5.
        assert!((out.hidden[0][0][0] - 1.5).abs() < 1e-15);
        assert!((out.hidden[0][1][0] - 2.5).abs() < 1e-15);
        // Each agent's incoming message is the other's state.
        assert!((out.comm[0][0][0] - 2.5).abs() < 1e-15);
        assert!((out.comm[0][1][0] - 1.5).abs() < 1e-15);
        // Updates: relu(0.3 * 1.5 + 0.7 * 2.5 - 0.1) = 2.1 and
        // relu(0.3 * 2.5 + 0.7 * 1.5 - 0.1) = 1.7.
        assert!((out.hidden[1][0][0] - 2.1).abs() < 1e-12);
        assert!((out.hidden[1][1][0] - 1.7).abs() < 1e-12);
        // Logits [2.1, -1.9] and [1.7, -1.5]; sigmoid gaps 4.0 and 3.2.
        let pi0 = &out.policies[0];
        let pi1 = &out.policies[1];
        assert!((pi0[0] - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-12);
        assert!((pi1[0] - 1.0 / (1.0 + (-3.2f64).exp())).abs() < 1e-12);
        assert!((pi0[0] + pi0[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_with_one_other_agent_returns_its_value_projection() {
        let cfg = ModelConfig::new(2, 3, EncoderKind::Attention, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        let messages = vec![vec![0.1, -0.2, 0.3, 0.4], vec![1.0, 2.0, -1.0, 0.5]];
        let obs = Observation { label: 2, n_labels: 3 };
        let c = attention_encode(&messages, &obs, 0, &p).unwrap();
        // Softmax over a single score is 1, so c = value net of the other
        // agent's message, computed here directly.
        let attn = p.attention.as_ref().unwrap();
        let mut expected = attn.value_b.row(0).to_vec();
        for (j, e) in expected.iter_mut().enumerate() {
            for i in 0..4 {
                *e += messages[1][i] * attn.value_w.get(i, j);
            }
        }
        for (got, want) in c.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let cfg = ModelConfig::new(3, 4, EncoderKind::Attention, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        let json = p.to_checkpoint_json();
        let q = Parameters::from_checkpoint_json(&json).unwrap();
        assert_eq!(p, q);
        // Keys come out in lexicographic order.
        let positions: Vec<usize> = ["comm_b", "comm_w", "dec_b", "dec_w", "enc_b", "enc_w"]
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn checkpoint_rejects_malformed_input() {
        let cfg = mean_cfg(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        let good = p.to_checkpoint_json();

        assert!(Parameters::from_checkpoint_json("not json").is_err());
        assert!(Parameters::from_checkpoint_json("{}").is_err());
        let unknown = good.replace("\"enc_w\"", "\"enc_extra\"");
        assert!(Parameters::from_checkpoint_json(&unknown).is_err());
        // Value count inconsistent with the declared shape.
        let v: serde_json::Value = serde_json::from_str(&good).unwrap();
        let mut bad = v.clone();
        bad["enc_w"]["shape"][1] = serde_json::json!(9);
        let bad_shape = serde_json::to_string(&bad).unwrap();
        assert!(Parameters::from_checkpoint_json(&bad_shape).is_err());
        // Dropping one half of the comm pair.
        let mut map = v.as_object().unwrap().clone();
        map.remove("comm_b");
        let partial = serde_json::to_string(&map).unwrap();
        assert!(Parameters::from_checkpoint_json(&partial).is_err());
    }

    #[test]
    fn forward_joint_rejects_wrong_agent_count() {
        let cfg = mean_cfg(3, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        let obs = vec![
            Observation { label: 0, n_labels: 3 },
            Observation { label: 1, n_labels: 3 },
        ];
        assert!(forward_joint(&obs, &p, &cfg).is_err());
    }

    #[test]
    fn no_comm_model_ignores_other_agents() {
        let cfg = ModelConfig::new(3, 3, EncoderKind::None, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Parameters::init(&cfg, &mut rng).unwrap();
        assert!(p.comm.is_none() && p.attention.is_none());
        let obs_a = vec![
            Observation { label: 0, n_labels: 3 },
            Observation { label: 1, n_labels: 3 },
            Observation { label: 2, n_labels: 3 },
        ];
        let obs_b = vec![
            Observation { label: 0, n_labels: 3 },
            Observation { label: 2, n_labels: 3 },
            Observation { label: 2, n_labels: 3 },
        ];
        let out_a = forward_joint(&obs_a, &p, &cfg).unwrap();
        let out_b = forward_joint(&obs_b, &p, &cfg).unwrap();
        // Agent 0 sees the same label in both episodes; with no
        // communication its policy cannot depend on the others.
        assert_eq!(out_a.policies[0], out_b.policies[0]);
        assert!(out_a.comm.is_empty());
    }
}
