//! Run specification assembly: CLI flags override config-file values, which
//! override the built-in defaults (lr 0.002, batch 80, message size 16,
//! per-size entropy weights).

use crate::{CliError, CommonRunArgs};
use commscale::env::EnvConfig;
use commscale::model::{EncoderKind, ModelConfig};
use commscale::optim::OptimizerKind;
use commscale::trainer::{default_beta, TrainConfig};
use serde::Deserialize;
use std::path::Path;
use std::str::FromStr;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// One training cell: environment, model, optimizer settings, and the
/// seeds to repeat it over.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

// ── config file ──────────────────────────────────────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub n_agents: Option<usize>,
    pub n_labels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: Option<EncoderKind>,
    pub message_size: Option<usize>,
    pub n_comm_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub discount: Option<f64>,
    pub batch_size: Option<usize>,
    pub beta: Option<f64>,
    pub total_updates: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub eval_window_fraction: Option<f64>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
}

// ── resolution ───────────────────────────────────────────────────────────

/// Builds a validated [`RunSpec`]. `agents`, `labels` and `encoder` are the
/// cell identity (from flags for `train`, from the grid for `sweep`); the
/// rest follows flag > file > default precedence.
pub fn resolve_spec(
    agents: Option<usize>,
    labels: Option<usize>,
    encoder: Option<EncoderKind>,
    common: &CommonRunArgs,
    file: &FileConfig,
) -> Result<RunSpec, CliError> {
    let n_agents = agents.or(file.env.n_agents).unwrap_or(3);
    let n_labels = labels.or(file.env.n_labels).unwrap_or(3);
    let encoder = encoder.or(file.model.encoder).unwrap_or(EncoderKind::Mean);
    let message_size = common.message_size.or(file.model.message_size).unwrap_or(16);
    let default_steps = match encoder {
        EncoderKind::None => 0,
        _ => 1,
    };
    let n_comm_steps = common
        .comm_steps
        .or(file.model.n_comm_steps)
        .unwrap_or(default_steps);

    let env = EnvConfig::new(n_agents, n_labels).map_err(validation)?;
    let model = ModelConfig::new(n_agents, n_labels, encoder, message_size, n_comm_steps)
        .map_err(validation)?;

    let defaults = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: common.lr.or(file.train.learning_rate).unwrap_or(defaults.learning_rate),
        discount: file.train.discount.unwrap_or(defaults.discount),
        batch_size: common
            .batch_size
            .or(file.train.batch_size)
            .unwrap_or(defaults.batch_size),
        beta: common
            .beta
            .or(file.train.beta)
            .unwrap_or_else(|| default_beta(n_agents)),
        total_updates: common
            .iterations
            .or(file.train.total_updates)
            .unwrap_or(defaults.total_updates),
        seed: 0, // overwritten per run
        optimizer: common.optimizer.or(file.train.optimizer).unwrap_or(defaults.optimizer),
        eval_window_fraction: file
            .train
            .eval_window_fraction
            .unwrap_or(defaults.eval_window_fraction),
    };
    train.validate().map_err(validation)?;

    let seeds = match (common.seed, &common.seeds, &file.seeds) {
        (Some(s), _, _) => vec![s],
        (None, Some(s), _) => s.clone(),
        (None, None, Some(s)) => s.clone(),
        (None, None, None) => DEFAULT_SEEDS.to_vec(),
    };
    if seeds.is_empty() {
        return Err(CliError::Validation("seed list must not be empty".into()));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Validation(
            "seed list holds duplicates; each seed writes its own directory".into(),
        ));
    }

    Ok(RunSpec {
        env,
        model,
        train,
        seeds,
    })
}

fn validation(e: commscale::Error) -> CliError {
    CliError::Validation(e.to_string())
}

// ── grids ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridChoice {
    ScaleLabels,
    ScaleAgents,
    All,
}

impl FromStr for GridChoice {
    type Err = commscale::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scale-labels" => Ok(GridChoice::ScaleLabels),
            "scale-agents" => Ok(GridChoice::ScaleAgents),
            "all" => Ok(GridChoice::All),
            other => Err(commscale::Error::InvalidConfig(format!(
                "unknown grid {other:?}, expected scale-labels, scale-agents or all"
            ))),
        }
    }
}

/// (grid name, n_agents, n_labels) cells in output order. The 3x3 cell sits
/// in both named grids; `All` runs it once under scale-labels, keeping the
/// union at the 7 distinct cells.
pub fn grid_cells(choice: GridChoice) -> Vec<(&'static str, usize, usize)> {
    let labels: Vec<(&'static str, usize, usize)> = [3, 8, 16, 24]
        .iter()
        .map(|&l| ("scale-labels", 3, l))
        .collect();
    let agents = |skip_first: bool| -> Vec<(&'static str, usize, usize)> {
        [3, 8, 16, 24]
            .iter()
            .filter(|&&n| !(skip_first && n == 3))
            .map(|&n| ("scale-agents", n, 3))
            .collect()
    };
    match choice {
        GridChoice::ScaleLabels => labels,
        GridChoice::ScaleAgents => agents(false),
        GridChoice::All => {
            let mut cells = labels;
            cells.extend(agents(true));
            cells
        }
    }
}

/// Encoders in report column order.
pub const ENCODER_ORDER: [EncoderKind; 3] =
    [EncoderKind::None, EncoderKind::Mean, EncoderKind::Attention];
