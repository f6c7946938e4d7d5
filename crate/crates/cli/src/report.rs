//! The report command: walks a results tree, recomputes final-window
//! rewards from the metrics files, and prints one row per cell with the
//! no-comm / mean / attention columns and the attention-vs-mean delta.
//! Cells outside the oracle bounds are flagged and fail the exit code.

use crate::{CliError, ReportArgs};
use commscale::env::{bayes_optimal_no_comm_reward, random_policy_reward};
use commscale::model::EncoderKind;
use commscale::trainer::{final_window_score, MetricHistory};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Slack over the closed-form bounds, covering final-window sampling noise.
const BOUND_SLACK: f64 = 0.02;
/// Matches the trainer's default eval_window_fraction.
const WINDOW_FRACTION: f64 = 0.10;

struct CellReport {
    grid: String,
    n_agents: usize,
    n_labels: usize,
    /// Aggregated (mean, std, seed count) per encoder column.
    per_encoder: [Option<(f64, f64, usize)>; 3],
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    if !args.dir.is_dir() {
        return Err(CliError::Validation(format!(
            "{} is not a directory",
            args.dir.display()
        )));
    }
    let mut cells = Vec::new();
    let mut flags = Vec::new();
    for grid_dir in sorted_dirs(&args.dir)? {
        let grid = name_of(&grid_dir);
        for cell_dir in sorted_dirs(&grid_dir)? {
            let Some((n_agents, n_labels)) = parse_cell(&name_of(&cell_dir)) else {
                continue;
            };
            let mut per_encoder: [Option<(f64, f64, usize)>; 3] = [None, None, None];
            for (slot, encoder) in crate::spec::ENCODER_ORDER.iter().enumerate() {
                let enc_dir = cell_dir.join(encoder.to_string());
                if !enc_dir.is_dir() {
                    continue;
                }
                let finals = seed_final_rewards(&enc_dir)?;
                if finals.is_empty() {
                    continue;
                }
                let n = finals.len() as f64;
                let mean = finals.iter().sum::<f64>() / n;
                let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                per_encoder[slot] = Some((mean, var.sqrt(), finals.len()));
                let (lo, hi) = reward_bounds(*encoder, n_agents);
                if mean < lo || mean > hi {
                    flags.push(format!(
                        "{grid}/{n_agents}x{n_labels}/{encoder}: reward {mean:.3} outside [{lo:.3}, {hi:.3}]"
                    ));
                }
            }
            if per_encoder.iter().any(Option::is_some) {
                cells.push(CellReport {
                    grid: grid.clone(),
                    n_agents,
                    n_labels,
                    per_encoder,
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(CliError::Validation(format!(
            "no run results under {}",
            args.dir.display()
        )));
    }

    print!("{}", render_table(&cells));
    if !flags.is_empty() {
        let mut msg = String::from("cells outside acceptance bounds:\n");
        for f in &flags {
            let _ = writeln!(msg, "  {f}");
        }
        return Err(CliError::Run(msg.trim_end().to_string()));
    }
    Ok(())
}

/// Expected reward range for a converged run: no-comm policies live between
/// the random baseline and the Bayes-optimal label-only score; communicating
/// encoders may reach 1 but must also beat random play.
fn reward_bounds(encoder: EncoderKind, n_agents: usize) -> (f64, f64) {
    let lo = random_policy_reward(n_agents) - BOUND_SLACK;
    match encoder {
        EncoderKind::None => (lo, bayes_optimal_no_comm_reward(n_agents) + BOUND_SLACK),
        EncoderKind::Mean | EncoderKind::Attention => (lo, 1.0),
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::Run(format!("cannot list {}: {e}", path.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn name_of(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn parse_cell(name: &str) -> Option<(usize, usize)> {
    let (n, l) = name.split_once('x')?;
    Some((n.parse().ok()?, l.parse().ok()?))
}

/// Final-window reward per seed directory, ordered by seed number.
/// Header-only metrics (zero-update runs) contribute nothing.
fn seed_final_rewards(enc_dir: &Path) -> Result<Vec<f64>, CliError> {
    let mut seeds: Vec<(u64, PathBuf)> = sorted_dirs(enc_dir)?
        .into_iter()
        .filter_map(|p| {
            let name = name_of(&p);
            let num = name.strip_prefix("seed")?.parse().ok()?;
            Some((num, p))
        })
        .collect();
    seeds.sort_by_key(|(num, _)| *num);

    let mut finals = Vec::new();
    for (_, dir) in seeds {
        let path = dir.join("metrics.csv");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
        let history = MetricHistory::from_csv_str(&text)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        if history.is_empty() {
            continue;
        }
        let (mean, _) = final_window_score(&history, WINDOW_FRACTION)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        finals.push(mean);
    }
    Ok(finals)
}

fn render_table(cells: &[CellReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>18} {:>18} {:>18} {:>10}",
        "cell", "no comm.", "mean", "attention", "delta"
    );
    for c in cells {
        let col = |slot: usize| -> String {
            match c.per_encoder[slot] {
                Some((mean, std, n)) => format!("{mean:.3} +/- {std:.3} ({n})"),
                None => "-".into(),
            }
        };
        let delta = match (c.per_encoder[1], c.per_encoder[2]) {
            (Some((mean, _, _)), Some((att, _, _))) if mean != 0.0 => {
                format!("{:+.3}%", (att - mean) / mean * 100.0)
            }
            _ => "-".into(),
        };
        let _ = writeln!(
            out,
            "{:<24} {:>18} {:>18} {:>18} {:>10}",
            format!("{}/{}x{}", c.grid, c.n_agents, c.n_labels),
            col(0),
            col(1),
            col(2),
            delta
        );
    }
    out
}
