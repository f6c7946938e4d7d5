//! Run execution and artifact writing for the train and sweep commands.
//!
//! Every (cell, seed) run owns one directory:
//! `<out>/<grid>/<N>x<L>/<encoder>/seed<k>/{metrics.csv, checkpoint.json,
//! summary.txt}`. Training itself is deterministic, so reruns rewrite the
//! same bytes.

use crate::spec::{grid_cells, resolve_spec, GridChoice, RunSpec, ENCODER_ORDER};
use crate::{CliError, SweepArgs, TrainArgs};
use commscale::model::EncoderKind;
use commscale::trainer::{final_window_score, train};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub struct SeedOutcome {
    pub cell: CellId,
    pub seed: u64,
    pub updates: usize,
    /// Final-window reward stats; absent when the run had zero updates.
    pub reward: Option<(f64, f64)>,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellId {
    pub grid: String,
    pub n_agents: usize,
    pub n_labels: usize,
    pub encoder: EncoderKind,
}

impl CellId {
    pub fn rel_path(&self) -> String {
        format!(
            "{}/{}x{}/{}",
            self.grid, self.n_agents, self.n_labels, self.encoder
        )
    }
}

fn run_failure(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Trains one seed and writes its three artifacts.
pub fn run_one_seed(
    out_root: &Path,
    cell: &CellId,
    spec: &RunSpec,
    seed: u64,
) -> Result<SeedOutcome, CliError> {
    let mut train_cfg = spec.train;
    train_cfg.seed = seed;
    let result = train(&spec.env, &spec.model, &train_cfg).map_err(run_failure)?;

    let run_id = cell.rel_path();
    let dir = out_root.join(&run_id).join(format!("seed{seed}"));
    fs::create_dir_all(&dir).map_err(run_failure)?;

    let mut csv = Vec::new();
    result
        .history
        .write_csv(&mut csv, &run_id, seed)
        .map_err(run_failure)?;
    fs::write(dir.join("metrics.csv"), csv).map_err(run_failure)?;
    result
        .params
        .save_checkpoint(&dir.join("checkpoint.json"))
        .map_err(run_failure)?;

    let reward = if result.history.is_empty() {
        None
    } else {
        Some(
            final_window_score(&result.history, spec.train.eval_window_fraction)
                .map_err(run_failure)?,
        )
    };
    let mut summary = String::new();
    let _ = writeln!(summary, "run_id={run_id}");
    let _ = writeln!(summary, "seed={seed}");
    let _ = writeln!(summary, "updates={}", train_cfg.total_updates);
    let _ = writeln!(
        summary,
        "episodes={}",
        train_cfg.total_updates * train_cfg.batch_size
    );
    if let Some((mean, std)) = reward {
        let _ = writeln!(summary, "final_window_mean={mean:.6}");
        let _ = writeln!(summary, "final_window_std={std:.6}");
    }
    fs::write(dir.join("summary.txt"), summary).map_err(run_failure)?;

    Ok(SeedOutcome {
        cell: cell.clone(),
        seed,
        updates: train_cfg.total_updates,
        reward,
        dir,
    })
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ── train ────────────────────────────────────────────────────────────────

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = crate::spec::load_file_config(args.common.config.as_deref())?;
    let spec = resolve_spec(args.agents, args.labels, args.encoder, &args.common, &file)?;
    let cell = CellId {
        grid: "single".into(),
        n_agents: spec.env.n_agents,
        n_labels: spec.env.n_labels,
        encoder: spec.model.encoder,
    };

    let mut finals = Vec::new();
    for &seed in &spec.seeds {
        let outcome = run_one_seed(&args.common.out, &cell, &spec, seed)?;
        match outcome.reward {
            Some((mean, std)) => {
                println!(
                    "{} seed {seed}: reward {mean:.4} +/- {std:.4} over the final window ({} updates) -> {}",
                    cell.rel_path(),
                    outcome.updates,
                    outcome.dir.display()
                );
                finals.push(mean);
            }
            None => println!(
                "{} seed {seed}: no updates requested; wrote the initial checkpoint -> {}",
                cell.rel_path(),
                outcome.dir.display()
            ),
        }
    }
    if finals.len() > 1 {
        let (mean, std) = mean_and_std(&finals);
        println!(
            "{}: reward {mean:.4} +/- {std:.4} across {} seeds",
            cell.rel_path(),
            finals.len()
        );
    }
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────────

struct AggregateRow {
    n_agents: usize,
    n_labels: usize,
    encoder: EncoderKind,
    /// Rounded to CSV precision so the delta column is exact over the
    /// stored values.
    mean_reward: Option<f64>,
    std_reward: Option<f64>,
    delta_vs_mean_pct: Option<f64>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let file = crate::spec::load_file_config(args.common.config.as_deref())?;
    let grid = args.grid.unwrap_or(GridChoice::All);
    let parallelism = match args.parallelism {
        Some(0) => return Err(CliError::Validation("parallelism must be at least 1".into())),
        Some(p) => p,
        None => std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1),
    };

    // Resolve every cell before any directory is touched; one bad override
    // rejects the whole sweep.
    let mut jobs: Vec<(CellId, RunSpec, u64)> = Vec::new();
    for (grid_name, n, l) in grid_cells(grid) {
        for encoder in ENCODER_ORDER {
            let spec = resolve_spec(Some(n), Some(l), Some(encoder), &args.common, &file)?;
            let cell = CellId {
                grid: grid_name.into(),
                n_agents: n,
                n_labels: l,
                encoder,
            };
            for &seed in &spec.seeds {
                jobs.push((cell.clone(), spec.clone(), seed));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(run_failure)?;
    let results: Vec<Result<SeedOutcome, (String, CliError)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, spec, seed)| {
                run_one_seed(&args.common.out, cell, spec, *seed)
                    .map_err(|e| (format!("{}/seed{seed}", cell.rel_path()), e))
            })
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err((what, e)) => failures.push(format!("{what}: {}", e.message())),
        }
    }

    let rows = aggregate_rows(&jobs, &outcomes);
    let csv = render_aggregate_csv(&rows);
    fs::write(args.common.out.join("aggregate.csv"), &csv).map_err(run_failure)?;
    print!("{}", render_aggregate_table(&rows));
    println!("aggregate -> {}", args.common.out.join("aggregate.csv").display());

    if !failures.is_empty() {
        let text = failures.join("\n") + "\n";
        fs::write(args.common.out.join("failures.txt"), text).map_err(run_failure)?;
        return Err(CliError::Run(format!(
            "{} of {} runs failed; see {}",
            failures.len(),
            jobs.len(),
            args.common.out.join("failures.txt").display()
        )));
    }
    Ok(())
}

fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("fixed-width float reparses")
}

/// One row per (cell, encoder) in job order, averaging the per-seed
/// final-window means. Cells whose runs all failed produce no row.
fn aggregate_rows(jobs: &[(CellId, RunSpec, u64)], outcomes: &[SeedOutcome]) -> Vec<AggregateRow> {
    let mut cells: Vec<CellId> = Vec::new();
    for (cell, _, _) in jobs {
        if !cells.contains(cell) {
            cells.push(cell.clone());
        }
    }
    let mut rows = Vec::new();
    for cell in &cells {
        let finals: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.cell == *cell)
            .filter_map(|o| o.reward.map(|(mean, _)| mean))
            .collect();
        if outcomes.iter().all(|o| o.cell != *cell) {
            continue;
        }
        let stats = if finals.is_empty() {
            None
        } else {
            Some(mean_and_std(&finals))
        };
        rows.push(AggregateRow {
            n_agents: cell.n_agents,
            n_labels: cell.n_labels,
            encoder: cell.encoder,
            mean_reward: stats.map(|(m, _)| round6(m)),
            std_reward: stats.map(|(_, s)| round6(s)),
            delta_vs_mean_pct: None,
        });
    }
    // Attention rows carry the percentage change against the mean encoder
    // of the same cell, computed over the stored (rounded) means.
    for i in 0..rows.len() {
        if rows[i].encoder != EncoderKind::Attention {
            continue;
        }
        let mean_row = rows.iter().find(|r| {
            r.encoder == EncoderKind::Mean
                && r.n_agents == rows[i].n_agents
                && r.n_labels == rows[i].n_labels
        });
        if let (Some(att), Some(Some(base))) =
            (rows[i].mean_reward, mean_row.map(|r| r.mean_reward))
        {
            if base != 0.0 {
                rows[i].delta_vs_mean_pct = Some((att - base) / base * 100.0);
            }
        }
    }
    rows
}

fn render_aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("n_agents,n_labels,encoder,mean_reward,std_reward,delta_vs_mean_pct\n");
    for r in rows {
        let fmt6 = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let delta = r
            .delta_vs_mean_pct
            .map(|d| format!("{d:.3}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{delta}",
            r.n_agents,
            r.n_labels,
            r.encoder,
            fmt6(r.mean_reward),
            fmt6(r.std_reward),
        );
    }
    out
}

fn render_aggregate_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<10} {:>20} {:>12}",
        "cell", "encoder", "reward", "delta"
    );
    for r in rows {
        let reward = match (r.mean_reward, r.std_reward) {
            (Some(m), Some(s)) => format!("{m:.3} +/- {s:.3}"),
            _ => "-".into(),
        };
        let delta = r
            .delta_vs_mean_pct
            .map(|d| format!("{d:+.3}%"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>20} {:>12}",
            format!("{}x{}", r.n_agents, r.n_labels),
            r.encoder.to_string(),
            reward,
            delta
        );
    }
    out
}
