//! The analyze command: checkpoint in, protocol report out.

use crate::{AnalyzeArgs, CliError};
use commscale::analysis::{analyze, AnalysisReport};
use commscale::model::Parameters;
use std::fmt::Write as _;
use std::fs;

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let validation = |e: commscale::Error| CliError::Validation(e.to_string());
    let params = Parameters::load_checkpoint(&args.checkpoint).map_err(validation)?;
    let (n_labels, message_size, _) = params.dims();
    if let Some(l) = args.labels {
        if l != n_labels {
            return Err(CliError::Validation(format!(
                "--labels {l} does not match the checkpoint's {n_labels} labels"
            )));
        }
    }
    let dims = match &args.dims {
        None => None,
        Some(d) if d.len() == 2 => Some((d[0], d[1])),
        Some(d) => {
            return Err(CliError::Validation(format!(
                "--dims takes exactly two coordinates, got {}",
                d.len()
            )))
        }
    };
    if let Some((i, j)) = dims {
        if i >= message_size || j >= message_size || i == j {
            return Err(CliError::Validation(format!(
                "--dims {i},{j} invalid for message size {message_size}"
            )));
        }
    }

    // The whole report is computed before anything is written.
    let report = analyze(&params, n_labels, dims).map_err(validation)?;

    let out_dir = match &args.out {
        Some(dir) => dir.clone(),
        None => args
            .checkpoint
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| ".".into()),
    };
    let run_failure = |e: std::io::Error| CliError::Run(e.to_string());
    fs::create_dir_all(&out_dir).map_err(run_failure)?;
    let json =
        serde_json::to_string_pretty(&report).expect("analysis reports always serialize") + "\n";
    fs::write(out_dir.join("analysis.json"), json).map_err(run_failure)?;
    fs::write(out_dir.join("points.csv"), render_points(&report)).map_err(run_failure)?;

    println!(
        "{} labels, message size {message_size}, analyzed coordinates ({}, {})",
        n_labels, report.dims.0, report.dims.1
    );
    println!(
        "separability: min distance {:.6} between pair means {:?} and {:?}",
        report.min_distance, report.min_distance_pair.0, report.min_distance_pair.1
    );
    let f = &report.fit;
    println!("fit x = a*2^tau + b:    a={:.6} b={:.6} R2={:.6}", f.a, f.b, f.r2_x);
    println!("fit y = c*ln(tau+1) + d: c={:.6} d={:.6} R2={:.6}", f.c, f.d, f.r2_y);
    println!(
        "wrote {} and {}",
        out_dir.join("analysis.json").display(),
        out_dir.join("points.csv").display()
    );
    Ok(())
}

/// Plot-ready pairwise means projected onto the analyzed coordinates.
fn render_points(report: &AnalysisReport) -> String {
    let (dx, dy) = report.dims;
    let mut out = String::from("x,y,pair\n");
    for p in &report.mean_points {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{}-{}",
            p.point[dx], p.point[dy], p.pair.0, p.pair.1
        );
    }
    out
}
