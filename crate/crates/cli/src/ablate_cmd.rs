use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use sliderquant::ablation::{run_ablation, AblationCell};

use crate::calib_args::{prepare, CalibArgs};
use crate::config::{self, opt, CliResult};

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    calib: CalibArgs,
    /// Score only the first N test tokens [default: all]
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Worker threads, one cell each; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for the tables and loss logs.
    #[arg(long, default_value = "ablation")]
    out_dir: PathBuf,
    /// Manifest path [default: run.json in --out-dir]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn run(a: Args) -> CliResult<()> {
    let p = prepare(a.calib.load(&[("eval.max_tokens", opt(&a.max_tokens))])?)?;
    let start = Instant::now();
    let report = run_ablation(
        &AblationCell::ALL,
        &p.ckpt.model,
        &p.schedule,
        &p.calib,
        &p.file.calib,
        p.stream.test(),
        &p.file.eval,
        a.jobs,
    )?;
    config::write_file(&a.out_dir.join("ablation.csv"), report.to_csv())?;
    let md = report.to_markdown();
    config::write_file(&a.out_dir.join("ablation.md"), &md)?;
    let mut logs = Vec::new();
    for c in &report.cells {
        let path = a.out_dir.join(format!("losses_{}.csv", c.cell.slug()));
        config::write_file(&path, c.log.to_csv())?;
        logs.push(path);
    }
    let manifest = a.manifest.clone().unwrap_or_else(|| a.out_dir.join("run.json"));
    config::write_manifest(
        &manifest,
        "ablate",
        &p.file,
        json!({
            "cells": report.cells.iter().map(|c| json!({"cell": c.cell.label(), "ppl": c.ppl})).collect::<Vec<_>>(),
            "intra_is_minimum": report.intra_is_minimum(),
            "loss_logs": logs,
            "seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    print!("{md}");
    Ok(())
}
