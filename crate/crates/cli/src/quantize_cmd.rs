use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use sliderquant::calibrate::{run_baseline, run_variant, BaselineKind, PipelineOutput};
use sliderquant::packio::{pack, storage_report, PackedArtifact, ARTIFACT_VERSION};
use sliderquant::schedule::ScheduleVariant;

use crate::calib_args::{prepare, CalibArgs, Prepared};
use crate::config::{self, CliResult};

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub calib: CalibArgs,
    /// Output artifact (SLQ1).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-window loss log CSV [default: losses.csv beside --out]
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Manifest path [default: run.json beside --out]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct BaselineArgs {
    /// Comparison method.
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[command(flatten)]
    pub rest: Args,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum Kind {
    Rtn,
    Layerwise,
    Blockwise,
    Fixed,
}

impl From<Kind> for BaselineKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Rtn => Self::Rtn,
            Kind::Layerwise => Self::Layerwise,
            Kind::Blockwise => Self::Blockwise,
            Kind::Fixed => Self::Fixed,
        }
    }
}

fn beside(out: &Path, name: &str) -> PathBuf {
    out.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .join(name)
}

fn write_outputs(a: &Args, p: &Prepared, command: &str, out: PipelineOutput, seconds: f64) -> CliResult<()> {
    let echo = p.echo(command, json!({}));
    let artifact = PackedArtifact {
        model: out.model,
        vocab: p.ckpt.vocab.clone(),
        run_config: echo,
    };
    let bytes = pack(&artifact)?;
    config::write_file(&a.out, &bytes)?;
    let loss_log = a.loss_log.clone().unwrap_or_else(|| beside(&a.out, "losses.csv"));
    config::write_file(&loss_log, out.log.to_csv())?;
    let storage = storage_report(&artifact.model)?;
    config::write_manifest(
        &config::manifest_path(&a.out, &a.manifest),
        command,
        &p.file,
        json!({
            "artifact": a.out,
            "artifact_crc32": crc32fast::hash(&bytes),
            "artifact_format": ARTIFACT_VERSION,
            "loss_log": loss_log,
            "checkpoint_crc32": p.input_crcs.0,
            "corpus_crc32": p.input_crcs.1,
            "weight_bytes_fp32": storage.fp32_bytes,
            "weight_bytes_packed": storage.packed_bytes,
            "seconds": seconds,
        }),
    )?;
    eprintln!(
        "wrote {} ({} bytes, weights {:.2}x smaller than fp32) in {seconds:.1}s",
        a.out.display(),
        bytes.len(),
        storage.ratio()
    );
    Ok(())
}

pub fn run(a: Args) -> CliResult<()> {
    let p = prepare(a.calib.load(&[])?)?;
    let start = Instant::now();
    let total = sliderquant::schedule::variant_schedule(ScheduleVariant::Full, &p.schedule)?.windows.len();
    let out = run_variant(
        &p.ckpt.model,
        &p.schedule,
        ScheduleVariant::Full,
        p.schedule.gamma,
        &p.calib,
        &p.file.calib,
        |w| {
            eprintln!(
                "window {:>2}/{total} {} {}..{}  {:.0}s",
                w.position + 1,
                w.region,
                w.start,
                w.end,
                start.elapsed().as_secs_f64()
            )
        },
    )?;
    write_outputs(&a, &p, "quantize", out, start.elapsed().as_secs_f64())
}

pub fn run_baseline_cmd(b: BaselineArgs) -> CliResult<()> {
    let a = b.rest;
    let p = prepare(a.calib.load(&[])?)?;
    let start = Instant::now();
    let kind: BaselineKind = b.kind.into();
    let out = run_baseline(kind, &p.ckpt.model, &p.schedule, &p.calib, &p.file.calib)?;
    write_outputs(&a, &p, &format!("baseline {}", kind.name()), out, start.elapsed().as_secs_f64())
}
