use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use sliderquant::calibrate::run_variant;
use sliderquant::evalprobe::{sensitivity, ProbeSource};
use sliderquant::packio::unpack;
use sliderquant::schedule::ScheduleVariant;

use crate::calib_args::{prepare, read_bytes, CalibArgs};
use crate::config::{self, opt, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    #[command(flatten)]
    calib: CalibArgs,
    /// Which curves to write.
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
    /// Source of the quantized blocks.
    #[arg(long, value_enum, default_value_t = Method::Rtn)]
    method: Method,
    /// Calibrated artifact to take blocks from (method calibrated); without
    /// it the full pipeline is run first.
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Score only the first N test tokens [default: 16384]
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Evaluation window length [default: 128]
    #[arg(long)]
    context: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for the CSVs.
    #[arg(long, default_value = "probe")]
    out_dir: PathBuf,
    /// Also write sensitivity.gp, a gnuplot script for both curves.
    #[arg(long)]
    emit_gnuplot: bool,
    /// Manifest path [default: run.json in --out-dir]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Mode {
    Single,
    Prefix,
    Both,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Method {
    Rtn,
    Calibrated,
}

pub fn run(a: Args) -> CliResult<()> {
    let file = a.calib.load(&[
        ("eval.max_tokens", opt(&Some(a.max_tokens.unwrap_or(16384)))),
        ("eval.context", opt(&a.context)),
    ])?;
    let p = prepare(file)?;
    let model = &p.ckpt.model;
    let start = Instant::now();
    let src = match a.method {
        Method::Rtn => ProbeSource::rtn(model, p.file.calib.weight_spec()?, p.file.calib.abits)?,
        Method::Calibrated => {
            let q = match &a.artifact {
                Some(path) => {
                    let art = unpack(&read_bytes(path, "artifact")?)?;
                    if art.model.config != model.config {
                        return Err(CliError::Config("artifact was not produced from this checkpoint".into()));
                    }
                    art.model
                }
                None => {
                    eprintln!("calibrating probe source");
                    run_variant(
                        model,
                        &p.schedule,
                        ScheduleVariant::Full,
                        p.schedule.gamma,
                        &p.calib,
                        &p.file.calib,
                        |_| {},
                    )?
                    .model
                }
            };
            ProbeSource::calibrated(model, q)?
        }
    };
    let test = p.stream.test();
    let report = sensitivity(&src, test, &p.file.eval, p.file.calib.seed, a.jobs)?;
    let single = a.out_dir.join("sensitivity_single.csv");
    let prefix = a.out_dir.join("sensitivity_prefix.csv");
    let mut written = Vec::new();
    if a.mode != Mode::Prefix {
        config::write_file(&single, report.single_csv())?;
        written.push(single.clone());
    }
    if a.mode != Mode::Single {
        config::write_file(&prefix, report.prefix_csv())?;
        written.push(prefix.clone());
    }
    if a.emit_gnuplot {
        let gp = a.out_dir.join("sensitivity.gp");
        config::write_file(&gp, report.gnuplot("sensitivity_single.csv", "sensitivity_prefix.csv"))?;
        written.push(gp);
    }
    let manifest = a.manifest.clone().unwrap_or_else(|| a.out_dir.join("run.json"));
    config::write_manifest(
        &manifest,
        "probe",
        &json!({
            "file": p.file,
            "method": format!("{:?}", a.method).to_lowercase(),
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "artifact": a.artifact,
        }),
        json!({
            "files": written,
            "fp_ppl": report.fp_ppl,
            "single": report.single,
            "prefix": report.prefix,
            "seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    println!("fp perplexity {:.4}", report.fp_ppl);
    for (l, v) in report.single.iter().enumerate() {
        println!("layer {l:>2}  single {v:.4}  prefix(1..={}) {:.4}", l + 1, report.prefix[l]);
    }
    Ok(())
}
