use std::path::PathBuf;

use serde_json::json;
use sliderquant::schedule::{stage_plan, validate, variant_schedule, CheckStatus, ScheduleConfig, ScheduleVariant};

use crate::config::{self, opt, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// JSON schedule config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of decoder blocks [default: 12]
    #[arg(long = "L")]
    layers: Option<usize>,
    /// Shallow layers covered by expanding windows [default: 4]
    #[arg(long)]
    ls: Option<usize>,
    /// Deep layers covered by contracting windows [default: 4]
    #[arg(long)]
    ld: Option<usize>,
    /// Sliding window size [default: 2]
    #[arg(long = "s")]
    window: Option<usize>,
    /// Sliding stride [default: 1]
    #[arg(long = "i")]
    stride: Option<usize>,
    /// Intra-layer stage fraction [default: 0.5]
    #[arg(long)]
    gamma: Option<f64>,
    /// Schedule variant.
    #[arg(long, value_enum, default_value_t = Variant::Full)]
    variant: Variant,
    /// Print JSON instead of one line per window.
    #[arg(long)]
    json: bool,
    /// Also write a run manifest here.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Variant {
    Full,
    Fixed,
    Expanding,
    Contracting,
}

impl From<Variant> for ScheduleVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Full => Self::Full,
            Variant::Fixed => Self::Fixed,
            Variant::Expanding => Self::Expanding,
            Variant::Contracting => Self::Contracting,
        }
    }
}

pub fn run(a: Args) -> CliResult<()> {
    let cfg: ScheduleConfig = config::load(
        a.config.as_deref(),
        &[
            ("num_layers", opt(&a.layers)),
            ("shallow", opt(&a.ls)),
            ("deep", opt(&a.ld)),
            ("window", opt(&a.window)),
            ("stride", opt(&a.stride)),
            ("gamma", opt(&a.gamma)),
        ],
    )?;
    let variant: ScheduleVariant = a.variant.into();
    let sched = variant_schedule(variant, &cfg)?;
    let report = validate(&sched, &cfg);
    if variant == ScheduleVariant::Full && !report.all_pass() {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| c.status == CheckStatus::Fail)
            .map(|c| c.name.as_str())
            .collect();
        return Err(CliError::Runtime(format!("schedule invariants failed: {}", failed.join(", "))));
    }
    let plans = sched
        .windows
        .iter()
        .map(|w| stage_plan(w, cfg.gamma))
        .collect::<Result<Vec<_>, _>>()?;
    if a.json {
        let windows: Vec<_> = sched
            .windows
            .iter()
            .zip(&plans)
            .map(|(w, p)| {
                json!({
                    "id": w.position,
                    "region": w.region.to_string(),
                    "start": w.start,
                    "end": w.end,
                    "stages": p.fractions,
                })
            })
            .collect();
        let out = json!({
            "config": cfg,
            "variant": variant.name(),
            "windows": windows,
            "membership": sched.membership_counts(),
            "checks": report.checks,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("schedule serializes"));
    } else {
        for (w, p) in sched.windows.iter().zip(&plans) {
            let fr: Vec<String> = p.fractions.iter().map(|f| f.to_string()).collect();
            println!("{} {}..{} {}", w.region, w.start, w.end, fr.join(","));
        }
    }
    if let Some(m) = &a.manifest {
        config::write_manifest(m, "dump-schedule", &cfg, json!({ "variant": variant.name(), "windows": sched.windows.len() }))?;
    }
    Ok(())
}
