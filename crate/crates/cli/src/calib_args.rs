//! Flags and config sections shared by every command that calibrates or
//! quantizes a checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sliderquant::calibrate::CalibConfig;
use sliderquant::evalprobe::EvalConfig;
use sliderquant::packio::{read_checkpoint, Checkpoint};
use sliderquant::schedule::ScheduleConfig;
use sliderquant::tinymodel::{make_calibset, CalibSet, Linear, ModelConfig, TokenStream};

use crate::config::{self, io_err, opt, CliError, CliResult};

pub const WBITS: [u8; 5] = [2, 3, 4, 8, 16];
pub const ABITS: [u8; 3] = [4, 8, 16];
pub const GROUPS: [usize; 4] = [32, 64, 128, 256];

#[derive(clap::Args, Clone, Debug)]
pub struct CalibArgs {
    /// JSON config file; flags override its values. A run.json manifest is
    /// accepted as well.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Full-precision checkpoint (SLQM).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Text corpus; calibration samples come from its training split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Weight bits, one of 2, 3, 4, 8, 16 [default: 4]
    #[arg(long)]
    pub wbits: Option<u8>,
    /// Activation bits, one of 4, 8, 16 (16 = weight-only) [default: 4]
    #[arg(long)]
    pub abits: Option<u8>,
    /// Weight group size: channel, 32, 64, 128 or 256 [default: channel]
    #[arg(long)]
    pub group: Option<String>,
    /// Shallow layers covered by expanding windows [default: 4]
    #[arg(long)]
    pub ls: Option<usize>,
    /// Deep layers covered by contracting windows [default: 4]
    #[arg(long)]
    pub ld: Option<usize>,
    /// Sliding window size [default: 2]
    #[arg(long = "s")]
    pub window: Option<usize>,
    /// Sliding stride [default: 1]
    #[arg(long = "i")]
    pub stride: Option<usize>,
    /// Intra-layer stage fraction; 1 disables intra-layer sliding [default: 0.5]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Epochs per stage [default: 20, 60 at 2-bit weights]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for parameter init and calibration sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Calibration sequences [default: 32]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Tokens per calibration sequence [default: 128]
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Sequences per optimizer step [default: 4]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the channel scales [default: 0.001]
    #[arg(long)]
    pub lr_scale: Option<f32>,
    /// Learning rate of the low-rank terms [default: 0.0001]
    #[arg(long)]
    pub lr_lora: Option<f32>,
    /// Rank of the low-rank weight terms [default: 4]
    #[arg(long)]
    pub rank: Option<usize>,
    /// Input to the full-precision target: quant or fp [default: quant]
    #[arg(long)]
    pub target_stream: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub seq_len: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            seq_len: 128,
            train_fraction: 0.9,
        }
    }
}

/// Schedule settings; the layer count defaults to the checkpoint's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleFile {
    pub num_layers: Option<usize>,
    pub shallow: usize,
    pub deep: usize,
    pub window: usize,
    pub stride: usize,
    pub gamma: f64,
}

impl Default for ScheduleFile {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        Self {
            num_layers: None,
            shallow: d.shallow,
            deep: d.deep,
            window: d.window,
            stride: d.stride,
            gamma: d.gamma,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibFile {
    pub ckpt: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub calib: CalibConfig,
    pub schedule: ScheduleFile,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl CalibArgs {
    /// Overrides in addition to the calibration flags, e.g. eval settings.
    pub fn load(&self, extra: &[(&str, Option<Value>)]) -> CliResult<CalibFile> {
        let group = match self.group.as_deref() {
            None => None,
            Some("channel") => Some(Value::Null),
            Some(g) => Some(json!(g
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("--group must be channel or a size, got {g:?}")))?)),
        };
        let target = match self.target_stream.as_deref() {
            None => None,
            Some(t @ ("quant" | "fp")) => Some(json!(t)),
            Some(t) => return Err(CliError::Config(format!("--target-stream must be quant or fp, got {t:?}"))),
        };
        let mut overrides = vec![
            ("ckpt", opt(&self.ckpt)),
            ("corpus", opt(&self.corpus)),
            ("calib.wbits", opt(&self.wbits)),
            ("calib.abits", opt(&self.abits)),
            ("calib.group_size", group),
            ("calib.epochs", opt(&self.epochs)),
            ("calib.seed", opt(&self.seed)),
            ("calib.batch_size", opt(&self.batch_size)),
            ("calib.lr_scale", opt(&self.lr_scale)),
            ("calib.lr_lora", opt(&self.lr_lora)),
            ("calib.lora_rank", opt(&self.rank)),
            ("calib.target_stream", target),
            ("schedule.shallow", opt(&self.ls)),
            ("schedule.deep", opt(&self.ld)),
            ("schedule.window", opt(&self.window)),
            ("schedule.stride", opt(&self.stride)),
            ("schedule.gamma", opt(&self.gamma)),
            ("data.samples", opt(&self.samples)),
            ("data.seq_len", opt(&self.seq_len)),
        ];
        overrides.extend_from_slice(extra);
        config::load(self.config.as_deref(), &overrides)
    }
}

/// Everything a calibrating command needs, loaded and validated.
pub struct Prepared {
    pub file: CalibFile,
    pub ckpt: Checkpoint,
    pub stream: TokenStream,
    pub calib: CalibSet,
    pub schedule: ScheduleConfig,
    /// CRC32 of the checkpoint and corpus bytes, for the artifact echo.
    pub input_crcs: (u32, u32),
}

impl Prepared {
    /// The content-only description of the run stored inside artifacts:
    /// resolved settings plus input checksums, no paths.
    pub fn echo(&self, command: &str, extra: Value) -> Value {
        json!({
            "command": command,
            "calib": self.file.calib,
            "schedule": self.schedule,
            "data": self.file.data,
            "checkpoint_crc32": self.input_crcs.0,
            "corpus_crc32": self.input_crcs.1,
            "extra": extra,
        })
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {flag} (flag or config key)")))
}

pub fn check_bits(calib: &CalibConfig) -> CliResult<()> {
    if !WBITS.contains(&calib.wbits) {
        return Err(CliError::Config(format!("constraint wbits in {WBITS:?} violated: {}", calib.wbits)));
    }
    if !ABITS.contains(&calib.abits) {
        return Err(CliError::Config(format!("constraint abits in {ABITS:?} violated: {}", calib.abits)));
    }
    Ok(())
}

/// Group sizes must be one of the supported sizes and divide every weight's
/// input dimension.
pub fn check_group(calib: &CalibConfig, model: &ModelConfig) -> CliResult<()> {
    let Some(g) = calib.group_size else { return Ok(()) };
    if !GROUPS.contains(&g) {
        return Err(CliError::Config(format!("constraint group in {GROUPS:?} or channel violated: {g}")));
    }
    for lin in Linear::ALL {
        let (n, _) = model.linear_shape(lin);
        if n % g != 0 {
            return Err(CliError::Config(format!(
                "constraint group divides every weight input dimension violated: {g} does not divide {n} ({})",
                lin.name()
            )));
        }
    }
    Ok(())
}

pub fn read_bytes(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    config::require_file(path, what)?;
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn prepare(file: CalibFile) -> CliResult<Prepared> {
    check_bits(&file.calib)?;
    let ckpt_path = required(&file.ckpt, "--ckpt")?;
    let corpus_path = required(&file.corpus, "--corpus")?;
    let ckpt_bytes = read_bytes(ckpt_path, "checkpoint")?;
    let corpus_bytes = read_bytes(corpus_path, "corpus")?;
    let ckpt = read_checkpoint(&ckpt_bytes)?;
    let text = String::from_utf8(corpus_bytes.clone())
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", corpus_path.display())))?;
    check_group(&file.calib, &ckpt.model.config)?;
    file.calib.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let layers = ckpt.model.config.n_layers;
    let s = &file.schedule;
    if let Some(n) = s.num_layers {
        if n != layers {
            return Err(CliError::Config(format!(
                "constraint schedule.num_layers == checkpoint layers violated: {n} != {layers}"
            )));
        }
    }
    let schedule = ScheduleConfig {
        num_layers: layers,
        shallow: s.shallow,
        deep: s.deep,
        window: s.window,
        stride: s.stride,
        gamma: s.gamma,
    };
    schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if file.data.seq_len > ckpt.model.config.max_seq_len {
        return Err(CliError::Config(format!(
            "constraint data.seq_len <= model context violated: {} > {}",
            file.data.seq_len, ckpt.model.config.max_seq_len
        )));
    }
    let stream = TokenStream::from_text(&text, &ckpt.vocab, file.data.train_fraction)?;
    let calib = make_calibset(stream.train(), file.data.samples, file.data.seq_len, file.calib.seed)?;
    Ok(Prepared {
        input_crcs: (crc32fast::hash(&ckpt_bytes), crc32fast::hash(&corpus_bytes)),
        file,
        ckpt,
        stream,
        calib,
        schedule,
    })
}
