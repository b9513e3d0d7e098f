use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sliderquant::evalprobe::{perplexity, EvalConfig};
use sliderquant::packio::{read_checkpoint, unpack};
use sliderquant::tinymodel::{LanguageModel, TokenStream, Vocab};

use crate::calib_args::read_bytes;
use crate::config::{self, CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// Quantized artifact (SLQ1) to evaluate.
    #[arg(long, conflicts_with = "ckpt")]
    artifact: Option<PathBuf>,
    /// Full-precision checkpoint (SLQM) to evaluate instead.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// UTF-8 text to score, encoded with the model's vocabulary.
    #[arg(long)]
    tokens: PathBuf,
    /// Part of the token file to score.
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    /// Train/test boundary used by --split.
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Evaluation window length.
    #[arg(long, default_value_t = 128)]
    context: usize,
    /// Windows per forward pass (does not change the result).
    #[arg(long, default_value_t = 8)]
    batch_windows: usize,
    /// Score only the first N tokens [default: all]
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Result CSV [default: eval.csv beside the model file]
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Manifest path [default: run.json beside the CSV]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    All,
    Train,
    Test,
}

#[derive(Serialize)]
struct Resolved<'a> {
    model: &'a Path,
    kind: &'a str,
    tokens: &'a Path,
    split: Split,
    train_fraction: f64,
    eval: &'a EvalConfig,
}

pub const CSV_HEADER: &str = "model,kind,wbits,abits,split,tokens,context,ppl";

pub fn run(a: Args) -> CliResult<()> {
    let (path, kind) = match (&a.artifact, &a.ckpt) {
        (Some(p), None) => (p.as_path(), "artifact"),
        (None, Some(p)) => (p.as_path(), "checkpoint"),
        _ => return Err(CliError::Usage("pass exactly one of --artifact or --ckpt".into())),
    };
    let bytes = read_bytes(path, kind)?;
    let text_path = &a.tokens;
    let raw = read_bytes(text_path, "token file")?;
    let text = String::from_utf8(raw).map_err(|_| CliError::Config(format!("{} is not UTF-8", text_path.display())))?;
    let (model, vocab, bits): (Box<dyn LanguageModel>, Vocab, (u8, u8)) = if kind == "artifact" {
        let art = unpack(&bytes)?;
        let bits = (art.model.weight_spec.bits, art.model.abits);
        (Box::new(art.model), art.vocab, bits)
    } else {
        let c = read_checkpoint(&bytes)?;
        (Box::new(c.model), c.vocab, (32, 32))
    };
    let stream = TokenStream::from_text(&text, &vocab, a.train_fraction)?;
    let tokens = match a.split {
        Split::All => &stream.ids[..],
        Split::Train => stream.train(),
        Split::Test => stream.test(),
    };
    let eval = EvalConfig {
        context: a.context,
        batch_windows: a.batch_windows,
        max_tokens: a.max_tokens,
    };
    let ppl = perplexity(model.as_ref(), tokens, &eval)?;
    let scored = tokens.len().min(a.max_tokens.unwrap_or(usize::MAX));
    let csv_path = a.csv.clone().unwrap_or_else(|| {
        path.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("eval.csv")
    });
    let split = serde_json::to_value(a.split).expect("split serializes");
    let row = format!(
        "{},{kind},{},{},{},{scored},{},{ppl}\n",
        path.display(),
        bits.0,
        bits.1,
        split.as_str().unwrap_or_default(),
        a.context
    );
    config::write_file(&csv_path, format!("{CSV_HEADER}\n{row}"))?;
    let resolved = Resolved {
        model: path,
        kind,
        tokens: text_path,
        split: a.split,
        train_fraction: a.train_fraction,
        eval: &eval,
    };
    config::write_manifest(
        &config::manifest_path(&csv_path, &a.manifest),
        "eval",
        &resolved,
        json!({ "csv": csv_path, "ppl": ppl, "tokens": scored }),
    )?;
    println!("perplexity {ppl:.6}");
    Ok(())
}
