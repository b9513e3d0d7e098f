use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sliderquant::packio::{write_checkpoint, Checkpoint};
use sliderquant::tinymodel::{pretrain, ModelConfig, PretrainConfig, TokenStream, Vocab};

use crate::config::{self, io_err, opt, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// JSON config file (`model`, `train`, `train_fraction` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// UTF-8 training corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// Seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Sequences per batch [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 0.002]
    #[arg(long)]
    lr: Option<f32>,
    /// Number of decoder blocks [default: 12]
    #[arg(long)]
    layers: Option<usize>,
    /// Manifest path [default: run.json beside --out]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::tiny12(1);
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainFile {
    pub model: ModelShape,
    pub train: PretrainConfig,
    pub train_fraction: f64,
}

impl Default for PretrainFile {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            train: PretrainConfig::default(),
            train_fraction: 0.9,
        }
    }
}

pub fn run(a: Args) -> CliResult<()> {
    config::require_file(&a.corpus, "corpus")?;
    let cfg: PretrainFile = config::load(
        a.config.as_deref(),
        &[
            ("train.steps", opt(&a.steps)),
            ("train.seed", opt(&a.seed)),
            ("model.seed", opt(&a.seed)),
            ("train.batch_size", opt(&a.batch_size)),
            ("train.lr", opt(&a.lr)),
            ("model.n_layers", opt(&a.layers)),
        ],
    )?;
    let text = std::fs::read_to_string(&a.corpus).map_err(|e| io_err(&a.corpus, e))?;
    let vocab = Vocab::from_text(&text);
    let stream = TokenStream::from_text(&text, &vocab, cfg.train_fraction)?;
    let m = &cfg.model;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_layers: m.n_layers,
        d_ff: m.d_ff,
        max_seq_len: m.max_seq_len,
        seed: m.seed,
        ..ModelConfig::tiny12(vocab.len())
    };
    let start = std::time::Instant::now();
    let (model, report) = pretrain(model_cfg, stream.train(), &cfg.train, |step, loss| {
        eprintln!("step {step:>6}  loss {loss:.4}  {:.0}s", start.elapsed().as_secs_f64());
    })?;
    let bytes = write_checkpoint(&Checkpoint { model, vocab })?;
    config::write_file(&a.out, &bytes)?;
    config::write_manifest(
        &config::manifest_path(&a.out, &a.manifest),
        "pretrain",
        &cfg,
        json!({
            "checkpoint": a.out,
            "corpus": a.corpus,
            "final_loss": report.final_loss,
            "losses": report.losses,
        }),
    )?;
    println!("final training loss {:.4}", report.final_loss.unwrap_or(f32::NAN));
    Ok(())
}
