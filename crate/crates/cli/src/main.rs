mod ablate_cmd;
mod calib_args;
mod config;
mod eval_cmd;
mod pretrain_cmd;
mod probe_cmd;
mod quantize_cmd;
mod schedule_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sliderquant", version, about = "Sliding-window post-training quantization for a tiny decoder LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model from scratch on a text corpus.
    Pretrain(pretrain_cmd::Args),
    /// Calibrate and quantize a checkpoint with sliding windows.
    Quantize(quantize_cmd::Args),
    /// Quantize with a comparison method.
    Baseline(quantize_cmd::BaselineArgs),
    /// Perplexity of an artifact or checkpoint on a text file.
    Eval(eval_cmd::Args),
    /// Per-layer and prefix quantization sensitivity curves.
    Probe(probe_cmd::Args),
    /// Print the window schedule for a configuration.
    DumpSchedule(schedule_cmd::Args),
    /// Run the schedule ablation grid.
    Ablate(ablate_cmd::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { config::EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain_cmd::run(a),
        Command::Quantize(a) => quantize_cmd::run(a),
        Command::Baseline(a) => quantize_cmd::run_baseline_cmd(a),
        Command::Eval(a) => eval_cmd::run(a),
        Command::Probe(a) => probe_cmd::run(a),
        Command::DumpSchedule(a) => schedule_cmd::run(a),
        Command::Ablate(a) => ablate_cmd::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
