use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};

use maskdiff::config::RunConfig;
use maskdiff::error::{Error, Result};
use maskdiff::exec::Exec;
use maskdiff::pipeline::{self, RunPaths};
use maskdiff::schedule::{build_schedule, Variant};

/// Masked diffusion over multi-part sign token streams.
#[derive(Debug, Parser)]
#[command(name = "maskdiff", version)]
struct Cli {
    /// Configuration file (`key = value` lines, `include other.conf`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set m=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, action = ArgAction::Append)]
    overrides: Vec<String>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic train/dev/test splits and pretraining corpus.
    GenData,
    /// Fit the body/left/right codebooks.
    FitCodebooks,
    /// Pretrain with text and sign masking.
    Pretrain,
    /// Fine-tune on text-conditioned sign generation.
    Finetune {
        /// Checkpoint to start from (defaults to a fresh model).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory name inside the run directory.
        #[arg(long, default_value = "finetune")]
        name: String,
    },
    /// Generate sign tokens and motion for a JSON-lines input file.
    Generate {
        /// Records with `id` and `text_tokens`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Predict from the tokenized reference motion in the input instead.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "generate")]
        name: String,
    },
    /// Score a generation directory against reference records.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Time generation of the iterative decoders and the causal baseline.
    Bench,
    /// Exact number of unmasking orders, plain and staged.
    OrderCount {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Also print the staged schedule.
        #[arg(long)]
        schedule: bool,
    },
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.cmd {
        Cmd::GenData => {
            let dir = pipeline::gen_data(&cfg, exec)?;
            println!("{}", dir.display());
        }
        Cmd::FitCodebooks => {
            let (path, q) = pipeline::fit_tokenizer(&cfg, exec)?;
            println!("{}", path.display());
            println!("quantization error body={:.6} left={:.6} right={:.6}", q[0], q[1], q[2]);
        }
        Cmd::Pretrain => {
            let (path, h) = pipeline::cmd_pretrain(&cfg, exec)?;
            report_history(&path, &h);
        }
        Cmd::Finetune { init, name } => {
            let (path, h) = pipeline::cmd_finetune(&cfg, init.as_deref(), name, exec)?;
            report_history(&path, &h);
        }
        Cmd::Generate { input, checkpoint, oracle, name } => {
            let ckpt = if *oracle { None } else { checkpoint.as_deref() };
            let toks = pipeline::cmd_generate(&cfg, ckpt, input, name, exec)?;
            println!("{} sequences -> {}", toks.len(), RunPaths::new(&cfg).stage(name).display());
        }
        Cmd::Evaluate { generated, reference } => {
            let rep = pipeline::cmd_evaluate(&cfg, generated, reference, exec)?;
            print!("{}", rep.to_table());
        }
        Cmd::Bench => print!("{}", pipeline::cmd_bench(&cfg)?.to_table()),
        Cmd::OrderCount { m, k, schedule } => {
            let (m, k) = (m.unwrap_or(cfg.m), k.unwrap_or(cfg.k));
            print!("{}", pipeline::cmd_order_count(m, k)?);
            if *schedule {
                print!("{}", build_schedule(m, k, Variant::Utc)?.to_table());
            }
        }
        Cmd::ShowConfig => {
            print!("{}", cfg.canonical());
            println!("# hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn report_history(path: &Path, h: &maskdiff::train::TrainHistory) {
    if let Some(last) = h.epochs.last() {
        println!("final epoch {}: loss {:.6}", last.epoch, last.l_total);
    }
    println!("{}", path.display());
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(format!("Configuration keys:\n{}", RunConfig::help()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
