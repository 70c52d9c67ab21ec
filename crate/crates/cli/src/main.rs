use std::fmt::Write as _;
use std::io::{ErrorKind, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sumlab_core::pipeline::{
    self, ExperimentConfig, PipelineError, StrategyName, TrainOptions, Variant,
};

/// Headline summarization experiments: preprocess, build vocabularies,
/// train, evaluate and summarize from one TOML config.
#[derive(Debug, Parser)]
#[command(name = "sumlab", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config file.
    #[arg(long, short, global = true, default_value = "sumlab.toml")]
    config: PathBuf,
    /// Model variant (bpe, word, fre-f2h, fre-lm2h, fre-lvt).
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Seed for initialization, data split and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set training.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deduplicate, split and annotate the raw corpus.
    Preprocess,
    /// Build the word vocabulary and learn BPE merges.
    BuildVocab,
    /// Train the configured variant.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode a test set and report ROUGE.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test records (defaults to `data.test`).
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Summarize text given with --text or on standard input.
    Summarize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
}

#[derive(Debug, Args)]
struct DecodingArgs {
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
}

impl DecodingArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.strategy {
            let name = match s {
                StrategyArg::Greedy => StrategyName::Greedy,
                StrategyArg::Beam => StrategyName::Beam,
            };
            out.push(format!(
                "decoding.strategy={}",
                serde_json::to_string(&name).unwrap()
            ));
        }
        if let Some(w) = self.beam_width {
            out.push(format!("decoding.beam_width={w}"));
        }
        if let Some(m) = self.max_len {
            out.push(format!("decoding.max_len={m}"));
        }
        out
    }
}

fn load_config(common: &CommonArgs, extra: Vec<String>) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(v) = common.variant {
        overrides.push(format!("model.variant=\"{v}\""));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("model.seed={seed}"));
        overrides.push(format!("corpus.split_seed={seed}"));
        overrides.push(format!("training.shuffle_seed={seed}"));
    }
    overrides.extend(extra);
    Ok(ExperimentConfig::load(&common.config, &overrides)?)
}

/// Runs one subcommand and returns what it prints: human-readable lines,
/// then one JSON record.
fn run(cli: Cli) -> Result<String> {
    let mut out = String::new();
    match cli.command {
        Command::Preprocess => {
            let config = load_config(&cli.common, Vec::new())?;
            let r = pipeline::preprocess(&config)?;
            writeln!(
                out,
                "read {} records ({} empty skipped, {} duplicates removed): {} train, {} valid",
                r.records, r.skipped_empty, r.duplicates_removed, r.train, r.valid
            )?;
            writeln!(out, "{}", json!({ "command": "preprocess", "report": r }))?;
        }
        Command::BuildVocab => {
            let config = load_config(&cli.common, Vec::new())?;
            let r = pipeline::build_vocab(&config)?;
            writeln!(
                out,
                "word vocabulary {} tokens; BPE {} merges, {} subwords",
                r.word_vocab_size, r.bpe_merges, r.bpe_vocab_size
            )?;
            writeln!(out, "{}", json!({ "command": "build-vocab", "report": r }))?;
        }
        Command::Train { resume, checkpoint } => {
            let config = load_config(&cli.common, Vec::new())?;
            let s = pipeline::train(&config, &TrainOptions { resume, checkpoint })?;
            match s.final_loss {
                Some(loss) => writeln!(
                    out,
                    "trained {} steps {}..={} (final loss {loss:.4}); checkpoint {}",
                    config.model.variant,
                    s.first_step,
                    s.final_step,
                    s.checkpoint.display()
                )?,
                None => writeln!(out, "nothing to train: already at step {}", s.final_step)?,
            }
            writeln!(out, "{}", json!({ "command": "train", "summary": s }))?;
        }
        Command::Evaluate {
            checkpoint,
            test,
            decoding,
        } => {
            let config = load_config(&cli.common, decoding.overrides())?;
            let o = pipeline::evaluate(&config, checkpoint.as_deref(), test.as_deref())?;
            writeln!(out, "{} pairs", o.pairs)?;
            write!(out, "{}", o.report)?;
            writeln!(
                out,
                "{}",
                json!({ "command": "evaluate", "pairs": o.pairs, "report": o.report })
            )?;
        }
        Command::Summarize {
            checkpoint,
            text,
            decoding,
        } => {
            let config = load_config(&cli.common, decoding.overrides())?;
            let text = match text {
                Some(t) => t,
                None => {
                    let mut buf = String::new();
                    std::io::stdin()
                        .read_to_string(&mut buf)
                        .context("reading text from standard input")?;
                    buf
                }
            };
            writeln!(
                out,
                "{}",
                pipeline::summarize(&config, checkpoint.as_deref(), &text)?
            )?;
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => match std::io::stdout().write_all(out.as_bytes()) {
            Err(e) if e.kind() != ErrorKind::BrokenPipe => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            _ => ExitCode::SUCCESS,
        },
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<PipelineError>()
                .map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
