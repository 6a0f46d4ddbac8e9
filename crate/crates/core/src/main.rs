use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use streamst::config::RunConfig;
use streamst::metrics::read_refs;
use streamst::pipeline::{self, Layout};
use streamst::prompt::{ChatClient, HttpChatClient, MockChatClient};
use streamst::streaming::EmissionLog;

#[derive(Parser)]
#[command(name = "streamst", version, about = "Streaming speech translation: data synthesis, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, default_value = "configs/toy.toml")]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a machine-readable JSON result.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus into the data directory.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Data directory (defaults to the configured one).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build robust segments, vocabulary and references from alignments.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Translate sentences with canned answers from this JSON map.
        #[arg(long, conflicts_with = "endpoint")]
        mock_endpoint: Option<PathBuf>,
        /// Translate sentences through the HTTP endpoint in STREAMST_CHAT_URL.
        #[arg(long)]
        endpoint: bool,
    },
    /// Run one training stage (0: decoder warm-up, 1: encoder and adapter, 2: LoRA).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        stage: u8,
        /// Starting checkpoint (defaults to the previous stage's).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stream held-out recordings through a checkpoint and log emissions.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        latency_multiplier: Option<usize>,
    },
    /// Score emission logs: BLEU / StreamLAAL / StreamLAAL_CA.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        latency_multiplier: Option<usize>,
        /// Score a single emission log instead of the configured run.
        #[arg(long, requires = "refs")]
        log: Option<PathBuf>,
        #[arg(long, requires = "log")]
        refs: Option<PathBuf>,
        /// Report file (JSON).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check every record of a manifest or alignment file.
    Validate {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Toy { common, output } => {
            let cfg = load(&common)?;
            let Some(toy) = &cfg.toy else { bail!("configuration has no [toy] section") };
            let dir = output.unwrap_or(cfg.data.data_dir.clone());
            let s = pipeline::write_toy_data(toy, &dir)?;
            emit(common.json, &s, || {
                format!("wrote {} train and {} held-out recordings ({:.2} h) to {}", s.train_recordings, s.heldout_recordings, s.hours, dir.display())
            })?;
        }
        Command::Synthesize { common, mock_endpoint, endpoint } => {
            let cfg = load(&common)?;
            let client: Option<Box<dyn ChatClient>> = match (mock_endpoint, endpoint) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(Box::new(MockChatClient { answers: serde_json::from_str(&text)? }))
                }
                (None, true) => Some(Box::new(HttpChatClient::from_env()?)),
                (None, false) => None,
            };
            let s = pipeline::synthesize(&cfg, client.as_deref())?;
            emit(common.json, &s, || format!("{} segments ({} sliced, {} simulated), {:.2} h, vocab {}", s.segments, s.sliced, s.simulated, s.hours, s.vocab_size))?;
        }
        Command::Train { common, stage, init, output } => {
            let cfg = load(&common)?;
            let r = pipeline::train_stage(&cfg, stage, init.as_deref(), output.as_deref())?;
            #[derive(Serialize)]
            struct Out {
                stage: u8,
                steps: usize,
                first_loss: f64,
                last_loss: f64,
            }
            let out = Out { stage, steps: r.steps, first_loss: r.first_loss, last_loss: r.last_loss };
            emit(common.json, &out, || format!("stage {stage}: {} steps, loss {:.4} -> {:.4}", r.steps, r.first_loss, r.last_loss))?;
        }
        Command::Translate { common, checkpoint, latency_multiplier } => {
            let cfg = load(&common)?;
            let k = latency_multiplier.unwrap_or(cfg.latency_multiplier);
            let ckpt = checkpoint.unwrap_or_else(|| Layout::new(&cfg).checkpoint(2));
            let logs = pipeline::translate(&cfg, &ckpt, k)?;
            let tokens: usize = logs.iter().map(|(_, l)| l.records.len()).sum();
            #[derive(Serialize)]
            struct Out {
                latency_multiplier: usize,
                streams: usize,
                tokens: usize,
                output: PathBuf,
            }
            let out = Out { latency_multiplier: k, streams: logs.len(), tokens, output: Layout::new(&cfg).emissions(k) };
            emit(common.json, &out, || format!("k={k}: {} streams, {tokens} tokens -> {}", logs.len(), out.output.display()))?;
        }
        Command::Evaluate { common, latency_multiplier, log, refs, output } => {
            let (report, k) = if let (Some(log), Some(refs)) = (log, refs) {
                let k = latency_multiplier.unwrap_or(0);
                let streams = vec![(log.display().to_string(), EmissionLog::read_jsonl(&log)?, read_refs(&refs)?)];
                (pipeline::evaluate_logs(&streams, k)?, k)
            } else {
                let cfg = load(&common)?;
                let k = latency_multiplier.unwrap_or(cfg.latency_multiplier);
                (pipeline::evaluate_run(&cfg, k)?, k)
            };
            if let Some(p) = output {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            emit(common.json, &report, || {
                format!("k={k}  BLEU / StreamLAAL / StreamLAAL_CA = {} ms  (token accuracy {:.4})", report.summary(), report.token_accuracy)
            })?;
        }
        Command::Validate { path, json } => {
            let r = pipeline::validate_file(&path)?;
            if json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                for rec in r.records.iter().filter(|r| !r.ok) {
                    println!("line {}: FAIL {}", rec.line, rec.reason.as_deref().unwrap_or(""));
                }
                println!("{}: {} records, {} passed, {} failed", r.kind, r.total, r.passed, r.failed);
            }
            if r.failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
