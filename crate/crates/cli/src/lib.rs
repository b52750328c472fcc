//! Command-line driver: corpus generation, training, fine-tuning, inference,
//! evaluation and benchmarking.

pub mod config;
pub mod pipeline;
pub mod serve;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cdpn", version, about = "Cascaded detail-preserving super-resolution for document images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus and write its manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every stage independently.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a parallel-trained cascade through its frozen later stages.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/parallel.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<input stem>_sr.png` next to the input.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Number of stages to apply; all when omitted.
        #[arg(long)]
        stages: Option<usize>,
        /// Pad the input to a multiple of this size before upscaling, then
        /// crop the result back.
        #[arg(long, default_value_t = 1)]
        align: usize,
    },
    /// Score bicubic, the first stage plus bicubic, and the cascade on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/cascade.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also transcribe outputs with Tesseract and report S_LCS / S_LD.
        #[arg(long)]
        ocr: bool,
    },
    /// Measure inference throughput and peak memory.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Side of the square LR input.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(config: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(config)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = load(&config)?;
            cfg.prepare_output()?;
            let m = pipeline::generate_data(&cfg)?;
            println!(
                "wrote {} images ({} train / {} val / {} test) to {}",
                m.entries.len(),
                m.count(cdpn_core::data::Role::Train),
                m.count(cdpn_core::data::Role::Val),
                m.count(cdpn_core::data::Role::Test),
                cfg.data_dir().display()
            );
        }
        Command::Train { config } => {
            let cfg = load(&config)?;
            let loss = pipeline::build_loss(&cfg)?;
            let corpus = pipeline::load_corpus(&cfg)?;
            cfg.prepare_output()?;
            let (_, log) = pipeline::with_threads(cfg.threads, || pipeline::train(&cfg, &corpus, &loss))??;
            if let Some(last) = log.entries.last() {
                println!("trained {} stages; last epoch loss {:.6}", cfg.model.stages, last.loss.total);
            }
            println!("wrote {}", cfg.parallel_checkpoint().display());
        }
        Command::Finetune { config, checkpoint } => {
            let cfg = load(&config)?;
            let loss = pipeline::build_loss(&cfg)?;
            let cascade = pipeline::load_cascade(&checkpoint.unwrap_or_else(|| cfg.parallel_checkpoint()))?;
            if cascade.len() != cfg.model.stages {
                anyhow::bail!(
                    "checkpoint has {} stages but the config asks for {}",
                    cascade.len(),
                    cfg.model.stages
                );
            }
            let corpus = pipeline::load_corpus(&cfg)?;
            cfg.prepare_output()?;
            pipeline::with_threads(cfg.threads, || pipeline::finetune(&cfg, cascade, &corpus, &loss))??;
            println!("wrote {}", cfg.cascade_checkpoint().display());
        }
        Command::Sr {
            checkpoint,
            input,
            output,
            stages,
            align,
        } => {
            let output = output.unwrap_or_else(|| serve::default_output(&input));
            let meta = serve::super_resolve_file(&checkpoint, &input, &output, stages, align)?;
            println!(
                "{}×{} -> {}×{} written to {}",
                meta.input[0],
                meta.input[1],
                meta.output[0],
                meta.output[1],
                output.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            ocr,
        } => {
            let cfg = load(&config)?;
            let cascade = pipeline::load_cascade(&checkpoint.unwrap_or_else(|| cfg.cascade_checkpoint()))?;
            let corpus = pipeline::load_corpus(&cfg)?;
            cfg.prepare_output()?;
            let reports =
                pipeline::with_threads(cfg.threads, || pipeline::evaluate(&cfg, &cascade, &corpus.test, ocr))??;
            let refs: Vec<_> = reports.iter().collect();
            print!("{}", cdpn_core::metrics::MetricReport::table(&refs));
        }
        Command::Bench {
            checkpoint,
            size,
            iters,
            output,
        } => {
            let report = serve::bench(&checkpoint, size, iters)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = output {
                std::fs::write(&path, &json)?;
            }
            println!("{json}");
        }
    }
    Ok(())
}
