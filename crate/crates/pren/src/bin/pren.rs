use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pren::commands;
use pren::config::RunConfig;
use pren::error::{Error, Result};
use pren::synthdata::CorpusConfig;

#[derive(Parser)]
#[command(
    name = "pren",
    about = "Scene text recognition with primitive representation learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        /// Path to the run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.csv.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a generated test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset configuration (JSON, corpus section).
        #[arg(long)]
        data: PathBuf,
        /// Also write the report row to this CSV file.
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recognize text in PGM images, one `path<TAB>text` line each.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// PGM (P5) images, 64x256 or 256x64.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Export heatmaps, pre-pool maps, and attention maps as PGM files.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        image: PathBuf,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
    /// Compare per-image latency of parallel vs recursive decoding.
    Bench {
        #[arg(long)]
        pren: PathBuf,
        #[arg(long)]
        pren2d: PathBuf,
        /// Dataset configuration (JSON, corpus section).
        #[arg(long)]
        data: PathBuf,
        /// Images to time after warmup.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a toy corpus and dump it as PGM files with labels.tsv.
    Dump {
        /// Dataset configuration (JSON, corpus section).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_corpus_config(path: &PathBuf, seed: Option<u64>) -> Result<CorpusConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: CorpusConfig =
        serde_json::from_str(&text).map_err(|e| Error::format("dataset config", e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.override_seed(s);
            }
            let outcome = commands::cmd_train(&cfg, &out)?;
            println!(
                "trained {} epochs, last test accuracy {:.2}%",
                outcome.epochs_run,
                outcome.last_accuracy * 100.0
            );
            println!("checkpoint: {}", outcome.final_checkpoint.display());
            println!("metrics:    {}", outcome.metrics_csv.display());
            Ok(())
        }
        Command::Eval { ckpt, data, out_csv, seed } => {
            let data_cfg = load_corpus_config(&data, seed)?;
            let summary = commands::cmd_eval(&ckpt, &data_cfg, out_csv.as_deref())?;
            print!("{}", summary.csv());
            Ok(())
        }
        Command::Infer { ckpt, files } => {
            let results = commands::cmd_infer(&ckpt, &files)?;
            let mut failures = 0usize;
            for (path, outcome) in &results {
                match outcome {
                    Ok(text) => println!("{}\t{}", path.display(), text),
                    Err(e) => {
                        failures += 1;
                        eprintln!("{}: {}", path.display(), e);
                    }
                }
            }
            if failures == results.len() {
                return Err(Error::Usage("no input image could be processed".into()));
            }
            Ok(())
        }
        Command::Visualize { ckpt, image, out } => {
            let written = commands::cmd_visualize(&ckpt, &image, &out)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Bench { pren, pren2d, data, count, warmup, seed } => {
            let data_cfg = load_corpus_config(&data, seed)?;
            let report = commands::cmd_bench(&pren, &pren2d, &data_cfg, count, warmup)?;
            print!("{}", report.text());
            Ok(())
        }
        Command::Dump { data, out, seed } => {
            let data_cfg = load_corpus_config(&data, seed)?;
            let corpus = pren::synthdata::make_dataset::<f32>(&data_cfg)?;
            let names = pren::synthdata::dump_samples(&out, &corpus.train)?;
            println!("wrote {} samples to {}", names.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
