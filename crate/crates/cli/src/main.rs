//! `spkembed`: generate, train, extract, score, evaluate and compare
//! angular-margin speaker embedding systems on synthetic data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use spkembed::config::RunConfig;
use spkembed::pipeline::{self, SbInputs, SystemSpec};

#[derive(Parser)]
#[command(name = "spkembed", version, about = "Angular-margin speaker embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set m3=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and evaluation datasets and a trial list.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an encoder and class weights on a dataset file.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embed every utterance of a dataset file.
    Extract {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute EER, minDCF and non-target statistics; write the report and DET points.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Embeddings for the S_b column (needs --dataset).
        #[arg(long, requires = "dataset")]
        embeddings: Option<PathBuf>,
        /// Dataset labelling the embeddings (needs --embeddings).
        #[arg(long, requires = "embeddings")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the separability energy of a weights file.
    Sep {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Print the between-class variance S_b of labelled embeddings.
    Sb {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train and evaluate several systems and write one comparison table.
    Sweep {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// A system as comma-separated overrides, e.g. `loss=softmax,lambda_inter=0`; repeatable.
        #[arg(long = "system", value_name = "OVERRIDES")]
        systems: Vec<String>,
        /// Key varied over --values, one system per value.
        #[arg(long, requires = "values")]
        param: Option<String>,
        /// Comma-separated values for --param, e.g. `0.1,0.2,0.3`.
        #[arg(long, requires = "param", value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn print_files(dir: &Path, names: &[&str]) {
    for n in names {
        println!("{}", dir.join(n).display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { seed, out_dir, cfg } => {
            let cfg = cfg.resolve(Some(seed))?;
            pipeline::cmd_gen(&cfg, &out_dir)?;
            print_files(
                &out_dir,
                &[
                    pipeline::TRAIN_DATASET_FILE,
                    pipeline::EVAL_DATASET_FILE,
                    pipeline::TRIALS_FILE,
                ],
            );
        }
        Command::Train {
            dataset,
            seed,
            out_dir,
            cfg,
        } => {
            let cfg = cfg.resolve(Some(seed))?;
            let out = pipeline::cmd_train(&cfg, &dataset, &out_dir)?;
            if let Some(last) = out.log.last() {
                println!("final loss {} sep {}", last.loss, last.sep_energy);
            }
        }
        Command::Extract {
            encoder,
            dataset,
            out_dir,
        } => {
            pipeline::cmd_extract(&encoder, &dataset, &out_dir)?;
            print_files(&out_dir, &[pipeline::EMBEDDINGS_FILE]);
        }
        Command::Score {
            embeddings,
            trials,
            out_dir,
        } => {
            pipeline::cmd_score(&embeddings, &trials, &out_dir)?;
            print_files(&out_dir, &[pipeline::SCORES_FILE]);
        }
        Command::Eval {
            scores,
            trials,
            embeddings,
            dataset,
            out_dir,
            cfg,
        } => {
            let cfg = cfg.resolve(None)?;
            let sb = embeddings
                .zip(dataset)
                .map(|(embeddings, dataset)| SbInputs { embeddings, dataset });
            let report = pipeline::cmd_eval(&cfg, &scores, &trials, sb.as_ref(), &out_dir)?;
            println!("{}", report.to_line());
        }
        Command::Sep { weights } => println!("{}", pipeline::cmd_sep(&weights)?),
        Command::Sb { embeddings, dataset } => println!("{}", pipeline::cmd_sb(&embeddings, &dataset)?),
        Command::Sweep {
            seed,
            out_dir,
            systems,
            param,
            values,
            cfg,
        } => {
            let base = cfg.resolve(Some(seed))?;
            let mut specs = systems
                .iter()
                .map(|s| SystemSpec::parse(s))
                .collect::<spkembed::Result<Vec<_>>>()?;
            if let Some(p) = param {
                for v in &values {
                    specs.push(SystemSpec::parse(&format!("{p}={v}"))?);
                }
            }
            if specs.is_empty() {
                bail!("sweep needs --system or --param/--values");
            }
            let rows = pipeline::cmd_sweep(&base, &specs, &out_dir)?;
            print!("{}", pipeline::format_sweep(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spkembed: error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
