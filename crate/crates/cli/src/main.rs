//! `asymseg` command-line tool.
//!
//! Configuration is resolved as: named profile, then `--config FILE`, then
//! positional `key=value` overrides, later values winning.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asymseg::config::RunConfig;
use asymseg::data::{GenSpec, Split};
use asymseg::harness::{self, Study, TrainOptions};
use asymseg::profile::{compare, profile_model};
use asymseg::{Error, Result};

#[derive(Parser)]
#[command(name = "asymseg", version, about = "Asymmetric RGB-DSM segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named defaults: desk or large.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Flat `key = value` file applied after the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied last.
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        harness::resolve_config(&self.profile, self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of each scene whose RGB is occluded.
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
    },
    /// Train a model; writes metrics.jsonl, checkpoints and resumable state to out_dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the state saved in out_dir.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on a split.
    Eval {
        /// Run directory; its config.txt is the base configuration.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint file; defaults to the run's best checkpoint, else final.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for colour-mapped prediction tiles and the legend.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// `key=value` overrides of the run's configuration.
        overrides: Vec<String>,
    },
    /// Run an ablation study: components, tiers or alpha.
    Ablate {
        study: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Report FLOPs, parameters and activation memory.
    Profile {
        #[command(flatten)]
        config: ConfigArgs,
        /// Square input size.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Overrides for a second configuration shown side by side.
        #[arg(long = "vs", num_args = 1..)]
        versus: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
            occlusion,
        } => {
            let spec = GenSpec {
                size,
                seed,
                occlusion_rate: occlusion,
                ..GenSpec::default()
            };
            let summary = harness::gen_data(&out, &spec, count)?;
            print!("{summary}");
        }
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let config = config.resolve()?;
            println!("config {} seed {}", config.config_hash(), config.seed);
            let opts = TrainOptions { resume, stop_after };
            let s = harness::cmd_train(&config, opts, &mut std::io::stdout())?;
            match (s.best_miou, s.best_epoch) {
                (Some(m), Some(e)) => println!("done after {} epochs; best val mIoU {m:.4} at epoch {e}", s.epochs),
                _ => println!("done after {} epochs", s.epochs),
            }
        }
        Command::Eval {
            run,
            checkpoint,
            split,
            predictions,
            overrides,
        } => {
            let files = harness::RunFiles::new(&run);
            let mut config = RunConfig::default();
            config.apply_file(&files.config())?;
            harness::apply_overrides(&mut config, &overrides)?;
            config.validate()?;
            let split: Split = split.parse()?;
            let checkpoint = checkpoint.unwrap_or_else(|| {
                let best = files.checkpoint("best");
                if best.exists() {
                    best
                } else {
                    files.checkpoint("final")
                }
            });
            let record = harness::cmd_eval(&config, &checkpoint, split, predictions.as_deref())?;
            println!("{}", record.to_json_line());
        }
        Command::Ablate {
            study,
            config,
            seeds,
            jobs,
        } => {
            let study: Study = study.parse()?;
            let config = config.resolve()?;
            let log = |line: &str| eprintln!("{line}");
            let results = harness::cmd_ablate(study, &config, &seeds, jobs, &log)?;
            print!("{}", harness::ranked_table(&results));
        }
        Command::Profile {
            config,
            size,
            versus,
            json,
        } => {
            let base = config.resolve()?;
            let a = profile_model(&base.model, size)?;
            if versus.is_empty() {
                if json {
                    println!("{}", serde_json::to_string_pretty(&a).expect("report serializes"));
                } else {
                    println!("{a}");
                }
            } else {
                let mut other = base.clone();
                harness::apply_overrides(&mut other, &versus)?;
                other.validate()?;
                let b = profile_model(&other.model, size)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&[&a, &b]).expect("report serializes"));
                } else {
                    print!("{}", compare(&a, &b));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
