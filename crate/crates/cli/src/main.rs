use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use usd_core::config::RunConfig;
use usd_core::experiment;
use usd_core::train::Variant;
use usd_core::Error;

/// Intent-driven sampling and dual debiasing on a synthetic world.
#[derive(Parser, Debug)]
#[command(name = "usd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write its dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// base, usd, wo_ps, wo_d, wo_p or wo_b (default: the config's)
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out days of a dataset.
    Eval {
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant for each seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Add this offset to every analytic gradient (the check must fail).
        #[arg(long)]
        inject_bug: Option<f64>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn parse_variant(s: Option<&String>) -> Result<Option<Variant>, Failure> {
    s.map(|v| v.parse::<Variant>()).transpose().map_err(Failure::from)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let m = experiment::cmd_gen(&cfg, &out)?;
            println!("wrote dataset to {} ({})", out.display(), m.run_id);
        }
        Command::Train {
            config,
            data,
            variant,
            out,
        } => {
            let variant = parse_variant(variant.as_ref())?;
            let cfg = load_config(config.as_ref())?;
            let m = experiment::cmd_train(&cfg, &data, variant, &out)?;
            println!("trained {} into {}", m.run_id, out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let ckpt = if checkpoint.is_dir() {
                checkpoint.join(experiment::CHECKPOINT_FILE)
            } else {
                checkpoint
            };
            let r = experiment::cmd_eval(&ckpt, &data, &out)?;
            println!(
                "gauc_avg={:.5} gauc_show={:.5} gauc_click={:.5} auc={:.5} users={} excluded={}",
                r.gauc_avg, r.gauc_show, r.gauc_click, r.auc, r.users_evaluated, r.users_excluded
            );
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let table = experiment::cmd_ablate(&cfg, &data, &seeds, &out)?;
            print!("{}", table.render_table());
            if table.failures() > 0 {
                return Err(Failure::Runtime(format!(
                    "{} of {} arms failed; partial results in {}",
                    table.failures(),
                    table.arms.len(),
                    out.join(experiment::ABLATION_FILE).display()
                )));
            }
        }
        Command::Gradcheck { config, inject_bug } => {
            let cfg = load_config(config.as_ref())?;
            let report = experiment::cmd_gradcheck(&cfg, inject_bug)?;
            println!("{report}");
            if !report.passed {
                return Err(Failure::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
