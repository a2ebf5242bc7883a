//! `relate`: generate relational datasets, train gated models on them and
//! inspect what the models learned.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "relate", version, about = "Relational feature learning with gated models")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    mapping_units: Option<usize>,
    /// Set any config key, e.g. `--set train.momentum=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            factors: self.factors,
            mapping_units: self.mapping_units,
            set: self.set.clone(),
        };
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset (or regenerate one from its manifest).
    Generate {
        #[command(flatten)]
        config: Option<ConfigArgs>,
        /// Regenerate from a dataset sidecar manifest instead of a config.
        #[arg(long, conflicts_with = "config")]
        from_manifest: Option<PathBuf>,
        /// Output path (default `<output_dir>/dataset.relb`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train the configured model; writes checkpoint, trace and filter grids.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset path (default `<output_dir>/dataset.relb`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Diagnostics, flow fields and analogies for a trained run or a warp.
    Analyze {
        /// Run directory holding `run.json` and the checkpoint.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Reference warp(s): identity:N, cyclic:N:S, shift2d:H:W:DX:DY,
        /// split:H:W:TDX:TDY:BDX:BDY, rotation:H:W:DEG.
        #[arg(long = "warp")]
        warps: Vec<String>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Render the filters of a run as image grids.
    ExportFilters {
        #[arg(long)]
        run: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// png or pgm.
        #[arg(long, default_value = "png")]
        format: String,
        #[arg(long)]
        columns: Option<usize>,
        #[arg(long, default_value_t = 3)]
        scale: u32,
    },
    /// Finite-difference check of the autoencoder gradients.
    Gradcheck {
        /// Seeds per configuration (8 configurations each).
        #[arg(long, default_value_t = 3)]
        repeats: u64,
        #[arg(long)]
        json: bool,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RELATE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("RELATE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Generate {
            config,
            from_manifest,
            out,
        } => match (config, from_manifest) {
            (_, Some(manifest)) => {
                let out = out.ok_or_else(|| CliError::Config("--from-manifest needs --out".into()))?;
                commands::regenerate(&manifest, &out)?;
                println!("{}", out.display());
            }
            (Some(c), None) => {
                let cfg = c.load()?;
                println!("{}", commands::generate(&cfg, out.as_deref())?.display());
            }
            (None, None) => return Err(CliError::Config("generate needs --config or --from-manifest".into())),
        },
        Command::Train {
            config,
            dataset,
            resume,
        } => {
            let cfg = config.load()?;
            let outcome = commands::train(&cfg, dataset.as_deref(), resume)?;
            match outcome.final_loss {
                Some(l) => println!("epochs {} final loss {l:.6}", outcome.epochs_completed),
                None => println!("epochs {}", outcome.epochs_completed),
            }
        }
        Command::Analyze {
            run,
            dataset,
            warps,
            samples,
            out,
        } => {
            if run.is_none() && warps.is_empty() {
                return Err(CliError::Config("analyze needs --run and/or --warp".into()));
            }
            let report = commands::analyze(&commands::AnalyzeRequest {
                run: run.as_deref(),
                dataset: dataset.as_deref(),
                warps: &warps,
                samples,
                out: &out,
            })?;
            if let Some(f) = &report.filters_x {
                println!("mean subspace fraction {:.4}", f.mean_fraction);
            }
            if let Some(c) = report.mean_analogy_correlation {
                println!("mean analogy correlation {c:.4}");
            }
            println!("{}", out.join("analysis.json").display());
        }
        Command::ExportFilters {
            run,
            out,
            format,
            columns,
            scale,
        } => {
            if !matches!(format.as_str(), "png" | "pgm") {
                return Err(CliError::Config(format!("unsupported format {format:?}")));
            }
            for p in commands::export_filters(&run, &out, &format, columns, scale)? {
                println!("{}", p.display());
            }
        }
        Command::Gradcheck { repeats, json } => {
            let (worst, cases) = commands::gradcheck(repeats)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cases)?);
            }
            println!("max relative error {worst:.3e} over {} configurations", cases.len());
            if !(worst < GRADCHECK_TOLERANCE) {
                return Err(CliError::Numerical(format!(
                    "gradient check exceeded {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
