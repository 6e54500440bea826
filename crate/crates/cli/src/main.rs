//! `cape`: synth-gen / train / eval / infer / density over one config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cape_core::config::RunConfig;
use cape_core::error::Error;
use cape_core::pipeline;

#[derive(Parser)]
#[command(name = "cape", about = "Text-conditioned keypoint localization pipeline")]
struct Cli {
    /// TOML configuration file. Omit to run on the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CheckpointArg {
    /// Model checkpoint produced by `cape train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, registry, and vocabulary files.
    SynthGen,
    /// Run instruction tuning (with the optional pretraining stage).
    Train {
        /// Initialize parameters from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Predict all keypoints of one image.
    Infer {
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Query image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Category whose keypoints to predict.
        #[arg(long)]
        category: String,
    },
    /// Sample one keypoint repeatedly and estimate its density.
    Density {
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        category: String,
        /// Keypoint name within the category.
        #[arg(long)]
        keypoint: String,
        /// Ground-truth location "x,y" for the Gaussian-baseline comparison.
        #[arg(long)]
        gt: Option<String>,
        /// Foreground mask (PGM) for in-foreground mass.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

fn parse_gt(text: &str) -> Result<(f64, f64), Error> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("--gt {text:?} must be \"x,y\"")));
    }
    let x: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad --gt x value {:?}", parts[0])))?;
    let y: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad --gt y value {:?}", parts[1])))?;
    Ok((x, y))
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => RunConfig::from_toml("", &cli.overrides)?,
    };
    match cli.command {
        Command::SynthGen => {
            let dir = pipeline::run_synth_gen(&config)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { init } => {
            let outcome = pipeline::run_train(&config, init.as_deref())?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                outcome.state.steps,
                outcome.state.final_loss,
                outcome.checkpoint.display()
            );
        }
        Command::Eval { checkpoint } => {
            let outcome = pipeline::run_eval(&config, &checkpoint.checkpoint)?;
            print!("{}", outcome.report.to_table());
            println!("report written to {}", outcome.out_dir.display());
        }
        Command::Infer {
            checkpoint,
            image,
            category,
        } => {
            let outcome = pipeline::run_infer(&config, &checkpoint.checkpoint, &image, &category)?;
            for p in &outcome.predictions {
                println!("{:<40} {:.3} {:.3} {:?}", p.name, p.x, p.y, p.flags);
            }
            println!("predictions written to {}", outcome.out_path.display());
        }
        Command::Density {
            checkpoint,
            image,
            category,
            keypoint,
            gt,
            mask,
        } => {
            let gt = gt.as_deref().map(parse_gt).transpose()?;
            let outcome = pipeline::run_density(
                &config,
                &checkpoint.checkpoint,
                &image,
                &category,
                &keypoint,
                gt,
                mask.as_deref(),
            )?;
            if let Some(report) = &outcome.report {
                println!(
                    "kde in-square mass {:.4}, gaussian in-square mass {:.4}",
                    report.kde.in_square_mass, report.gaussian.in_square_mass
                );
            }
            println!("density artifacts written to {}", outcome.out_dir.display());
        }
    }
    Ok(())
}

/// File-not-found class errors exit 2; everything else exits 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(msg) if msg.contains("not found") || msg.contains("cannot read") => 2,
        Error::Schema { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            // One machine-parsable error line.
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "code": code })
            );
            ExitCode::from(code)
        }
    }
}
