use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpr_core::config::RunConfig;
use lpr_core::dataset::Manifest;
use lpr_core::pipeline::{self, EvalProtocol, Stage, Timing};
use lpr_core::{par, Error, Result};

/// Forest LiDAR place recognition from multi-slice BEV density images.
#[derive(Parser, Debug)]
#[command(name = "lpr", version)]
struct Cli {
    /// JSON run configuration; missing keys take their default values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting configuration when no file is given: default or toy.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Configuration override, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Rasterization mode override: density or elevation.
    #[arg(long, global = true)]
    bev_mode: Option<String>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Replace files in a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Print per-stage wall-clock times to stderr.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic forest dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove terrain height and crop the height band.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write BEV slice images.
    Rasterize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine positive and negative training pairs.
    Mine {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to these sequences (repeatable).
        #[arg(long)]
        sequence: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a descriptor model on mined pairs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute global descriptors for every submap.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval evaluation of a descriptor file.
    Eval {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// intra (loop closure) or inter (re-localization).
        #[arg(long, default_value = "intra")]
        protocol: String,
        #[arg(long)]
        sequence: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-patch slice weights of one submap.
    ExportWeights {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    Config,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset.as_str() {
            "default" => RunConfig::default(),
            "toy" => RunConfig::toy(),
            other => {
                return Err(Error::Usage(format!(
                    "unknown preset {other:?} (default or toy)"
                )))
            }
        },
    };
    let mut sets = cli.sets.clone();
    if let Some(mode) = &cli.bev_mode {
        sets.push(format!("bev.mode={mode}"));
    }
    base.with_overrides(&sets)
}

fn manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path)
}

fn run(cli: &Cli, timing: &mut Timing) -> Result<()> {
    let mut stage = Stage::new(effective_config(cli)?);
    stage.overwrite = cli.overwrite;
    match &cli.command {
        Command::Synth { seed, out } => {
            let m = timing.time("synth", || pipeline::cmd_synth(&stage, *seed, out))?;
            log::info!("wrote {} submaps", m.len());
        }
        Command::Preprocess { manifest: m, out } => {
            let m = manifest(m)?;
            timing.time("preprocess", || pipeline::cmd_preprocess(&stage, &m, out))?;
        }
        Command::Rasterize { manifest: m, out } => {
            let m = manifest(m)?;
            timing.time("rasterize", || pipeline::cmd_rasterize(&stage, &m, out))?;
        }
        Command::Mine {
            manifest: m,
            sequence,
            out,
        } => {
            let m = manifest(m)?;
            let n = timing.time("mine", || pipeline::cmd_mine(&stage, &m, sequence, out))?;
            log::info!("mined {n} pairs");
        }
        Command::Train {
            manifest: m,
            pairs,
            out,
        } => {
            let m = manifest(m)?;
            timing.time("train", || pipeline::cmd_train(&stage, &m, pairs, out))?;
        }
        Command::Extract {
            manifest: m,
            model,
            out,
        } => {
            let m = manifest(m)?;
            pipeline::cmd_extract(&stage, &m, model, out, timing)?;
        }
        Command::Eval {
            descriptors,
            manifest: m,
            protocol,
            sequence,
            out,
        } => {
            let m = manifest(m)?;
            let protocol: EvalProtocol = protocol.parse()?;
            let report = timing.time("eval", || {
                pipeline::cmd_eval(&stage, descriptors, &m, sequence, protocol, out)
            })?;
            print!("{report}");
        }
        Command::ExportWeights {
            manifest: m,
            model,
            id,
            out,
        } => {
            let m = manifest(m)?;
            let path = pipeline::cmd_export_weights(&stage, &m, id, model, out)?;
            println!("{}", path.display());
        }
        Command::Config => print!("{}", stage.config.to_json()),
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    let mut timing = Timing::default();
    let result = par::with_jobs(cli.jobs, || run(&cli, &mut timing));
    if cli.timing {
        eprint!("{}", timing.render());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
