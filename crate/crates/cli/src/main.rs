//! `orpercept`: simulate, calibrate and evaluate the four-camera rig.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod error;
mod manifest;
mod store;

use clap::{Args, Parser, Subcommand};
use commands::{Context, FuseMode};
use error::CliError;
use manifest::{Inputs, Output, RunInfo};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

pub const THREADS_ENV: &str = "ORPERCEPT_THREADS";

#[derive(Parser)]
#[command(
    name = "orpercept",
    version,
    about = "Calibration and multi-view segmentation for a robot-mounted ToF rig"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream; required by stochastic commands.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `manifest.json` is written there too.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a calibration sweep and the benchmark scenes.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve all four extrinsics from a sweep (simulated when no --input).
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// `calibration/` directory written by `simulate`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// TRE of a calibration on a sweep, or Monte-Carlo TRE of the solver.
    Tre {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Project every view's confidences into each target camera.
    Project {
        #[command(flatten)]
        common: Common,
        /// `benchmark/` directory written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scene: Option<usize>,
        /// Camera poses to project with instead of the ground truth.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Merge the views of each scene into per-camera label maps.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: FuseMode,
        /// Hourglass weights written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<usize>,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Train the hourglass on the first split of the benchmark.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score every method on the first split.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Repeated k-fold comparison of every method.
    Kfold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Hourglass mIOU as cameras are added one at a time.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        cameras: u8,
    },
}

fn set_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    let (name, common) = match &cli.command {
        Command::Simulate { common } => ("simulate", common),
        Command::Calibrate { common, .. } => ("calibrate", common),
        Command::Tre { common, .. } => ("tre", common),
        Command::Project { common, .. } => ("project", common),
        Command::Fuse { common, .. } => ("fuse", common),
        Command::Train { common } => ("train", common),
        Command::Benchmark { common } => ("benchmark", common),
        Command::Kfold { common, .. } => ("kfold", common),
        Command::Ablate { common, .. } => ("ablate", common),
    };
    let common = common.clone();
    let mut inputs = Inputs::default();
    let mut config = commands::load_config(&mut inputs, common.config.as_ref())?;
    if let Some(seed) = common.seed {
        config.benchmark.seed = seed;
        config.train.seed = seed;
        config.calibration.noise.seed = seed;
    }
    let mut arguments = BTreeMap::new();
    let mut arg = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            arguments.insert(k.to_string(), v);
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Calibrate { input, .. } => arg("input", path(input)),
        Command::Tre { input, calibration, .. } => {
            arg("input", path(input));
            arg("calibration", path(calibration));
        }
        Command::Project {
            input,
            scene,
            calibration,
            ..
        } => {
            arg("input", Some(input.display().to_string()));
            arg("scene", scene.map(|s| s.to_string()));
            arg("calibration", path(calibration));
        }
        Command::Fuse {
            input,
            mode,
            checkpoint,
            scene,
            calibration,
            ..
        } => {
            arg("input", Some(input.display().to_string()));
            arg("mode", Some(format!("{mode:?}").to_lowercase()));
            arg("checkpoint", path(checkpoint));
            arg("scene", scene.map(|s| s.to_string()));
            arg("calibration", path(calibration));
        }
        Command::Kfold { k, reps, .. } | Command::Ablate { k, reps, .. } => {
            if let Some(k) = k {
                if *k < 2 {
                    return Err(CliError::Usage("--k must be at least 2".into()));
                }
                config.experiment.k = *k;
            }
            if let Some(r) = reps {
                if *r == 0 {
                    return Err(CliError::Usage("--reps must be positive".into()));
                }
                config.experiment.repetitions = *r;
            }
            if let Command::Ablate { cameras, .. } = &cli.command {
                arg("cameras", Some(cameras.to_string()));
            }
        }
        _ => {}
    }
    config.validate()?;
    let mut ctx = Context {
        config,
        seed: common.seed,
        inputs,
        out: Output::create(&common.out)?,
    };
    match &cli.command {
        Command::Simulate { .. } => commands::simulate(&mut ctx)?,
        Command::Calibrate { input, .. } => commands::calibrate(&mut ctx, input.as_deref())?,
        Command::Tre { input, calibration, .. } => commands::tre(&mut ctx, input.as_deref(), calibration.as_deref())?,
        Command::Project {
            input,
            scene,
            calibration,
            ..
        } => commands::project(&mut ctx, input, *scene, calibration.as_deref())?,
        Command::Fuse {
            input,
            mode,
            checkpoint,
            scene,
            calibration,
            ..
        } => commands::fuse(
            &mut ctx,
            input,
            *mode,
            checkpoint.as_deref(),
            *scene,
            calibration.as_deref(),
        )?,
        Command::Train { .. } => commands::train(&mut ctx)?,
        Command::Benchmark { .. } => commands::benchmark(&mut ctx)?,
        Command::Kfold { .. } => commands::kfold(&mut ctx)?,
        Command::Ablate { cameras, .. } => commands::ablate(&mut ctx, usize::from(*cameras))?,
    }
    let Context {
        config,
        seed,
        inputs,
        out,
    } = ctx;
    out.finish(
        RunInfo {
            command: name.to_string(),
            arguments,
            seed,
            config,
        },
        inputs,
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("orpercept: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
