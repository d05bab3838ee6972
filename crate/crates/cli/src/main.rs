mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evio_core::eval::Alignment;
use evio_core::sim::ScenarioKind;

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_CONFIG};

/// Event-inertial odometry on synthetic event and IMU streams.
#[derive(Debug, Parser)]
#[command(name = "evio", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by `simulate` and `run`. Flags win over the file.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, env = "EVIO_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "EVIO_OUT")]
    out: Option<PathBuf>,
    /// Scenario seed.
    #[arg(long, env = "EVIO_SEED")]
    seed: Option<u64>,
    /// circle, figure_eight, straight, static or rotation.
    #[arg(long, env = "EVIO_SCENARIO")]
    scenario: Option<ScenarioKind>,
    /// Scenario length, seconds.
    #[arg(long, env = "EVIO_DURATION")]
    duration: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write events.csv, imu.csv, gt_tum.txt and manifest.toml.
    Simulate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the pipeline; writes estimate_tum.txt and status.log.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory written by `simulate`; its manifest is the default config.
        #[arg(long, env = "EVIO_INPUT")]
        input: Option<PathBuf>,
        /// Patches per segment.
        #[arg(long, env = "EVIO_PATCHES")]
        patches: Option<usize>,
        /// Keyframes in the optimization window.
        #[arg(long, env = "EVIO_WINDOW")]
        window: Option<usize>,
        /// Flow noise of the simulated provider, pixels.
        #[arg(long, env = "EVIO_SIGMA")]
        sigma: Option<f64>,
        /// Event-only ablation: no IMU factors.
        #[arg(long)]
        no_imu: bool,
    },
    /// ATE and MPE of an estimate against ground truth, both TUM files.
    Eval {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// se3, sim3 or first5s.
        #[arg(long, env = "EVIO_ALIGN", default_value = "se3")]
        align: Alignment,
    },
}

fn base_config(o: &Overrides, input: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let mut c = match (&o.config, input) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) => RunConfig::load(&dir.join(commands::MANIFEST_FILE))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(out) = &o.out {
        c.output_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        c.scenario.seed = seed;
    }
    if let Some(kind) = o.scenario {
        c.scenario.kind = kind;
    }
    if let Some(d) = o.duration {
        c.scenario.duration_s = d;
    }
    if let Some(dir) = input {
        c.input_dir = Some(dir.clone());
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { overrides } => {
            let config = base_config(&overrides, None)?;
            for path in commands::simulate(&config)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Run {
            overrides,
            input,
            patches,
            window,
            sigma,
            no_imu,
        } => {
            let mut config = base_config(&overrides, input.as_ref())?;
            if let Some(n) = patches {
                config.pipeline.patches = n;
            }
            if let Some(k) = window {
                config.pipeline.window = k;
            }
            if let Some(s) = sigma {
                config.oracle.sigma = s;
            }
            if no_imu {
                config.pipeline.use_imu = false;
            }
            let out = commands::run(&config)?;
            println!(
                "wrote {} poses to {}",
                out.poses.len(),
                config.output_dir.join(commands::ESTIMATE_FILE).display()
            );
        }
        Command::Eval {
            estimate,
            ground_truth,
            align,
        } => {
            let m = commands::eval(&estimate, &ground_truth, align)?;
            print!("alignment {align:?}\n{}", m.report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
