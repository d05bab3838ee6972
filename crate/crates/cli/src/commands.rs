use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evio_core::eval::{evaluate, read_tum, write_tum, Alignment, Metrics, Stamped};
use evio_core::event::{load_events, write_events_csv, Event};
use evio_core::imu::{load_imu, write_imu_csv, ImuSample};
use evio_core::pipeline::{self, RunOutput};
use evio_core::sim::{OracleProvider, Scenario};

use crate::config::RunConfig;
use crate::error::CliError;

pub const EVENTS_FILE: &str = "events.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "gt_tum.txt";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const ESTIMATE_FILE: &str = "estimate_tum.txt";
pub const STATUS_FILE: &str = "status.log";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Write the scenario's events, IMU, ground truth and manifest.
pub fn simulate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    config.validate()?;
    let dir = &config.output_dir;
    ensure_dir(dir)?;
    let scenario = Scenario::new(config.scenario.clone());
    let events = scenario.synthesize_events();
    let imu = scenario.synthesize_imu();
    log::info!("{} events, {} IMU samples", events.len(), imu.len());

    let paths: Vec<PathBuf> = [EVENTS_FILE, IMU_FILE, GROUND_TRUTH_FILE, MANIFEST_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_events_csv(create(&paths[0])?, &events).map_err(|e| CliError::input(&paths[0], e))?;
    write_imu_csv(create(&paths[1])?, &imu).map_err(|e| CliError::input(&paths[1], e))?;
    let gt: Vec<Stamped> = scenario
        .ground_truth()
        .into_iter()
        .map(|(t_us, pose)| Stamped { t_us, pose })
        .collect();
    let mut w = create(&paths[2])?;
    write_tum(&mut w, &gt)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&paths[2], e))?;
    // the manifest describes the data, not where it was written
    let manifest = RunConfig {
        input_dir: None,
        output_dir: RunConfig::default().output_dir,
        ..config.clone()
    };
    write_text(&paths[3], &manifest.to_toml())?;
    Ok(paths)
}

fn load_inputs(config: &RunConfig, scenario: &Scenario) -> Result<(Vec<Event>, Vec<ImuSample>), CliError> {
    match &config.input_dir {
        Some(dir) => {
            let ev = dir.join(EVENTS_FILE);
            let im = dir.join(IMU_FILE);
            let events = load_events(&ev).map_err(|e| CliError::input(&ev, e))?;
            let imu = load_imu(&im).map_err(|e| CliError::input(&im, e))?;
            Ok((events, imu))
        }
        None => Ok((scenario.synthesize_events(), scenario.synthesize_imu())),
    }
}

/// Run the pipeline and write the estimate and status log. The log is
/// written even when the run fails.
pub fn run(config: &RunConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let dir = &config.output_dir;
    ensure_dir(dir)?;
    let scenario = Scenario::new(config.scenario.clone());
    let (events, imu) = load_inputs(config, &scenario)?;
    let o = &config.oracle;
    let mut oracle = OracleProvider::new(scenario.clone(), o.sigma, o.drop_rate, o.seed);
    let mut log = vec![
        format!(
            "# scenario {:?} seed {} duration {} s",
            config.scenario.kind, config.scenario.seed, config.scenario.duration_s
        ),
        format!("# {} events, {} IMU samples", events.len(), imu.len()),
    ];
    let result = pipeline::run(
        &events,
        &imu,
        scenario.intrinsics(),
        &scenario.extrinsics,
        &mut oracle,
        &config.pipeline,
        &mut log,
    );
    match &result {
        Ok(out) => log.push(format!(
            "# done: {} poses, initialized at segment {}",
            out.poses.len(),
            out.init_segment.map_or("-".to_string(), |k| k.to_string())
        )),
        Err(e) => log.push(format!("# failed: {e}")),
    }
    let mut status = log.join("\n");
    status.push('\n');
    write_text(&dir.join(STATUS_FILE), &status)?;
    let out = result?;
    let path = dir.join(ESTIMATE_FILE);
    let mut w = create(&path)?;
    write_tum(&mut w, &out.trajectory())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))?;
    Ok(out)
}

fn read_trajectory(path: &Path) -> Result<Vec<Stamped>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_tum(f).map_err(|e| CliError::input(path, e))
}

pub fn eval(estimate: &Path, ground_truth: &Path, alignment: Alignment) -> Result<Metrics, CliError> {
    let est = read_trajectory(estimate)?;
    let gt = read_trajectory(ground_truth)?;
    Ok(evaluate(&est, &gt, alignment)?)
}
