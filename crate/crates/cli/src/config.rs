use std::fs;
use std::path::{Path, PathBuf};

use evio_core::pipeline::PipelineConfig;
use evio_core::sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Noise model of the simulated correspondence provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Flow noise per axis, pixels.
    pub sigma: f64,
    /// Fraction of edges returned with zero confidence.
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            sigma: 0.0,
            drop_rate: 0.0,
            seed: 1,
        }
    }
}

/// Everything a `simulate` or `run` invocation depends on. `simulate`
/// writes it back out as the scenario manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `events.csv` and `imu.csv`. Without it the data is
    /// synthesized from `scenario`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub oracle: OracleConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_dir: None,
            output_dir: PathBuf::from("out"),
            scenario: ScenarioConfig::default(),
            oracle: OracleConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scenario;
        let checks = [
            (s.duration_s > 0.0, "scenario.duration_s must be positive"),
            (s.imu_rate_hz >= 100.0, "scenario.imu_rate_hz must be at least 100"),
            (s.segment_us > 0, "scenario.segment_us must be positive"),
            (s.event_rate >= 0.0, "scenario.event_rate must not be negative"),
            (self.oracle.sigma >= 0.0, "oracle.sigma must not be negative"),
            (
                (0.0..=1.0).contains(&self.oracle.drop_rate),
                "oracle.drop_rate must lie in [0, 1]",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(CliError::Config(msg.to_string()));
        }
        self.pipeline.validate().map_err(CliError::Config)
    }
}
