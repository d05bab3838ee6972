//! End-to-end driver: slices the event stream into segments, runs the
//! initialization state machine, then tracks every following segment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Tracker, TrackerSettings, JOINT_BA_ITERATIONS, POST_ALIGNMENT_ITERATIONS};
use crate::camera::Intrinsics;
use crate::eval::Stamped;
use crate::event::{voxelize, EncodingError, Event, VoxelDims, DEFAULT_BINS, DEFAULT_SEGMENT_US};
use crate::geometry::Pose;
use crate::imu::{Bias, ImuNoise, ImuSample};
use crate::init::{
    bootstrap_event_only, bootstrap_tracker, check_imu_excitation_with, event_only_init, inertial_align,
    preintegrate_frames, Admission, Excitation, InitBuffer, InitError, ADMISSION_FLOW_PX, GYRO_VARIANCE_THRESHOLD,
    MIN_EXCITATION_SPAN_US,
};
use crate::patch_graph::{
    GraphParams, PatchSelector, DEFAULT_NMS_RADIUS, DEFAULT_PATCH_SIZE, EDGE_LOOKBACK, KEYFRAME_FLOW_THRESHOLD,
    MAX_KEYFRAMES, PATCHES_PER_SEGMENT, PROTECTED_RECENT,
};
use crate::provider::CorrespondenceProvider;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub segment_us: i64,
    pub bins: usize,
    pub patches: usize,
    pub window: usize,
    pub lookback: usize,
    pub patch_size: usize,
    pub nms_radius: f64,
    pub admission_flow_px: f64,
    pub removal_flow_px: f64,
    pub protected_recent: usize,
    pub gyro_variance: f64,
    pub joint_iterations: usize,
    /// Joint iterations over the initialization window after alignment.
    pub post_alignment_iterations: usize,
    /// Off runs the event-only ablation.
    pub use_imu: bool,
    pub imu_noise: ImuNoise,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segment_us: DEFAULT_SEGMENT_US,
            bins: DEFAULT_BINS,
            patches: PATCHES_PER_SEGMENT,
            window: MAX_KEYFRAMES,
            lookback: EDGE_LOOKBACK,
            patch_size: DEFAULT_PATCH_SIZE,
            nms_radius: DEFAULT_NMS_RADIUS,
            admission_flow_px: ADMISSION_FLOW_PX,
            removal_flow_px: KEYFRAME_FLOW_THRESHOLD,
            protected_recent: PROTECTED_RECENT,
            gyro_variance: GYRO_VARIANCE_THRESHOLD,
            joint_iterations: JOINT_BA_ITERATIONS,
            post_alignment_iterations: POST_ALIGNMENT_ITERATIONS,
            use_imu: true,
            imu_noise: ImuNoise::default(),
        }
    }
}

impl PipelineConfig {
    /// Reject non-positive sizes and thresholds.
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("segment_us", self.segment_us > 0, "positive"),
            ("bins", self.bins > 0, "positive"),
            ("patches", self.patches > 0, "positive"),
            ("window", self.window >= 2, "at least 2"),
            ("lookback", self.lookback > 0, "positive"),
            ("patch_size", self.patch_size > 0, "positive"),
            ("nms_radius", self.nms_radius >= 0.0, "non-negative"),
            ("admission_flow_px", self.admission_flow_px > 0.0, "positive"),
            ("removal_flow_px", self.removal_flow_px > 0.0, "positive"),
            ("gyro_variance", self.gyro_variance > 0.0, "positive"),
            ("joint_iterations", self.joint_iterations > 0, "positive"),
        ];
        match checks.iter().find(|(_, ok, _)| !ok) {
            Some((name, _, req)) => Err(format!("`{name}` must be {req}")),
            None => Ok(()),
        }
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams {
            patch_size: self.patch_size,
            lookback: self.lookback,
            max_keyframes: self.window,
            flow_threshold: self.removal_flow_px,
            protected_recent: self.protected_recent,
        }
    }

    pub fn selector(&self) -> PatchSelector {
        PatchSelector::EventDensity {
            nms_radius: self.nms_radius,
        }
    }

    pub fn tracker_settings(&self) -> TrackerSettings {
        TrackerSettings {
            patches_per_segment: self.patches,
            selector: self.selector(),
            lookback: self.lookback,
            use_imu: self.use_imu,
            noise: self.imu_noise,
            joint_iterations: self.joint_iterations,
            ..TrackerSettings::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initialization never completed: {reason}")]
    InitNotReached { reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Init(#[from] InitError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub t_us: i64,
    /// Body pose in the estimator's world frame.
    pub pose: Pose,
    pub degraded: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub poses: Vec<PoseRecord>,
    /// Index of the segment that completed initialization.
    pub init_segment: Option<usize>,
    /// Scale applied at inertial alignment.
    pub init_scale: Option<f64>,
}

impl RunOutput {
    pub fn trajectory(&self) -> Vec<Stamped> {
        self.poses
            .iter()
            .map(|p| Stamped {
                t_us: p.t_us,
                pose: p.pose,
            })
            .collect()
    }
}

fn seconds(t_us: i64) -> f64 {
    t_us as f64 * 1e-6
}

/// Trailing IMU samples used for the excitation check ending at `t_us`.
fn excitation_window(imu: &[ImuSample], t_us: i64, span_us: i64) -> &[ImuSample] {
    let start = t_us - span_us.max(MIN_EXCITATION_SPAN_US);
    let lo = imu.partition_point(|s| s.t <= start).saturating_sub(1);
    let hi = imu.partition_point(|s| s.t <= t_us);
    &imu[lo..hi]
}

struct Initializer<'a> {
    config: &'a PipelineConfig,
    intr: Intrinsics,
    extrinsics: Pose,
    buffer: InitBuffer,
    /// Why the furthest-reaching attempt did not finish, with its stage.
    blocker: (Stage, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Admission,
    Excitation,
    EventOnly,
    Alignment,
}

impl Initializer<'_> {
    fn block(&mut self, stage: Stage, reason: String) {
        if stage >= self.blocker.0 {
            self.blocker = (stage, reason);
        }
    }

    /// Feed one segment; returns a tracker once initialization succeeds.
    fn step(
        &mut self,
        voxel: &crate::event::EventVoxel,
        t_us: i64,
        imu: &[ImuSample],
        provider: &mut dyn CorrespondenceProvider,
        out: &mut RunOutput,
        log: &mut Vec<String>,
    ) -> Result<Option<Tracker>, PipelineError> {
        let k = voxel.segment_index;
        let mut line = format!("segment {k} t={:.6} init", seconds(t_us));
        match self.buffer.admit_segment(voxel, t_us, provider)? {
            Admission::Admitted { flow } => {
                line += &format!(" admitted {}/{}", self.buffer.len(), crate::init::INIT_SEGMENTS);
                if let Some(f) = flow {
                    line += &format!(" flow={f:.3}");
                }
            }
            Admission::Rejected { flow } => {
                line += &format!(" rejected flow={flow:.3}");
                let reason = format!(
                    "segment flow {flow:.3} px below the {} px admission threshold",
                    self.buffer.admission_flow_px
                );
                self.block(Stage::Admission, reason);
            }
            Admission::Full => line += " buffer full",
        }
        if !self.buffer.is_full() {
            log::debug!("{line}");
            log.push(line);
            return Ok(None);
        }

        let result = if self.config.use_imu {
            self.try_inertial(t_us, imu, provider, &mut line)
        } else {
            self.try_event_only(provider, &mut line)
        };
        log::debug!("{line}");
        log.push(line);
        let Some((tracker, scale)) = result? else {
            return Ok(None);
        };
        for f in &tracker.window.frames {
            out.poses.push(PoseRecord {
                t_us: f.t_us,
                pose: f.state.pose,
                degraded: false,
            });
        }
        out.init_segment = Some(k);
        out.init_scale = scale;
        Ok(Some(tracker))
    }

    fn try_event_only(
        &mut self,
        provider: &mut dyn CorrespondenceProvider,
        line: &mut String,
    ) -> Result<Option<(Tracker, Option<f64>)>, PipelineError> {
        match event_only_init(&self.buffer, &self.intr, provider) {
            Ok(init) => {
                *line += &format!(" event-only init ok rms={:.4}", init.rms_px);
                let tracker = bootstrap_event_only(init, self.intr, self.extrinsics, self.config.tracker_settings());
                Ok(Some((tracker, None)))
            }
            Err(e @ (InitError::InitDiverged { .. } | InitError::InsufficientParallax { .. })) => {
                *line += &format!(" reset: {e}");
                self.block(Stage::EventOnly, e.to_string());
                self.buffer.reset();
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn try_inertial(
        &mut self,
        t_us: i64,
        imu: &[ImuSample],
        provider: &mut dyn CorrespondenceProvider,
        line: &mut String,
    ) -> Result<Option<(Tracker, Option<f64>)>, PipelineError> {
        let window = excitation_window(imu, t_us, self.buffer.span_us());
        match check_imu_excitation_with(window, self.config.gyro_variance) {
            Excitation::Ready { variance } => *line += &format!(" excitation ok var={variance:.4}"),
            Excitation::NotReady { variance } => {
                *line += &format!(" excitation not ready var={variance:.4}");
                let reason = format!(
                    "IMU excitation check failed: max gyro variance {variance:.4} does not exceed {}",
                    self.config.gyro_variance
                );
                self.block(Stage::Excitation, reason);
                self.buffer.slide();
                return Ok(None);
            }
            Excitation::InsufficientData { span_us } => {
                *line += &format!(" excitation waiting span={:.3}s", seconds(span_us));
                let reason = format!(
                    "IMU excitation check needs 2 s of samples, have {:.3} s",
                    seconds(span_us)
                );
                self.block(Stage::Excitation, reason);
                self.buffer.slide();
                return Ok(None);
            }
        }
        let init = match event_only_init(&self.buffer, &self.intr, provider) {
            Ok(init) => init,
            Err(e @ (InitError::InitDiverged { .. } | InitError::InsufficientParallax { .. })) => {
                *line += &format!(" reset: {e}");
                self.block(Stage::EventOnly, e.to_string());
                self.buffer.reset();
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let frames = init.frames();
        let times: Vec<i64> = frames.iter().map(|f| f.1).collect();
        let cams: Vec<Pose> = frames.iter().map(|f| f.2).collect();
        let pres = preintegrate_frames(imu, &times, &Bias::zero(), &self.config.imu_noise)?;
        match inertial_align(&cams, &pres, &self.extrinsics) {
            Ok(aligned) => {
                *line += &format!(
                    " aligned scale={:.6} g=[{:.4} {:.4} {:.4}] bg=[{:.2e} {:.2e} {:.2e}]",
                    aligned.scale,
                    aligned.gravity.x,
                    aligned.gravity.y,
                    aligned.gravity.z,
                    aligned.gyro_bias.x,
                    aligned.gyro_bias.y,
                    aligned.gyro_bias.z
                );
                let scale = aligned.scale;
                let mut tracker = bootstrap_tracker(
                    init,
                    &aligned,
                    self.intr,
                    self.extrinsics,
                    self.config.tracker_settings(),
                );
                tracker.refine(provider, self.config.post_alignment_iterations)?;
                Ok(Some((tracker, Some(scale))))
            }
            Err(e @ (InitError::DegenerateMotion { .. } | InitError::InvalidScale(_))) => {
                *line += &format!(" slide: {e}");
                self.block(Stage::Alignment, e.to_string());
                self.buffer.slide();
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Run the full pipeline over time-sorted events and IMU samples. Segment
/// `k` covers `[k dt, (k + 1) dt)` and its frame is stamped at the end.
/// One status line per segment is appended to `log`, also on failure.
pub fn run(
    events: &[Event],
    imu: &[ImuSample],
    intr: &Intrinsics,
    extrinsics: &Pose,
    provider: &mut dyn CorrespondenceProvider,
    config: &PipelineConfig,
    log: &mut Vec<String>,
) -> Result<RunOutput, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    if let Some(index) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(EncodingError::UnsortedStream { index: index + 1 }.into());
    }
    let dt = config.segment_us;
    let dims = VoxelDims::new(config.bins, intr.height, intr.width);
    let t_end = events
        .last()
        .map(|e| e.t + 1)
        .into_iter()
        .chain(imu.last().map(|s| s.t))
        .max()
        .unwrap_or(0);
    let count = (t_end / dt).max(0) as usize;

    let mut out = RunOutput::default();
    let mut init = Initializer {
        config,
        intr: *intr,
        extrinsics: *extrinsics,
        buffer: {
            let mut b = InitBuffer::new(config.patches, config.selector(), config.graph_params());
            b.admission_flow_px = config.admission_flow_px;
            b
        },
        blocker: (Stage::Admission, "no segment was admitted".to_string()),
    };
    let mut tracker: Option<Tracker> = None;

    for k in 0..count {
        let (t0, t1) = (k as i64 * dt, (k as i64 + 1) * dt);
        let lo = events.partition_point(|e| e.t < t0);
        let hi = events.partition_point(|e| e.t < t1);
        let mut voxel = voxelize(&events[lo..hi], t0, dt, dims)?;
        voxel.segment_index = k;

        let Some(tr) = tracker.as_mut() else {
            tracker = init.step(&voxel, t1, imu, provider, &mut out, log)?;
            continue;
        };
        let t_prev = tr.window.last().map_or(t0, |f| f.t_us);
        let span = crate::imu::samples_between(imu, t_prev, t1);
        let report = tr.track_segment(&voxel, t1, &span, provider)?;
        let mut line = format!(
            "segment {k} t={:.6} track lm_iters={} cost={:.6e}",
            seconds(t1),
            report.lm_iterations,
            report.cost
        );
        if let Some(f) = report.decision.flow {
            line += &format!(" kf_flow={f:.3}");
        }
        if let Some(r) = report.decision.removed {
            line += &format!(" removed={r}");
        }
        if let Some(m) = report.decision.marginalized {
            line += &format!(" marginalized={m}");
        }
        if report.degraded {
            line += &format!(" DEGRADED: {}", report.note.as_deref().unwrap_or("unknown"));
        }
        log::debug!("{line}");
        log.push(line);
        out.poses.push(PoseRecord {
            t_us: report.t_us,
            pose: report.pose,
            degraded: report.degraded,
        });
    }
    if tracker.is_none() {
        return Err(PipelineError::InitNotReached { reason: init.blocker.1 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Alignment};
    use crate::sim::{OracleProvider, Scenario, ScenarioConfig, ScenarioKind};

    fn scenario(kind: ScenarioKind, duration_s: f64) -> Scenario {
        Scenario::new(
            ScenarioConfig {
                kind,
                duration_s,
                ..ScenarioConfig::default()
            }
            .noiseless(),
        )
    }

    fn run_scenario(s: &Scenario, config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
        let mut oracle = OracleProvider::new(s.clone(), 0.0, 0.0, 1);
        run(
            &s.synthesize_events(),
            &s.synthesize_imu(),
            s.intrinsics(),
            &s.extrinsics,
            &mut oracle,
            config,
            &mut Vec::new(),
        )
    }

    #[test]
    fn defaults_mirror_constants() {
        let c = PipelineConfig::default();
        assert_eq!((c.patches, c.window, c.lookback), (96, 10, 13));
        assert_eq!(
            (c.admission_flow_px, c.removal_flow_px, c.gyro_variance),
            (8.0, 60.0, 0.25)
        );
        assert_eq!(c.protected_recent, 3);
        assert!(c.validate().is_ok());
        let bad = PipelineConfig {
            window: 1,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_circle_runs_end_to_end() {
        let s = scenario(ScenarioKind::Circle, 4.0);
        let out = run_scenario(&s, &PipelineConfig::default()).unwrap();
        let segments = s.frame_times().len();
        let init = out.init_segment.unwrap();
        assert!(out.poses.len() >= segments - init - 1);
        assert!(out.poses.windows(2).all(|w| w[0].t_us < w[1].t_us));
        let gt: Vec<Stamped> = out
            .poses
            .iter()
            .map(|p| Stamped {
                t_us: p.t_us,
                pose: s.body_pose(p.t_us),
            })
            .collect();
        let m = evaluate(&out.trajectory(), &gt, Alignment::Se3).unwrap();
        assert!(m.ate_rmse_m < 1e-2, "ATE {}", m.ate_rmse_m);
        assert!(out.poses.iter().all(|p| !p.degraded));
    }

    #[test]
    fn straight_line_never_initializes() {
        let s = scenario(ScenarioKind::Straight, 6.0);
        match run_scenario(&s, &PipelineConfig::default()) {
            Err(PipelineError::InitNotReached { reason }) => assert!(reason.contains("excitation"), "{reason}"),
            other => panic!("{:?}", other.map(|o| o.init_segment)),
        }
    }

    #[test]
    fn static_scene_never_initializes() {
        let s = scenario(ScenarioKind::Static, 2.0);
        assert!(matches!(
            run_scenario(&s, &PipelineConfig::default()),
            Err(PipelineError::InitNotReached { .. })
        ));
    }
}
