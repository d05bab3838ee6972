//! Synthetic world: body trajectories, landmarks, event and IMU streams, and
//! an oracle that answers correspondence queries from ground truth.

mod oracle;
mod spline;

pub use oracle::{OracleProvider, ORACLE_EPSILON};
pub use spline::{BodyState, Jet, QuinticSpline, Trajectory, Waypoint};

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::event::{Event, DEFAULT_SEGMENT_US};
use crate::geometry::Pose;
use crate::imu::{gravity, ImuNoise, ImuSample};

/// Spacing of spline knots, seconds.
const KNOT_SPACING: f64 = 0.05;
/// Sampling step used to trace landmark image tracks, microseconds.
const TRACK_STEP_US: i64 = 250;
/// Closest depth at which a landmark still produces events.
const MIN_EVENT_DEPTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Orbit around a landmark cluster while facing it, with attitude wobble.
    Circle,
    /// Horizontal figure-eight in front of a landmark wall.
    FigureEight,
    /// Constant velocity, constant attitude.
    Straight,
    /// No motion at all.
    Static,
    /// Attitude oscillation about a fixed position.
    Rotation,
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circle" => Ok(ScenarioKind::Circle),
            "figure_eight" | "figure-eight" => Ok(ScenarioKind::FigureEight),
            "straight" => Ok(ScenarioKind::Straight),
            "static" => Ok(ScenarioKind::Static),
            "rotation" => Ok(ScenarioKind::Rotation),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub duration_s: f64,
    pub seed: u64,
    pub landmarks: usize,
    pub intrinsics: Intrinsics,
    /// Camera position in the body frame, metres.
    pub extrinsic_translation: [f64; 3],
    pub imu_rate_hz: f64,
    pub imu_noise: ImuNoise,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    /// Events per pixel of image-plane travel.
    pub event_rate: f64,
    pub segment_us: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Circle,
            duration_s: 10.0,
            seed: 7,
            landmarks: 400,
            intrinsics: Intrinsics::default(),
            extrinsic_translation: [0.05, 0.0, 0.02],
            imu_rate_hz: 1000.0,
            imu_noise: ImuNoise::default(),
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            event_rate: 1.0,
            segment_us: DEFAULT_SEGMENT_US,
        }
    }
}

impl ScenarioConfig {
    pub fn noiseless(mut self) -> Self {
        self.imu_noise = ImuNoise {
            accel_noise: 0.0,
            gyro_noise: 0.0,
            accel_walk: 0.0,
            gyro_walk: 0.0,
        };
        self.accel_bias = [0.0; 3];
        self.gyro_bias = [0.0; 3];
        self
    }
}

/// Camera mounted looking along the body x axis: camera z -> body x,
/// camera x -> body -y, camera y -> body -z.
pub fn forward_camera_rotation() -> UnitQuaternion<f64> {
    let m = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    UnitQuaternion::from_matrix(&m)
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub trajectory: Trajectory,
    pub landmarks: Vec<Vector3<f64>>,
    /// Camera in body frame.
    pub extrinsics: Pose,
}

fn to_seconds(t_us: i64) -> f64 {
    t_us as f64 * 1e-6
}

fn waypoint(kind: ScenarioKind, t: f64) -> Waypoint {
    let c = Jet::constant;
    match kind {
        ScenarioKind::Circle => {
            let (r, w, h) = (2.0, 1.0, 1.5);
            let (s, co) = (w * t).sin_cos();
            Waypoint {
                position: [
                    Jet::new(r * co, -r * w * s, -r * w * w * co),
                    Jet::new(r * s, r * w * co, -r * w * w * s),
                    c(h) + Jet::sine(0.2, PI, 0.0, t),
                ],
                euler: [
                    Jet::linear(PI, w, t),
                    Jet::sine(0.2, 2.0 * PI * 0.8, 0.0, t),
                    Jet::sine(0.1, 2.0 * PI * 1.1, 0.3, t),
                ],
            }
        }
        ScenarioKind::FigureEight => {
            let w = 2.0 * PI / 6.0;
            Waypoint {
                position: [
                    Jet::sine(0.75, 2.0 * w, 0.0, t),
                    Jet::sine(1.5, w, 0.0, t),
                    c(1.5) + Jet::sine(0.2, 1.5 * w, 0.0, t),
                ],
                euler: [
                    Jet::sine(0.3, w, 0.5, t),
                    Jet::sine(0.2, 2.0 * PI * 0.8, 0.0, t),
                    Jet::sine(0.1, 2.0 * PI * 1.1, 0.3, t),
                ],
            }
        }
        ScenarioKind::Straight => Waypoint {
            position: [Jet::linear(0.0, 1.0, t), c(0.0), c(1.5)],
            euler: [c(0.0); 3],
        },
        ScenarioKind::Static => Waypoint {
            position: [c(0.0), c(0.0), c(1.5)],
            euler: [c(0.0); 3],
        },
        ScenarioKind::Rotation => Waypoint {
            position: [c(0.0), c(0.0), c(1.5)],
            euler: [
                Jet::sine(0.5, PI, 0.0, t),
                Jet::sine(0.2, 2.0 * PI * 0.8, 0.0, t),
                Jet::sine(0.1, 2.0 * PI * 1.1, 0.3, t),
            ],
        },
    }
}

fn landmarks(kind: ScenarioKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| match kind {
            ScenarioKind::Circle => {
                let r = 1.0 * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(0.5..2.5))
            }
            ScenarioKind::FigureEight | ScenarioKind::Static | ScenarioKind::Rotation => Vector3::new(
                rng.random_range(3.5..6.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-0.5..3.5),
            ),
            // A corridor along the path keeps nearby landmarks in view.
            ScenarioKind::Straight => Vector3::new(
                rng.random_range(2.0..16.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-0.5..3.5),
            ),
        })
        .collect()
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Self {
        let kind = config.kind;
        let trajectory = Trajectory::from_fn(config.duration_s, KNOT_SPACING, |t| waypoint(kind, t));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let landmarks = landmarks(kind, config.landmarks, &mut rng);
        let extrinsics = Pose::new(forward_camera_rotation(), Vector3::from(config.extrinsic_translation));
        Scenario {
            config,
            trajectory,
            landmarks,
            extrinsics,
        }
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.config.intrinsics
    }

    pub fn duration_us(&self) -> i64 {
        (self.config.duration_s * 1e6).round() as i64
    }

    pub fn body_state(&self, t_us: i64) -> BodyState {
        self.trajectory.state(to_seconds(t_us))
    }

    pub fn body_pose(&self, t_us: i64) -> Pose {
        self.trajectory.pose(to_seconds(t_us))
    }

    pub fn camera_pose(&self, t_us: i64) -> Pose {
        self.body_pose(t_us).compose(&self.extrinsics)
    }

    /// End time of every complete segment; the timestamps frames are
    /// emitted at.
    pub fn frame_times(&self) -> Vec<i64> {
        let dt = self.config.segment_us;
        (1..).map(|k| k * dt).take_while(|&t| t <= self.duration_us()).collect()
    }

    pub fn ground_truth(&self) -> Vec<(i64, Pose)> {
        self.frame_times().into_iter().map(|t| (t, self.body_pose(t))).collect()
    }

    /// Landmark pixel and depth in the camera at `pose`, when visible.
    pub fn project_landmark(&self, pose_inv: &Pose, x: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let p = pose_inv.act(x);
        if p.z <= MIN_EVENT_DEPTH {
            return None;
        }
        let px = self.intrinsics().project(&p);
        self.intrinsics().contains(&px).then_some((px, p.z))
    }

    /// Inertial measurements at `imu_rate_hz` over the whole duration.
    pub fn synthesize_imu(&self) -> Vec<ImuSample> {
        let cfg = &self.config;
        assert!(cfg.imu_rate_hz >= 100.0, "IMU rate below 100 Hz");
        let dt = 1.0 / cfg.imu_rate_hz;
        let n = (cfg.duration_s * cfg.imu_rate_hz).floor() as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a2b_3c4d_5e6f_7081);
        let noise = cfg.imu_noise;
        let mut ba = Vector3::from(cfg.accel_bias);
        let mut bg = Vector3::from(cfg.gyro_bias);
        let g = gravity();
        let mut gauss = |sigma: f64| -> Vector3<f64> {
            if sigma == 0.0 {
                return Vector3::zeros();
            }
            Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
        };
        (0..=n)
            .map(|k| {
                let t_us = (k as f64 * 1e6 / cfg.imu_rate_hz).round() as i64;
                let s = self.body_state(t_us);
                let r_t = s.pose.rotation.inverse();
                let accel = r_t * (s.acceleration - g) + ba + gauss(noise.accel_noise / dt.sqrt());
                let gyro = s.omega + bg + gauss(noise.gyro_noise / dt.sqrt());
                ba += gauss(noise.accel_walk * dt.sqrt());
                bg += gauss(noise.gyro_walk * dt.sqrt());
                ImuSample::new(t_us, accel, gyro)
            })
            .collect()
    }

    /// Events along every landmark's image track, `event_rate` per pixel of
    /// travel, sorted by time.
    pub fn synthesize_events(&self) -> Vec<Event> {
        self.synthesize_events_between(0, self.duration_us())
    }

    pub fn synthesize_events_between(&self, t0: i64, t1: i64) -> Vec<Event> {
        let spacing = 1.0 / self.config.event_rate;
        let steps = ((t1 - t0) / TRACK_STEP_US).max(0);
        let inv_poses: Vec<Pose> = (0..=steps)
            .map(|k| self.camera_pose(t0 + k * TRACK_STEP_US).inverse())
            .collect();
        let (w, h) = (self.intrinsics().width, self.intrinsics().height);
        let mut events = Vec::new();
        for x in &self.landmarks {
            let mut prev: Option<Vector2<f64>> = None;
            let mut travelled = 0.0;
            let mut next = spacing;
            for (k, inv) in inv_poses.iter().enumerate() {
                let Some((px, _)) = self.project_landmark(inv, x) else {
                    prev = None;
                    continue;
                };
                let Some(p0) = prev else {
                    prev = Some(px);
                    travelled = 0.0;
                    next = spacing;
                    continue;
                };
                let d = px - p0;
                let len = d.norm();
                let polarity = if d.x >= 0.0 { 1 } else { -1 };
                let ta = t0 + (k as i64 - 1) * TRACK_STEP_US;
                while len > 0.0 && travelled + len >= next {
                    let s = (next - travelled) / len;
                    let at = p0 + d * s;
                    let t = ta + (s * TRACK_STEP_US as f64).floor() as i64;
                    let ex = at.x.round().clamp(0.0, (w - 1) as f64) as u32;
                    let ey = at.y.round().clamp(0.0, (h - 1) as f64) as u32;
                    events.push(Event {
                        t,
                        x: ex,
                        y: ey,
                        p: polarity,
                    });
                    next += spacing;
                }
                travelled += len;
                prev = Some(px);
            }
        }
        events.sort();
        events
    }
}
