use nalgebra::{UnitQuaternion, Vector2, Vector3};

use super::*;
use crate::eval::umeyama;
use crate::event::{voxelize, VoxelDims, DEFAULT_BINS};
use crate::patch_graph::{FlowPrediction, EDGE_LOOKBACK, PATCHES_PER_SEGMENT};
use crate::sim::{OracleProvider, Scenario, ScenarioConfig, ScenarioKind};

#[test]
fn constants() {
    assert_eq!(INIT_SEGMENTS, 8);
    assert_eq!(ADMISSION_FLOW_PX, 8.0);
    assert_eq!(GYRO_VARIANCE_THRESHOLD, 0.25);
    assert_eq!(INIT_UPDATE_ITERATIONS, 12);
    assert_eq!(INIT_BA_ITERATIONS, 2);
    assert_eq!(GRAVITY_MAGNITUDE, 9.81);
}

/// Predicts the same flow for every edge.
struct ConstantFlow(f64);

impl CorrespondenceProvider for ConstantFlow {
    fn query(&mut self, _: &PatchGraph, edges: &[EdgeKey]) -> Result<Vec<FlowPrediction>, ProviderError> {
        Ok(edges
            .iter()
            .map(|_| FlowPrediction::new(Vector2::new(self.0, 0.0), Vector2::new(1.0, 1.0)))
            .collect())
    }
}

fn blank_voxel(index: usize) -> EventVoxel {
    let dims = VoxelDims::new(DEFAULT_BINS, 260, 346);
    let t0 = index as i64 * 33_333;
    EventVoxel::zeros(dims, t0, t0 + 33_333, index)
}

fn buffer() -> InitBuffer {
    InitBuffer::new(PATCHES_PER_SEGMENT, PatchSelector::default(), GraphParams::default())
}

#[test]
fn admission_threshold_is_inclusive() {
    assert!(!flow_admits(7.9));
    assert!(flow_admits(8.0));
    for (flow, admitted) in [(7.9, false), (8.0, true)] {
        let mut b = buffer();
        let first = b
            .admit_segment(&blank_voxel(0), 33_333, &mut ConstantFlow(0.0))
            .unwrap();
        assert_eq!(first, Admission::Admitted { flow: None });
        let second = b
            .admit_segment(&blank_voxel(1), 66_666, &mut ConstantFlow(flow))
            .unwrap();
        assert_eq!(matches!(second, Admission::Admitted { .. }), admitted, "flow {flow}");
        assert_eq!(b.len(), 1 + usize::from(admitted));
    }
}

#[test]
fn buffer_holds_at_most_eight_segments() {
    let mut b = buffer();
    for k in 0..10 {
        let a = b
            .admit_segment(&blank_voxel(k), (k as i64 + 1) * 33_333, &mut ConstantFlow(20.0))
            .unwrap();
        assert_eq!(a == Admission::Full, k >= 8);
    }
    assert_eq!(b.len(), INIT_SEGMENTS);
    b.slide();
    assert_eq!(b.len(), INIT_SEGMENTS - 1);
    assert_eq!(b.segments[0].flow, None);
    b.reset();
    assert!(b.is_empty());
}

fn gyro_samples(variance: f64, seconds: f64) -> Vec<ImuSample> {
    // a sinusoid of amplitude a over whole periods has variance a^2 / 2
    let a = (2.0 * variance).sqrt();
    let n = (seconds * 1000.0) as i64;
    (0..=n)
        .map(|k| {
            let t = k as f64 * 1e-3;
            let w = a * (2.0 * std::f64::consts::PI * 2.0 * t).sin();
            ImuSample::new(k * 1000, Vector3::new(0.0, 0.0, 9.81), Vector3::new(w, 0.1 * w, 0.0))
        })
        .collect()
}

#[test]
fn excitation_threshold_is_exclusive() {
    assert!(!excitation_admits(0.25));
    assert!(!check_imu_excitation(&gyro_samples(0.24, 2.0)).is_ready());
    assert!(check_imu_excitation(&gyro_samples(0.26, 2.0)).is_ready());
    assert!(!check_imu_excitation(&gyro_samples(0.0, 3.0)).is_ready());
    assert!(matches!(
        check_imu_excitation(&gyro_samples(1.0, 1.5)),
        Excitation::InsufficientData { .. }
    ));
}

fn scenario(kind: ScenarioKind, duration_s: f64) -> Scenario {
    scenario_at(kind, duration_s, 1000.0)
}

fn scenario_at(kind: ScenarioKind, duration_s: f64, imu_rate_hz: f64) -> Scenario {
    Scenario::new(
        ScenarioConfig {
            kind,
            duration_s,
            imu_rate_hz,
            extrinsic_translation: if kind == ScenarioKind::Rotation {
                [0.0; 3]
            } else {
                [0.05, 0.0, 0.02]
            },
            ..ScenarioConfig::default()
        }
        .noiseless(),
    )
}

fn voxel(s: &Scenario, k: usize) -> (EventVoxel, i64) {
    let seg = s.config.segment_us;
    let intr = s.intrinsics();
    let (t0, t1) = (k as i64 * seg, (k as i64 + 1) * seg);
    let events: Vec<_> = s
        .synthesize_events_between(t0, t1)
        .into_iter()
        .filter(|e| e.t < t1)
        .collect();
    let mut v = voxelize(&events, t0, seg, VoxelDims::new(DEFAULT_BINS, intr.height, intr.width)).unwrap();
    v.segment_index = k;
    (v, t1)
}

/// Admit segments from the start of `s` until the buffer is full.
fn fill(s: &Scenario, oracle: &mut OracleProvider) -> InitBuffer {
    let mut b = buffer();
    let mut k = 0;
    while !b.is_full() {
        let (v, t) = voxel(s, k);
        b.admit_segment(&v, t, oracle).unwrap();
        k += 1;
        assert!(k < 200, "buffer never filled");
    }
    b
}

#[test]
fn static_scene_is_never_admitted() {
    let s = scenario(ScenarioKind::Static, 1.0);
    let mut oracle = OracleProvider::new(s.clone(), 0.0, 0.0, 1);
    let mut b = buffer();
    for k in 0..20 {
        let (v, t) = voxel(&s, k);
        b.admit_segment(&v, t, &mut oracle).unwrap();
    }
    assert_eq!(b.len(), 1);
}

#[test]
fn event_only_init_matches_truth_up_to_similarity() {
    let s = scenario(ScenarioKind::Circle, 3.0);
    let mut oracle = OracleProvider::new(s.clone(), 0.0, 0.0, 1);
    let b = fill(&s, &mut oracle);
    assert!(b.segments.iter().skip(1).all(|x| x.flow.unwrap() >= ADMISSION_FLOW_PX));
    let init = event_only_init(&b, s.intrinsics(), &mut oracle).unwrap();
    let frames = init.frames();
    let est: Vec<Vector3<f64>> = frames.iter().map(|f| f.2.translation).collect();
    let gt: Vec<Vector3<f64>> = frames.iter().map(|f| s.camera_pose(f.1).translation).collect();
    let sim = umeyama(&est, &gt, true);
    let ate = (est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (sim.apply(e) - g).norm_squared())
        .sum::<f64>()
        / est.len() as f64)
        .sqrt();
    assert!(ate < 1e-5, "ATE {ate}, rms {}", init.rms_px);
    assert!(init.rms_px < 1e-3);

    let again = event_only_init(&b, s.intrinsics(), &mut oracle).unwrap();
    assert_eq!(init.graph.dump(), again.graph.dump());
}

#[test]
fn pure_rotation_is_rejected() {
    let s = scenario(ScenarioKind::Rotation, 3.0);
    let mut oracle = OracleProvider::new(s.clone(), 0.0, 0.0, 1);
    let b = fill(&s, &mut oracle);
    let r = event_only_init(&b, s.intrinsics(), &mut oracle);
    assert!(
        matches!(
            r,
            Err(InitError::InitDiverged { .. } | InitError::InsufficientParallax { .. })
        ),
        "{:?}",
        r.map(|i| i.parallax)
    );
}

/// Camera poses at every third frame time with translations divided by
/// `scale`, and the preintegrations between them.
fn aligned_inputs(
    s: &Scenario,
    scale: f64,
    world: UnitQuaternion<f64>,
) -> (Vec<Pose>, Vec<PreintegratedImu>, Vec<i64>) {
    let times: Vec<i64> = s.frame_times().into_iter().step_by(3).take(INIT_SEGMENTS).collect();
    let w = Pose::from_rotation(world);
    let cams = times
        .iter()
        .map(|&t| {
            let c = w.compose(&s.camera_pose(t));
            Pose::new(c.rotation, c.translation / scale)
        })
        .collect();
    let imu = s.synthesize_imu();
    let pres = preintegrate_frames(&imu, &times, &Bias::zero(), &ImuNoise::default()).unwrap();
    (cams, pres, times)
}

#[test]
fn alignment_recovers_scale_gravity_and_bias() {
    let s = scenario(ScenarioKind::Circle, 1.0);
    let (cams, pres, times) = aligned_inputs(&s, 2.37, UnitQuaternion::identity());
    let r = inertial_align(&cams, &pres, &s.extrinsics).unwrap();
    assert!((r.scale / 2.37 - 1.0).abs() < 1e-4, "scale {}", r.scale);
    assert!(r.gyro_bias.norm() < 1e-5, "bias {}", r.gyro_bias.norm());
    assert!((r.gravity.norm() - 9.81).abs() < 1e-9);
    assert!((r.gravity - Vector3::new(0.0, 0.0, -9.81)).norm() < 1e-3);
    for (v, t) in r.velocities.iter().zip(&times) {
        assert!((v - s.body_state(*t).velocity).norm() < 1e-3);
    }
}

#[test]
fn unbiased_gyro_gives_zero_bias_estimate() {
    // the trapezoid rule's error on the rotation integral shrinks with the
    // square of the sample interval
    let s = scenario_at(ScenarioKind::Circle, 1.0, 20_000.0);
    let (cams, pres, _) = aligned_inputs(&s, 1.0, UnitQuaternion::identity());
    let r = inertial_align(&cams, &pres, &s.extrinsics).unwrap();
    assert!(r.gyro_bias.norm() < 1e-8, "bias {}", r.gyro_bias.norm());
}

#[test]
fn alignment_is_equivariant_under_world_rotation() {
    let s = scenario(ScenarioKind::Circle, 1.0);
    let rot = UnitQuaternion::from_euler_angles(0.3, -0.5, 1.2);
    let (cams, pres, _) = aligned_inputs(&s, 0.5, UnitQuaternion::identity());
    let (cams_r, pres_r, _) = aligned_inputs(&s, 0.5, rot);
    let a = inertial_align(&cams, &pres, &s.extrinsics).unwrap();
    let b = inertial_align(&cams_r, &pres_r, &s.extrinsics).unwrap();
    assert!((rot * a.gravity - b.gravity).norm() < 1e-6);
    assert!((a.scale - b.scale).abs() < 1e-6 * a.scale);
}

#[test]
fn constant_velocity_is_degenerate() {
    let s = scenario(ScenarioKind::Straight, 1.0);
    let (cams, pres, _) = aligned_inputs(&s, 1.0, UnitQuaternion::identity());
    let r = inertial_align(&cams, &pres, &s.extrinsics);
    assert!(matches!(r, Err(InitError::DegenerateMotion { .. })), "{r:?}");
}

#[test]
fn aligned_tracker_starts_at_metric_truth() {
    let s = scenario(ScenarioKind::Circle, 3.0);
    let mut oracle = OracleProvider::new(s.clone(), 0.0, 0.0, 1);
    let b = fill(&s, &mut oracle);
    let init = event_only_init(&b, s.intrinsics(), &mut oracle).unwrap();
    let times: Vec<i64> = init.frames().iter().map(|f| f.1).collect();
    let cams: Vec<Pose> = init.frames().iter().map(|f| f.2).collect();
    let imu = s.synthesize_imu();
    let pres = preintegrate_frames(&imu, &times, &Bias::zero(), &ImuNoise::default()).unwrap();
    let r = inertial_align(&cams, &pres, &s.extrinsics).unwrap();
    let tracker = bootstrap_tracker(init, &r, *s.intrinsics(), s.extrinsics, TrackerSettings::default());
    assert_eq!(tracker.window.len(), INIT_SEGMENTS);
    assert_eq!(tracker.graph.params.lookback, EDGE_LOOKBACK);
    // positions agree with truth up to yaw and translation
    let est: Vec<Vector3<f64>> = tracker.window.frames.iter().map(|f| f.state.pose.translation).collect();
    let gt: Vec<Vector3<f64>> = times.iter().map(|&t| s.body_pose(t).translation).collect();
    let se3 = umeyama(&est, &gt, false);
    for (e, g) in est.iter().zip(&gt) {
        assert!((se3.apply(e) - g).norm() < 1e-3);
    }
    let up = tracker.window.frames[0].state.pose.rotation * Vector3::z();
    let up_true = s.body_pose(times[0]).rotation * Vector3::z();
    assert!((up.z - up_true.z).abs() < 1e-3);
}
