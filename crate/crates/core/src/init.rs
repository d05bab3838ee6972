//! Bootstrap: accumulate moving event segments, recover structure up to
//! scale with event-only bundle adjustment, then align it with the IMU to
//! obtain metric scale, gravity, velocities and gyroscope bias.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::backend::{SlidingWindow, Tracker, TrackerSettings, WindowFrame};
use crate::camera::Intrinsics;
use crate::dba::{ba_iterate, residual, DbaError};
use crate::event::EventVoxel;
use crate::geometry::{so3_log, Pose};
use crate::imu::{
    preintegrate, samples_between, Bias, ImuError, ImuNoise, ImuSample, KeyframeState, PreintegratedImu,
    GRAVITY_MAGNITUDE,
};
use crate::patch_graph::{
    select_patches, EdgeKey, FrameId, GraphError, GraphParams, PatchGraph, PatchKey, PatchSelector,
};
use crate::provider::{refresh_flows, CorrespondenceProvider, ProviderError};

/// Admitted segments needed before event-only initialization.
pub const INIT_SEGMENTS: usize = 8;
/// Minimum mean flow, pixels, for a segment to be admitted.
pub const ADMISSION_FLOW_PX: f64 = 8.0;
/// Gyroscope variance, (rad/s)^2, that the busiest axis must exceed.
pub const GYRO_VARIANCE_THRESHOLD: f64 = 0.25;
/// Shortest IMU span the excitation statistic is computed over.
pub const MIN_EXCITATION_SPAN_US: i64 = 2_000_000;
/// Update iterations (flow query plus one bundle adjustment step).
pub const INIT_UPDATE_ITERATIONS: usize = 12;
/// Event-only bundle adjustment iterations after the updates.
pub const INIT_BA_ITERATIONS: usize = 2;
/// Largest RMS reprojection residual, pixels, of an accepted initialization.
pub const MAX_INIT_RMS_PX: f64 = 3.0;
/// Smallest baseline to median depth ratio of an accepted initialization.
pub const MIN_PARALLAX: f64 = 1e-3;
/// Alignment systems with a worse condition number are rejected.
pub const MAX_ALIGNMENT_CONDITION: f64 = 1e8;
pub const GRAVITY_REFINE_ITERATIONS: usize = 4;
const GYRO_BIAS_ITERATIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("need {INIT_SEGMENTS} admitted segments, have {0}")]
    NotEnoughSegments(usize),
    #[error("event-only initialization diverged (RMS residual {rms:.3} px)")]
    InitDiverged { rms: f64 },
    #[error("insufficient parallax (baseline/depth {ratio:.2e})")]
    InsufficientParallax { ratio: f64 },
    #[error("degenerate motion for inertial alignment (condition number {condition:.2e})")]
    DegenerateMotion { condition: f64 },
    #[error("alignment produced a non-positive scale {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Dba(#[from] DbaError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("imu: {0}")]
    Imu(String),
}

impl From<ImuError> for InitError {
    fn from(e: ImuError) -> Self {
        InitError::Imu(e.to_string())
    }
}

/// An admitted segment: its voxel and the frame timestamp.
#[derive(Clone, Debug)]
pub struct BufferedSegment {
    pub voxel: EventVoxel,
    pub t_us: i64,
    /// Mean flow from the previously admitted segment; `None` for the first.
    pub flow: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct InitBuffer {
    pub segments: Vec<BufferedSegment>,
    pub patches_per_segment: usize,
    pub selector: PatchSelector,
    pub params: GraphParams,
    /// Defaults to [`ADMISSION_FLOW_PX`].
    pub admission_flow_px: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Admission {
    Admitted {
        flow: Option<f64>,
    },
    Rejected {
        flow: f64,
    },
    /// Buffer already holds [`INIT_SEGMENTS`] segments.
    Full,
}

/// Whether the flow measured against the previous segment admits a new one.
pub fn flow_admits(flow: f64) -> bool {
    flow >= ADMISSION_FLOW_PX
}

impl InitBuffer {
    pub fn new(patches_per_segment: usize, selector: PatchSelector, params: GraphParams) -> Self {
        InitBuffer {
            segments: Vec::new(),
            patches_per_segment,
            selector,
            params,
            admission_flow_px: ADMISSION_FLOW_PX,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.segments.len() >= INIT_SEGMENTS
    }

    pub fn reset(&mut self) {
        self.segments.clear();
    }

    /// Drop the oldest segment so a newer one can be admitted.
    pub fn slide(&mut self) {
        if !self.segments.is_empty() {
            self.segments.remove(0);
        }
        if let Some(first) = self.segments.first_mut() {
            first.flow = None;
        }
    }

    /// Time covered by the buffered segments.
    pub fn span_us(&self) -> i64 {
        match (self.segments.first(), self.segments.last()) {
            (Some(a), Some(b)) => b.t_us - a.voxel.t_start,
            _ => 0,
        }
    }

    /// Mean predicted flow from the last admitted segment's patches into
    /// the new segment, with both frames at identity and unit depth.
    pub fn measure_flow(
        &self,
        voxel: &EventVoxel,
        t_us: i64,
        provider: &mut dyn CorrespondenceProvider,
    ) -> Result<Option<f64>, InitError> {
        let Some(prev) = self.segments.last() else {
            return Ok(None);
        };
        let (a, b) = (prev.voxel.segment_index, voxel.segment_index);
        let mut g = PatchGraph::new(self.params);
        g.push_keyframe(a, prev.t_us, Pose::identity());
        g.push_keyframe(b, t_us, Pose::identity());
        let sel = select_patches(
            &prev.voxel,
            self.selector,
            self.patches_per_segment,
            self.params.patch_size,
            1.0,
        )?;
        for (n, mut p) in sel.patches.into_iter().enumerate() {
            p.key = PatchKey { anchor: a, index: n };
            g.insert_patch(p);
            g.insert_edge(EdgeKey {
                source: PatchKey { anchor: a, index: n },
                target: b,
            });
        }
        refresh_flows(provider, &mut g)?;
        let flows: Vec<f64> = g
            .edges()
            .filter(|(_, f)| !f.is_ignored())
            .map(|(_, f)| f.delta.norm())
            .collect();
        if flows.is_empty() {
            return Ok(Some(0.0));
        }
        Ok(Some(flows.iter().sum::<f64>() / flows.len() as f64))
    }

    /// Admit `voxel` if it moved at least [`ADMISSION_FLOW_PX`] relative to
    /// the last admitted segment. The first segment is always admitted.
    pub fn admit_segment(
        &mut self,
        voxel: &EventVoxel,
        t_us: i64,
        provider: &mut dyn CorrespondenceProvider,
    ) -> Result<Admission, InitError> {
        if self.is_full() {
            return Ok(Admission::Full);
        }
        let flow = self.measure_flow(voxel, t_us, provider)?;
        match flow {
            Some(f) if f < self.admission_flow_px => Ok(Admission::Rejected { flow: f }),
            _ => {
                self.segments.push(BufferedSegment {
                    voxel: voxel.clone(),
                    t_us,
                    flow,
                });
                Ok(Admission::Admitted { flow })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Excitation {
    Ready {
        variance: f64,
    },
    NotReady {
        variance: f64,
    },
    /// Less than [`MIN_EXCITATION_SPAN_US`] of samples.
    InsufficientData {
        span_us: i64,
    },
}

impl Excitation {
    pub fn is_ready(&self) -> bool {
        matches!(self, Excitation::Ready { .. })
    }
}

/// Largest per-axis population variance of the gyroscope readings.
pub fn max_gyro_variance(samples: &[ImuSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let var = samples
        .iter()
        .map(|s| (s.gyro - mean).component_mul(&(s.gyro - mean)))
        .sum::<Vector3<f64>>()
        / n;
    var.max()
}

pub fn excitation_admits(variance: f64) -> bool {
    variance > GYRO_VARIANCE_THRESHOLD
}

/// Gate on gyroscope excitation over `samples`.
pub fn check_imu_excitation(samples: &[ImuSample]) -> Excitation {
    check_imu_excitation_with(samples, GYRO_VARIANCE_THRESHOLD)
}

pub fn check_imu_excitation_with(samples: &[ImuSample], threshold: f64) -> Excitation {
    let span_us = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0,
    };
    if span_us < MIN_EXCITATION_SPAN_US {
        return Excitation::InsufficientData { span_us };
    }
    let variance = max_gyro_variance(samples);
    if variance > threshold {
        Excitation::Ready { variance }
    } else {
        Excitation::NotReady { variance }
    }
}

/// Up-to-scale structure from event-only bundle adjustment.
#[derive(Clone, Debug)]
pub struct EventOnlyInit {
    pub graph: PatchGraph,
    pub rms_px: f64,
    /// Baseline of the first and last camera over the median depth.
    pub parallax: f64,
}

impl EventOnlyInit {
    /// `(frame id, timestamp, camera pose)` of every initialized frame.
    pub fn frames(&self) -> Vec<(FrameId, i64, Pose)> {
        self.graph
            .keyframes()
            .iter()
            .map(|k| (k.id, k.timestamp_us, k.pose))
            .collect()
    }
}

/// Unweighted RMS reprojection residual over edges with nonzero confidence.
pub fn rms_residual(graph: &PatchGraph, intr: &Intrinsics) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, f) in graph.edges() {
        if f.is_ignored() {
            continue;
        }
        let (Some(p), Ok(t)) = (graph.patch(&e.source), graph.relative_pose(e.source.anchor, e.target)) else {
            continue;
        };
        if let Ok(r) = residual(p, &t, intr, f) {
            sum += r.norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Build the graph from the buffered segments with identity poses and unit
/// depths, then run the update iterations and the final bundle adjustment.
pub fn event_only_init(
    buffer: &InitBuffer,
    intr: &Intrinsics,
    provider: &mut dyn CorrespondenceProvider,
) -> Result<EventOnlyInit, InitError> {
    if !buffer.is_full() {
        return Err(InitError::NotEnoughSegments(buffer.len()));
    }
    let mut graph = PatchGraph::new(buffer.params);
    for seg in &buffer.segments {
        let id = seg.voxel.segment_index;
        graph.push_keyframe(id, seg.t_us, Pose::identity());
        let sel = select_patches(
            &seg.voxel,
            buffer.selector,
            buffer.patches_per_segment,
            buffer.params.patch_size,
            1.0,
        )?;
        for (n, mut p) in sel.patches.into_iter().enumerate() {
            p.key = PatchKey { anchor: id, index: n };
            graph.insert_patch(p);
        }
    }
    for id in graph.frame_ids() {
        graph.add_edges(id, buffer.params.lookback);
    }
    for _ in 0..INIT_UPDATE_ITERATIONS {
        refresh_flows(provider, &mut graph)?;
        ba_iterate(&mut graph, intr, 1)?;
    }
    ba_iterate(&mut graph, intr, INIT_BA_ITERATIONS)?;

    let rms_px = rms_residual(&graph, intr);
    if !(rms_px <= MAX_INIT_RMS_PX) {
        return Err(InitError::InitDiverged { rms: rms_px });
    }
    let kfs = graph.keyframes();
    let baseline = (kfs[kfs.len() - 1].pose.translation - kfs[0].pose.translation).norm();
    let depth = 1.0 / median(graph.patches().map(|p| p.inv_depth).collect());
    let parallax = baseline / depth;
    if !(parallax >= MIN_PARALLAX) {
        return Err(InitError::InsufficientParallax { ratio: parallax });
    }
    Ok(EventOnlyInit {
        graph,
        rms_px,
        parallax,
    })
}

/// Metric alignment of an up-to-scale trajectory, expressed in the frame
/// of the event-only solution.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    /// Multiplies event-only translations into metres.
    pub scale: f64,
    /// Gravity in the event-only world frame, norm 9.81.
    pub gravity: Vector3<f64>,
    /// World velocities of each body frame, event-only world frame.
    pub velocities: Vec<Vector3<f64>>,
    pub gyro_bias: Vector3<f64>,
    /// Preintegrations re-integrated at the estimated gyro bias.
    pub preintegrations: Vec<PreintegratedImu>,
    /// Condition number of the column-normalized linear system.
    pub condition: f64,
}

impl AlignmentResult {
    /// Rotation taking the event-only world onto a gravity-aligned world
    /// where gravity is `[0, 0, -9.81]`.
    pub fn world_rotation(&self) -> UnitQuaternion<f64> {
        let down = -Vector3::z();
        UnitQuaternion::rotation_between(&self.gravity, &down)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
    }
}

/// Orthonormal basis of the plane perpendicular to `g`.
fn tangent_basis(g: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = g.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = (helper - n * n.dot(&helper)).normalize();
    (b1, n.cross(&b1))
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let mut a = a.clone();
    for mut c in a.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let sv = a.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone()
        .svd(true, true)
        .solve(b, 1e-15)
        .expect("svd computed with both factors")
}

/// Gyroscope bias from relative-rotation consistency, re-integrating the
/// preintegrations at each new estimate.
fn estimate_gyro_bias(
    body_rotations: &[UnitQuaternion<f64>],
    pres: &[PreintegratedImu],
) -> Result<(Vector3<f64>, Vec<PreintegratedImu>), InitError> {
    let mut pres = pres.to_vec();
    let mut bias = pres.first().map_or(Vector3::zeros(), |p| p.bias.gyro);
    for _ in 0..GYRO_BIAS_ITERATIONS {
        let mut h = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for (k, pre) in pres.iter().enumerate() {
            let rel = body_rotations[k].inverse() * body_rotations[k + 1];
            let r = so3_log(&(pre.gamma.inverse() * rel));
            let j = pre.d_theta_d_bg();
            h += j.transpose() * j;
            rhs += j.transpose() * r;
        }
        let Some(delta) = h.cholesky().map(|c| c.solve(&rhs)) else {
            return Err(InitError::DegenerateMotion {
                condition: f64::INFINITY,
            });
        };
        bias += delta;
        let b = Bias::new(pres[0].bias.accel, bias);
        pres = pres.iter().map(|p| p.repropagate(&b)).collect::<Result<_, _>>()?;
        if delta.norm() < 1e-14 {
            break;
        }
    }
    Ok((bias, pres))
}

/// Linear system for velocities, gravity and scale. With `basis`, gravity
/// is `g0 + B w` and the unknowns are `[v; w; s]`; otherwise `[v; g; s]`.
fn alignment_system(
    cams: &[Pose],
    body_rotations: &[UnitQuaternion<f64>],
    pres: &[PreintegratedImu],
    t_be: &Vector3<f64>,
    gravity_param: Option<(&Vector3<f64>, &(Vector3<f64>, Vector3<f64>))>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = cams.len();
    let g_dim = if gravity_param.is_some() { 2 } else { 3 };
    let cols = 3 * n + g_dim + 1;
    let (ig, is) = (3 * n, 3 * n + g_dim);
    let rows = 6 * (n - 1);
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    let g_block = |dt_coeff: f64| -> (DMatrix<f64>, Vector3<f64>) {
        // contribution of gravity: coefficient * g
        match gravity_param {
            None => (DMatrix::from_diagonal_element(3, 3, dt_coeff), Vector3::zeros()),
            Some((g0, (b1, b2))) => {
                let mut m = DMatrix::zeros(3, 2);
                m.set_column(0, &(b1 * dt_coeff));
                m.set_column(1, &(b2 * dt_coeff));
                (m, g0 * dt_coeff)
            }
        }
    };
    for k in 0..n - 1 {
        let pre = &pres[k];
        let dt = pre.dt_total;
        let (rk, rk1) = (body_rotations[k], body_rotations[k + 1]);
        let r0 = 6 * k;
        // s (pc1 - pc0) - v_k dt - 0.5 g dt^2 = R_k alpha + (R_k1 - R_k) t_be
        let dp = cams[k + 1].translation - cams[k].translation;
        for i in 0..3 {
            a[(r0 + i, 3 * k + i)] = -dt;
            a[(r0 + i, is)] = dp[i];
        }
        let (gm, gc) = g_block(-0.5 * dt * dt);
        a.view_mut((r0, ig), (3, g_dim)).copy_from(&gm);
        let rhs = rk * pre.alpha + rk1 * t_be - rk * t_be - gc;
        b.rows_mut(r0, 3).copy_from(&rhs);
        // v_k1 - v_k - g dt = R_k beta
        for i in 0..3 {
            a[(r0 + 3 + i, 3 * (k + 1) + i)] = 1.0;
            a[(r0 + 3 + i, 3 * k + i)] = -1.0;
        }
        let (gm, gc) = g_block(-dt);
        a.view_mut((r0 + 3, ig), (3, g_dim)).copy_from(&gm);
        b.rows_mut(r0 + 3, 3).copy_from(&(rk * pre.beta - gc));
    }
    (a, b)
}

/// Align up-to-scale camera poses with preintegrated IMU between
/// consecutive frames: gyro bias, then velocities, gravity and scale, then
/// gravity refined on its tangent plane with the norm fixed.
pub fn inertial_align(
    cameras: &[Pose],
    pres: &[PreintegratedImu],
    extrinsics: &Pose,
) -> Result<AlignmentResult, InitError> {
    assert_eq!(cameras.len(), pres.len() + 1, "one preintegration per consecutive pair");
    if cameras.len() < 3 {
        return Err(InitError::NotEnoughSegments(cameras.len()));
    }
    let r_be_inv = extrinsics.rotation.inverse();
    let body_rotations: Vec<UnitQuaternion<f64>> = cameras.iter().map(|c| c.rotation * r_be_inv).collect();
    let (gyro_bias, pres) = estimate_gyro_bias(&body_rotations, pres)?;
    let t_be = extrinsics.translation;
    let n = cameras.len();

    let (a, b) = alignment_system(cameras, &body_rotations, &pres, &t_be, None);
    let condition = condition_number(&a);
    if !(condition <= MAX_ALIGNMENT_CONDITION) {
        return Err(InitError::DegenerateMotion { condition });
    }
    let x = solve_least_squares(&a, &b);
    let mut gravity = Vector3::new(x[3 * n], x[3 * n + 1], x[3 * n + 2]);
    if gravity.norm() < 1e-9 {
        return Err(InitError::DegenerateMotion {
            condition: f64::INFINITY,
        });
    }
    gravity = gravity.normalize() * GRAVITY_MAGNITUDE;
    let mut solution = x;
    for _ in 0..GRAVITY_REFINE_ITERATIONS {
        let basis = tangent_basis(&gravity);
        let (a, b) = alignment_system(cameras, &body_rotations, &pres, &t_be, Some((&gravity, &basis)));
        let x = solve_least_squares(&a, &b);
        let w = (x[3 * n], x[3 * n + 1]);
        gravity = (gravity + basis.0 * w.0 + basis.1 * w.1).normalize() * GRAVITY_MAGNITUDE;
        solution = x;
    }
    let scale = solution[solution.len() - 1];
    if !(scale > 0.0) {
        return Err(InitError::InvalidScale(scale));
    }
    let velocities = (0..n)
        .map(|k| Vector3::new(solution[3 * k], solution[3 * k + 1], solution[3 * k + 2]))
        .collect();
    Ok(AlignmentResult {
        scale,
        gravity,
        velocities,
        gyro_bias,
        preintegrations: pres,
        condition,
    })
}

/// Preintegrate the samples between consecutive frame times.
pub fn preintegrate_frames(
    imu: &[ImuSample],
    times: &[i64],
    bias: &Bias,
    noise: &ImuNoise,
) -> Result<Vec<PreintegratedImu>, InitError> {
    times
        .windows(2)
        .map(|w| preintegrate(&samples_between(imu, w[0], w[1]), bias, noise).map_err(InitError::from))
        .collect()
}

/// Rescale and rotate the event-only graph into the metric gravity-aligned
/// world and return the matching body states.
pub fn apply_alignment(graph: &mut PatchGraph, result: &AlignmentResult, extrinsics: &Pose) -> Vec<KeyframeState> {
    let rot = result.world_rotation();
    let world = Pose::from_rotation(rot);
    let ext_inv = extrinsics.inverse();
    let bias = Bias::new(Vector3::zeros(), result.gyro_bias);
    let mut states = Vec::new();
    for (k, kf) in graph.keyframes().to_vec().iter().enumerate() {
        let scaled = Pose::new(kf.pose.rotation, kf.pose.translation * result.scale);
        let cam = world.compose(&scaled);
        graph.set_pose(kf.id, cam).expect("keyframe exists");
        states.push(KeyframeState::new(
            cam.compose(&ext_inv),
            rot * result.velocities[k],
            bias,
        ));
    }
    let keys: Vec<(PatchKey, f64)> = graph.patches().map(|p| (p.key, p.inv_depth)).collect();
    for (key, d) in keys {
        graph.set_inv_depth(&key, d / result.scale);
    }
    states
}

/// Tracker seeded with the aligned graph, states and preintegrations.
pub fn bootstrap_tracker(
    mut init: EventOnlyInit,
    result: &AlignmentResult,
    intr: Intrinsics,
    extrinsics: Pose,
    settings: TrackerSettings,
) -> Tracker {
    let states = apply_alignment(&mut init.graph, result, &extrinsics);
    let mut window = SlidingWindow::default();
    let frames = init.frames();
    for (k, ((id, t_us, _), state)) in frames.iter().zip(states).enumerate() {
        let pre = (k > 0).then(|| result.preintegrations[k - 1].clone());
        window.push(
            WindowFrame {
                id: *id,
                t_us: *t_us,
                state,
            },
            pre,
        );
    }
    Tracker::new(init.graph, window, intr, extrinsics, settings)
}

/// Tracker seeded directly with the event-only solution (no IMU factors).
pub fn bootstrap_event_only(
    init: EventOnlyInit,
    intr: Intrinsics,
    extrinsics: Pose,
    settings: TrackerSettings,
) -> Tracker {
    let ext_inv = extrinsics.inverse();
    let mut window = SlidingWindow::default();
    for (id, t_us, cam) in init.frames() {
        let state = KeyframeState::new(cam.compose(&ext_inv), Vector3::zeros(), Bias::zero());
        window.push(WindowFrame { id, t_us, state }, None);
    }
    Tracker::new(init.graph, window, intr, extrinsics, settings)
}

#[cfg(test)]
mod tests;
