use nalgebra::{DVector, Vector3};

use super::{
    pose_difference, BackendError, EventFactor, LmReport, LmSettings, MarginalPrior, SlidingWindow, WindowFrame,
};
use crate::camera::Intrinsics;
use crate::dba::{
    ba_iterate, build_normal_equations, build_normal_equations_with, refine_depths, schur_reduce, update_depths,
    DEPTH_DAMPING,
};
use crate::event::EventVoxel;
use crate::geometry::Pose;
use crate::imu::{preintegrate, propagate, ImuNoise, ImuSample, KeyframeState, Vector15};
use crate::patch_graph::{
    FrameId, KeyframeDecision, PatchGraph, PatchKey, PatchSelector, EDGE_LOOKBACK, PATCHES_PER_SEGMENT,
};
use crate::provider::{refresh_flows, CorrespondenceProvider};

/// Joint event-inertial iterations run for every new segment.
pub const JOINT_BA_ITERATIONS: usize = 2;
/// Depth-only Gauss-Newton steps for freshly added patches.
pub const DEPTH_REFINE_ITERATIONS: usize = 5;
/// Joint iterations run on the initialization window right after alignment.
pub const POST_ALIGNMENT_ITERATIONS: usize = 12;
/// Bias drift that triggers re-integration of an IMU factor.
pub const BIAS_REPROPAGATION_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerSettings {
    pub patches_per_segment: usize,
    pub selector: PatchSelector,
    pub lookback: usize,
    /// With IMU factors off the tracker runs event-only bundle adjustment.
    pub use_imu: bool,
    pub noise: ImuNoise,
    pub lm: LmSettings,
    pub joint_iterations: usize,
    /// Diagonal precision of the prior that fixes the first frame.
    pub anchor_precision: Vector15,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        // position and yaw are unobservable with an IMU; roll and pitch
        // stay free so gravity can correct them
        let mut anchor = Vector15::zeros();
        for k in [0, 1, 2, 5] {
            anchor[k] = 1e8;
        }
        for k in 9..12 {
            anchor[k] = 1.0 / (0.05 * 0.05);
        }
        for k in 12..15 {
            anchor[k] = 1.0 / (0.005 * 0.005);
        }
        TrackerSettings {
            patches_per_segment: PATCHES_PER_SEGMENT,
            selector: PatchSelector::default(),
            lookback: EDGE_LOOKBACK,
            use_imu: true,
            noise: ImuNoise::default(),
            lm: LmSettings::default(),
            joint_iterations: JOINT_BA_ITERATIONS,
            anchor_precision: anchor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentReport {
    pub id: FrameId,
    pub t_us: i64,
    /// Body pose of the newest frame.
    pub pose: Pose,
    /// True when the pose comes from IMU propagation alone.
    pub degraded: bool,
    pub decision: KeyframeDecision,
    pub lm_iterations: usize,
    pub cost: f64,
    pub note: Option<String>,
}

/// Patch graph plus keyframe states, advanced one event segment at a time.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub graph: PatchGraph,
    pub window: SlidingWindow,
    pub intrinsics: Intrinsics,
    /// Camera in body frame.
    pub extrinsics: Pose,
    pub settings: TrackerSettings,
}

impl Tracker {
    /// Start from an initialized graph and matching window states. Without
    /// a prior, the first frame is anchored.
    pub fn new(
        graph: PatchGraph,
        mut window: SlidingWindow,
        intrinsics: Intrinsics,
        extrinsics: Pose,
        settings: TrackerSettings,
    ) -> Self {
        if window.prior.is_none() && settings.use_imu {
            if let Some(first) = window.frames.first() {
                window.prior = Some(MarginalPrior::anchor(first.id, first.state, &settings.anchor_precision));
            }
        }
        let mut t = Tracker {
            graph,
            window,
            intrinsics,
            extrinsics,
            settings,
        };
        t.sync_graph();
        t
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.settings.lm.gravity
    }

    fn camera_pose(&self, body: &Pose) -> Pose {
        body.compose(&self.extrinsics)
    }

    fn body_pose(&self, camera: &Pose) -> Pose {
        camera.compose(&self.extrinsics.inverse())
    }

    /// Copy window body poses into the graph as camera poses.
    pub(super) fn sync_graph(&mut self) {
        for f in &self.window.frames {
            let cam = self.camera_pose(&f.state.pose);
            let _ = self.graph.set_pose(f.id, cam);
        }
    }

    /// Copy graph camera poses into the window as body poses.
    fn sync_window(&mut self) {
        let ext_inv = self.extrinsics.inverse();
        for f in &mut self.window.frames {
            if let Some(k) = self.graph.keyframe(f.id) {
                f.state.pose = k.pose.compose(&ext_inv);
            }
        }
    }

    /// One joint iteration: reduce the event system, solve the window with
    /// IMU factors and prior, then back-substitute depths.
    pub fn joint_iteration(&mut self) -> Result<LmReport, BackendError> {
        let ne = build_normal_equations(&self.graph, &self.intrinsics);
        let lin: Vec<Pose> = ne
            .frames
            .iter()
            .map(|id| {
                let k = self.window.position(*id).expect("graph frame in window");
                self.window.frames[k].state.pose
            })
            .collect();
        let factor = EventFactor::new(&schur_reduce(&ne), lin.clone());
        let report = self.window.optimize(Some(&factor), &self.settings.lm)?;
        let mut xi = DVector::zeros(6 * ne.frames.len());
        for (k, id) in ne.frames.iter().enumerate() {
            let p = self.window.position(*id).expect("graph frame in window");
            xi.fixed_rows_mut::<6>(6 * k)
                .copy_from(&pose_difference(&self.window.frames[p].state.pose, &lin[k]));
        }
        let dd = update_depths(&ne, &xi);
        for (n, key) in ne.patches.iter().enumerate() {
            if let Some(p) = self.graph.patch(key) {
                let d = p.inv_depth + dd[n];
                self.graph.set_inv_depth(key, d);
            }
        }
        self.sync_graph();
        Ok(report)
    }

    /// Re-query every edge and run a joint iteration, `iterations` times.
    pub fn refine(
        &mut self,
        provider: &mut dyn CorrespondenceProvider,
        iterations: usize,
    ) -> Result<LmReport, BackendError> {
        let mut report = LmReport::default();
        for _ in 0..iterations {
            refresh_flows(provider, &mut self.graph)?;
            report = self.joint_iteration()?;
        }
        Ok(report)
    }

    fn predict(
        &self,
        imu: &[ImuSample],
    ) -> Result<(KeyframeState, Option<crate::imu::PreintegratedImu>), BackendError> {
        let last = self.window.last().expect("tracker has frames");
        if self.settings.use_imu {
            let pre = preintegrate(imu, &last.state.bias, &self.settings.noise)?;
            Ok((propagate(&last.state, &pre, &self.gravity()), Some(pre)))
        } else {
            let n = self.window.len();
            let mut state = last.state;
            if n >= 2 {
                let prev = &self.window.frames[n - 2].state.pose;
                let motion = last.state.pose.compose(&prev.inverse());
                state.pose = motion.compose(&last.state.pose);
            }
            Ok((state, None))
        }
    }

    fn optimize_segment(&mut self) -> Result<(usize, f64), BackendError> {
        if self.settings.use_imu {
            let mut iterations = 0;
            let mut cost = 0.0;
            for _ in 0..self.settings.joint_iterations {
                let r = self.joint_iteration()?;
                iterations += r.iterations;
                cost = r.final_cost;
            }
            Ok((iterations, cost))
        } else {
            let r = ba_iterate(&mut self.graph, &self.intrinsics, self.settings.joint_iterations)?;
            self.sync_window();
            Ok((r.accepted, r.final_cost))
        }
    }

    /// Event-system factor of the edges touching `frame`, for marginalizing it.
    fn marginal_event_factor(&self, graph: &PatchGraph, frame: FrameId) -> EventFactor {
        let ne = build_normal_equations_with(graph, &self.intrinsics, DEPTH_DAMPING, |e| {
            e.source.anchor == frame || e.target == frame
        });
        let lin: Vec<Pose> = ne
            .frames
            .iter()
            .map(|id| {
                let k = self.window.position(*id).expect("graph frame in window");
                self.window.frames[k].state.pose
            })
            .collect();
        EventFactor::new(&schur_reduce(&ne), lin)
    }

    /// Add one segment: predict, create patches and edges, query the
    /// provider, optimize, then apply the keyframe rules.
    pub fn track_segment(
        &mut self,
        voxel: &EventVoxel,
        t_us: i64,
        imu: &[ImuSample],
        provider: &mut dyn CorrespondenceProvider,
    ) -> Result<SegmentReport, BackendError> {
        let id = voxel.segment_index;
        let (state, pre) = self.predict(imu)?;
        self.graph.push_keyframe(id, t_us, self.camera_pose(&state.pose));
        self.window.push(WindowFrame { id, t_us, state }, pre);
        let selection = self
            .graph
            .add_patches(voxel, self.settings.selector, self.settings.patches_per_segment)
            .map_err(BackendError::Graph)?;
        let new_keys: Vec<PatchKey> = selection.patches.iter().map(|p| p.key).collect();
        self.graph.add_edges(id, self.settings.lookback);

        let mut report = SegmentReport {
            id,
            t_us,
            pose: state.pose,
            degraded: false,
            decision: KeyframeDecision::default(),
            lm_iterations: 0,
            cost: 0.0,
            note: None,
        };
        match refresh_flows(provider, &mut self.graph) {
            Ok(()) => {
                refine_depths(&mut self.graph, &self.intrinsics, &new_keys, DEPTH_REFINE_ITERATIONS);
                let (graph, window) = (self.graph.clone(), self.window.clone());
                match self.optimize_segment() {
                    Ok((iterations, cost)) => {
                        report.lm_iterations = iterations;
                        report.cost = cost;
                    }
                    Err(e) => {
                        self.graph = graph;
                        self.window = window;
                        report.degraded = true;
                        report.note = Some(e.to_string());
                    }
                }
            }
            Err(e) => {
                report.degraded = true;
                report.note = Some(e.to_string());
            }
        }

        let before = self.graph.clone();
        let decision = self.graph.keyframe_update(&self.intrinsics);
        if let Some(r) = decision.removed {
            self.window.drop_frame(r)?;
        }
        if let Some(m) = decision.marginalized {
            if self.settings.use_imu {
                let mut g = before;
                if let Some(r) = decision.removed {
                    g.remove_frame(r).expect("removed frame was present");
                }
                let factor = self.marginal_event_factor(&g, m);
                let gravity = self.gravity();
                self.window.marginalize_frame(m, Some(&factor), &gravity)?;
            } else {
                self.window.drop_frame(m)?;
            }
        }
        if self.settings.use_imu {
            self.window.repropagate_stale(BIAS_REPROPAGATION_THRESHOLD)?;
        }
        report.decision = decision;
        let newest = self.window.last().expect("newest frame");
        report.pose = if self.settings.use_imu {
            newest.state.pose
        } else {
            self.body_pose(&self.graph.keyframe(newest.id).expect("newest in graph").pose)
        };
        Ok(report)
    }
}
