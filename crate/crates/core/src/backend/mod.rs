//! Sliding-window fusion of the reduced event factor, IMU factors and a
//! marginalization prior, solved with Levenberg-Marquardt.
//!
//! Every keyframe carries a 15-dimensional tangent
//! `[rho, phi, dv, db_a, db_g]`; the pose part is a world-frame left twist,
//! which makes camera and body twists coincide for a rigid mount.

mod tracker;

pub use tracker::{SegmentReport, Tracker, TrackerSettings, JOINT_BA_ITERATIONS, POST_ALIGNMENT_ITERATIONS};

use nalgebra::{DMatrix, DVector, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::dba::{DbaError, EventHessianFactor};
use crate::geometry::{Pose, Twist};
use crate::imu::{imu_residual, preintegrate, ImuError, KeyframeState, Matrix15, PreintegratedImu, Vector15};
use crate::patch_graph::{FrameId, GraphError};

pub const STATE_DIM: usize = 15;
pub const LM_INITIAL_LAMBDA: f64 = 1e-4;
pub const LM_MAX_ITERATIONS: usize = 20;
pub const LM_RELATIVE_TOLERANCE: f64 = 1e-8;
pub const LM_MAX_REJECTIONS: usize = 5;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("optimizer diverged: {rejections} consecutive damped systems could not be factorized")]
    Diverged { rejections: usize },
    #[error("window cost is not finite")]
    NonFiniteCost,
    #[error(transparent)]
    Dba(#[from] DbaError),
    #[error("imu: {0}")]
    Imu(String),
    #[error("frame {0} is not in the window")]
    UnknownFrame(FrameId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] crate::provider::ProviderError),
}

impl From<ImuError> for BackendError {
    fn from(e: ImuError) -> Self {
        BackendError::Imu(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowFrame {
    pub id: FrameId,
    pub t_us: i64,
    pub state: KeyframeState,
}

/// Preintegrated motion between two consecutive window frames.
#[derive(Clone, Debug)]
pub struct ImuFactor {
    pub from: FrameId,
    pub to: FrameId,
    pub pre: PreintegratedImu,
    info: Matrix15,
}

impl ImuFactor {
    pub fn new(from: FrameId, to: FrameId, pre: PreintegratedImu) -> Self {
        let info = pre.information();
        ImuFactor { from, to, pre, info }
    }

    pub fn information(&self) -> &Matrix15 {
        &self.info
    }

    pub fn residual(&self, a: &KeyframeState, b: &KeyframeState, g: &Vector3<f64>) -> Vector15 {
        imu_residual(a, b, &self.pre, g)
    }

    pub fn cost(&self, a: &KeyframeState, b: &KeyframeState, g: &Vector3<f64>) -> f64 {
        let r = self.residual(a, b, g);
        0.5 * r.dot(&(self.info * r))
    }

    /// Residual and its Jacobians w.r.t. the tangents of both states, by
    /// central differences.
    pub fn linearize(
        &self,
        a: &KeyframeState,
        b: &KeyframeState,
        g: &Vector3<f64>,
    ) -> (Vector15, SMatrix<f64, 15, 30>) {
        let r = self.residual(a, b, g);
        let mut j = SMatrix::<f64, 15, 30>::zeros();
        for col in 0..30 {
            let mut d = Vector15::zeros();
            d[col % 15] = FD_STEP;
            let (rp, rm) = if col < 15 {
                (
                    self.residual(&retract_state(a, &d), b, g),
                    self.residual(&retract_state(a, &-d), b, g),
                )
            } else {
                (
                    self.residual(a, &retract_state(b, &d), g),
                    self.residual(a, &retract_state(b, &-d), g),
                )
            };
            j.set_column(col, &((rp - rm) / (2.0 * FD_STEP)));
        }
        (r, j)
    }
}

/// Apply a 15-dimensional tangent increment.
pub fn retract_state(s: &KeyframeState, d: &Vector15) -> KeyframeState {
    let xi = Twist(d.fixed_rows::<6>(0).into_owned());
    let mut out = *s;
    out.pose = s.pose.retract(&xi);
    out.velocity += d.fixed_rows::<3>(6);
    out.bias.accel += d.fixed_rows::<3>(9);
    out.bias.gyro += d.fixed_rows::<3>(12);
    out
}

/// Tangent taking `lin` to `s`.
pub fn state_difference(s: &KeyframeState, lin: &KeyframeState) -> Vector15 {
    let mut d = Vector15::zeros();
    let xi = s.pose.local(&lin.pose).unwrap_or_else(|_| Twist::zero());
    d.fixed_rows_mut::<6>(0).copy_from(&xi.0);
    d.fixed_rows_mut::<3>(6).copy_from(&(s.velocity - lin.velocity));
    d.fixed_rows_mut::<3>(9).copy_from(&(s.bias.accel - lin.bias.accel));
    d.fixed_rows_mut::<3>(12).copy_from(&(s.bias.gyro - lin.bias.gyro));
    d
}

fn pose_difference(pose: &Pose, lin: &Pose) -> Vector6<f64> {
    pose.local(lin).map(|t| t.0).unwrap_or_else(|_| Vector6::zeros())
}

/// Clip negative eigenvalues of a symmetric matrix to zero.
pub fn floor_eigenvalues(h: &DMatrix<f64>) -> DMatrix<f64> {
    if h.nrows() == 0 {
        return h.clone();
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Reduced event constraint `0.5 xi^T H xi - xi^T V` where `xi` is the
/// twist of each frame's pose relative to its linearization point.
#[derive(Clone, Debug)]
pub struct EventFactor {
    pub h: DMatrix<f64>,
    pub v: DVector<f64>,
    pub frames: Vec<FrameId>,
    /// Body poses the factor was linearized at.
    pub linearization: Vec<Pose>,
}

impl EventFactor {
    pub fn new(reduced: &EventHessianFactor, linearization: Vec<Pose>) -> Self {
        assert_eq!(reduced.frames.len(), linearization.len());
        EventFactor {
            h: floor_eigenvalues(&reduced.h),
            v: reduced.v.clone(),
            frames: reduced.frames.clone(),
            linearization,
        }
    }

    pub fn scaled(mut self, weight: f64) -> Self {
        self.h *= weight;
        self.v *= weight;
        self
    }

    fn twists(&self, poses: &[Pose]) -> DVector<f64> {
        let mut xi = DVector::zeros(6 * self.frames.len());
        for (k, (p, lin)) in poses.iter().zip(&self.linearization).enumerate() {
            xi.fixed_rows_mut::<6>(6 * k).copy_from(&pose_difference(p, lin));
        }
        xi
    }
}

/// Cost, gradient and Hessian of the event factor at `poses` (ordered as
/// `factor.frames`). The Jacobian of each twist w.r.t. a further left
/// perturbation is taken as identity.
pub fn event_factor_cost(factor: &EventFactor, poses: &[Pose]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let xi = factor.twists(poses);
    let hx = &factor.h * &xi;
    let cost = 0.5 * xi.dot(&hx) - xi.dot(&factor.v);
    (cost, hx - &factor.v, factor.h.clone())
}

/// Gaussian prior `0.5 d^T H d + g^T d` on the tangent `d` of `frames`
/// relative to `linearization`.
#[derive(Clone, Debug)]
pub struct MarginalPrior {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub frames: Vec<FrameId>,
    pub linearization: Vec<KeyframeState>,
}

impl MarginalPrior {
    /// Prior pinning `state` with the given per-block precisions.
    pub fn anchor(id: FrameId, state: KeyframeState, precision: &Vector15) -> Self {
        MarginalPrior {
            h: DMatrix::from_diagonal(&DVector::from_column_slice(precision.as_slice())),
            g: DVector::zeros(STATE_DIM),
            frames: vec![id],
            linearization: vec![state],
        }
    }

    fn delta(&self, states: &[KeyframeState]) -> DVector<f64> {
        let mut d = DVector::zeros(STATE_DIM * self.frames.len());
        for (k, (s, lin)) in states.iter().zip(&self.linearization).enumerate() {
            d.fixed_rows_mut::<15>(STATE_DIM * k)
                .copy_from(&state_difference(s, lin));
        }
        d
    }

    pub fn cost(&self, states: &[KeyframeState]) -> f64 {
        let d = self.delta(states);
        0.5 * d.dot(&(&self.h * &d)) + self.g.dot(&d)
    }

    fn gradient(&self, states: &[KeyframeState]) -> DVector<f64> {
        &self.h * self.delta(states) + &self.g
    }

    /// Eliminate `id` from the prior by Schur complement.
    pub fn marginalize(&self, id: FrameId) -> Option<MarginalPrior> {
        let k = self.frames.iter().position(|&f| f == id)?;
        let keep: Vec<usize> = (0..self.frames.len()).filter(|&i| i != k).collect();
        if keep.is_empty() {
            return None;
        }
        let (h, g) = schur_eliminate(&self.h, &self.g, k, self.frames.len());
        Some(MarginalPrior {
            h: floor_eigenvalues(&h),
            g,
            frames: keep.iter().map(|&i| self.frames[i]).collect(),
            linearization: keep.iter().map(|&i| self.linearization[i]).collect(),
        })
    }
}

/// Eliminate 15-dim block `k` of an `n`-block system `(H, g)`.
fn schur_eliminate(h: &DMatrix<f64>, g: &DVector<f64>, k: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let keep: Vec<usize> = (0..n)
        .filter(|&i| i != k)
        .flat_map(|i| (0..STATE_DIM).map(move |c| STATE_DIM * i + c))
        .collect();
    let drop: Vec<usize> = (0..STATE_DIM).map(|c| STATE_DIM * k + c).collect();
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| h[(rows[a], cols[b])]);
    let h_rr = sub(&keep, &keep);
    let h_rm = sub(&keep, &drop);
    let h_mm = sub(&drop, &drop);
    let g_r = DVector::from_fn(keep.len(), |a, _| g[keep[a]]);
    let g_m = DVector::from_fn(drop.len(), |a, _| g[drop[a]]);
    let inv = pseudo_inverse(&h_mm);
    let k_gain = &h_rm * inv;
    let h_new = &h_rr - &k_gain * h_rm.transpose();
    let g_new = g_r - k_gain * g_m;
    (&h_new * 0.5 + h_new.transpose() * 0.5, g_new)
}

fn pseudo_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let d = eig
        .eigenvalues
        .map(|v| if v > 1e-12 * max.max(1e-300) { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub relative_tolerance: f64,
    pub max_rejections: usize,
    pub gravity: Vector3<f64>,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings {
            max_iterations: LM_MAX_ITERATIONS,
            initial_lambda: LM_INITIAL_LAMBDA,
            relative_tolerance: LM_RELATIVE_TOLERANCE,
            max_rejections: LM_MAX_REJECTIONS,
            gravity: crate::imu::gravity(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted: usize,
    /// Cost after every accepted step.
    pub history: Vec<f64>,
}

/// Keyframe states with IMU factors between consecutive frames and an
/// optional prior from earlier marginalizations.
#[derive(Clone, Debug, Default)]
pub struct SlidingWindow {
    pub frames: Vec<WindowFrame>,
    /// `imu[k]` links `frames[k]` to `frames[k + 1]`.
    pub imu: Vec<ImuFactor>,
    pub prior: Option<MarginalPrior>,
}

/// Accumulates a Gauss-Newton system over the window tangent.
struct System {
    h: DMatrix<f64>,
    grad: DVector<f64>,
}

impl System {
    fn new(frames: usize) -> Self {
        let n = STATE_DIM * frames;
        System {
            h: DMatrix::zeros(n, n),
            grad: DVector::zeros(n),
        }
    }

    fn add_imu(&mut self, f: &ImuFactor, a: usize, b: usize, states: &[KeyframeState], g: &Vector3<f64>) {
        let (r, j) = f.linearize(&states[a], &states[b], g);
        let jtw = j.transpose() * f.information();
        let hk = &jtw * j;
        let gk = jtw * r;
        for (ia, sa) in [(0usize, a), (STATE_DIM, b)] {
            let mut seg = self.grad.rows_mut(STATE_DIM * sa, STATE_DIM);
            seg += gk.rows(ia, STATE_DIM);
            for (ib, sb) in [(0usize, a), (STATE_DIM, b)] {
                let mut blk = self
                    .h
                    .view_mut((STATE_DIM * sa, STATE_DIM * sb), (STATE_DIM, STATE_DIM));
                blk += hk.view((ia, ib), (STATE_DIM, STATE_DIM));
            }
        }
    }

    fn add_event(&mut self, e: &EventFactor, pos: &[usize], states: &[KeyframeState]) {
        let poses: Vec<Pose> = pos.iter().map(|&k| states[k].pose).collect();
        let (_, ge, he) = event_factor_cost(e, &poses);
        for (a, &ka) in pos.iter().enumerate() {
            let mut seg = self.grad.rows_mut(STATE_DIM * ka, 6);
            seg += ge.rows(6 * a, 6);
            for (b, &kb) in pos.iter().enumerate() {
                let mut blk = self.h.view_mut((STATE_DIM * ka, STATE_DIM * kb), (6, 6));
                blk += he.view((6 * a, 6 * b), (6, 6));
            }
        }
    }

    fn add_prior(&mut self, p: &MarginalPrior, pos: &[usize], states: &[KeyframeState]) {
        let sub: Vec<KeyframeState> = pos.iter().map(|&k| states[k]).collect();
        let gp = p.gradient(&sub);
        for (a, &ka) in pos.iter().enumerate() {
            let mut seg = self.grad.rows_mut(STATE_DIM * ka, STATE_DIM);
            seg += gp.rows(STATE_DIM * a, STATE_DIM);
            for (b, &kb) in pos.iter().enumerate() {
                let mut blk = self
                    .h
                    .view_mut((STATE_DIM * ka, STATE_DIM * kb), (STATE_DIM, STATE_DIM));
                blk += p.h.view((STATE_DIM * a, STATE_DIM * b), (STATE_DIM, STATE_DIM));
            }
        }
    }
}

impl SlidingWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn position(&self, id: FrameId) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn states(&self) -> Vec<KeyframeState> {
        self.frames.iter().map(|f| f.state).collect()
    }

    pub fn last(&self) -> Option<&WindowFrame> {
        self.frames.last()
    }

    /// Append a frame; `imu` must run from the current last frame to it.
    pub fn push(&mut self, frame: WindowFrame, imu: Option<PreintegratedImu>) {
        if let (Some(last), Some(pre)) = (self.frames.last(), imu) {
            self.imu.push(ImuFactor::new(last.id, frame.id, pre));
        }
        self.frames.push(frame);
    }

    fn positions(&self, ids: &[FrameId]) -> Vec<usize> {
        ids.iter()
            .map(|id| self.position(*id).expect("factor frame is in the window"))
            .collect()
    }

    fn imu_ends(&self, f: &ImuFactor) -> (usize, usize) {
        (
            self.position(f.from).expect("imu frame in window"),
            self.position(f.to).expect("imu frame in window"),
        )
    }

    /// Total objective at `states` (ordered as `self.frames`).
    pub fn cost_at(&self, states: &[KeyframeState], event: Option<&EventFactor>, g: &Vector3<f64>) -> f64 {
        let mut cost = 0.0;
        for f in &self.imu {
            let (a, b) = self.imu_ends(f);
            cost += f.cost(&states[a], &states[b], g);
        }
        if let Some(e) = event {
            let poses: Vec<Pose> = self.positions(&e.frames).iter().map(|&k| states[k].pose).collect();
            cost += event_factor_cost(e, &poses).0;
        }
        if let Some(p) = &self.prior {
            let sub: Vec<KeyframeState> = self.positions(&p.frames).iter().map(|&k| states[k]).collect();
            cost += p.cost(&sub);
        }
        cost
    }

    fn linearize(&self, states: &[KeyframeState], event: Option<&EventFactor>, g: &Vector3<f64>) -> System {
        let mut sys = System::new(self.frames.len());
        for f in &self.imu {
            let (a, b) = self.imu_ends(f);
            sys.add_imu(f, a, b, states, g);
        }
        if let Some(e) = event {
            sys.add_event(e, &self.positions(&e.frames), states);
        }
        if let Some(p) = &self.prior {
            sys.add_prior(p, &self.positions(&p.frames), states);
        }
        sys
    }

    /// Levenberg-Marquardt over all window states. Stops when the relative
    /// decrease falls under the tolerance or the model predicts none.
    pub fn optimize(&mut self, event: Option<&EventFactor>, settings: &LmSettings) -> Result<LmReport, BackendError> {
        let g = settings.gravity;
        let mut states = self.states();
        let mut cost = self.cost_at(&states, event, &g);
        let mut report = LmReport {
            initial_cost: cost,
            final_cost: cost,
            ..LmReport::default()
        };
        if states.is_empty() {
            return Ok(report);
        }
        if !cost.is_finite() {
            return Err(BackendError::NonFiniteCost);
        }
        let mut lambda = settings.initial_lambda;
        let mut rejections = 0;
        let mut sys = self.linearize(&states, event, &g);
        while report.iterations < settings.max_iterations {
            report.iterations += 1;
            let mut damped = sys.h.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * sys.h[(i, i)] + 1e-12;
            }
            let step = damped.cholesky().map(|c| c.solve(&(-&sys.grad)));
            let Some(step) = step else {
                lambda *= 10.0;
                rejections += 1;
                if rejections >= settings.max_rejections {
                    return Err(BackendError::Diverged { rejections });
                }
                continue;
            };
            let predicted = -(sys.grad.dot(&step) + 0.5 * step.dot(&(&sys.h * &step)));
            // the event term can make the cost negative, so compare magnitudes
            if !(predicted > settings.relative_tolerance * cost.abs().max(1e-12)) {
                break;
            }
            let trial: Vec<KeyframeState> = states
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    retract_state(
                        s,
                        &Vector15::from_iterator(step.rows(STATE_DIM * k, STATE_DIM).iter().copied()),
                    )
                })
                .collect();
            let trial_cost = self.cost_at(&trial, event, &g);
            if trial_cost.is_finite() && trial_cost < cost {
                let decrease = cost - trial_cost;
                states = trial;
                cost = trial_cost;
                report.accepted += 1;
                report.history.push(cost);
                rejections = 0;
                lambda = (lambda / 10.0).max(1e-12);
                if decrease < settings.relative_tolerance * (cost + decrease).abs() {
                    break;
                }
                sys = self.linearize(&states, event, &g);
            } else {
                // Only decreasing steps are taken, so a run of rejections means
                // the linear model can no longer improve on the current state.
                lambda *= 10.0;
                rejections += 1;
                if rejections >= settings.max_rejections {
                    break;
                }
            }
        }
        for (f, s) in self.frames.iter_mut().zip(states) {
            f.state = s;
        }
        report.final_cost = cost;
        Ok(report)
    }

    /// Remove a frame that lost its keyframe status: its two IMU factors are
    /// merged by integrating their raw samples again, and the frame is
    /// eliminated from the prior. Event information about it is dropped.
    pub fn drop_frame(&mut self, id: FrameId) -> Result<(), BackendError> {
        let k = self.position(id).ok_or(BackendError::UnknownFrame(id))?;
        let before = self.imu.iter().position(|f| f.to == id);
        let after = self.imu.iter().position(|f| f.from == id);
        match (before, after) {
            (Some(i), Some(j)) => {
                let (a, b) = (&self.imu[i], &self.imu[j]);
                let mut samples = a.pre.samples.clone();
                let skip = usize::from(matches!(
                    (samples.last(), b.pre.samples.first()),
                    (Some(x), Some(y)) if x.t == y.t
                ));
                samples.extend_from_slice(&b.pre.samples[skip..]);
                let bias = self.frames[k - 1].state.bias;
                let merged = preintegrate(&samples, &bias, &a.pre.noise)?;
                let factor = ImuFactor::new(a.from, b.to, merged);
                self.imu[i] = factor;
                self.imu.remove(j);
            }
            (Some(i), None) | (None, Some(i)) => {
                self.imu.remove(i);
            }
            (None, None) => {}
        }
        if let Some(p) = &self.prior {
            if p.frames.contains(&id) {
                self.prior = p.marginalize(id);
            }
        }
        self.frames.remove(k);
        Ok(())
    }

    /// Fold everything known about frame `id` into a new prior on the other
    /// frames and remove it. `event` carries the pose-space system of the
    /// event edges touching that frame, depths already eliminated.
    pub fn marginalize_frame(
        &mut self,
        id: FrameId,
        event: Option<&EventFactor>,
        g: &Vector3<f64>,
    ) -> Result<(), BackendError> {
        let k = self.position(id).ok_or(BackendError::UnknownFrame(id))?;
        let n = self.frames.len();
        let states = self.states();
        let mut sys = System::new(n);
        for f in self.imu.iter().filter(|f| f.from == id || f.to == id) {
            let (a, b) = self.imu_ends(f);
            sys.add_imu(f, a, b, &states, g);
        }
        if let Some(e) = event {
            sys.add_event(e, &self.positions(&e.frames), &states);
        }
        if let Some(p) = &self.prior {
            sys.add_prior(p, &self.positions(&p.frames), &states);
        }
        let (h, grad) = schur_eliminate(&sys.h, &sys.grad, k, n);
        let rest: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        // keep only frames the prior actually constrains
        let touched: Vec<usize> = (0..rest.len())
            .filter(|&a| {
                let rows = STATE_DIM * a..STATE_DIM * (a + 1);
                rows.clone()
                    .any(|r| grad[r] != 0.0 || h.row(r).iter().any(|v| *v != 0.0))
            })
            .collect();
        let idx: Vec<usize> = touched
            .iter()
            .flat_map(|&a| (0..STATE_DIM).map(move |c| STATE_DIM * a + c))
            .collect();
        let h = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
        let grad = DVector::from_fn(idx.len(), |a, _| grad[idx[a]]);
        self.prior = (!touched.is_empty()).then(|| MarginalPrior {
            h: floor_eigenvalues(&h),
            g: grad,
            frames: touched.iter().map(|&a| self.frames[rest[a]].id).collect(),
            linearization: touched.iter().map(|&a| states[rest[a]]).collect(),
        });
        self.imu.retain(|f| f.from != id && f.to != id);
        self.frames.remove(k);
        Ok(())
    }

    /// Re-integrate IMU factors whose start-frame bias drifted by more than
    /// `threshold` from the linearization bias.
    pub fn repropagate_stale(&mut self, threshold: f64) -> Result<(), BackendError> {
        for f in self.imu.iter_mut() {
            let k = self.frames.iter().position(|x| x.id == f.from).expect("imu frame");
            let b = self.frames[k].state.bias;
            let drift = (b.accel - f.pre.bias.accel)
                .amax()
                .max((b.gyro - f.pre.bias.gyro).amax());
            if drift > threshold {
                *f = ImuFactor::new(f.from, f.to, f.pre.repropagate(&b)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
