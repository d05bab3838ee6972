//! Patch bundle adjustment: residuals, analytic Jacobians, normal equations
//! and their Schur reduction to a pose-only Hessian factor.
//!
//! The residual of edge `[(i, n), j]` is the reprojected patch center minus
//! the flow target, `pi(T_ji * pi^-1(P_in, d_in)) - (P_in + delta_inj)`.
//! Unknowns are one world-frame left twist per keyframe and one inverse depth
//! per patch; the per-edge relative-pose Jacobian is chained into the two
//! incident frames through the adjoint of `T_j^-1`.

use nalgebra::{DMatrix, DVector, Matrix2x6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::geometry::{Pose, Twist};
use crate::patch_graph::{
    clamp_inv_depth, EdgeKey, FlowPrediction, FrameId, GraphError, Patch, PatchGraph, PatchKey, MIN_DEPTH,
};

/// Damping added to every inverse-depth diagonal entry.
pub const DEPTH_DAMPING: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DbaError {
    #[error("reduced pose system is numerically singular")]
    SolveFailure,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A single edge evaluated at the current state.
#[derive(Clone, Copy, Debug)]
pub struct EdgeLinearization {
    pub residual: Vector2<f64>,
    /// d residual / d xi_ji for `T_ji <- exp(xi_ji) T_ji`.
    pub jac_pose: Matrix2x6<f64>,
    /// d residual / d inverse depth.
    pub jac_depth: Vector2<f64>,
    /// Patch center expressed in frame `j`, meters.
    pub point: Vector3<f64>,
}

fn point_in_target(patch: &Patch, t_ji: &Pose, intr: &Intrinsics) -> Result<Vector3<f64>, GraphError> {
    let p = t_ji.act(&intr.unproject(&patch.center, patch.inv_depth));
    if p.z <= MIN_DEPTH {
        return Err(GraphError::BehindCamera { depth: p.z });
    }
    Ok(p)
}

/// Reprojection residual of one edge.
pub fn residual(
    patch: &Patch,
    t_ji: &Pose,
    intr: &Intrinsics,
    flow: &FlowPrediction,
) -> Result<Vector2<f64>, GraphError> {
    let p = point_in_target(patch, t_ji, intr)?;
    Ok(intr.project(&p) - (patch.center + flow.delta))
}

/// 2x6 Jacobian of the projected center w.r.t. a left twist of `T_ji`,
/// evaluated at the target-frame point `point`.
///
/// The rotational block is the usual `[-fx xy/z^2, fx(1 + x^2/z^2), -fx y/z]`
/// row pattern; the translational block is `fx/z, -fx x/z^2`.
pub fn jacobian_pose(point: &Vector3<f64>, intr: &Intrinsics) -> Matrix2x6<f64> {
    let (x, y, z) = (point.x, point.y, point.z);
    let (fx, fy) = (intr.fx, intr.fy);
    let z2 = z * z;
    Matrix2x6::new(
        fx / z,
        0.0,
        -fx * x / z2,
        -fx * x * y / z2,
        fx + fx * x * x / z2,
        -fx * y / z,
        0.0,
        fy / z,
        -fy * y / z2,
        -fy - fy * y * y / z2,
        fy * x * y / z2,
        fy * x / z,
    )
}

/// 2x1 Jacobian of the projected center w.r.t. the anchor inverse depth.
pub fn jacobian_depth(point: &Vector3<f64>, t_ji: &Pose, inv_depth: f64, intr: &Intrinsics) -> Vector2<f64> {
    let t = &t_ji.translation;
    let (x, y, z) = (point.x, point.y, point.z);
    let zd = z * inv_depth;
    let z2d = z * z * inv_depth;
    Vector2::new(
        intr.fx * (t.x / zd - t.z * x / z2d),
        intr.fy * (t.y / zd - t.z * y / z2d),
    )
}

pub fn linearize_edge(
    patch: &Patch,
    t_ji: &Pose,
    intr: &Intrinsics,
    flow: &FlowPrediction,
) -> Result<EdgeLinearization, GraphError> {
    let point = point_in_target(patch, t_ji, intr)?;
    Ok(EdgeLinearization {
        residual: intr.project(&point) - (patch.center + flow.delta),
        jac_pose: jacobian_pose(&point, intr),
        jac_depth: jacobian_depth(&point, t_ji, patch.inv_depth, intr),
        point,
    })
}

/// Block system `[B E; E^T C] [xi; dd] = [v; u]` over window frames and patches.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// Diagonal of `C`, damping included.
    pub c: DVector<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    pub frames: Vec<FrameId>,
    pub patches: Vec<PatchKey>,
    /// `0.5 * sum r^T W r` over valid edges.
    pub cost: f64,
    /// Weighted edges that could not be evaluated (behind the camera).
    pub invalid_edges: usize,
}

impl NormalEquations {
    pub fn pose_dim(&self) -> usize {
        6 * self.frames.len()
    }

    pub fn depth_dim(&self) -> usize {
        self.patches.len()
    }

    /// The full `(6F + M)` square system, for checking and debugging.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (np, nd) = (self.pose_dim(), self.depth_dim());
        let mut h = DMatrix::zeros(np + nd, np + nd);
        h.view_mut((0, 0), (np, np)).copy_from(&self.b);
        h.view_mut((0, np), (np, nd)).copy_from(&self.e);
        h.view_mut((np, 0), (nd, np)).copy_from(&self.e.transpose());
        for k in 0..nd {
            h[(np + k, np + k)] = self.c[k];
        }
        let mut g = DVector::zeros(np + nd);
        g.rows_mut(0, np).copy_from(&self.v);
        g.rows_mut(np, nd).copy_from(&self.u);
        (h, g)
    }

    /// Debug dump: for each of B, E, C, v, u a little-endian header
    /// `(rows: u64, cols: u64)` followed by row-major f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        fn put(out: &mut Vec<u8>, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) {
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            for r in 0..rows {
                for c in 0..cols {
                    out.extend_from_slice(&at(r, c).to_le_bytes());
                }
            }
        }
        let mut out = Vec::new();
        put(&mut out, self.b.nrows(), self.b.ncols(), |r, c| self.b[(r, c)]);
        put(&mut out, self.e.nrows(), self.e.ncols(), |r, c| self.e[(r, c)]);
        put(&mut out, self.c.len(), 1, |r, _| self.c[r]);
        put(&mut out, self.v.len(), 1, |r, _| self.v[r]);
        put(&mut out, self.u.len(), 1, |r, _| self.u[r]);
        out
    }
}

/// Reduced pose-only constraint `0.5 xi^T H xi - xi^T V` over `frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventHessianFactor {
    pub h: DMatrix<f64>,
    pub v: DVector<f64>,
    pub frames: Vec<FrameId>,
}

impl EventHessianFactor {
    pub fn zeros(frames: Vec<FrameId>) -> Self {
        let n = 6 * frames.len();
        EventHessianFactor {
            h: DMatrix::zeros(n, n),
            v: DVector::zeros(n),
            frames,
        }
    }

    /// Solve for per-frame twists with the listed frames held fixed (zero
    /// step). Frames without any information are held fixed too.
    pub fn solve(&self, fixed: &[FrameId]) -> Result<DVector<f64>, DbaError> {
        let n = self.h.nrows();
        let free: Vec<usize> = (0..n)
            .filter(|&r| {
                let frame = self.frames[r / 6];
                !fixed.contains(&frame) && self.h[(r, r)] > 0.0
            })
            .collect();
        let mut xi = DVector::zeros(n);
        if free.is_empty() {
            return Ok(xi);
        }
        let m = free.len();
        let h = DMatrix::from_fn(m, m, |a, b| self.h[(free[a], free[b])]);
        let v = DVector::from_fn(m, |a, _| self.v[free[a]]);
        let chol = h.cholesky().ok_or(DbaError::SolveFailure)?;
        let sol = chol.solve(&v);
        if sol.iter().any(|x| !x.is_finite()) {
            return Err(DbaError::SolveFailure);
        }
        for (a, &r) in free.iter().enumerate() {
            xi[r] = sol[a];
        }
        Ok(xi)
    }
}

/// Dense index of every frame and patch in the graph.
struct Layout {
    frames: Vec<FrameId>,
    patches: Vec<PatchKey>,
}

impl Layout {
    fn of(graph: &PatchGraph) -> Self {
        Layout {
            frames: graph.frame_ids(),
            patches: graph.patches().map(|p| p.key).collect(),
        }
    }

    fn frame(&self, id: FrameId) -> usize {
        self.frames.binary_search(&id).expect("frame in layout")
    }

    fn patch(&self, key: &PatchKey) -> usize {
        self.patches.binary_search(key).expect("patch in layout")
    }
}

fn weighted(w: &Vector2<f64>, v: &Vector2<f64>) -> Vector2<f64> {
    v.component_mul(w)
}

/// Accumulate `J^T W J` and `-J^T W r` for every weighted edge. Edges are
/// visited in key order, so the result is reproducible bit for bit.
pub fn build_normal_equations(graph: &PatchGraph, intr: &Intrinsics) -> NormalEquations {
    build_normal_equations_with(graph, intr, DEPTH_DAMPING, |_| true)
}

/// As [`build_normal_equations`] restricted to edges accepted by `filter`.
pub fn build_normal_equations_with(
    graph: &PatchGraph,
    intr: &Intrinsics,
    damping: f64,
    filter: impl Fn(&EdgeKey) -> bool,
) -> NormalEquations {
    let layout = Layout::of(graph);
    let nf = layout.frames.len();
    let np = layout.patches.len();
    let mut b = DMatrix::zeros(6 * nf, 6 * nf);
    let mut e = DMatrix::zeros(6 * nf, np);
    let mut c = DVector::from_element(np, damping);
    let mut v = DVector::zeros(6 * nf);
    let mut u = DVector::zeros(np);
    let mut cost = 0.0;
    let mut invalid_edges = 0;

    let poses: Vec<Pose> = graph.keyframes().iter().map(|k| k.pose).collect();
    let inv_poses: Vec<Pose> = poses.iter().map(Pose::inverse).collect();
    let adjoints: Vec<_> = inv_poses.iter().map(Pose::adjoint).collect();

    for (key, flow) in graph.edges() {
        if flow.is_ignored() || !filter(key) {
            continue;
        }
        let patch = graph.patch(&key.source).expect("edge source exists");
        let i = layout.frame(key.source.anchor);
        let j = layout.frame(key.target);
        let n = layout.patch(&key.source);
        let t_ji = inv_poses[j].compose(&poses[i]);
        let lin = match linearize_edge(patch, &t_ji, intr, flow) {
            Ok(l) => l,
            Err(_) => {
                invalid_edges += 1;
                continue;
            }
        };
        let w = flow.weight;
        let ji = lin.jac_pose * adjoints[j];
        let jj = -ji;
        let wr = weighted(&w, &lin.residual);
        cost += 0.5 * lin.residual.dot(&wr);

        let wji = Matrix2x6::from_fn(|r, col| w[r] * ji[(r, col)]);
        let ji_t = ji.transpose();
        let jj_t = jj.transpose();
        let wjd = weighted(&w, &lin.jac_depth);
        let hii = ji_t * wji;
        let hjj = hii; // (-J)^T W (-J)
        let hij = -hii;
        let (si, sj) = (6 * i, 6 * j);
        {
            let mut blk = b.fixed_view_mut::<6, 6>(si, si);
            blk += hii;
        }
        {
            let mut blk = b.fixed_view_mut::<6, 6>(sj, sj);
            blk += hjj;
        }
        {
            let mut blk = b.fixed_view_mut::<6, 6>(si, sj);
            blk += hij;
        }
        {
            let mut blk = b.fixed_view_mut::<6, 6>(sj, si);
            blk += hij.transpose();
        }
        let ei: Vector6<f64> = ji_t * wjd;
        let ej: Vector6<f64> = jj_t * wjd;
        {
            let mut col = e.fixed_view_mut::<6, 1>(si, n);
            col += ei;
        }
        {
            let mut col = e.fixed_view_mut::<6, 1>(sj, n);
            col += ej;
        }
        c[n] += lin.jac_depth.dot(&wjd);
        {
            let mut seg = v.fixed_rows_mut::<6>(si);
            seg -= ji_t * wr;
        }
        {
            let mut seg = v.fixed_rows_mut::<6>(sj);
            seg -= jj_t * wr;
        }
        u[n] -= lin.jac_depth.dot(&wr);
    }

    NormalEquations {
        b,
        e,
        c,
        v,
        u,
        frames: layout.frames,
        patches: layout.patches,
        cost,
        invalid_edges,
    }
}

/// Eliminate depths: `H = B - E C^-1 E^T`, `V = v - E C^-1 u`.
pub fn schur_reduce(ne: &NormalEquations) -> EventHessianFactor {
    let mut ec = ne.e.clone();
    for (k, mut col) in ec.column_iter_mut().enumerate() {
        col /= ne.c[k];
    }
    let mut h = &ne.b - &ec * ne.e.transpose();
    let v = &ne.v - &ec * &ne.u;
    // symmetrize round-off
    let ht = h.transpose();
    h = (h + ht) * 0.5;
    EventHessianFactor {
        h,
        v,
        frames: ne.frames.clone(),
    }
}

/// Back-substitute depth increments `C^-1 (u - E^T xi)`.
pub fn update_depths(ne: &NormalEquations, xi: &DVector<f64>) -> DVector<f64> {
    let rhs = &ne.u - ne.e.transpose() * xi;
    rhs.component_div(&ne.c)
}

/// `0.5 * sum r^T W r` over weighted edges and the number of weighted edges
/// that could not be evaluated.
pub fn graph_cost(graph: &PatchGraph, intr: &Intrinsics) -> (f64, usize) {
    let mut cost = 0.0;
    let mut invalid = 0;
    for (key, flow) in graph.edges() {
        if flow.is_ignored() {
            continue;
        }
        let patch = graph.patch(&key.source).expect("edge source exists");
        let t_ji = graph
            .relative_pose(key.source.anchor, key.target)
            .expect("edge frames exist");
        match residual(patch, &t_ji, intr, flow) {
            Ok(r) => cost += 0.5 * r.dot(&weighted(&flow.weight, &r)),
            Err(_) => invalid += 1,
        }
    }
    (cost, invalid)
}

/// Apply per-frame twists and depth increments scaled by `step`.
pub fn apply_update(
    graph: &mut PatchGraph,
    frames: &[FrameId],
    patches: &[PatchKey],
    xi: &DVector<f64>,
    dd: &DVector<f64>,
    step: f64,
) {
    for (k, id) in frames.iter().enumerate() {
        let tw = Twist(xi.fixed_rows::<6>(6 * k).into_owned() * step);
        let pose = graph.keyframe(*id).expect("frame").pose.retract(&tw);
        graph.set_pose(*id, pose).expect("frame");
    }
    for (n, key) in patches.iter().enumerate() {
        if let Some(p) = graph.patch(key) {
            let d = clamp_inv_depth(p.inv_depth + step * dd[n]);
            graph.set_inv_depth(key, d);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted: usize,
}

/// Gauss-Newton on poses and depths with the first window frame held fixed.
/// Each step is accepted only if the weighted cost does not increase (with
/// step halving); a step that cannot be made to decrease ends the loop.
pub fn ba_iterate(graph: &mut PatchGraph, intr: &Intrinsics, n_iters: usize) -> Result<BaReport, DbaError> {
    let (initial_cost, _) = graph_cost(graph, intr);
    let mut report = BaReport {
        initial_cost,
        final_cost: initial_cost,
        accepted: 0,
    };
    if graph.len() < 2 {
        return Ok(report);
    }
    let anchor = graph.keyframes()[0].id;
    for _ in 0..n_iters {
        let ne = build_normal_equations(graph, intr);
        if ne.v.amax() == 0.0 && ne.u.amax() == 0.0 {
            break;
        }
        let factor = schur_reduce(&ne);
        let xi = factor.solve(&[anchor])?;
        let dd = update_depths(&ne, &xi);
        let (cost0, invalid0) = (ne.cost, ne.invalid_edges);
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..10 {
            let mut trial = graph.clone();
            apply_update(&mut trial, &ne.frames, &ne.patches, &xi, &dd, step);
            let (cost, invalid) = graph_cost(&trial, intr);
            if invalid <= invalid0 && cost <= cost0 {
                *graph = trial;
                report.final_cost = cost;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        report.accepted += 1;
    }
    Ok(report)
}

/// One-dimensional Gauss-Newton on the inverse depth of `keys`, poses fixed.
pub fn refine_depths(graph: &mut PatchGraph, intr: &Intrinsics, keys: &[PatchKey], iters: usize) {
    for key in keys {
        let edges: Vec<(EdgeKey, FlowPrediction)> = graph
            .edges()
            .filter(|(e, f)| e.source == *key && !f.is_ignored())
            .map(|(e, f)| (*e, *f))
            .collect();
        if edges.is_empty() {
            continue;
        }
        let eval = |g: &PatchGraph, d: f64| -> Option<(f64, f64, f64)> {
            let mut patch = g.patch(key)?.clone();
            patch.inv_depth = d;
            let (mut cost, mut h, mut grad) = (0.0, DEPTH_DAMPING, 0.0);
            for (e, f) in &edges {
                let t_ji = g.relative_pose(e.source.anchor, e.target).ok()?;
                let lin = linearize_edge(&patch, &t_ji, intr, f).ok()?;
                let wr = weighted(&f.weight, &lin.residual);
                cost += 0.5 * lin.residual.dot(&wr);
                h += lin.jac_depth.dot(&weighted(&f.weight, &lin.jac_depth));
                grad += lin.jac_depth.dot(&wr);
            }
            Some((cost, h, grad))
        };
        for _ in 0..iters {
            let Some(d0) = graph.patch(key).map(|p| p.inv_depth) else {
                break;
            };
            let Some((c0, h, g)) = eval(graph, d0) else {
                break;
            };
            let mut step = -g / h;
            let mut improved = false;
            for _ in 0..8 {
                let d1 = clamp_inv_depth(d0 + step);
                if let Some((c1, _, _)) = eval(graph, d1) {
                    if c1 <= c0 {
                        graph.set_inv_depth(key, d1);
                        improved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
    }
}
