//! Sparse event patches and the bipartite co-visibility graph.
//!
//! A patch is anchored in one segment and carries a single inverse depth. An
//! edge `[(i, n), j]` asks where patch `n` of segment `i` lands in segment
//! `j`. The graph also owns the keyframe window and applies the keyframe
//! removal rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::event::EventVoxel;
use crate::geometry::Pose;

/// Patches selected per segment.
pub const PATCHES_PER_SEGMENT: usize = 96;
/// Prior keyframes each new patch is connected to.
pub const EDGE_LOOKBACK: usize = 13;
/// Maximum keyframes in the optimization window.
pub const MAX_KEYFRAMES: usize = 10;
/// Flow between keyframes (t-5) and (t-3) below which (t-4) is removed, pixels.
pub const KEYFRAME_FLOW_THRESHOLD: f64 = 60.0;
/// The most recent segments are always kept as keyframes.
pub const PROTECTED_RECENT: usize = 3;
pub const DEFAULT_PATCH_SIZE: usize = 3;
pub const DEFAULT_NMS_RADIUS: f64 = 8.0;
/// Reprojected depth below which an edge is considered behind the camera, meters.
pub const MIN_DEPTH: f64 = 1e-3;
pub const MIN_INV_DEPTH: f64 = 1e-4;
pub const MAX_INV_DEPTH: f64 = 1e3;

pub type FrameId = usize;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GraphError {
    #[error("reprojected depth {depth} m is behind the camera")]
    BehindCamera { depth: f64 },
    #[error("frame {0} is not in the window")]
    UnknownFrame(FrameId),
    #[error("voxel is smaller than the patch size")]
    VoxelTooSmall,
}

/// Identifies patch `n` anchored in segment `anchor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchKey {
    pub anchor: FrameId,
    pub index: usize,
}

/// Edge `[(i, n), j]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub source: PatchKey,
    pub target: FrameId,
}

/// Predicted flow `delta` of a patch center and its per-axis confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowPrediction {
    pub delta: Vector2<f64>,
    pub weight: Vector2<f64>,
}

impl FlowPrediction {
    pub fn new(delta: Vector2<f64>, weight: Vector2<f64>) -> Self {
        debug_assert!(weight.x >= 0.0 && weight.y >= 0.0);
        FlowPrediction { delta, weight }
    }

    pub fn ignored() -> Self {
        FlowPrediction {
            delta: Vector2::zeros(),
            weight: Vector2::zeros(),
        }
    }

    pub fn is_ignored(&self) -> bool {
        self.weight.x == 0.0 && self.weight.y == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub key: PatchKey,
    pub center: Vector2<f64>,
    /// `p * p` pixel coordinates, row-major around `center`.
    pub pixels: Vec<Vector2<f64>>,
    pub inv_depth: f64,
}

impl Patch {
    pub fn new(key: PatchKey, center: Vector2<f64>, size: usize, inv_depth: f64) -> Self {
        let half = (size / 2) as f64;
        let mut pixels = Vec::with_capacity(size * size);
        for dy in 0..size {
            for dx in 0..size {
                pixels.push(center + Vector2::new(dx as f64 - half, dy as f64 - half));
            }
        }
        Patch {
            key,
            center,
            pixels,
            inv_depth: clamp_inv_depth(inv_depth),
        }
    }
}

pub fn clamp_inv_depth(d: f64) -> f64 {
    if d.is_nan() {
        MIN_INV_DEPTH
    } else {
        d.clamp(MIN_INV_DEPTH, MAX_INV_DEPTH)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: FrameId,
    pub timestamp_us: i64,
    /// Camera-to-world pose.
    pub pose: Pose,
}

/// How patch centers are chosen from a voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchSelector {
    /// Greedy maxima of per-pixel `|voxel|` mass with non-maximum suppression.
    EventDensity {
        nms_radius: f64,
    },
    Random,
}

impl Default for PatchSelector {
    fn default() -> Self {
        PatchSelector::EventDensity {
            nms_radius: DEFAULT_NMS_RADIUS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchSelection {
    pub patches: Vec<Patch>,
    /// Fewer textured sites than requested; the remainder was placed at random.
    pub insufficient_texture: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphParams {
    pub patch_size: usize,
    pub lookback: usize,
    pub max_keyframes: usize,
    pub flow_threshold: f64,
    pub protected_recent: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            patch_size: DEFAULT_PATCH_SIZE,
            lookback: EDGE_LOOKBACK,
            max_keyframes: MAX_KEYFRAMES,
            flow_threshold: KEYFRAME_FLOW_THRESHOLD,
            protected_recent: PROTECTED_RECENT,
        }
    }
}

/// Outcome of [`PatchGraph::keyframe_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeyframeDecision {
    /// Mean flow between (t-5) and (t-3), if evaluated.
    pub flow: Option<f64>,
    /// Mid-window frame dropped by the flow rule.
    pub removed: Option<FrameId>,
    /// Oldest frame pushed out of the window; the caller marginalizes it.
    pub marginalized: Option<FrameId>,
}

#[derive(Clone, Debug, Default)]
pub struct PatchGraph {
    pub params: GraphParams,
    keyframes: Vec<Keyframe>,
    patches: BTreeMap<PatchKey, Patch>,
    edges: BTreeMap<EdgeKey, FlowPrediction>,
}

impl PatchGraph {
    pub fn new(params: GraphParams) -> Self {
        PatchGraph {
            params,
            ..Default::default()
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframe(&self, id: FrameId) -> Option<&Keyframe> {
        self.position(id).map(|k| &self.keyframes[k])
    }

    pub fn position(&self, id: FrameId) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.keyframes.iter().map(|k| k.id).collect()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn patches(&self) -> impl Iterator<Item = &Patch> {
        self.patches.values()
    }

    pub fn patch(&self, key: &PatchKey) -> Option<&Patch> {
        self.patches.get(key)
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EdgeKey, &FlowPrediction)> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Append a keyframe; ids must be strictly increasing.
    pub fn push_keyframe(&mut self, id: FrameId, timestamp_us: i64, pose: Pose) {
        if let Some(last) = self.keyframes.last() {
            assert!(id > last.id, "keyframe ids must be strictly increasing");
        }
        self.keyframes.push(Keyframe { id, timestamp_us, pose });
    }

    pub fn set_pose(&mut self, id: FrameId, pose: Pose) -> Result<(), GraphError> {
        let k = self.position(id).ok_or(GraphError::UnknownFrame(id))?;
        self.keyframes[k].pose = pose;
        Ok(())
    }

    pub fn set_inv_depth(&mut self, key: &PatchKey, inv_depth: f64) {
        if let Some(p) = self.patches.get_mut(key) {
            p.inv_depth = clamp_inv_depth(inv_depth);
        }
    }

    pub fn set_flow(&mut self, edge: &EdgeKey, flow: FlowPrediction) {
        if let Some(f) = self.edges.get_mut(edge) {
            *f = flow;
        }
    }

    /// Inverse-depth initialization for new patches: median over the window,
    /// or 1 when the window holds no patches.
    pub fn initial_inv_depth(&self) -> f64 {
        let mut depths: Vec<f64> = self.patches.values().map(|p| p.inv_depth).collect();
        if depths.is_empty() {
            return 1.0;
        }
        depths.sort_by(f64::total_cmp);
        let n = depths.len();
        if n % 2 == 1 {
            depths[n / 2]
        } else {
            0.5 * (depths[n / 2 - 1] + depths[n / 2])
        }
    }

    /// Select `count` patches from `voxel` and insert them, anchored at the
    /// voxel's segment index.
    pub fn add_patches(
        &mut self,
        voxel: &EventVoxel,
        selector: PatchSelector,
        count: usize,
    ) -> Result<PatchSelection, GraphError> {
        let inv_depth = self.initial_inv_depth();
        let selection = select_patches(voxel, selector, count, self.params.patch_size, inv_depth)?;
        for p in &selection.patches {
            self.patches.insert(p.key, p.clone());
        }
        Ok(selection)
    }

    /// Insert an externally constructed patch.
    pub fn insert_patch(&mut self, patch: Patch) {
        self.patches.insert(patch.key, patch);
    }

    /// Connect patches anchored at `anchor` to up to `lookback` preceding
    /// keyframes, and patches of those keyframes forward to `anchor`.
    /// Returns the edges that were not already present.
    pub fn add_edges(&mut self, anchor: FrameId, lookback: usize) -> Vec<EdgeKey> {
        let prior: Vec<FrameId> = self
            .keyframes
            .iter()
            .rev()
            .map(|k| k.id)
            .filter(|&id| id < anchor)
            .take(lookback)
            .collect();
        let new_keys: Vec<PatchKey> = self
            .patches
            .range(
                PatchKey { anchor, index: 0 }..=PatchKey {
                    anchor,
                    index: usize::MAX,
                },
            )
            .map(|(k, _)| *k)
            .collect();
        let mut added = Vec::new();
        for key in &new_keys {
            for &target in &prior {
                let edge = EdgeKey { source: *key, target };
                if self.insert_edge(edge) {
                    added.push(edge);
                }
            }
        }
        let prior_set: BTreeSet<FrameId> = prior.iter().copied().collect();
        let forward: Vec<PatchKey> = self
            .patches
            .keys()
            .filter(|k| prior_set.contains(&k.anchor))
            .copied()
            .collect();
        for key in forward {
            let edge = EdgeKey {
                source: key,
                target: anchor,
            };
            if self.insert_edge(edge) {
                added.push(edge);
            }
        }
        added
    }

    /// Insert an edge with zero confidence; true if it was new.
    pub fn insert_edge(&mut self, edge: EdgeKey) -> bool {
        if edge.source.anchor == edge.target
            || !self.patches.contains_key(&edge.source)
            || self.position(edge.target).is_none()
        {
            return false;
        }
        if self.edges.contains_key(&edge) {
            return false;
        }
        self.edges.insert(edge, FlowPrediction::ignored());
        true
    }

    /// Drop a keyframe together with its patches and every incident edge.
    pub fn remove_frame(&mut self, id: FrameId) -> Result<(), GraphError> {
        let k = self.position(id).ok_or(GraphError::UnknownFrame(id))?;
        self.keyframes.remove(k);
        self.patches.retain(|key, _| key.anchor != id);
        self.edges.retain(|e, _| e.source.anchor != id && e.target != id);
        Ok(())
    }

    /// Relative transform taking points from frame `i` into frame `j`.
    pub fn relative_pose(&self, i: FrameId, j: FrameId) -> Result<Pose, GraphError> {
        let ti = self.keyframe(i).ok_or(GraphError::UnknownFrame(i))?;
        let tj = self.keyframe(j).ok_or(GraphError::UnknownFrame(j))?;
        Ok(tj.pose.inverse().compose(&ti.pose))
    }

    /// Mean displacement of patch centers reprojected between `a` and `b`,
    /// averaged over patches anchored in either frame. `+inf` when no patch
    /// reprojects validly.
    pub fn flow_magnitude(&self, a: FrameId, b: FrameId, intrinsics: &Intrinsics) -> Result<f64, GraphError> {
        let t_ba = self.relative_pose(a, b)?;
        let t_ab = t_ba.inverse();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (anchor, t) in [(a, &t_ba), (b, &t_ab)] {
            for p in self.patches.values().filter(|p| p.key.anchor == anchor) {
                if let Ok(px) = reproject(p, t, intrinsics) {
                    sum += (px - p.center).norm();
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { f64::INFINITY } else { sum / n as f64 })
    }

    /// Apply the keyframe rule after an update: drop (t-4) when the flow
    /// between (t-5) and (t-3) is under the threshold, then push the oldest
    /// frame out if the window is over capacity.
    pub fn keyframe_update(&mut self, intrinsics: &Intrinsics) -> KeyframeDecision {
        let mut decision = KeyframeDecision::default();
        let n = self.keyframes.len();
        if n >= 6 {
            let t = n - 1;
            let a = self.keyframes[t - 5].id;
            let b = self.keyframes[t - 3].id;
            let candidate = self.keyframes[t - 4].id;
            debug_assert!(t - 4 < n - self.params.protected_recent);
            let flow = self.flow_magnitude(a, b, intrinsics).unwrap_or(f64::INFINITY);
            decision.flow = Some(flow);
            if flow < self.params.flow_threshold {
                self.remove_frame(candidate).expect("candidate is in window");
                decision.removed = Some(candidate);
            }
        }
        if self.keyframes.len() > self.params.max_keyframes {
            let oldest = self.keyframes[0].id;
            self.remove_frame(oldest).expect("oldest is in window");
            decision.marginalized = Some(oldest);
        }
        decision
    }

    /// True when every edge references a live patch and keyframe.
    pub fn is_consistent(&self) -> bool {
        self.edges.keys().all(|e| {
            self.patches.contains_key(&e.source) && self.position(e.target).is_some() && e.source.anchor != e.target
        }) && self.patches.keys().all(|k| self.position(k.anchor).is_some())
    }

    /// Line-oriented dump:
    ///
    /// ```text
    /// K <id> <t_us> <tx> <ty> <tz> <qw> <qx> <qy> <qz>
    /// P <anchor> <n> <cx> <cy> <inv_depth>
    /// E <anchor> <n> <target> <dx> <dy> <wx> <wy>
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::from("# patch graph v1\n");
        for k in &self.keyframes {
            let t = &k.pose.translation;
            let q = &k.pose.rotation;
            let _ = writeln!(
                out,
                "K {} {} {} {} {} {} {} {} {}",
                k.id, k.timestamp_us, t.x, t.y, t.z, q.w, q.i, q.j, q.k
            );
        }
        for p in self.patches.values() {
            let _ = writeln!(
                out,
                "P {} {} {} {} {}",
                p.key.anchor, p.key.index, p.center.x, p.center.y, p.inv_depth
            );
        }
        for (e, f) in &self.edges {
            let _ = writeln!(
                out,
                "E {} {} {} {} {} {} {}",
                e.source.anchor, e.source.index, e.target, f.delta.x, f.delta.y, f.weight.x, f.weight.y
            );
        }
        out
    }
}

/// Pixel where the patch center lands under `t_ji`.
pub fn reproject(patch: &Patch, t_ji: &Pose, intrinsics: &Intrinsics) -> Result<Vector2<f64>, GraphError> {
    let p = t_ji.act(&intrinsics.unproject(&patch.center, patch.inv_depth));
    if p.z <= MIN_DEPTH {
        return Err(GraphError::BehindCamera { depth: p.z });
    }
    Ok(intrinsics.project(&p))
}

/// Choose patch centers in `voxel` without inserting them anywhere.
pub fn select_patches(
    voxel: &EventVoxel,
    selector: PatchSelector,
    count: usize,
    patch_size: usize,
    inv_depth: f64,
) -> Result<PatchSelection, GraphError> {
    let (h, w) = (voxel.dims.height, voxel.dims.width);
    if h < patch_size || w < patch_size || patch_size == 0 {
        return Err(GraphError::VoxelTooSmall);
    }
    let half = patch_size / 2;
    let (x_lo, x_hi) = (half, w - (patch_size - half));
    let (y_lo, y_hi) = (half, h - (patch_size - half));

    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(count);
    if let PatchSelector::EventDensity { nms_radius } = selector {
        let density = voxel.abs_density();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let v = density[y * w + x];
                if v > 0.0 {
                    candidates.push((v, y, x));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let r2 = nms_radius * nms_radius;
        for (_, y, x) in candidates {
            if centers.len() == count {
                break;
            }
            let clear = centers.iter().all(|&(cy, cx)| {
                let dy = cy as f64 - y as f64;
                let dx = cx as f64 - x as f64;
                dx * dx + dy * dy >= r2
            });
            if clear {
                centers.push((y, x));
            }
        }
    }
    let insufficient_texture = centers.len() < count;
    if insufficient_texture {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ voxel.segment_index as u64);
        let mut taken: BTreeSet<(usize, usize)> = centers.iter().copied().collect();
        let capacity = (y_hi - y_lo + 1) * (x_hi - x_lo + 1);
        while centers.len() < count && taken.len() < capacity {
            let site = (rng.random_range(y_lo..=y_hi), rng.random_range(x_lo..=x_hi));
            if taken.insert(site) {
                centers.push(site);
            }
        }
    }
    let patches = centers
        .into_iter()
        .enumerate()
        .map(|(index, (y, x))| {
            Patch::new(
                PatchKey {
                    anchor: voxel.segment_index,
                    index,
                },
                Vector2::new(x as f64, y as f64),
                patch_size,
                inv_depth,
            )
        })
        .collect();
    Ok(PatchSelection {
        patches,
        insufficient_texture: insufficient_texture && selector != PatchSelector::Random,
    })
}
