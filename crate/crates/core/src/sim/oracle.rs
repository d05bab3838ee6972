use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Scenario;
use crate::geometry::Pose;
use crate::patch_graph::{EdgeKey, FlowPrediction, PatchGraph, PatchKey, MIN_DEPTH};
use crate::provider::{CorrespondenceProvider, ProviderError};

/// Added to the noise variance before inverting it into a confidence.
pub const ORACLE_EPSILON: f64 = 1e-3;

/// Inverse depth used when no landmark is visible from a patch's anchor.
const FALLBACK_INV_DEPTH: f64 = 0.5;

/// Answers correspondence queries with the true reprojection of each patch,
/// optionally perturbed by Gaussian noise and random drops.
///
/// A patch's true inverse depth is that of the landmark projecting nearest
/// to its center at the anchor frame's timestamp. Noise and drops are drawn
/// from a generator keyed by the edge, so repeated queries agree.
#[derive(Clone, Debug)]
pub struct OracleProvider {
    scenario: Scenario,
    pub sigma: f64,
    pub drop_rate: f64,
    pub seed: u64,
    truth: BTreeMap<PatchKey, (Vector2<f64>, i64, f64)>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl OracleProvider {
    pub fn new(scenario: Scenario, sigma: f64, drop_rate: f64, seed: u64) -> Self {
        OracleProvider {
            scenario,
            sigma,
            drop_rate,
            seed,
            truth: BTreeMap::new(),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn confidence(&self) -> f64 {
        1.0 / (self.sigma * self.sigma + ORACLE_EPSILON)
    }

    /// True inverse depth of a patch centered at `center` in the camera at
    /// time `t_us`.
    pub fn true_inv_depth(&self, center: &Vector2<f64>, t_us: i64) -> f64 {
        let inv = self.scenario.camera_pose(t_us).inverse();
        let mut best: Option<(f64, f64)> = None;
        for x in &self.scenario.landmarks {
            if let Some((px, z)) = self.scenario.project_landmark(&inv, x) {
                let d = (px - center).norm_squared();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, z));
                }
            }
        }
        best.map_or(FALLBACK_INV_DEPTH, |(_, z)| 1.0 / z)
    }

    fn patch_truth(&mut self, graph: &PatchGraph, key: &PatchKey) -> Option<(Vector2<f64>, i64, f64)> {
        let patch = graph.patch(key)?;
        let t = graph.keyframe(key.anchor)?.timestamp_us;
        if let Some(hit) = self.truth.get(key) {
            if hit.0 == patch.center && hit.1 == t {
                return Some(*hit);
            }
        }
        let entry = (patch.center, t, self.true_inv_depth(&patch.center, t));
        self.truth.insert(*key, entry);
        Some(entry)
    }

    fn edge_rng(&self, e: &EdgeKey) -> ChaCha8Rng {
        let mut h = mix(self.seed);
        for v in [e.source.anchor, e.source.index, e.target] {
            h = mix(h ^ v as u64);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    fn predict(&mut self, graph: &PatchGraph, e: &EdgeKey) -> FlowPrediction {
        let Some((center, t_i, inv_depth)) = self.patch_truth(graph, &e.source) else {
            return FlowPrediction::ignored();
        };
        let Some(t_j) = graph.keyframe(e.target).map(|k| k.timestamp_us) else {
            return FlowPrediction::ignored();
        };
        let intr = *self.scenario.intrinsics();
        let t_ji: Pose = self
            .scenario
            .camera_pose(t_j)
            .inverse()
            .compose(&self.scenario.camera_pose(t_i));
        let p = t_ji.act(&intr.unproject(&center, inv_depth));
        if p.z <= MIN_DEPTH {
            return FlowPrediction::ignored();
        }
        let target = intr.project(&p);
        if !intr.contains(&target) {
            return FlowPrediction::ignored();
        }
        let mut rng = self.edge_rng(e);
        if self.drop_rate > 0.0 && rng.random::<f64>() < self.drop_rate {
            return FlowPrediction::ignored();
        }
        let mut delta = target - center;
        if self.sigma > 0.0 {
            delta.x += self.sigma * rng.sample::<f64, _>(StandardNormal);
            delta.y += self.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let w = self.confidence();
        FlowPrediction::new(delta, Vector2::new(w, w))
    }
}

impl CorrespondenceProvider for OracleProvider {
    fn query(&mut self, graph: &PatchGraph, edges: &[EdgeKey]) -> Result<Vec<FlowPrediction>, ProviderError> {
        Ok(edges.iter().map(|e| self.predict(graph, e)).collect())
    }
}
