//! Source of patch correspondences: a flow offset and confidence per edge.

use thiserror::Error;

use crate::patch_graph::{EdgeKey, FlowPrediction, PatchGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("correspondence provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider returned {got} predictions for {expected} edges")]
    Mismatch { expected: usize, got: usize },
}

/// Anything able to predict, for each edge, where the source patch lands in
/// the target frame (`delta`) and how much to trust it (`weight`).
///
/// Implementations see the current poses and depths through `graph` and must
/// answer every requested edge; a zero weight drops the edge.
pub trait CorrespondenceProvider {
    fn query(&mut self, graph: &PatchGraph, edges: &[EdgeKey]) -> Result<Vec<FlowPrediction>, ProviderError>;
}

/// Query predictions for every edge of `graph` and store them.
pub fn refresh_flows(provider: &mut dyn CorrespondenceProvider, graph: &mut PatchGraph) -> Result<(), ProviderError> {
    let edges: Vec<EdgeKey> = graph.edges().map(|(e, _)| *e).collect();
    let flows = provider.query(graph, &edges)?;
    if flows.len() != edges.len() {
        return Err(ProviderError::Mismatch {
            expected: edges.len(),
            got: flows.len(),
        });
    }
    for (e, f) in edges.iter().zip(flows) {
        graph.set_flow(e, f);
    }
    Ok(())
}
