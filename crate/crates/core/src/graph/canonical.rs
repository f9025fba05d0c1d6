use serde::{Deserialize, Serialize};

use super::{GraphEdge, ScenarioSubgraph};
use crate::prelude::*;

/// Sort keys for node order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrder {
    /// Agent id first, then step.
    #[default]
    AgentMajor,
    /// Step first, then agent id.
    TimeMajor,
}

/// Reorders nodes by the chosen keys and renumbers edges to match.
/// Idempotent, and independent of the incoming node order because
/// `(agent, t)` is unique.
pub fn canonical_order(sg: &ScenarioSubgraph, order: NodeOrder) -> ScenarioSubgraph {
    let mut perm: Vec<usize> = (0..sg.nodes.len()).collect();
    perm.sort_by_key(|&i| {
        let n = &sg.nodes[i];
        match order {
            NodeOrder::AgentMajor => (n.agent_id, n.t),
            NodeOrder::TimeMajor => (n.t, n.agent_id),
        }
    });
    permute_nodes(sg, &perm)
}

/// New node `k` is old node `perm[k]`.
pub fn permute_nodes(sg: &ScenarioSubgraph, perm: &[usize]) -> ScenarioSubgraph {
    debug_assert_eq!(perm.len(), sg.nodes.len());
    let mut new_index = vec![0; perm.len()];
    for (k, &old) in perm.iter().enumerate() {
        new_index[old] = k;
    }
    let nodes = perm.iter().map(|&i| sg.nodes[i].clone()).collect();
    let mut edges: Vec<GraphEdge> = sg
        .edges
        .iter()
        .map(|e| GraphEdge::new(new_index[e.a], new_index[e.b], e.kind))
        .collect();
    edges.sort();
    ScenarioSubgraph {
        seed_sentence: sg.seed_sentence.clone(),
        nodes,
        edges,
        agent_count: sg.agent_count,
    }
}
