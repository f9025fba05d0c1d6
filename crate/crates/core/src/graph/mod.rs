//! Crowd scenario graphs: one node per (agent, step), sequence edges along
//! each agent's timeline and share edges between agents acting together.

mod canonical;
mod encode;
mod split;

pub use canonical::{canonical_order, permute_nodes, NodeOrder};
pub use encode::{encode, laplacian_eigenvectors, symmetric_eigen, EncodedGraph, EIGEN_DIM};
pub use split::{split_by_group, SplitFractions, Splits};

use serde::{Deserialize, Serialize};

use crate::prelude::*;
use crate::rng::SimRng;
use crate::simulator::AgentRecord;
use crate::vocab::{ActionLabel, LocationCategory, NUM_ACTIONS, NUM_LOCATIONS};

pub const MAX_NODES: usize = 40;
pub const MAX_AGENTS: usize = 6;
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("agent {agent} has two entries at step {t}")]
    DuplicateNode { agent: usize, t: usize },
    #[error("agent {from} lists {to} as partner at step {t} but not vice versa")]
    AsymmetricPartner { from: usize, to: usize, t: usize },
    #[error("subgraph has {0} nodes, more than {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    #[serde(rename = "agent")]
    pub agent_id: usize,
    pub t: usize,
    pub action: ActionLabel,
    pub location: LocationCategory,
    pub shared: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Sequence,
    Share,
}

impl EdgeKind {
    /// Scalar edge feature and adjacency entry.
    pub fn weight(self) -> f64 {
        match self {
            EdgeKind::Sequence => 1.0,
            EdgeKind::Share => -1.0,
        }
    }
}

/// Undirected edge between node indices `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
}

impl GraphEdge {
    pub fn new(a: usize, b: usize, kind: EdgeKind) -> Self {
        Self {
            a: a.min(b),
            b: a.max(b),
            kind,
        }
    }
}

/// The whole time-expanded graph of one simulation, global agent ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSubgraph {
    #[serde(rename = "sin")]
    pub seed_sentence: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    #[serde(rename = "agents")]
    pub agent_count: usize,
}

/// Subgraphs of one simulation plus, for each, the original agent id of
/// every dense id.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub subgraphs: Vec<ScenarioSubgraph>,
    pub origins: Vec<Vec<usize>>,
    pub dropped: usize,
}

pub fn build_graph(records: &[AgentRecord]) -> Result<CrowdGraph, GraphError> {
    let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut nodes = Vec::new();
    for r in records {
        for e in &r.entries {
            if index.insert((r.agent_id, e.t), nodes.len()).is_some() {
                return Err(GraphError::DuplicateNode {
                    agent: r.agent_id,
                    t: e.t,
                });
            }
            nodes.push(GraphNode {
                agent_id: r.agent_id,
                t: e.t,
                action: e.action,
                location: e.location_category,
                shared: !e.partners.is_empty(),
            });
        }
    }
    let mut edges = BTreeSet::new();
    for r in records {
        for e in &r.entries {
            let me = index[&(r.agent_id, e.t)];
            if e.t > 0 {
                if let Some(&prev) = index.get(&(r.agent_id, e.t - 1)) {
                    edges.insert(GraphEdge::new(prev, me, EdgeKind::Sequence));
                }
            }
            for &p in &e.partners {
                let symmetric = records
                    .iter()
                    .find(|o| o.agent_id == p)
                    .and_then(|o| o.entries.iter().find(|x| x.t == e.t))
                    .is_some_and(|x| x.partners.contains(&r.agent_id));
                if !symmetric {
                    return Err(GraphError::AsymmetricPartner {
                        from: r.agent_id,
                        to: p,
                        t: e.t,
                    });
                }
                edges.insert(GraphEdge::new(me, index[&(p, e.t)], EdgeKind::Share));
            }
        }
    }
    Ok(CrowdGraph {
        nodes,
        edges: edges.into_iter().collect(),
    })
}

/// Connected components with `find` by path halving.
pub(crate) fn components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Splits the graph into connected components, drops oversize ones and
/// relabels agents densely in order of first appearance.
pub fn extract_subgraphs(graph: &CrowdGraph, seed_sentence: &str) -> Extraction {
    let roots = components(graph.nodes.len(), graph.edges.iter().map(|e| (e.a, e.b)));
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in roots.iter().enumerate() {
        groups.entry(r).or_default().push(i);
    }
    let mut out = Extraction {
        subgraphs: Vec::new(),
        origins: Vec::new(),
        dropped: 0,
    };
    for members in groups.values() {
        let mut agents: Vec<usize> = Vec::new();
        for &i in members {
            let a = graph.nodes[i].agent_id;
            if !agents.contains(&a) {
                agents.push(a);
            }
        }
        if agents.len() > MAX_AGENTS || members.len() > MAX_NODES {
            out.dropped += 1;
            continue;
        }
        let local: BTreeMap<usize, usize> =
            members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let nodes = members
            .iter()
            .map(|&i| {
                let n = &graph.nodes[i];
                let agent_id = agents.iter().position(|&a| a == n.agent_id).unwrap_or(0);
                GraphNode {
                    agent_id,
                    ..n.clone()
                }
            })
            .collect();
        let mut edges: Vec<GraphEdge> = graph
            .edges
            .iter()
            .filter(|e| local.contains_key(&e.a))
            .map(|e| GraphEdge::new(local[&e.a], local[&e.b], e.kind))
            .collect();
        edges.sort();
        out.subgraphs.push(ScenarioSubgraph {
            seed_sentence: seed_sentence.to_string(),
            nodes,
            edges,
            agent_count: agents.len(),
        });
        out.origins.push(agents);
    }
    out
}

/// Every structural invariant of a subgraph; `Err` names the first failure.
pub fn check_subgraph(sg: &ScenarioSubgraph) -> Result<(), String> {
    let n = sg.nodes.len();
    if n == 0 || n > MAX_NODES {
        return Err(format!("node count {n} outside [1, {MAX_NODES}]"));
    }
    if sg.agent_count == 0 || sg.agent_count > MAX_AGENTS {
        return Err(format!(
            "agent count {} outside [1, {MAX_AGENTS}]",
            sg.agent_count
        ));
    }
    let mut steps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); sg.agent_count];
    for v in &sg.nodes {
        if v.agent_id >= sg.agent_count {
            return Err(format!(
                "agent id {} not below agent count {}",
                v.agent_id, sg.agent_count
            ));
        }
        if v.t >= MAX_STEPS {
            return Err(format!("step {} beyond {MAX_STEPS}", v.t));
        }
        if !steps[v.agent_id].insert(v.t) {
            return Err(format!("duplicate node agent {} t {}", v.agent_id, v.t));
        }
    }
    for (a, s) in steps.iter().enumerate() {
        if s.is_empty() {
            return Err(format!("agent {a} has no nodes"));
        }
        if s.iter().enumerate().any(|(i, &t)| i != t) {
            return Err(format!("agent {a} steps are not contiguous from 0"));
        }
    }
    let mut seen = BTreeSet::new();
    let mut seq_pairs = BTreeSet::new();
    let mut has_share = vec![false; n];
    for e in &sg.edges {
        if e.a >= e.b || e.b >= n {
            return Err(format!("bad edge endpoints ({}, {})", e.a, e.b));
        }
        if !seen.insert((e.a, e.b)) {
            return Err(format!("duplicate edge ({}, {})", e.a, e.b));
        }
        let (u, v) = (&sg.nodes[e.a], &sg.nodes[e.b]);
        match e.kind {
            EdgeKind::Sequence => {
                if u.agent_id != v.agent_id || u.t.abs_diff(v.t) != 1 {
                    return Err(format!(
                        "sequence edge ({}, {}) is not a step of one agent",
                        e.a, e.b
                    ));
                }
                seq_pairs.insert((u.agent_id, u.t.min(v.t)));
            }
            EdgeKind::Share => {
                if u.agent_id == v.agent_id || u.t != v.t {
                    return Err(format!(
                        "share edge ({}, {}) joins unequal steps or one agent",
                        e.a, e.b
                    ));
                }
                if u.action != v.action {
                    return Err(format!(
                        "share edge ({}, {}) joins different actions",
                        e.a, e.b
                    ));
                }
                has_share[e.a] = true;
                has_share[e.b] = true;
            }
        }
    }
    for (a, s) in steps.iter().enumerate() {
        for t in 1..s.len() {
            if !seq_pairs.contains(&(a, t - 1)) {
                return Err(format!("agent {a} missing sequence edge {}->{t}", t - 1));
            }
        }
    }
    for (i, v) in sg.nodes.iter().enumerate() {
        if v.shared != has_share[i] {
            return Err(format!("node {i} shared flag disagrees with its edges"));
        }
    }
    let roots = components(n, sg.edges.iter().map(|e| (e.a, e.b)));
    if roots.iter().any(|&r| r != roots[0]) {
        return Err("subgraph is disconnected".into());
    }
    Ok(())
}

/// Random valid connected subgraph: chains per agent, each later agent
/// tied to an earlier one by a share edge at some common step.
pub fn random_subgraph(rng: &mut SimRng, max_agents: usize, max_len: usize) -> ScenarioSubgraph {
    let k = 1 + rng.below(max_agents.clamp(1, MAX_AGENTS));
    let budget = MAX_NODES / k;
    let lens: Vec<usize> = (0..k)
        .map(|_| 1 + rng.below(max_len.min(MAX_STEPS).min(budget).max(1)))
        .collect();
    let mut nodes = Vec::new();
    let mut at = BTreeMap::new();
    for (a, &len) in lens.iter().enumerate() {
        for t in 0..len {
            at.insert((a, t), nodes.len());
            nodes.push(GraphNode {
                agent_id: a,
                t,
                action: ActionLabel::ALL[rng.below(NUM_ACTIONS)],
                location: LocationCategory::ALL[rng.below(NUM_LOCATIONS)],
                shared: false,
            });
        }
    }
    let mut edges = BTreeSet::new();
    for (a, &len) in lens.iter().enumerate() {
        for t in 1..len {
            edges.insert(GraphEdge::new(
                at[&(a, t - 1)],
                at[&(a, t)],
                EdgeKind::Sequence,
            ));
        }
        if a > 0 {
            let other = rng.below(a);
            let t = rng.below(len.min(lens[other]));
            edges.insert(GraphEdge::new(
                at[&(other, t)],
                at[&(a, t)],
                EdgeKind::Share,
            ));
        }
    }
    // a few extra shares
    for _ in 0..rng.below(3) {
        if k < 2 {
            break;
        }
        let a = rng.below(k);
        let b = rng.below(k);
        let t = rng.below(lens[a].min(lens[b]));
        if a != b {
            edges.insert(GraphEdge::new(at[&(a, t)], at[&(b, t)], EdgeKind::Share));
        }
    }
    let edges: Vec<GraphEdge> = edges.into_iter().collect();
    let share_roots = components(
        nodes.len(),
        edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Share)
            .map(|e| (e.a, e.b)),
    );
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Share) {
        nodes[e.a].shared = true;
        nodes[e.b].shared = true;
    }
    for i in 0..nodes.len() {
        nodes[i].action = nodes[share_roots[i]].action;
    }
    ScenarioSubgraph {
        seed_sentence: String::new(),
        nodes,
        edges,
        agent_count: k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::RecordEntry;

    fn rec(agent: usize, steps: &[(ActionLabel, &[usize])]) -> AgentRecord {
        AgentRecord {
            agent_id: agent,
            entries: steps
                .iter()
                .enumerate()
                .map(|(t, (a, p))| RecordEntry {
                    t,
                    action: *a,
                    location_category: LocationCategory::Room,
                    location_name: "r".into(),
                    partners: p.iter().copied().collect(),
                    duration: 1.0,
                })
                .collect(),
        }
    }

    use ActionLabel::{Sit, Talk, Wait};

    #[test]
    fn chain_of_three() {
        let g = build_graph(&[rec(0, &[(Sit, &[]), (Wait, &[]), (Sit, &[])])]).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(
            g.edges
                .iter()
                .filter(|e| e.kind == EdgeKind::Sequence)
                .count(),
            2
        );
        assert!(g.edges.iter().all(|e| e.kind == EdgeKind::Sequence));
    }

    #[test]
    fn talking_pair_has_one_share_edge() {
        let g = build_graph(&[
            rec(0, &[(Sit, &[]), (Talk, &[1])]),
            rec(1, &[(Wait, &[]), (Talk, &[0])]),
        ])
        .unwrap();
        let shares: Vec<_> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Share)
            .collect();
        assert_eq!(shares.len(), 1);
        assert_eq!((g.nodes[shares[0].a].t, g.nodes[shares[0].b].t), (1, 1));
    }

    #[test]
    fn asymmetric_and_duplicate_rejected() {
        let err = build_graph(&[rec(0, &[(Talk, &[1])]), rec(1, &[(Talk, &[])])]);
        assert!(matches!(err, Err(GraphError::AsymmetricPartner { .. })));
        let mut r = rec(0, &[(Sit, &[]), (Sit, &[])]);
        r.entries[1].t = 0;
        assert!(matches!(
            build_graph(&[r]),
            Err(GraphError::DuplicateNode { .. })
        ));
    }

    #[test]
    fn isolated_agents_are_separate_subgraphs() {
        let g = build_graph(&[rec(3, &[(Sit, &[])]), rec(5, &[(Sit, &[]), (Wait, &[])])]).unwrap();
        let ex = extract_subgraphs(&g, "s");
        assert_eq!(ex.subgraphs.len(), 2);
        assert_eq!(ex.origins, vec![vec![3], vec![5]]);
        assert!(ex
            .subgraphs
            .iter()
            .all(|s| s.agent_count == 1 && s.nodes.iter().all(|n| n.agent_id == 0)));
        for s in &ex.subgraphs {
            check_subgraph(s).unwrap();
        }
    }

    #[test]
    fn triangle_of_partners_is_one_subgraph() {
        let g = build_graph(&[
            rec(0, &[(Talk, &[1, 2])]),
            rec(1, &[(Talk, &[0, 2])]),
            rec(2, &[(Talk, &[0, 1])]),
        ])
        .unwrap();
        let ex = extract_subgraphs(&g, "s");
        assert_eq!(ex.subgraphs.len(), 1);
        assert_eq!(ex.subgraphs[0].agent_count, 3);
        assert_eq!(ex.subgraphs[0].edges.len(), 3);
    }

    #[test]
    fn seven_agents_dropped() {
        let recs: Vec<_> = (0..7)
            .map(|a| {
                let partners: Vec<usize> = (0..7).filter(|&b| b != a).collect();
                AgentRecord {
                    agent_id: a,
                    entries: rec(a, &[(Talk, &partners)]).entries,
                }
            })
            .collect();
        let ex = extract_subgraphs(&build_graph(&recs).unwrap(), "s");
        assert_eq!(ex.subgraphs.len(), 0);
        assert_eq!(ex.dropped, 1);
    }

    #[test]
    fn random_subgraphs_are_valid() {
        let mut rng = SimRng::seed(1);
        for _ in 0..500 {
            let sg = random_subgraph(&mut rng, 6, 10);
            check_subgraph(&sg).unwrap();
        }
    }
}
