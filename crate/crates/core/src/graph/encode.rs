use serde::{Deserialize, Serialize};

use super::{GraphError, ScenarioSubgraph, MAX_AGENTS, MAX_NODES, MAX_STEPS};
use crate::math;
use crate::prelude::*;
use crate::vocab::{NUM_ACTIONS, NUM_LOCATIONS};

pub const EIGEN_DIM: usize = 4;
/// Width of the concatenated one-hot blocks: 15 + 8 + 6 + 10 + 2.
pub const ONEHOT_WIDTH: usize = NUM_ACTIONS + NUM_LOCATIONS + MAX_AGENTS + MAX_STEPS + 2;
const TIE_EPS: f64 = 1e-9;

/// Model-ready view of a subgraph: padded adjacency, per-node label indices
/// (the one-hot positions) and spectral features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedGraph {
    pub n: usize,
    /// `MAX_NODES × MAX_NODES`, row-major; +1 sequence, −1 share.
    pub adjacency: Vec<f64>,
    pub actions: Vec<usize>,
    pub locations: Vec<usize>,
    pub agents: Vec<usize>,
    pub steps: Vec<usize>,
    /// 1 when the node's action is shared with another agent.
    pub shared: Vec<usize>,
    pub eigen: Vec<[f64; EIGEN_DIM]>,
    pub mask: Vec<bool>,
}

impl EncodedGraph {
    pub fn adj(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * MAX_NODES + j]
    }

    /// The concatenated one-hot blocks of node `i`.
    pub fn onehot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; ONEHOT_WIDTH];
        let mut off = 0;
        for (idx, width) in [
            (self.actions[i], NUM_ACTIONS),
            (self.locations[i], NUM_LOCATIONS),
            (self.agents[i], MAX_AGENTS),
            (self.steps[i], MAX_STEPS),
            (self.shared[i], 2),
        ] {
            v[off + idx] = 1.0;
            off += width;
        }
        v
    }
}

/// Encodes a subgraph in its current node order (callers canonicalize first).
pub fn encode(sg: &ScenarioSubgraph) -> Result<EncodedGraph, GraphError> {
    let n = sg.nodes.len();
    if n > MAX_NODES {
        return Err(GraphError::TooManyNodes(n));
    }
    let mut adjacency = vec![0.0; MAX_NODES * MAX_NODES];
    for e in &sg.edges {
        adjacency[e.a * MAX_NODES + e.b] = e.kind.weight();
        adjacency[e.b * MAX_NODES + e.a] = e.kind.weight();
    }
    let mut eigen = laplacian_eigenvectors(sg, EIGEN_DIM);
    eigen.resize(MAX_NODES, [0.0; EIGEN_DIM]);
    Ok(EncodedGraph {
        n,
        adjacency,
        actions: sg.nodes.iter().map(|v| v.action.index()).collect(),
        locations: sg.nodes.iter().map(|v| v.location.index()).collect(),
        agents: sg
            .nodes
            .iter()
            .map(|v| v.agent_id.min(MAX_AGENTS - 1))
            .collect(),
        steps: sg.nodes.iter().map(|v| v.t.min(MAX_STEPS - 1)).collect(),
        shared: sg.nodes.iter().map(|v| usize::from(v.shared)).collect(),
        eigen,
        mask: (0..MAX_NODES).map(|i| i < n).collect(),
    })
}

/// Normalized Laplacian `I − D^{-1/2} |A| D^{-1/2}` of the unsigned graph,
/// dense `n × n`. Isolated nodes get a zero diagonal.
pub fn normalized_laplacian(sg: &ScenarioSubgraph) -> Vec<f64> {
    let n = sg.nodes.len();
    let mut deg = vec![0.0; n];
    for e in &sg.edges {
        deg[e.a] += 1.0;
        deg[e.b] += 1.0;
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        if deg[i] > 0.0 {
            l[i * n + i] = 1.0;
        }
    }
    for e in &sg.edges {
        let w = -1.0 / math::sqrt(deg[e.a] * deg[e.b]);
        l[e.a * n + e.b] = w;
        l[e.b * n + e.a] = w;
    }
    l
}

/// Per-node coordinates in the eigenvectors of the `k` smallest Laplacian
/// eigenvalues. Each vector is unit length with its first nonzero entry
/// positive; equal eigenvalues are ordered lexicographically by vector.
/// Missing vectors (fewer than `k` nodes) are zero.
pub fn laplacian_eigenvectors(sg: &ScenarioSubgraph, k: usize) -> Vec<[f64; EIGEN_DIM]> {
    let n = sg.nodes.len();
    let mut out = vec![[0.0; EIGEN_DIM]; n];
    if n == 0 {
        return out;
    }
    for (col, (_, v)) in smallest_eigenpairs(&normalized_laplacian(sg), n, k.min(EIGEN_DIM))
        .into_iter()
        .enumerate()
    {
        for i in 0..n {
            out[i][col] = v[i];
        }
    }
    out
}

/// The `k` smallest eigenpairs, sign-fixed and tie-ordered.
pub fn smallest_eigenpairs(a: &[f64], n: usize, k: usize) -> Vec<(f64, Vec<f64>)> {
    let (values, vectors) = symmetric_eigen(a, n);
    let mut pairs: Vec<(f64, Vec<f64>)> = values
        .into_iter()
        .zip(vectors)
        .map(|(l, mut v)| {
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12).copied() {
                if first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (l, v)
        })
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 - pairs[start].0 <= TIE_EPS {
            end += 1;
        }
        pairs[start..end].sort_by(|x, y| {
            x.1.iter()
                .zip(&y.1)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        start = end;
    }
    pairs.truncate(k);
    pairs
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix.
/// Returns eigenvalues and unit eigenvectors (unsorted).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    let vectors = (0..n)
        .map(|j| (0..n).map(|i| v[i * n + j]).collect())
        .collect();
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_subgraph, EdgeKind, GraphEdge, GraphNode};
    use crate::rng::SimRng;
    use crate::vocab::{ActionLabel, LocationCategory};

    fn chain(n: usize) -> ScenarioSubgraph {
        ScenarioSubgraph {
            seed_sentence: String::new(),
            nodes: (0..n)
                .map(|t| GraphNode {
                    agent_id: 0,
                    t,
                    action: ActionLabel::Sit,
                    location: LocationCategory::Room,
                    shared: false,
                })
                .collect(),
            edges: (1..n)
                .map(|t| GraphEdge::new(t - 1, t, EdgeKind::Sequence))
                .collect(),
            agent_count: 1,
        }
    }

    #[test]
    fn two_chain_adjacency_and_spectrum() {
        let e = encode(&chain(2)).unwrap();
        assert_eq!(e.adj(0, 1), 1.0);
        assert_eq!(e.adj(1, 0), 1.0);
        assert_eq!(e.adjacency.iter().filter(|x| **x != 0.0).count(), 2);
        let pairs = smallest_eigenpairs(&normalized_laplacian(&chain(2)), 2, 4);
        assert!(pairs[0].0.abs() < 1e-12 && (pairs[1].0 - 2.0).abs() < 1e-12);
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!((pairs[0].1[0] - h).abs() < 1e-12 && (pairs[0].1[1] - h).abs() < 1e-12);
        // second vector has a zero-padded third and fourth column
        assert_eq!(e.eigen[0][2], 0.0);
        assert_eq!(e.eigen[5], [0.0; 4]);
    }

    #[test]
    fn share_pair_is_negative() {
        let mut sg = chain(2);
        sg.nodes[1].agent_id = 1;
        sg.nodes[1].t = 0;
        sg.edges = vec![GraphEdge::new(0, 1, EdgeKind::Share)];
        let e = encode(&sg).unwrap();
        assert_eq!(e.adj(0, 1), -1.0);
    }

    #[test]
    fn single_node() {
        let e = encode(&chain(1)).unwrap();
        assert!(e.adjacency.iter().all(|x| *x == 0.0));
        assert_eq!(e.mask.iter().filter(|m| **m).count(), 1);
        assert_eq!(e.onehot(0).iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn residuals_orthonormality_and_null_space() {
        let mut rng = SimRng::seed(2);
        for _ in 0..200 {
            let sg = random_subgraph(&mut rng, 6, 10);
            let n = sg.nodes.len();
            let l = normalized_laplacian(&sg);
            let pairs = smallest_eigenpairs(&l, n, 4);
            if n > 1 {
                assert!(
                    pairs[0].0.abs() < 1e-10,
                    "smallest eigenvalue {}",
                    pairs[0].0
                );
            }
            for (lam, v) in &pairs {
                for i in 0..n {
                    let lv: f64 = (0..n).map(|j| l[i * n + j] * v[j]).sum();
                    assert!((lv - lam * v[i]).abs() <= 1e-8);
                }
            }
            for (i, (_, a)) in pairs.iter().enumerate() {
                for (j, (_, b)) in pairs.iter().enumerate() {
                    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() <= 1e-8);
                }
                let first = a.iter().find(|x| x.abs() > 1e-12).unwrap();
                assert!(*first > 0.0);
            }
            assert_eq!(
                laplacian_eigenvectors(&sg, 4),
                laplacian_eigenvectors(&sg, 4)
            );
        }
    }

    #[test]
    fn too_many_nodes() {
        assert_eq!(encode(&chain(41)), Err(GraphError::TooManyNodes(41)));
    }
}
