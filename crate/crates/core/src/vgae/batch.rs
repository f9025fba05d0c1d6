//! Disjoint-union batches of encoded graphs.

use crate::graph::{encode, EncodedGraph, GraphError, ScenarioSubgraph, MAX_NODES};
use crate::prelude::*;
use crate::tensor::{EdgeList, Segments, Tensor, TensorError};
use crate::textenc::EMBED_DIM;

/// Strict upper-triangle entries of the padded adjacency.
pub const UPPER: usize = MAX_NODES * (MAX_NODES - 1) / 2;

/// Position of `(i, j)`, `i < j`, in the row-major strict upper triangle.
pub fn upper_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < MAX_NODES);
    i * (2 * MAX_NODES - i - 1) / 2 + (j - i - 1)
}

/// One training example: the encoded graph, its typed edge list and the
/// index of its seed sentence in a [`TextBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub encoded: EncodedGraph,
    pub edges: Vec<(usize, usize, f64)>,
    pub agent_count: usize,
    pub sentence: usize,
}

impl TrainSample {
    pub fn from_subgraph(sg: &ScenarioSubgraph, sentence: usize) -> Result<Self, GraphError> {
        let encoded = encode(sg)?;
        let edges = sg
            .edges
            .iter()
            .map(|e| (e.a, e.b, e.kind.weight()))
            .collect();
        Ok(Self {
            encoded,
            edges,
            agent_count: sg.agent_count,
            sentence,
        })
    }
}

/// Pre-computed sentence embeddings: the original and its paraphrases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextBank {
    pub originals: Vec<Vec<f64>>,
    pub paraphrases: Vec<Vec<Vec<f64>>>,
}

impl TextBank {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    /// Paraphrase `k` of sentence `s`, or the original when none exist.
    pub fn variant(&self, s: usize, k: Option<usize>) -> &[f64] {
        match (k, self.paraphrases.get(s)) {
            (Some(k), Some(p)) if !p.is_empty() => &p[k % p.len()],
            _ => &self.originals[s],
        }
    }

    pub fn variant_count(&self, s: usize) -> usize {
        self.paraphrases.get(s).map_or(0, |p| p.len())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub graphs: usize,
    pub nodes: usize,
    /// Graph of every node row.
    pub node_graph: Rc<Vec<usize>>,
    pub actions: Rc<Vec<usize>>,
    pub locations: Rc<Vec<usize>>,
    pub agents: Rc<Vec<usize>>,
    pub steps: Rc<Vec<usize>>,
    pub shared: Rc<Vec<usize>>,
    /// `nodes × 4`.
    pub eigen: Tensor,
    /// Messages with +1 self-loops and ±1 typed edges, global row indices.
    pub edges: Rc<EdgeList>,
    pub segments: Rc<Segments>,
    /// `graphs × 384`.
    pub text: Tensor,
    /// `agent_count − 1` per graph.
    pub agent_index: Rc<Vec<usize>>,
    /// `graphs × 780` structure targets.
    pub adjacency_upper: Tensor,
}

impl Batch {
    pub fn assemble(samples: &[&TrainSample], texts: &[&[f64]]) -> Result<Self, TensorError> {
        assert_eq!(samples.len(), texts.len(), "one text per sample");
        let graphs = samples.len();
        let nodes: usize = samples.iter().map(|s| s.encoded.n).sum();
        let mut node_graph = Vec::with_capacity(nodes);
        let (mut actions, mut locations, mut agents, mut steps, mut shared) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut eigen = Vec::with_capacity(nodes * 4);
        let mut undirected = Vec::new();
        let mut text = Vec::with_capacity(graphs * EMBED_DIM);
        let mut agent_index = Vec::with_capacity(graphs);
        let mut upper = Tensor::zeros(graphs, UPPER);
        let mut offset = 0;
        for (g, (s, t)) in samples.iter().zip(texts).enumerate() {
            let e = &s.encoded;
            if e.n == 0 {
                return Err(TensorError::EmptyMask);
            }
            if t.len() != EMBED_DIM {
                return Err(TensorError::Shape {
                    op: "batch_text",
                    left: (1, EMBED_DIM),
                    right: (1, t.len()),
                });
            }
            node_graph.extend(core::iter::repeat_n(g, e.n));
            actions.extend_from_slice(&e.actions);
            locations.extend_from_slice(&e.locations);
            agents.extend_from_slice(&e.agents);
            steps.extend_from_slice(&e.steps);
            shared.extend_from_slice(&e.shared);
            for row in &e.eigen[..e.n] {
                eigen.extend_from_slice(row);
            }
            for &(a, b, w) in &s.edges {
                undirected.push((offset + a, offset + b, w));
                upper.set(g, upper_index(a.min(b), a.max(b)), w);
            }
            text.extend_from_slice(t);
            if s.agent_count == 0 {
                return Err(TensorError::IndexOutOfRange {
                    op: "agent_count",
                    index: 0,
                    len: 6,
                });
            }
            agent_index.push(s.agent_count - 1);
            offset += e.n;
        }
        let edges = EdgeList::undirected_with_self_loops(nodes, &undirected)?;
        let segments = Segments::new(node_graph.iter().map(|&g| g as u32).collect(), graphs)?;
        Ok(Self {
            graphs,
            nodes,
            node_graph: Rc::new(node_graph),
            actions: Rc::new(actions),
            locations: Rc::new(locations),
            agents: Rc::new(agents),
            steps: Rc::new(steps),
            shared: Rc::new(shared),
            eigen: Tensor::from_vec(nodes, 4, eigen),
            edges: Rc::new(edges),
            segments: Rc::new(segments),
            text: Tensor::from_vec(graphs, EMBED_DIM, text),
            agent_index: Rc::new(agent_index),
            adjacency_upper: upper,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_index_is_dense() {
        let mut seen = vec![false; UPPER];
        for i in 0..MAX_NODES {
            for j in i + 1..MAX_NODES {
                let k = upper_index(i, j);
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(upper_index(0, 1), 0);
        assert_eq!(upper_index(38, 39), UPPER - 1);
    }
}
