//! Text-conditioned sampling from the learned priors, conversion of the
//! raw structure decoder output into a legal subgraph, and parsing of
//! subgraphs into per-agent plans.
//!
//! Agent identity and step are not among the decoded features, so both
//! are read off the repaired structure: every sequence-edge path is one
//! agent, and position along the path is the step.

use serde::{Deserialize, Serialize};

use crate::graph::{
    check_subgraph, components, EdgeKind, Extraction, GraphEdge, GraphError, GraphNode,
    ScenarioSubgraph, MAX_AGENTS, MAX_STEPS,
};
use crate::prelude::*;
use crate::rng::SimRng;
use crate::simulator::AgentRecord;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::textenc::{embed_hashing, emphasize_verbs};
use crate::vgae::{Batch, CrowdVgae, TrainSample};
use crate::vocab::{ActionLabel, LocationCategory, NUM_ACTIONS, NUM_LOCATIONS};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("agent count {0} outside [1, {MAX_AGENTS}]")]
    AgentCount(usize),
    /// `raw` is the row-major decoder matrix that could not be repaired.
    #[error("repair failed: {reason}")]
    Repair { reason: String, raw: Vec<f64> },
    #[error("generated subgraph is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Symmetric matrix with entries in {−1, 0, +1}: share, none, sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypedAdjacency {
    size: usize,
    cells: Vec<i8>,
}

impl TypedAdjacency {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            cells: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.cells[i * self.size + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: i8) {
        self.cells[i * self.size + j] = v;
        self.cells[j * self.size + i] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Non-zero entries `(i, j, value)` with `i < j`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, i8)> + '_ {
        (0..self.size)
            .flat_map(move |i| (i + 1..self.size).map(move |j| (i, j, self.get(i, j))))
            .filter(|e| e.2 != 0)
    }
}

/// `+1` above `tau`, `−1` below `−tau`, else 0. The diagonal is always 0.
pub fn discretize(raw: &Tensor, tau: f64) -> TypedAdjacency {
    let n = raw.rows();
    assert_eq!(n, raw.cols(), "square adjacency");
    let mut out = TypedAdjacency::new(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = raw.get(i, j);
            out.cells[i * n + j] = if v > tau {
                1
            } else if v < -tau {
                -1
            } else {
                0
            };
        }
    }
    out
}

/// A legal structure: the kept adjacency plus its chains, one per agent in
/// agent order, each listing node slots by step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repaired {
    pub adjacency: TypedAdjacency,
    pub chains: Vec<Vec<usize>>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// False when already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Walks a path given each node's (at most two) sequence neighbours,
/// starting from its lower-indexed end.
fn walk_path(members: &[usize], nbrs: &[Vec<usize>]) -> Vec<usize> {
    let start = members
        .iter()
        .copied()
        .filter(|&v| nbrs[v].len() < 2)
        .min()
        .unwrap_or(members[0]);
    let mut path = vec![start];
    let mut prev = usize::MAX;
    let mut cur = start;
    while let Some(&next) = nbrs[cur].iter().find(|&&w| w != prev) {
        path.push(next);
        prev = cur;
        cur = next;
    }
    path
}

/// Enforces structural legality on a discretized matrix, using `|raw|` as
/// edge confidence:
///
/// * sequence edges are accepted strongest first while each node keeps at
///   most two and no cycle forms, so a cycle loses its weakest edge;
/// * paths longer than the step limit are cut at their weakest edge until
///   every piece fits;
/// * the `agent_count` longest paths become agents (ties: higher total
///   confidence, then lower first slot), ordered by their first slot and
///   oriented so the lower-indexed end is step 0;
/// * share edges survive only between distinct agents at equal steps;
/// * if the agents are still disconnected, the most share-like equal-step
///   pair across components is joined until one component remains.
///
/// Fewer than `agent_count` paths touching any edge is an error.
pub fn repair(
    adj: &TypedAdjacency,
    raw: &Tensor,
    agent_count: usize,
) -> Result<Repaired, GenerationError> {
    let n = adj.size();
    let fail = |reason: String| GenerationError::Repair {
        reason,
        raw: raw.data().to_vec(),
    };
    if agent_count == 0 || agent_count > MAX_AGENTS {
        return Err(GenerationError::AgentCount(agent_count));
    }
    let conf = |i: usize, j: usize| raw.get(i, j).abs();

    let mut seq: Vec<(usize, usize)> = adj
        .entries()
        .filter(|e| e.2 == 1)
        .map(|e| (e.0, e.1))
        .collect();
    seq.sort_by(|a, b| conf(b.0, b.1).total_cmp(&conf(a.0, a.1)).then(a.cmp(b)));
    let mut uf = UnionFind::new(n);
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j) in seq {
        if nbrs[i].len() < 2 && nbrs[j].len() < 2 && uf.union(i, j) {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
    }

    let touched: Vec<bool> = (0..n).map(|i| (0..n).any(|j| adj.get(i, j) != 0)).collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        if touched[v] {
            groups.entry(uf.find(v)).or_default().push(v);
        }
    }
    let mut paths: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<Vec<usize>> = groups.values().map(|m| walk_path(m, &nbrs)).collect();
    while let Some(path) = pending.pop() {
        if path.len() <= MAX_STEPS {
            paths.push(path);
            continue;
        }
        // overlong: cut the weakest link (first on ties) and look at both halves
        let cut = (1..path.len())
            .min_by(|&a, &b| conf(path[a - 1], path[a]).total_cmp(&conf(path[b - 1], path[b])))
            .expect("path has edges");
        pending.push(path[cut..].to_vec());
        pending.push(path[..cut].to_vec());
    }
    if paths.len() < agent_count {
        return Err(fail(format!(
            "{} chains recoverable, {agent_count} needed",
            paths.len()
        )));
    }
    let strength = |p: &Vec<usize>| p.windows(2).map(|w| conf(w[0], w[1])).sum::<f64>();
    paths.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then(strength(b).total_cmp(&strength(a)))
            .then(a.iter().min().cmp(&b.iter().min()))
    });
    paths.truncate(agent_count);
    paths.sort_by_key(|p| p.iter().copied().min());
    for p in &mut paths {
        if p.last() < p.first() {
            p.reverse();
        }
    }

    let mut place = vec![None; n];
    for (a, p) in paths.iter().enumerate() {
        for (t, &v) in p.iter().enumerate() {
            place[v] = Some((a, t));
        }
    }
    let mut out = TypedAdjacency::new(n);
    for p in &paths {
        for w in p.windows(2) {
            out.set(w[0], w[1], 1);
        }
    }
    let mut joined = UnionFind::new(agent_count);
    for (i, j, v) in adj.entries() {
        if v != -1 {
            continue;
        }
        if let (Some((a, t)), Some((b, s))) = (place[i], place[j]) {
            if a != b && t == s {
                out.set(i, j, -1);
                joined.union(a, b);
            }
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..agent_count {
            for b in a + 1..agent_count {
                if joined.find(a) == joined.find(b) {
                    continue;
                }
                for (&u, &v) in paths[a].iter().zip(&paths[b]) {
                    let score = raw.get(u, v);
                    if best.is_none_or(|(s, _, _)| score < s) {
                        best = Some((score, u, v));
                    }
                }
            }
        }
        let Some((_, u, v)) = best else { break };
        out.set(u, v, -1);
        let (a, b) = (place[u].map(|p| p.0), place[v].map(|p| p.0));
        if let (Some(a), Some(b)) = (a, b) {
            joined.union(a, b);
        }
    }
    Ok(Repaired {
        adjacency: out,
        chains: paths,
    })
}

/// The repaired structure as an agent-major subgraph with placeholder
/// features; node `k` of the result is the `k`-th (agent, step) pair.
pub fn skeleton(r: &Repaired, seed_sentence: &str) -> ScenarioSubgraph {
    let mut index = BTreeMap::new();
    let mut nodes = Vec::new();
    for (a, chain) in r.chains.iter().enumerate() {
        for (t, &slot) in chain.iter().enumerate() {
            index.insert(slot, nodes.len());
            nodes.push(GraphNode {
                agent_id: a,
                t,
                action: ActionLabel::StandStill,
                location: LocationCategory::Building,
                shared: false,
            });
        }
    }
    let mut edges = Vec::new();
    for (i, j, v) in r.adjacency.entries() {
        if let (Some(&a), Some(&b)) = (index.get(&i), index.get(&j)) {
            let kind = if v > 0 {
                EdgeKind::Sequence
            } else {
                EdgeKind::Share
            };
            if kind == EdgeKind::Share {
                nodes[a].shared = true;
                nodes[b].shared = true;
            }
            edges.push(GraphEdge::new(a, b, kind));
        }
    }
    edges.sort();
    ScenarioSubgraph {
        seed_sentence: seed_sentence.to_string(),
        nodes,
        edges,
        agent_count: r.chains.len(),
    }
}

/// Fills actions and locations from per-node logits (`n × 23`). Nodes tied
/// by share edges take the action with the highest summed log-probability.
pub fn assign_features(sg: &mut ScenarioSubgraph, logits: &[f64]) {
    let width = NUM_ACTIONS + NUM_LOCATIONS;
    let n = sg.nodes.len();
    debug_assert_eq!(logits.len(), n * width);
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = mx + crate::math::ln(row.iter().map(|v| crate::math::exp(v - mx)).sum::<f64>());
        row.iter().map(|v| v - z).collect()
    };
    let roots = components(
        n,
        sg.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Share)
            .map(|e| (e.a, e.b)),
    );
    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, &root) in roots.iter().enumerate() {
        let lp = log_softmax(&logits[i * width..i * width + NUM_ACTIONS]);
        let acc = scores.entry(root).or_insert_with(|| vec![0.0; NUM_ACTIONS]);
        for (a, v) in acc.iter_mut().zip(&lp) {
            *a += v;
        }
    }
    for (i, node) in sg.nodes.iter_mut().enumerate() {
        node.action = ActionLabel::ALL[argmax(&scores[&roots[i]])];
        let loc = &logits[i * width + NUM_ACTIONS..(i + 1) * width];
        node.location = LocationCategory::ALL[argmax(loc)];
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The default text condition: verb-emphasized hashing embedding.
pub fn text_condition(text: &str) -> Vec<f64> {
    embed_hashing(&emphasize_verbs(text))
}

/// One generated subgraph and the raw decoder matrix it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subgraph: ScenarioSubgraph,
    pub raw: Tensor,
}

/// Draws `count` subgraphs for one prompt. Prior noise for all draws comes
/// from `rng` up front, so results depend only on `(model, text, k, rng)`.
/// Each draw fails or succeeds on its own.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    model: &mut CrowdVgae,
    text: &str,
    text_embedding: &[f64],
    agent_count: usize,
    count: usize,
    tau: f64,
    rng: &mut SimRng,
) -> Result<Vec<Result<Sample, GenerationError>>, GenerationError> {
    if agent_count == 0 || agent_count > MAX_AGENTS {
        return Err(GenerationError::AgentCount(agent_count));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(count * text_embedding.len());
    for _ in 0..count {
        rows.extend_from_slice(text_embedding);
    }
    let text_t = Tensor::from_vec(count, text_embedding.len(), rows);
    let (cs, cf) = model.conditions(&mut tape, &text_t, Rc::new(vec![agent_count - 1; count]))?;
    let (z_s, z_f) = model.sample_prior(&mut tape, cs, cf, rng);
    let upper = model.decode_structure(&mut tape, z_s, cs);

    let mut raws = Vec::with_capacity(count);
    let mut outcome: Vec<Option<Result<ScenarioSubgraph, GenerationError>>> =
        Vec::with_capacity(count);
    let mut skeletons = Vec::new();
    let mut keep = Vec::new();
    for g in 0..count {
        let raw = CrowdVgae::full_adjacency(tape.value(upper).row(g));
        match repair(&discretize(&raw, tau), &raw, agent_count) {
            Ok(r) => {
                skeletons.push(skeleton(&r, text));
                keep.push(g);
                outcome.push(None);
            }
            Err(e) => outcome.push(Some(Err(e))),
        }
        raws.push(raw);
    }
    if !keep.is_empty() {
        let samples: Vec<TrainSample> = skeletons
            .iter()
            .map(|sg| TrainSample::from_subgraph(sg, 0))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&TrainSample> = samples.iter().collect();
        let texts: Vec<&[f64]> = vec![text_embedding; refs.len()];
        let b = Batch::assemble(&refs, &texts)?;
        let keep_rc = Rc::new(keep.clone());
        let zk = tape.gather_rows(z_f, keep_rc.clone())?;
        let ck = tape.gather_rows(cf, keep_rc)?;
        let logits =
            model.decode_features(&mut tape, zk, ck, b.node_graph.clone(), &b.eigen, &b.edges)?;
        let logits = tape.value(logits).data();
        let width = NUM_ACTIONS + NUM_LOCATIONS;
        let mut offset = 0;
        for (mut sg, &g) in skeletons.into_iter().zip(&keep) {
            let n = sg.nodes.len();
            assign_features(&mut sg, &logits[offset * width..(offset + n) * width]);
            offset += n;
            outcome[g] = Some(
                check_subgraph(&sg)
                    .map(|()| sg)
                    .map_err(GenerationError::Invalid),
            );
        }
    }
    Ok(outcome
        .into_iter()
        .zip(raws)
        .map(|(o, raw)| {
            o.expect("every draw resolved")
                .map(|subgraph| Sample { subgraph, raw })
        })
        .collect())
}

/// A single draw; see [`sample_batch`].
pub fn sample_subgraph(
    model: &mut CrowdVgae,
    text: &str,
    agent_count: usize,
    tau: f64,
    rng: &mut SimRng,
) -> Result<Sample, GenerationError> {
    let emb = text_condition(text);
    sample_batch(model, text, &emb, agent_count, 1, tau, rng)?
        .pop()
        .expect("one draw")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: ActionLabel,
    pub location: LocationCategory,
    pub partners: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub agent_id: usize,
    pub steps: Vec<PlanStep>,
}

/// One plan per agent, in agent order; share edges become mutual partners.
pub fn parse_plan(sg: &ScenarioSubgraph) -> Vec<AgentPlan> {
    let mut plans: Vec<AgentPlan> = (0..sg.agent_count)
        .map(|agent_id| AgentPlan {
            agent_id,
            steps: Vec::new(),
        })
        .collect();
    let mut slots: Vec<Vec<Option<usize>>> = vec![Vec::new(); sg.agent_count];
    for (i, v) in sg.nodes.iter().enumerate() {
        let s = &mut slots[v.agent_id];
        if s.len() <= v.t {
            s.resize(v.t + 1, None);
        }
        s[v.t] = Some(i);
    }
    let mut partners: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); sg.nodes.len()];
    for e in sg.edges.iter().filter(|e| e.kind == EdgeKind::Share) {
        partners[e.a].insert(sg.nodes[e.b].agent_id);
        partners[e.b].insert(sg.nodes[e.a].agent_id);
    }
    for (plan, s) in plans.iter_mut().zip(&slots) {
        for &i in s.iter().flatten() {
            let v = &sg.nodes[i];
            plan.steps.push(PlanStep {
                action: v.action,
                location: v.location,
                partners: partners[i].clone(),
            });
        }
    }
    plans
}

/// Parses every extracted subgraph and compares each plan step with the
/// simulator record it came from. Returns the number of agents checked.
pub fn check_round_trip(records: &[AgentRecord], ex: &Extraction) -> Result<usize, String> {
    let by_id: BTreeMap<usize, &AgentRecord> = records.iter().map(|r| (r.agent_id, r)).collect();
    let mut checked = 0;
    for (sg, origin) in ex.subgraphs.iter().zip(&ex.origins) {
        for plan in parse_plan(sg) {
            let global = origin[plan.agent_id];
            let rec = by_id
                .get(&global)
                .ok_or_else(|| format!("agent {global} has no record"))?;
            if rec.entries.len() != plan.steps.len() {
                return Err(format!(
                    "agent {global}: {} steps parsed, {} recorded",
                    plan.steps.len(),
                    rec.entries.len()
                ));
            }
            for (t, (step, e)) in plan.steps.iter().zip(&rec.entries).enumerate() {
                let partners: BTreeSet<usize> = step.partners.iter().map(|&p| origin[p]).collect();
                if step.action != e.action
                    || step.location != e.location_category
                    || partners != e.partners
                {
                    return Err(format!("agent {global} differs at step {t}"));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}
