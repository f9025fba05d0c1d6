//! Structure and feature statistics of subgraph populations, KL
//! divergence between their histograms, label diversity under one prompt,
//! and the three-variant ablation harness.

use serde::{Deserialize, Serialize};

use crate::dataset::{prepare_samples, DatasetSample, OrderMode};
use crate::generation::{sample_batch, GenerationError};
use crate::graph::{GraphError, ScenarioSubgraph};
use crate::math;
use crate::prelude::*;
use crate::rng::SimRng;
use crate::vgae::{train, CrowdVgae, ModelConfig, ModelVariant, TextBank, TrainConfig, TrainError};
use crate::vocab::{NUM_ACTIONS, NUM_LOCATIONS};

pub const KLD_SMOOTHING: f64 = 1e-6;
/// Evaluation aborts when more than this share of draws fail.
pub const MAX_FAILURE_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("histograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
    #[error("no test samples")]
    EmptyTestSet,
    #[error("{failures} of {total} draws failed")]
    TooManyFailures {
        failures: usize,
        total: usize,
        report: Box<StatReport>,
    },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Simple undirected neighbour lists; edge types and duplicates ignored.
pub fn neighbours(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (a, b) in edges {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Hop distances from `src`; `None` when unreachable.
pub fn bfs(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = alloc::collections::VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap_or(0) + 1;
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Closed triangles through the node over possible ones; 0 below degree 2.
pub fn local_clustering(adj: &[Vec<usize>]) -> Vec<f64> {
    adj.iter()
        .map(|nb| {
            let k = nb.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0;
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    if adj[a].binary_search(&b).is_ok() {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub degree: Vec<usize>,
    pub clustering: Vec<f64>,
    pub diameter: usize,
    pub avg_path_length: f64,
}

/// Classical statistics of a simple graph. When disconnected, the diameter
/// is the largest component diameter and the average path length the mean
/// of the component averages (single-node components have no pairs).
pub fn stats_of(adj: &[Vec<usize>]) -> GraphStats {
    let n = adj.len();
    let mut comp = vec![usize::MAX; n];
    let mut comp_sums: Vec<(usize, usize)> = Vec::new();
    let mut diameter = 0;
    for s in 0..n {
        let dist = bfs(adj, s);
        if comp[s] == usize::MAX {
            let id = comp_sums.len();
            comp_sums.push((0, 0));
            for (v, d) in dist.iter().enumerate() {
                if d.is_some() {
                    comp[v] = id;
                }
            }
        }
        for d in dist.iter().skip(s + 1).flatten() {
            let c = &mut comp_sums[comp[s]];
            c.0 += d;
            c.1 += 1;
            diameter = diameter.max(*d);
        }
    }
    let averages: Vec<f64> = comp_sums
        .iter()
        .filter(|c| c.1 > 0)
        .map(|c| c.0 as f64 / c.1 as f64)
        .collect();
    let avg_path_length = if averages.is_empty() {
        0.0
    } else {
        averages.iter().sum::<f64>() / averages.len() as f64
    };
    GraphStats {
        degree: adj.iter().map(Vec::len).collect(),
        clustering: local_clustering(adj),
        diameter,
        avg_path_length,
    }
}

pub fn graph_stats(sg: &ScenarioSubgraph) -> GraphStats {
    stats_of(&neighbours(
        sg.nodes.len(),
        sg.edges.iter().map(|e| (e.a, e.b)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Degree,
    Clustering,
    Diameter,
    AvgPathLength,
    Action,
    Location,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Degree,
        Metric::Clustering,
        Metric::Diameter,
        Metric::AvgPathLength,
        Metric::Action,
        Metric::Location,
    ];

    pub fn binning(self) -> Binning {
        match self {
            Metric::Degree => Binning::Integer { max: 8 },
            Metric::Clustering => Binning::Uniform {
                lo: 0.0,
                hi: 1.0,
                bins: 10,
            },
            Metric::Diameter => Binning::Integer { max: 20 },
            Metric::AvgPathLength => Binning::Uniform {
                lo: 0.0,
                hi: 10.0,
                bins: 20,
            },
            Metric::Action => Binning::Categorical {
                classes: NUM_ACTIONS,
            },
            Metric::Location => Binning::Categorical {
                classes: NUM_LOCATIONS,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Degree => "degree",
            Metric::Clustering => "clustering",
            Metric::Diameter => "diameter",
            Metric::AvgPathLength => "avg_path_length",
            Metric::Action => "action",
            Metric::Location => "location",
        }
    }
}

/// Fixed histogram layouts; values outside the range land in the end bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// Bins `0, 1, ..., max`.
    Integer {
        max: usize,
    },
    Uniform {
        lo: f64,
        hi: f64,
        bins: usize,
    },
    Categorical {
        classes: usize,
    },
}

impl Binning {
    pub fn len(&self) -> usize {
        match *self {
            Binning::Integer { max } => max + 1,
            Binning::Uniform { bins, .. } => bins,
            Binning::Categorical { classes } => classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, v: f64) -> usize {
        let last = self.len() - 1;
        match *self {
            Binning::Integer { .. } | Binning::Categorical { .. } => {
                if v <= 0.0 {
                    0
                } else {
                    (math::floor(v + 0.5) as usize).min(last)
                }
            }
            Binning::Uniform { lo, hi, bins } => {
                let x = (v - lo) / (hi - lo) * bins as f64;
                if x <= 0.0 {
                    0
                } else {
                    (math::floor(x) as usize).min(last)
                }
            }
        }
    }

    /// Normalized counts; an empty population gives the uniform histogram.
    pub fn histogram(&self, values: &[f64]) -> Vec<f64> {
        let k = self.len();
        if values.is_empty() {
            return vec![1.0 / k as f64; k];
        }
        let mut h = vec![0.0; k];
        for &v in values {
            h[self.index(v)] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }
}

/// `Σ p' ln(p'/q')` after adding `smoothing` to every bin and renormalizing.
pub fn kld(p: &[f64], q: &[f64], smoothing: f64) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::BinMismatch(p.len(), q.len()));
    }
    let norm = |h: &[f64]| -> Vec<f64> {
        let z: f64 = h.iter().map(|x| x + smoothing).sum();
        h.iter().map(|x| (x + smoothing) / z).collect()
    };
    let (p, q) = (norm(p), norm(q));
    let d: f64 = p
        .iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * math::ln(a / b))
        .sum();
    Ok(d.max(0.0))
}

/// Raw values of every metric over a population: per node for degree,
/// clustering, action and location, per graph for diameter and path length.
pub fn population_values(graphs: &[ScenarioSubgraph]) -> BTreeMap<Metric, Vec<f64>> {
    let mut out: BTreeMap<Metric, Vec<f64>> =
        Metric::ALL.iter().map(|&m| (m, Vec::new())).collect();
    for sg in graphs {
        let st = graph_stats(sg);
        let push = |out: &mut BTreeMap<Metric, Vec<f64>>, m: Metric, v: f64| {
            out.get_mut(&m).expect("metric").push(v)
        };
        for &d in &st.degree {
            push(&mut out, Metric::Degree, d as f64);
        }
        for &c in &st.clustering {
            push(&mut out, Metric::Clustering, c);
        }
        push(&mut out, Metric::Diameter, st.diameter as f64);
        push(&mut out, Metric::AvgPathLength, st.avg_path_length);
        for v in &sg.nodes {
            push(&mut out, Metric::Action, v.action.index() as f64);
            push(&mut out, Metric::Location, v.location.index() as f64);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub bins: Binning,
    pub reference: Vec<f64>,
    pub generated: Vec<f64>,
    /// `KL(reference ‖ generated)`.
    pub kld: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub reference_graphs: usize,
    pub generated_graphs: usize,
    pub failures: usize,
    pub metrics: Vec<MetricReport>,
}

impl StatReport {
    pub fn kld(&self, m: Metric) -> f64 {
        self.metrics
            .iter()
            .find(|r| r.metric == m)
            .map_or(f64::NAN, |r| r.kld)
    }
}

/// Histograms and KLDs of a generated population against a reference one.
pub fn compare(reference: &[ScenarioSubgraph], generated: &[ScenarioSubgraph]) -> StatReport {
    let rv = population_values(reference);
    let gv = population_values(generated);
    let metrics = Metric::ALL
        .iter()
        .map(|&metric| {
            let bins = metric.binning();
            let r = bins.histogram(&rv[&metric]);
            let g = bins.histogram(&gv[&metric]);
            let kld = kld(&r, &g, KLD_SMOOTHING).expect("same binning");
            MetricReport {
                metric,
                bins,
                reference: r,
                generated: g,
                kld,
            }
        })
        .collect();
    StatReport {
        reference_graphs: reference.len(),
        generated_graphs: generated.len(),
        failures: 0,
        metrics,
    }
}

/// The report plus the generated graphs it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: StatReport,
    pub generated: Vec<ScenarioSubgraph>,
}

/// Samples one subgraph per test graph from the prior, conditioned on that
/// graph's sentence and agent count, and compares the populations.
/// Draws are grouped by (sentence, agent count) and taken in key order.
pub fn evaluate(
    model: &mut CrowdVgae,
    test: &[ScenarioSubgraph],
    embed: &mut dyn FnMut(&str) -> Vec<f64>,
    tau: f64,
    rng: &mut SimRng,
) -> Result<Evaluation, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut groups: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for sg in test {
        *groups
            .entry((sg.seed_sentence.as_str(), sg.agent_count))
            .or_default() += 1;
    }
    let mut generated = Vec::with_capacity(test.len());
    let mut failures = 0;
    let mut embeddings: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (&(text, k), &count) in &groups {
        let emb = embeddings.entry(text).or_insert_with(|| embed(text));
        for r in sample_batch(model, text, emb, k, count, tau, rng)? {
            match r {
                Ok(s) => generated.push(s.subgraph),
                Err(_) => failures += 1,
            }
        }
    }
    let mut report = compare(test, &generated);
    report.failures = failures;
    if failures as f64 > MAX_FAILURE_RATE * test.len() as f64 {
        return Err(MetricsError::TooManyFailures {
            failures,
            total: test.len(),
            report: Box::new(report),
        });
    }
    Ok(Evaluation { report, generated })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub samples: usize,
    pub failures: usize,
    /// Share of generations whose most frequent node action is each label.
    pub action_freq: Vec<f64>,
    pub location_freq: Vec<f64>,
    pub action_entropy_bits: f64,
    pub location_entropy_bits: f64,
}

impl Diversity {
    /// Labels reaching `min_freq`.
    pub fn actions_at_least(&self, min_freq: f64) -> usize {
        self.action_freq.iter().filter(|&&f| f >= min_freq).count()
    }

    pub fn locations_at_least(&self, min_freq: f64) -> usize {
        self.location_freq
            .iter()
            .filter(|&&f| f >= min_freq)
            .count()
    }
}

/// Most frequent label among `labels`, lowest index on ties.
fn dominant(labels: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    labels.for_each(|l| counts[l] += 1);
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Label frequencies over `n` prior draws for one prompt. Each successful
/// draw contributes its dominant action and dominant location once.
#[allow(clippy::too_many_arguments)]
pub fn diversity(
    model: &mut CrowdVgae,
    text: &str,
    text_embedding: &[f64],
    agent_count: usize,
    n: usize,
    tau: f64,
    rng: &mut SimRng,
) -> Result<Diversity, MetricsError> {
    let draws = sample_batch(model, text, text_embedding, agent_count, n, tau, rng)?;
    let mut actions = vec![0.0; NUM_ACTIONS];
    let mut locations = vec![0.0; NUM_LOCATIONS];
    let mut ok = 0usize;
    for s in draws.iter().flatten() {
        let nodes = &s.subgraph.nodes;
        actions[dominant(nodes.iter().map(|v| v.action.index()), NUM_ACTIONS)] += 1.0;
        locations[dominant(nodes.iter().map(|v| v.location.index()), NUM_LOCATIONS)] += 1.0;
        ok += 1;
    }
    if ok > 0 {
        actions
            .iter_mut()
            .chain(locations.iter_mut())
            .for_each(|x| *x /= ok as f64);
    }
    Ok(Diversity {
        samples: n,
        failures: n - ok,
        action_entropy_bits: math::entropy_bits(&actions),
        location_entropy_bits: math::entropy_bits(&locations),
        action_freq: actions,
        location_freq: locations,
    })
}

/// Training routines compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gen-c")]
    GenC,
    /// Random node permutation per sample instead of canonical order.
    #[serde(rename = "no-canonical")]
    NoCanonical,
    /// One latent space and prior feeding both decoders.
    #[serde(rename = "single-latent")]
    SingleLatent,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::GenC, Variant::NoCanonical, Variant::SingleLatent];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GenC => "gen-c",
            Variant::NoCanonical => "no-canonical",
            Variant::SingleLatent => "single-latent",
        }
    }

    pub fn order_mode(self) -> OrderMode {
        match self {
            Variant::NoCanonical => OrderMode::Random,
            _ => OrderMode::AgentMajor,
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let variant = match self {
            Variant::SingleLatent => ModelVariant::SingleLatent,
            _ => ModelVariant::Dual,
        };
        ModelConfig {
            variant,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: Metric,
    /// One KLD per variant, in the table's variant order.
    pub kld: Vec<f64>,
}

/// Metric rows by variant columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    /// Failed test-set draws per variant; their KLDs cover only the rest.
    pub failures: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_reports(reports: &[(Variant, StatReport)]) -> Self {
        Self {
            variants: reports.iter().map(|r| r.0).collect(),
            failures: reports.iter().map(|r| r.1.failures).collect(),
            rows: Metric::ALL
                .iter()
                .map(|&metric| AblationRow {
                    metric,
                    kld: reports.iter().map(|r| r.1.kld(metric)).collect(),
                })
                .collect(),
        }
    }

    pub fn get(&self, metric: Metric, variant: Variant) -> Option<f64> {
        let col = self.variants.iter().position(|&v| v == variant)?;
        self.rows
            .iter()
            .find(|r| r.metric == metric)
            .map(|r| r.kld[col])
    }
}

/// Everything a variant run needs; every variant gets the same seeds and budget.
pub struct AblationSetup<'a> {
    pub train: &'a [DatasetSample],
    pub val: &'a [DatasetSample],
    pub test: &'a [DatasetSample],
    pub bank: &'a TextBank,
    pub index: &'a BTreeMap<String, usize>,
    pub model: ModelConfig,
    pub train_cfg: TrainConfig,
    pub seed: u64,
    pub tau: f64,
}

/// Trains one variant and evaluates its best-validation parameters on the
/// test split, drawing text conditions from the bank's originals.
/// Unlike [`evaluate`], a high failure rate is not an error here: the
/// report keeps the failure count and the KLDs of whatever was generated.
pub fn run_variant(
    setup: &AblationSetup<'_>,
    variant: Variant,
    on_epoch: &mut dyn FnMut(Variant, &crate::vgae::EpochLog),
) -> Result<(CrowdVgae, StatReport), MetricsError> {
    let mode = variant.order_mode();
    let tr = prepare_samples(setup.train, setup.index, mode, setup.seed)?;
    let va = prepare_samples(setup.val, setup.index, mode, setup.seed)?;
    let model = CrowdVgae::new(variant.model_config(&setup.model), setup.seed);
    let out = train(model, &tr, &va, setup.bank, &setup.train_cfg, |log, _| {
        on_epoch(variant, log);
        true
    })?;
    let mut best = out.best_model().map_err(TrainError::from)?;
    let test: Vec<ScenarioSubgraph> = setup.test.iter().map(|s| s.graph.clone()).collect();
    let mut embed = bank_embedder(setup.bank, setup.index);
    let mut rng = SimRng::split(setup.seed, "evaluate");
    let report = match evaluate(&mut best, &test, &mut embed, setup.tau, &mut rng) {
        Ok(eval) => eval.report,
        Err(MetricsError::TooManyFailures { report, .. }) => *report,
        Err(e) => return Err(e),
    };
    Ok((best, report))
}

/// Looks sentences up in the bank (originals), embedding unknown ones with
/// the hashing embedder.
pub fn bank_embedder<'a>(
    bank: &'a TextBank,
    index: &'a BTreeMap<String, usize>,
) -> impl FnMut(&str) -> Vec<f64> + 'a {
    move |s: &str| match index.get(s) {
        Some(&i) => bank.originals[i].clone(),
        None => crate::generation::text_condition(s),
    }
}

/// Trains and evaluates each variant in turn.
pub fn ablate(
    setup: &AblationSetup<'_>,
    variants: &[Variant],
    on_epoch: &mut dyn FnMut(Variant, &crate::vgae::EpochLog),
) -> Result<AblationTable, MetricsError> {
    let mut reports = Vec::new();
    for &v in variants {
        let (_, report) = run_variant(setup, v, on_epoch)?;
        reports.push((v, report));
    }
    Ok(AblationTable::from_reports(&reports))
}
