//! Scenario → simulation → subgraph pipeline and training-set preparation.

use serde::{Deserialize, Serialize};

use crate::graph::{
    build_graph, canonical_order, extract_subgraphs, permute_nodes, GraphError, NodeOrder,
    ScenarioSubgraph,
};
use crate::prelude::*;
use crate::rng::{mix, SimRng};
use crate::scenario::offline::generate_offline;
use crate::scenario::paraphrase::paraphrase_offline;
use crate::scenario::Scenario;
use crate::simulator::{run_simulation, ActionDurations, SimulationConfig};
use crate::textenc::{embed_hashing, emphasize_verbs};
use crate::vgae::{TextBank, TrainSample};

const BUILTIN_SENTENCES: &str = include_str!("../data/seed_sentences.txt");

/// The bundled offline seed sentences.
pub fn builtin_sentences() -> Vec<String> {
    BUILTIN_SENTENCES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of seed sentences used (from the front of the list).
    pub scenarios: usize,
    /// Scenario variations generated per sentence.
    pub variants: usize,
    pub sims_per_scenario: usize,
    /// Fixed environment size in meters; drawn per scenario when absent.
    pub env_size: Option<[f64; 2]>,
    pub agent_count: usize,
    pub group_size_probs: [f64; 3],
    /// Simulated period in seconds, drawn uniformly per simulation.
    pub duration_range: [f64; 2],
    /// Starting temperature, drawn uniformly per simulation.
    pub temp_range: [f64; 2],
    pub paraphrases: usize,
    pub durations: ActionDurations,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenarios: 30,
            variants: 3,
            sims_per_scenario: 5,
            env_size: None,
            agent_count: 10,
            group_size_probs: [0.4, 0.35, 0.25],
            duration_range: [120.0, 180.0],
            temp_range: [0.7, 1.0],
            paraphrases: 20,
            durations: ActionDurations::default(),
        }
    }
}

/// One dataset line: a canonical subgraph and the simulation run it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    #[serde(flatten)]
    pub graph: ScenarioSubgraph,
    pub run: u64,
}

/// A scenario to simulate, tagged with its sentence and variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioJob {
    pub sentence: usize,
    pub variant: usize,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenarios: usize,
    pub simulations: usize,
    pub subgraphs: usize,
    pub dropped: usize,
    /// `"sentence:variant"` ids whose scenario could not be produced or simulated.
    pub failed: Vec<String>,
}

impl DatasetStats {
    pub fn drop_rate(&self) -> f64 {
        let total = self.subgraphs + self.dropped;
        if total == 0 {
            0.0
        } else {
            self.dropped as f64 / total as f64
        }
    }
}

/// Offline scenarios for the first `cfg.scenarios` sentences, `cfg.variants` each.
pub fn offline_jobs(
    sentences: &[String],
    cfg: &DataConfig,
    seed: u64,
) -> (Vec<ScenarioJob>, Vec<String>) {
    let mut jobs = Vec::new();
    let mut failed = Vec::new();
    for (si, s) in sentences.iter().take(cfg.scenarios).enumerate() {
        for v in 0..cfg.variants {
            let scenario_seed = mix(seed, &format!("scenario:{si}:{v}"));
            match generate_offline(s, cfg.env_size, scenario_seed) {
                Ok(scenario) => jobs.push(ScenarioJob {
                    sentence: si,
                    variant: v,
                    scenario,
                }),
                Err(e) => failed.push(format!("{si}:{v}: {e}")),
            }
        }
    }
    (jobs, failed)
}

/// Runs every job `cfg.sims_per_scenario` times and collects canonical subgraphs.
pub fn simulate_jobs(
    jobs: &[ScenarioJob],
    cfg: &DataConfig,
    seed: u64,
) -> (Vec<DatasetSample>, DatasetStats) {
    let mut out = Vec::new();
    let mut stats = DatasetStats {
        scenarios: jobs.len(),
        ..DatasetStats::default()
    };
    for job in jobs {
        for sim in 0..cfg.sims_per_scenario {
            let run = (job.sentence * cfg.variants.max(1) + job.variant) as u64
                * cfg.sims_per_scenario as u64
                + sim as u64;
            let mut rng = SimRng::seed(mix(seed, &format!("sim:{run}")));
            let sim_cfg = SimulationConfig {
                agent_count: cfg.agent_count,
                group_size_probs: cfg.group_size_probs,
                duration: rng.range(cfg.duration_range[0], cfg.duration_range[1]),
                temp_start: rng.range(cfg.temp_range[0], cfg.temp_range[1]),
                rng_seed: rng.next_u64(),
                durations: cfg.durations.clone(),
                ..SimulationConfig::default()
            };
            let extracted = run_simulation(&job.scenario, &sim_cfg)
                .map_err(|e| e.to_string())
                .and_then(|recs| build_graph(&recs).map_err(|e| e.to_string()))
                .map(|g| extract_subgraphs(&g, &job.scenario.seed_sentence));
            match extracted {
                Ok(ex) => {
                    stats.simulations += 1;
                    stats.dropped += ex.dropped;
                    for sg in ex.subgraphs {
                        out.push(DatasetSample {
                            graph: canonical_order(&sg, NodeOrder::AgentMajor),
                            run,
                        });
                    }
                }
                Err(e) => stats
                    .failed
                    .push(format!("{}:{}: {e}", job.sentence, job.variant)),
            }
        }
    }
    stats.subgraphs = out.len();
    (out, stats)
}

/// Node order used when preparing training tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    #[default]
    AgentMajor,
    TimeMajor,
    /// A fixed random permutation per sample (the no-canonical ablation).
    Random,
}

/// Reorders a subgraph per `mode`; `Random` draws from `rng`.
pub fn apply_order(sg: &ScenarioSubgraph, mode: OrderMode, rng: &mut SimRng) -> ScenarioSubgraph {
    match mode {
        OrderMode::AgentMajor => canonical_order(sg, NodeOrder::AgentMajor),
        OrderMode::TimeMajor => canonical_order(sg, NodeOrder::TimeMajor),
        OrderMode::Random => {
            let mut perm: Vec<usize> = (0..sg.nodes.len()).collect();
            rng.shuffle(&mut perm);
            permute_nodes(sg, &perm)
        }
    }
}

/// Embeds every distinct sentence with `paraphrases` offline rewordings.
/// Returns the bank and a sentence → index map.
pub fn build_text_bank(
    sentences: &[String],
    paraphrases: usize,
    seed: u64,
    embed: &mut dyn FnMut(&str) -> Vec<f64>,
) -> (TextBank, BTreeMap<String, usize>) {
    build_text_bank_with(
        sentences,
        &mut |s| paraphrase_offline(s, paraphrases, seed),
        embed,
    )
}

/// Like [`build_text_bank`] with a caller-supplied paraphrase source.
/// `embed` sees raw sentences and is responsible for verb emphasis.
pub fn build_text_bank_with(
    sentences: &[String],
    paraphrase: &mut dyn FnMut(&str) -> Vec<String>,
    embed: &mut dyn FnMut(&str) -> Vec<f64>,
) -> (TextBank, BTreeMap<String, usize>) {
    let mut bank = TextBank::default();
    let mut index = BTreeMap::new();
    for s in sentences {
        if index.contains_key(s) {
            continue;
        }
        index.insert(s.clone(), bank.originals.len());
        bank.originals.push(embed(s));
        bank.paraphrases
            .push(paraphrase(s).iter().map(|p| embed(p)).collect());
    }
    (bank, index)
}

/// The default embedder: verb emphasis with the built-in lexicon, then
/// feature hashing.
pub fn hashing_embedder() -> impl FnMut(&str) -> Vec<f64> {
    |s: &str| embed_hashing(&emphasize_verbs(s))
}

/// Encodes dataset samples for training in the requested node order.
pub fn prepare_samples(
    samples: &[DatasetSample],
    index: &BTreeMap<String, usize>,
    mode: OrderMode,
    seed: u64,
) -> Result<Vec<TrainSample>, GraphError> {
    let mut rng = SimRng::split(seed, "node-order");
    samples
        .iter()
        .map(|s| {
            let sg = apply_order(&s.graph, mode, &mut rng);
            let sentence = index.get(&s.graph.seed_sentence).copied().unwrap_or(0);
            TrainSample::from_subgraph(&sg, sentence)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check_subgraph;

    #[test]
    fn small_pipeline_is_valid_and_deterministic() {
        let cfg = DataConfig {
            scenarios: 4,
            variants: 2,
            sims_per_scenario: 2,
            ..DataConfig::default()
        };
        let sentences = builtin_sentences();
        assert!(sentences.len() >= 30);
        let (jobs, failed) = offline_jobs(&sentences, &cfg, 1);
        assert!(failed.is_empty());
        let (a, stats) = simulate_jobs(&jobs, &cfg, 1);
        let (b, _) = simulate_jobs(&jobs, &cfg, 1);
        assert_eq!(a, b);
        assert_eq!(stats.subgraphs, a.len());
        assert!(!a.is_empty());
        for s in &a {
            check_subgraph(&s.graph).unwrap();
        }
        let (bank, index) = build_text_bank(&sentences[..4], 20, 0, &mut hashing_embedder());
        assert_eq!(bank.len(), 4);
        assert!(bank.paraphrases.iter().all(|p| p.len() == 20));
        let prepared = prepare_samples(&a, &index, OrderMode::Random, 3).unwrap();
        assert_eq!(prepared.len(), a.len());
    }
}
