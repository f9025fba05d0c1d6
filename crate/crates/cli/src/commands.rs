//! The pipeline behind each subcommand, as plain functions over a resolved
//! [`RunConfig`], so tests can drive them without spawning processes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crowdgraph_core::config::{RunConfig, ScenarioSource};
use crowdgraph_core::dataset::{
    build_text_bank_with, builtin_sentences, offline_jobs, prepare_samples, simulate_jobs,
    DatasetSample, ScenarioJob,
};
use crowdgraph_core::generation::{parse_plan, sample_batch, AgentPlan};
use crowdgraph_core::graph::{split_by_group, ScenarioSubgraph};
use crowdgraph_core::metrics::{
    ablate, evaluate, AblationSetup, AblationTable, MetricsError, StatReport, Variant,
};
use crowdgraph_core::rng::{mix, SimRng};
use crowdgraph_core::scenario::offline::DEFAULT_ENV_DRAW;
use crowdgraph_core::vgae::{train, CrowdVgae, EpochLog, TextBank};

use crate::checkpoint::{self, CheckpointHeader, CheckpointMeta};
use crate::config::{data_hash, model_hash};
use crate::embed::TextEncoder;
use crate::error::{CliError, Result};
use crate::export;
use crate::io::{
    atomic_write, read_json, read_jsonl, sibling, write_json, write_jsonl, InputRef, Manifest,
};
use crate::llm::{paraphrases_or_offline, LlmClient};

/// Sentence → paraphrases, stored next to a dataset.
pub type TextTable = BTreeMap<String, Vec<String>>;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub scenarios: usize,
    pub simulations: usize,
    pub subgraphs: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    /// `"sentence:variant"` ids that failed, with the reason.
    pub failed: Vec<String>,
    pub splits: [usize; 3],
    pub paraphrase_fallbacks: usize,
}

fn read_sentences(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        None => Ok(builtin_sentences()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::data(p, e))?;
            let v: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect();
            if v.is_empty() {
                return Err(CliError::data(p, "no sentences"));
            }
            Ok(v)
        }
    }
}

fn llm_jobs(
    sentences: &[String],
    cfg: &RunConfig,
    client: &LlmClient<'_>,
) -> (Vec<ScenarioJob>, Vec<String>) {
    let seed = cfg.stage_seed("data");
    let mut jobs = Vec::new();
    let mut failed = Vec::new();
    for (si, s) in sentences.iter().take(cfg.data.scenarios).enumerate() {
        for v in 0..cfg.data.variants {
            let env = cfg.data.env_size.unwrap_or_else(|| {
                let mut rng = SimRng::seed(mix(seed, &format!("env:{si}:{v}")));
                let (lo, hi) = DEFAULT_ENV_DRAW;
                [rng.range(lo, hi), rng.range(lo, hi)]
            });
            match client.generate_scenario(s, env) {
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

/// Scenario → simulation → subgraphs. Writes `out` (all samples), its
/// `train`/`val`/`test` split siblings, the paraphrase table and manifests.
/// Failed scenarios are listed in the manifest and turn the result into a
/// data error after everything is written.
pub fn gen_data(
    cfg: &RunConfig,
    out: &Path,
    sentences: Option<&Path>,
    llm: Option<&LlmClient<'_>>,
) -> Result<GenDataSummary> {
    let sentences = read_sentences(sentences)?;
    let seed = cfg.stage_seed("data");
    let (jobs, mut failed) = match cfg.source {
        ScenarioSource::Offline => offline_jobs(&sentences, &cfg.data, seed),
        ScenarioSource::Llm => {
            let client = llm.ok_or_else(|| {
                CliError::Usage("source is llm but no client is configured".into())
            })?;
            llm_jobs(&sentences, cfg, client)
        }
    };
    let (samples, stats) = simulate_jobs(&jobs, &cfg.data, seed);
    failed.extend(stats.failed.iter().cloned());

    let used: Vec<String> = sentences.iter().take(cfg.data.scenarios).cloned().collect();
    let mut texts = TextTable::new();
    let mut fallbacks = 0;
    let para_client = if cfg.source == ScenarioSource::Llm {
        llm
    } else {
        None
    };
    for s in &used {
        let (p, fell_back) = paraphrases_or_offline(para_client, s, cfg.data.paraphrases, seed);
        fallbacks += fell_back as usize;
        texts.insert(s.clone(), p);
    }

    write_jsonl(out, &samples)?;
    let texts_path = sibling(out, "texts", "json");
    write_json(&texts_path, &texts)?;
    let mut sizes = [0; 3];
    let split = if samples.is_empty() {
        None
    } else {
        Some(
            split_by_group(
                samples.clone(),
                |s| s.run,
                cfg.split,
                cfg.stage_seed("split"),
            )
            .map_err(|e| CliError::Usage(e.to_string()))?,
        )
    };
    let mut split_refs = Vec::new();
    if let Some((tr, va, te)) = &split {
        for (i, (name, part)) in SPLITS.iter().zip([tr, va, te]).enumerate() {
            let p = sibling(out, name, "jsonl");
            write_jsonl(&p, part)?;
            sizes[i] = part.len();
            let mut m = Manifest::new("gen-data", cfg)?;
            m.details = json!({ "split": name, "samples": part.len(), "parent": out.display().to_string() });
            m.write_for(&p)?;
            split_refs.push(InputRef::of(&p)?);
        }
    }
    let summary = GenDataSummary {
        scenarios: stats.scenarios,
        simulations: stats.simulations,
        subgraphs: stats.subgraphs,
        dropped: stats.dropped,
        drop_rate: stats.drop_rate(),
        failed: failed.clone(),
        splits: sizes,
        paraphrase_fallbacks: fallbacks,
    };
    let mut m = Manifest::new("gen-data", cfg)?;
    m.details =
        json!({ "summary": summary, "texts": InputRef::of(&texts_path)?, "splits": split_refs });
    m.write_for(out)?;
    log::info!(
        "{} subgraphs from {} simulations ({} dropped)",
        summary.subgraphs,
        summary.simulations,
        summary.dropped
    );
    if !failed.is_empty() {
        return Err(CliError::Data(format!(
            "{} scenario(s) failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    if summary.subgraphs == 0 {
        return Err(CliError::Data("pipeline produced no subgraphs".into()));
    }
    Ok(summary)
}

/// A dataset file with the manifest and paraphrase table it was written with.
pub struct Dataset {
    pub samples: Vec<DatasetSample>,
    pub manifest: Manifest,
    pub texts: TextTable,
}

/// Reads a dataset and rejects it unless it was generated under the data
/// settings of `expected_data_hash`.
pub fn load_dataset(path: &Path, expected_data_hash: &str) -> Result<Dataset> {
    let manifest = Manifest::read_for(path)?;
    if manifest.data_hash != expected_data_hash {
        return Err(CliError::data(
            path,
            format!(
                "dataset data hash {} does not match the run's ({expected_data_hash})",
                manifest.data_hash
            ),
        ));
    }
    let samples: Vec<DatasetSample> = read_jsonl(path)?;
    if samples.is_empty() {
        return Err(CliError::data(path, "dataset is empty"));
    }
    let parent = manifest
        .details
        .get("parent")
        .and_then(|p| p.as_str())
        .map(PathBuf::from);
    let texts_path = sibling(parent.as_deref().unwrap_or(path), "texts", "json");
    let texts = if texts_path.exists() {
        read_json(&texts_path)?
    } else {
        TextTable::new()
    };
    Ok(Dataset {
        samples,
        manifest,
        texts,
    })
}

/// Text bank over every sentence of the dataset, paraphrases from its table.
pub fn text_bank(
    data: &Dataset,
    encoder: &mut TextEncoder<'_>,
) -> (TextBank, BTreeMap<String, usize>) {
    let mut sentences: Vec<String> = data.texts.keys().cloned().collect();
    for s in &data.samples {
        if !data.texts.contains_key(&s.graph.seed_sentence) {
            sentences.push(s.graph.seed_sentence.clone());
        }
    }
    sentences.sort();
    sentences.dedup();
    build_text_bank_with(
        &sentences,
        &mut |s| data.texts.get(s).cloned().unwrap_or_default(),
        &mut |s| encoder.embed(s),
    )
}

/// Group-level train/validation/test split under the run's split seed.
pub fn split_dataset(
    cfg: &RunConfig,
    data: &Dataset,
) -> Result<(Vec<DatasetSample>, Vec<DatasetSample>, Vec<DatasetSample>)> {
    split_by_group(
        data.samples.clone(),
        |s| s.run,
        cfg.split,
        cfg.stage_seed("split"),
    )
    .map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub diverged: Option<String>,
}

/// Trains on the dataset's train split and writes `best.ckpt`,
/// `final.ckpt`, `history.jsonl` and `manifest.json` into `out`.
pub fn train_cmd(
    cfg: &RunConfig,
    data_path: &Path,
    out: &Path,
    encoder: &mut TextEncoder<'_>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainSummary> {
    let data = load_dataset(data_path, &data_hash(cfg)?)?;
    let (tr, va, _) = split_dataset(cfg, &data)?;
    let (bank, index) = text_bank(&data, encoder);
    let order_seed = cfg.stage_seed("order");
    let tr = prepare_samples(&tr, &index, cfg.order, order_seed)
        .map_err(|e| CliError::data(data_path, e))?;
    let va = prepare_samples(&va, &index, cfg.order, order_seed)
        .map_err(|e| CliError::data(data_path, e))?;
    let model = CrowdVgae::new(cfg.model.clone(), cfg.stage_seed("model"));
    let outcome = train(model, &tr, &va, &bank, &cfg.train_config(), |log, _| {
        on_epoch(log);
        true
    })
    .map_err(|e| CliError::Data(e.to_string()))?;

    std::fs::create_dir_all(out).map_err(|e| CliError::data(out, e))?;
    let last = outcome.history.last().map_or(0, |l| l.epoch);
    let rng = outcome.rng.state();
    write_jsonl(&out.join("history.jsonl"), &outcome.history)?;
    checkpoint::save(
        &out.join("final.ckpt"),
        cfg,
        &CheckpointMeta {
            epoch: last,
            params_epoch: last,
            rng: rng.clone(),
        },
        &outcome.model,
    )?;
    let best = outcome
        .best_model()
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    checkpoint::save(
        &out.join("best.ckpt"),
        cfg,
        &CheckpointMeta {
            epoch: last,
            params_epoch: outcome.best_epoch,
            rng,
        },
        &best,
    )?;
    let summary = TrainSummary {
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
        train_samples: tr.len(),
        val_samples: va.len(),
        diverged: outcome.diverged.clone(),
    };
    let mut m = Manifest::new("train", cfg)?;
    m.model_hash = Some(model_hash(cfg)?);
    m.inputs = vec![InputRef::of(data_path)?];
    m.details = json!({ "summary": summary, "embedding_fallbacks": encoder.fallbacks });
    write_json(&out.join("manifest.json"), &m)?;
    if let Some(msg) = outcome.diverged {
        return Err(CliError::Numeric(format!(
            "training diverged: {msg}; last finite state saved to final.ckpt"
        )));
    }
    Ok(summary)
}

/// Config for using a checkpoint: the embedded one unless `given`, which
/// must describe the same model. `seed` replaces the root seed.
pub fn resolve_config(
    header: &CheckpointHeader,
    given: Option<RunConfig>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match given {
        Some(c) => {
            checkpoint::check_compatible(header, &c)?;
            c
        }
        None => header.config.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// One generated group: its plans and the graph they were parsed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub sample: usize,
    pub text: String,
    pub agents: usize,
    pub plans: Vec<AgentPlan>,
    pub graph: ScenarioSubgraph,
}

pub struct SampleRequest<'a> {
    pub text: &'a str,
    pub agents: usize,
    pub n: usize,
    pub tau: f64,
}

/// Draws until `n` valid groups exist, giving up after `10 n` draws.
pub fn sample_groups(
    cfg: &RunConfig,
    model: &mut CrowdVgae,
    req: &SampleRequest<'_>,
    encoder: &mut TextEncoder<'_>,
) -> Result<(Vec<PlanGroup>, usize)> {
    let emb = encoder.embed(req.text);
    let mut rng = SimRng::seed(cfg.stage_seed("sample"));
    let mut groups = Vec::new();
    let mut draws = 0;
    let budget = req.n.saturating_mul(10).max(1);
    while groups.len() < req.n && draws < budget {
        let want = (req.n - groups.len()).min(budget - draws);
        let batch = sample_batch(model, req.text, &emb, req.agents, want, req.tau, &mut rng)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        draws += want;
        for s in batch.into_iter().flatten() {
            groups.push(PlanGroup {
                sample: groups.len(),
                text: req.text.to_string(),
                agents: req.agents,
                plans: parse_plan(&s.subgraph),
                graph: s.subgraph,
            });
        }
    }
    if groups.len() < req.n {
        return Err(CliError::Numeric(format!(
            "only {} of {} draws produced valid groups",
            groups.len(),
            draws
        )));
    }
    Ok((groups, draws))
}

pub fn sample_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    model: &mut CrowdVgae,
    req: &SampleRequest<'_>,
    out: &Path,
    encoder: &mut TextEncoder<'_>,
) -> Result<Vec<PlanGroup>> {
    let (groups, draws) = sample_groups(cfg, model, req, encoder)?;
    write_jsonl(out, &groups)?;
    let mut m = Manifest::new("sample", cfg)?;
    m.model_hash = Some(model_hash(cfg)?);
    m.inputs = vec![InputRef::of(ckpt)?];
    m.details = json!({ "text": req.text, "agents": req.agents, "n": req.n, "tau": req.tau, "draws": draws });
    m.write_for(out)?;
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub data_hash: String,
    pub model_hash: String,
    pub params_epoch: usize,
    pub tau: f64,
    pub seed: u64,
    /// Set when more than half of the draws failed; the metrics then cover
    /// only the successful ones.
    pub aborted: bool,
    pub report: StatReport,
}

/// Prior-only evaluation against a dataset generated under the same data
/// settings as the checkpoint. Writes the report (and optional CSV) even
/// when the run aborts on too many failures.
pub fn eval_cmd(
    cfg: &RunConfig,
    header: &CheckpointHeader,
    model: &mut CrowdVgae,
    data_path: &Path,
    out: &Path,
    csv_path: Option<&Path>,
    encoder: &mut TextEncoder<'_>,
) -> Result<EvalReport> {
    let data = load_dataset(data_path, &header.data_hash)?;
    let graphs: Vec<ScenarioSubgraph> = data.samples.into_iter().map(|s| s.graph).collect();
    let mut rng = SimRng::seed(cfg.stage_seed("evaluate"));
    let (report, aborted) =
        match evaluate(model, &graphs, &mut |s| encoder.embed(s), cfg.tau, &mut rng) {
            Ok(e) => (e.report, false),
            Err(MetricsError::TooManyFailures { report, .. }) => (*report, true),
            Err(e) => return Err(CliError::Numeric(e.to_string())),
        };
    let full = EvalReport {
        config_hash: header.config_hash.clone(),
        data_hash: header.data_hash.clone(),
        model_hash: header.model_hash.clone(),
        params_epoch: header.params_epoch,
        tau: cfg.tau,
        seed: cfg.seed,
        aborted,
        report,
    };
    write_json(out, &full)?;
    if let Some(p) = csv_path {
        atomic_write(p, &report_csv(&full.report)?)?;
    }
    let mut m = Manifest::new("eval", cfg)?;
    m.model_hash = Some(header.model_hash.clone());
    m.inputs = vec![InputRef::of(data_path)?];
    m.details = json!({ "aborted": aborted, "failures": full.report.failures });
    m.write_for(out)?;
    if aborted {
        return Err(CliError::Numeric(format!(
            "{} of {} draws failed; partial report written",
            full.report.failures, full.report.reference_graphs
        )));
    }
    Ok(full)
}

/// `metric,bin,reference,generated,kld`, one row per histogram bin.
pub fn report_csv(r: &StatReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(["metric", "bin", "reference", "generated", "kld"])
        .map_err(err)?;
    for m in &r.metrics {
        for (i, (p, q)) in m.reference.iter().zip(&m.generated).enumerate() {
            w.write_record([
                m.metric.name().to_string(),
                i.to_string(),
                p.to_string(),
                q.to_string(),
                m.kld.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub config_hash: String,
    pub data_hash: String,
    pub epochs: usize,
    pub table: AblationTable,
}

/// Trains and evaluates each variant under the same seeds and budget.
pub fn ablate_cmd(
    cfg: &RunConfig,
    data_path: &Path,
    out: &Path,
    variants: &[Variant],
    encoder: &mut TextEncoder<'_>,
    on_epoch: &mut dyn FnMut(Variant, &EpochLog),
) -> Result<AblationOutput> {
    let data = load_dataset(data_path, &data_hash(cfg)?)?;
    let (tr, va, te) = split_dataset(cfg, &data)?;
    let (bank, index) = text_bank(&data, encoder);
    let setup = AblationSetup {
        train: &tr,
        val: &va,
        test: &te,
        bank: &bank,
        index: &index,
        model: cfg.model.clone(),
        train_cfg: cfg.train_config(),
        seed: cfg.stage_seed("ablate"),
        tau: cfg.tau,
    };
    let table = ablate(&setup, variants, on_epoch).map_err(|e| match e {
        MetricsError::Train(t) => CliError::Numeric(t.to_string()),
        other => CliError::Numeric(other.to_string()),
    })?;
    let result = AblationOutput {
        config_hash: crate::config::config_hash(cfg)?,
        data_hash: data_hash(cfg)?,
        epochs: cfg.train.epochs,
        table,
    };
    write_json(out, &result)?;
    let mut m = Manifest::new("ablate", cfg)?;
    m.inputs = vec![InputRef::of(data_path)?];
    m.details = json!({ "variants": variants });
    m.write_for(out)?;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Json,
}

/// Reads dataset lines or sampled plan groups (their `graph` field).
pub fn read_graphs(path: &Path) -> Result<Vec<ScenarioSubgraph>> {
    let lines: Vec<serde_json::Value> = read_jsonl(path)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            let g = match v.get_mut("graph") {
                Some(g) => g.take(),
                None => v,
            };
            serde_json::from_value(g)
                .map_err(|e| CliError::data(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn export_graphs(
    graphs: &[ScenarioSubgraph],
    index: Option<usize>,
    format: ExportFormat,
) -> Result<String> {
    let picked: Vec<(usize, &ScenarioSubgraph)> = match index {
        Some(i) => vec![(
            i,
            graphs.get(i).ok_or_else(|| {
                CliError::Usage(format!("index {i} out of range (0..{})", graphs.len()))
            })?,
        )],
        None => graphs.iter().enumerate().collect(),
    };
    Ok(match format {
        ExportFormat::Dot => picked
            .iter()
            .map(|(i, g)| export::to_dot(g, &format!("g{i}")))
            .collect(),
        ExportFormat::Json => {
            let v: Vec<serde_json::Value> =
                picked.iter().map(|(_, g)| export::to_json(g)).collect();
            let mut s =
                serde_json::to_string_pretty(&v).map_err(|e| CliError::Data(e.to_string()))?;
            s.push('\n');
            s
        }
    })
}
