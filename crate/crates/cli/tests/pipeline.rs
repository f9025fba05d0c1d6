mod common;

use std::path::Path;
use std::time::Instant;

use crowdgraph::cli::main_with;
use crowdgraph::commands::{
    eval_cmd, export_graphs, gen_data, read_graphs, resolve_config, sample_cmd, train_cmd,
    ExportFormat, GenDataSummary, PlanGroup, SampleRequest,
};
use crowdgraph::embed::TextEncoder;
use crowdgraph::error::CliError;
use crowdgraph::io::{read_jsonl, Manifest};
use crowdgraph::llm::{LlmClient, MockTransport};
use crowdgraph::{checkpoint, config};
use crowdgraph_core::config::{LlmConfig, RunConfig, ScenarioSource};
use crowdgraph_core::dataset::DatasetSample;
use crowdgraph_core::graph::check_subgraph;
use crowdgraph_core::textenc::Lexicon;

use common::{smoke_config, smoke_dataset};

fn encoder() -> TextEncoder<'static> {
    TextEncoder::hashing(Lexicon::builtin())
}

fn summary_of(m: &Manifest) -> GenDataSummary {
    serde_json::from_value(m.details["summary"].clone()).unwrap()
}

#[test]
fn gen_data_is_consistent_and_byte_identical() {
    let cfg = smoke_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = smoke_dataset(a.path(), &cfg);
    let pb = smoke_dataset(b.path(), &cfg);
    for name in [
        "data.jsonl",
        "data.train.jsonl",
        "data.val.jsonl",
        "data.test.jsonl",
        "data.texts.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let m = Manifest::read_for(&pa).unwrap();
    let s = summary_of(&m);
    let lines: Vec<DatasetSample> = read_jsonl(&pa).unwrap();
    assert!(s.subgraphs > 0);
    assert_eq!(s.subgraphs, lines.len());
    assert_eq!(s.splits.iter().sum::<usize>(), lines.len());
    assert_eq!(m.config_hash, config::config_hash(&cfg).unwrap());
    assert_eq!(m.data_hash, config::data_hash(&cfg).unwrap());
    assert_eq!(Manifest::read_for(&pb).unwrap().data_hash, m.data_hash);
    for l in &lines {
        check_subgraph(&l.graph).unwrap();
    }

    let mut other = cfg.clone();
    other.seed = 6;
    let c = tempfile::tempdir().unwrap();
    smoke_dataset(c.path(), &other);
    assert_ne!(
        std::fs::read(c.path().join("data.jsonl")).unwrap(),
        std::fs::read(&pa).unwrap()
    );
}

#[test]
fn desk_defaults_yield_at_least_two_thousand_subgraphs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("desk.jsonl");
    let s = gen_data(&RunConfig::desk(), &out, None, None).unwrap();
    assert!(s.subgraphs >= 2000, "{} subgraphs", s.subgraphs);
    assert_eq!((s.scenarios, s.simulations), (90, 450));
    assert_eq!(
        read_jsonl::<DatasetSample>(&out).unwrap().len(),
        s.subgraphs
    );
}

#[test]
fn failed_scenarios_are_listed_and_make_the_run_fail() {
    let mut cfg = smoke_config();
    cfg.source = ScenarioSource::Llm;
    cfg.data.scenarios = 2;
    cfg.data.variants = 1;
    cfg.data.env_size = Some([40.0, 40.0]);
    let replies = [
        serde_json::json!({ "description": "People queue for coffee." }),
        serde_json::json!({ "locations": [
            { "name": "counter", "category": "service area", "position": [5, 5], "scale": [3, 2] },
            { "name": "hall", "category": "room", "position": [20, 20], "scale": [15, 10] } ] }),
        serde_json::json!({ "actions": [
            { "location": "counter", "actions": [{ "action": "queue", "probability": 0.7 }, { "action": "wait", "probability": 0.3 }] },
            { "location": "hall", "actions": [{ "action": "wander", "probability": 1.0 }] } ] }),
        serde_json::json!({ "movements": [
            { "location": "counter", "targets": [{ "target": "hall", "probability": 1.0 }] },
            { "location": "hall", "targets": [{ "target": "counter", "probability": 1.0 }] } ] }),
    ];
    let t = MockTransport::new(
        replies
            .iter()
            .map(|r| MockTransport::chat_reply(&r.to_string())),
    );
    let client = LlmClient::new(&t, "http://mock", None, LlmConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("llm.jsonl");
    let err = gen_data(&cfg, &out, None, Some(&client)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let s = summary_of(&Manifest::read_for(&out).unwrap());
    assert_eq!(s.failed.len(), 1);
    assert!(s.failed[0].starts_with("1:0"), "{:?}", s.failed);
    assert_eq!(s.scenarios, 1);
    assert!(s.subgraphs > 0);
    assert_eq!(s.paraphrase_fallbacks, 2);
    assert_eq!(
        read_jsonl::<DatasetSample>(&out).unwrap().len(),
        s.subgraphs
    );
}

fn train_smoke(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let data = smoke_dataset(dir, cfg);
    train_cmd(cfg, &data, &dir.join("ckpt"), &mut encoder(), &mut |_| {}).unwrap();
    data
}

#[test]
fn train_then_eval_on_smoke_data() {
    let t0 = Instant::now();
    let mut cfg = smoke_config();
    cfg.train.epochs = 30;
    cfg.tau = 0.3;
    let dir = tempfile::tempdir().unwrap();
    let data = train_smoke(dir.path(), &cfg);
    let ckpt_dir = dir.path().join("ckpt");
    for f in ["best.ckpt", "final.ckpt", "history.jsonl", "manifest.json"] {
        assert!(ckpt_dir.join(f).exists(), "{f}");
    }
    let history: Vec<serde_json::Value> = read_jsonl(&ckpt_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.len(), 30);

    let (header, mut model) = checkpoint::load(&ckpt_dir.join("best.ckpt")).unwrap();
    assert_eq!(header.data_hash, config::data_hash(&cfg).unwrap());
    let run_cfg = resolve_config(&header, None, None).unwrap();
    let test = dir.path().join("data.test.jsonl");
    let out = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let r = eval_cmd(
        &run_cfg,
        &header,
        &mut model,
        &test,
        &out,
        Some(&csv),
        &mut encoder(),
    )
    .unwrap();
    assert_eq!(r.report.metrics.len(), 6);
    assert!(r
        .report
        .metrics
        .iter()
        .all(|m| m.kld.is_finite() && m.kld >= 0.0));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(json["report"]["metrics"][0]["bins"]["kind"].is_string());
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, 1 + 9 + 10 + 21 + 20 + 15 + 8);
    assert!(Manifest::read_for(&out).is_ok());
    assert!(
        t0.elapsed().as_secs() < 300,
        "smoke train+eval took {:?}",
        t0.elapsed()
    );

    // the full dataset carries the same data hash, a foreign one does not
    eval_cmd(
        &run_cfg,
        &header,
        &mut model,
        &data,
        &out,
        None,
        &mut encoder(),
    )
    .unwrap();
    let mut foreign = cfg.clone();
    foreign.seed = 77;
    let other = tempfile::tempdir().unwrap();
    let other_data = smoke_dataset(other.path(), &foreign);
    let err = eval_cmd(
        &run_cfg,
        &header,
        &mut model,
        &other_data,
        &out,
        None,
        &mut encoder(),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
}

#[test]
fn training_curves_are_bit_identical_across_runs() {
    let cfg = smoke_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_smoke(a.path(), &cfg);
    train_smoke(b.path(), &cfg);
    for f in ["history.jsonl", "best.ckpt", "final.ckpt"] {
        assert_eq!(
            std::fs::read(a.path().join("ckpt").join(f)).unwrap(),
            std::fs::read(b.path().join("ckpt").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sample_emits_plan_groups_and_export_writes_dot() {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    train_smoke(dir.path(), &cfg);
    let ckpt = dir.path().join("ckpt/best.ckpt");
    let (header, mut model) = checkpoint::load(&ckpt).unwrap();
    let run_cfg = resolve_config(&header, None, Some(3)).unwrap();
    assert_eq!(run_cfg.seed, 3);
    let out = dir.path().join("plans.jsonl");
    let req = SampleRequest {
        text: "Passengers sit on benches to read",
        agents: 2,
        n: 3,
        tau: 0.3,
    };
    let groups = sample_cmd(&run_cfg, &ckpt, &mut model, &req, &out, &mut encoder()).unwrap();
    assert_eq!(groups.len(), 3);
    let lines: Vec<PlanGroup> = read_jsonl(&out).unwrap();
    assert_eq!(lines, groups);
    for g in &groups {
        check_subgraph(&g.graph).unwrap();
        assert_eq!(g.plans.len(), 2);
    }

    let graphs = read_graphs(&out).unwrap();
    let dot = export_graphs(&graphs, Some(1), ExportFormat::Dot).unwrap();
    let parsed = dot_oracle::parse(&dot).expect("parseable DOT");
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].nodes, graphs[1].nodes.len());
    assert_eq!(parsed[0].edges, graphs[1].edges.len());
    let all = dot_oracle::parse(&export_graphs(&graphs, None, ExportFormat::Dot).unwrap()).unwrap();
    assert_eq!(all.len(), 3);
    let json: Vec<serde_json::Value> =
        serde_json::from_str(&export_graphs(&graphs, None, ExportFormat::Json).unwrap()).unwrap();
    assert_eq!(json.len(), 3);
    assert!(export_graphs(&graphs, Some(9), ExportFormat::Dot).is_err());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"trian": {}}"#).unwrap();
    let out = dir.path().join("d.jsonl");
    let arg = |p: &Path| p.to_str().unwrap().to_string();
    assert_eq!(
        main_with([
            "crowdgraph",
            "--config",
            &arg(&bad_cfg),
            "gen-data",
            "--out",
            &arg(&out)
        ]),
        1
    );
    assert_eq!(main_with(["crowdgraph", "gen-data"]), 1, "missing --out");
    assert_eq!(main_with(["crowdgraph", "--help"]), 0);
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        main_with([
            "crowdgraph",
            "-q",
            "train",
            "--data",
            &arg(&missing),
            "--out",
            &arg(dir.path())
        ]),
        2
    );
    assert_eq!(
        main_with(["crowdgraph", "export", "--input", &arg(&missing)]),
        2
    );

    // a dataset made under another root seed is rejected by train
    let cfg = smoke_config();
    let data = smoke_dataset(dir.path(), &cfg);
    let ckpt = dir.path().join("ck");
    assert_eq!(
        main_with([
            "crowdgraph",
            "-q",
            "--seed",
            "6",
            "train",
            "--data",
            &arg(&data),
            "--out",
            &arg(&ckpt)
        ]),
        2
    );
    assert!(!ckpt.exists());
}

/// A small reader for the DOT subset the exporter emits: `graph ID { ... }`
/// blocks of attribute, node and `--` edge statements.
mod dot_oracle {
    use std::collections::BTreeSet;

    pub struct Graph {
        pub nodes: usize,
        pub edges: usize,
    }

    #[derive(Debug, PartialEq)]
    enum Tok {
        Id(String),
        Str(String),
        Sym(char),
        Edge,
    }

    fn lex(s: &str) -> Result<Vec<Tok>, String> {
        let mut out = Vec::new();
        let cs: Vec<char> = s.chars().collect();
        let mut i = 0;
        while i < cs.len() {
            let c = cs[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '"' {
                let mut v = String::new();
                i += 1;
                loop {
                    match cs.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('\\') => {
                            v.push(*cs.get(i + 1).ok_or("dangling escape")?);
                            i += 2;
                        }
                        Some('"') => break,
                        Some(&ch) => {
                            v.push(ch);
                            i += 1;
                        }
                    }
                }
                i += 1;
                out.push(Tok::Str(v));
            } else if c == '-' && cs.get(i + 1) == Some(&'-') {
                out.push(Tok::Edge);
                i += 2;
            } else if c.is_alphanumeric() || c == '_' {
                let st = i;
                while i < cs.len() && (cs[i].is_alphanumeric() || cs[i] == '_' || cs[i] == '.') {
                    i += 1;
                }
                out.push(Tok::Id(cs[st..i].iter().collect()));
            } else if "{}[];=,".contains(c) {
                out.push(Tok::Sym(c));
                i += 1;
            } else {
                return Err(format!("unexpected {c:?}"));
            }
        }
        Ok(out)
    }

    fn attrs(t: &[Tok], mut i: usize) -> Result<usize, String> {
        // t[i] == '['
        i += 1;
        loop {
            match t.get(i) {
                Some(Tok::Sym(']')) => return Ok(i + 1),
                Some(Tok::Id(_)) => {}
                other => return Err(format!("attribute name expected, got {other:?}")),
            }
            if t.get(i + 1) != Some(&Tok::Sym('='))
                || !matches!(t.get(i + 2), Some(Tok::Id(_) | Tok::Str(_)))
            {
                return Err("attribute needs name=value".into());
            }
            i += 3;
            if t.get(i) == Some(&Tok::Sym(',')) {
                i += 1;
            }
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Graph>, String> {
        let t = lex(s)?;
        let mut i = 0;
        let mut graphs = Vec::new();
        while i < t.len() {
            if t[i] != Tok::Id("graph".into())
                || !matches!(t.get(i + 1), Some(Tok::Id(_)))
                || t.get(i + 2) != Some(&Tok::Sym('{'))
            {
                return Err("expected `graph ID {`".into());
            }
            i += 3;
            let mut nodes = BTreeSet::new();
            let mut edges = 0;
            loop {
                match t.get(i) {
                    Some(Tok::Sym('}')) => {
                        i += 1;
                        break;
                    }
                    Some(Tok::Id(a)) => {
                        let a = a.clone();
                        match t.get(i + 1) {
                            Some(Tok::Sym('=')) => i += 3,
                            Some(Tok::Edge) => {
                                let Some(Tok::Id(b)) = t.get(i + 2) else {
                                    return Err("edge target expected".into());
                                };
                                if !nodes.contains(&a) || !nodes.contains(b) {
                                    return Err(format!("edge {a} -- {b} uses an undeclared node"));
                                }
                                edges += 1;
                                i += 3;
                                if t.get(i) == Some(&Tok::Sym('[')) {
                                    i = attrs(&t, i)?;
                                }
                            }
                            Some(Tok::Sym('[')) => {
                                if a != "node" && a != "edge" && a != "graph" {
                                    nodes.insert(a);
                                }
                                i = attrs(&t, i + 1)?;
                            }
                            other => return Err(format!("unexpected {other:?} after {a}")),
                        }
                        if t.get(i) != Some(&Tok::Sym(';')) {
                            return Err("statement must end with ;".into());
                        }
                        i += 1;
                    }
                    other => return Err(format!("unexpected {other:?}")),
                }
            }
            graphs.push(Graph {
                nodes: nodes.len(),
                edges,
            });
        }
        Ok(graphs)
    }
}
