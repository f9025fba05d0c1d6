//! Graph export for inspection: Graphviz DOT and plain JSON.

use std::fmt::Write;

use crowdgraph_core::graph::{EdgeKind, ScenarioSubgraph};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// One undirected graph per subgraph. Nodes are ranked by step; share
/// edges are dashed.
pub fn to_dot(sg: &ScenarioSubgraph, name: &str) -> String {
    let mut s = String::new();
    let id: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let _ = writeln!(s, "graph {id} {{");
    let _ = writeln!(s, "  label={};", quote(&sg.seed_sentence));
    let _ = writeln!(s, "  rankdir=LR;");
    let _ = writeln!(s, "  node [shape=box];");
    for (i, n) in sg.nodes.iter().enumerate() {
        let label = format!(
            "a{} t{}\\n{}\\n@ {}",
            n.agent_id,
            n.t,
            n.action.name(),
            n.location.name()
        );
        let _ = writeln!(
            s,
            "  n{i} [label=\"{label}\", agent={}, t={}];",
            n.agent_id, n.t
        );
    }
    for e in &sg.edges {
        let style = match e.kind {
            EdgeKind::Sequence => "kind=sequence",
            EdgeKind::Share => "kind=share, style=dashed",
        };
        let _ = writeln!(s, "  n{} -- n{} [{style}];", e.a, e.b);
    }
    s.push_str("}\n");
    s
}

pub fn to_json(sg: &ScenarioSubgraph) -> serde_json::Value {
    serde_json::to_value(sg).unwrap_or(serde_json::Value::Null)
}
