//! Sentence conditions: verb emphasis followed by the hashing embedder or
//! an external embedding endpoint.

use serde_json::{json, Value};

use crowdgraph_core::config::{EmbeddingProvider, RunConfig};
use crowdgraph_core::textenc::{embed_hashing, Lexicon, EMBED_DIM};

use crate::error::{CliError, Result};
use crate::llm::{HttpTransport, Transport};

pub const EMB_URL_VAR: &str = "CROWDGRAPH_EMB_URL";

/// Accepts `{"embedding": [...]}` or the `{"data": [{"embedding": [...]}]}` shape.
pub fn parse_embedding(raw: &str) -> Result<Vec<f64>, String> {
    let v: Value =
        serde_json::from_str(raw).map_err(|e| format!("embedding response is not JSON: {e}"))?;
    let arr = v
        .get("embedding")
        .or_else(|| v.pointer("/data/0/embedding"))
        .and_then(Value::as_array)
        .ok_or("embedding response has no vector")?;
    let out: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite()))
        .collect::<Option<_>>()
        .ok_or("non-numeric embedding entry")?;
    if out.len() != EMBED_DIM {
        return Err(format!(
            "embedding has dimension {}, expected {EMBED_DIM}",
            out.len()
        ));
    }
    Ok(out)
}

pub struct TextEncoder<'t> {
    lexicon: Lexicon,
    external: Option<(&'t dyn Transport, String)>,
    /// External requests that failed and were answered by the hashing embedder.
    pub fallbacks: usize,
}

impl<'t> TextEncoder<'t> {
    pub fn hashing(lexicon: Lexicon) -> Self {
        Self {
            lexicon,
            external: None,
            fallbacks: 0,
        }
    }

    pub fn external(
        lexicon: Lexicon,
        transport: &'t dyn Transport,
        url: impl Into<String>,
    ) -> Self {
        Self {
            lexicon,
            external: Some((transport, url.into())),
            fallbacks: 0,
        }
    }

    /// Condition vector for a raw sentence.
    pub fn embed(&mut self, sentence: &str) -> Vec<f64> {
        let text = self.lexicon.emphasize(sentence);
        if let Some((t, url)) = &self.external {
            match t
                .post_json(url, None, &json!({ "input": text }))
                .and_then(|r| parse_embedding(&r))
            {
                Ok(v) => return v,
                Err(e) => {
                    log::warn!("external embedding failed, using hashing: {e}");
                    self.fallbacks += 1;
                }
            }
        }
        embed_hashing(&text)
    }
}

pub fn lexicon_for(cfg: &RunConfig) -> Result<Lexicon> {
    match &cfg.text.lexicon {
        None => Ok(Lexicon::builtin()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("lexicon {p}: {e}")))?;
            let lex = Lexicon::parse(&text);
            if lex.is_empty() {
                return Err(CliError::Data(format!("lexicon {p} lists no verbs")));
            }
            Ok(lex)
        }
    }
}

/// The encoder a config asks for. `http` is used only for the external provider.
pub fn encoder_for<'t>(cfg: &RunConfig, http: &'t HttpTransport) -> Result<TextEncoder<'t>> {
    let lex = lexicon_for(cfg)?;
    Ok(match cfg.text.provider {
        EmbeddingProvider::Hashing => TextEncoder::hashing(lex),
        EmbeddingProvider::External => {
            let url = std::env::var(EMB_URL_VAR).map_err(|_| {
                CliError::Usage(format!(
                    "text.provider is external but {EMB_URL_VAR} is not set"
                ))
            })?;
            TextEncoder::external(lex, http, url)
        }
    })
}
