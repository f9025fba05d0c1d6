//! Scenario generation through four chained language-model queries, plus
//! paraphrase requests. Network access goes through [`Transport`] so tests
//! can script the replies.

use std::cell::RefCell;
use std::collections::{BTreeSet, VecDeque};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crowdgraph_core::config::LlmConfig;
use crowdgraph_core::scenario::paraphrase::paraphrase_offline;
use crowdgraph_core::scenario::{
    normalize_actions, normalize_movements, validate_scenario, ActionChoice, LocationActions,
    LocationSpec, Movement, MovementRow, Scenario, ScenarioError, MAX_ACTIONS_PER_LOCATION,
    SCENARIO_SCHEMA_VERSION,
};
use crowdgraph_core::{ActionLabel, LocationCategory};

pub const URL_VAR: &str = "CROWDGRAPH_LLM_URL";
pub const KEY_VAR: &str = "CROWDGRAPH_LLM_KEY";

/// Posts a JSON body and returns the raw response text.
pub trait Transport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<String, String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout_secs: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs)))
            .build();
        Self {
            agent: agent.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<String, String> {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(k) = bearer {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

/// Replays queued replies and records every request body.
#[derive(Default)]
pub struct MockTransport {
    replies: RefCell<VecDeque<Result<String, String>>>,
    pub requests: RefCell<Vec<Value>>,
}

impl MockTransport {
    pub fn new(replies: impl IntoIterator<Item = Result<String, String>>) -> Self {
        Self {
            replies: RefCell::new(replies.into_iter().collect()),
            requests: RefCell::default(),
        }
    }

    /// Wraps `content` the way a chat-completions endpoint would.
    pub fn chat_reply(content: &str) -> Result<String, String> {
        Ok(
            json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
                .to_string(),
        )
    }
}

impl Transport for MockTransport {
    fn post_json(&self, _url: &str, _bearer: Option<&str>, body: &Value) -> Result<String, String> {
        self.requests.borrow_mut().push(body.clone());
        self.replies
            .borrow_mut()
            .pop_front()
            .unwrap_or_else(|| Err("mock transport has no more replies".into()))
    }
}

/// Chat-completions client. Each query asks for a JSON object and is
/// retried on transport or parse failures.
pub struct LlmClient<'t> {
    transport: &'t dyn Transport,
    url: String,
    key: Option<String>,
    cfg: LlmConfig,
}

#[derive(Deserialize)]
struct Q1 {
    description: String,
}

#[derive(Deserialize)]
struct Q2 {
    locations: Vec<Q2Location>,
}

#[derive(Deserialize)]
struct Q2Location {
    name: String,
    category: String,
    position: [f64; 2],
    scale: [f64; 2],
    #[serde(default)]
    orientation: f64,
}

#[derive(Deserialize)]
struct Q3 {
    actions: Vec<Q3Row>,
}

#[derive(Deserialize)]
struct Q3Row {
    location: String,
    actions: Vec<Q3Action>,
}

#[derive(Deserialize)]
struct Q3Action {
    action: String,
    probability: f64,
}

#[derive(Deserialize)]
struct Q4 {
    movements: Vec<Q4Row>,
}

#[derive(Deserialize)]
struct Q4Row {
    location: String,
    targets: Vec<Q4Target>,
}

#[derive(Deserialize)]
struct Q4Target {
    target: String,
    probability: f64,
}

#[derive(Deserialize)]
struct Paraphrases {
    paraphrases: Vec<String>,
}

fn vocabulary<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str) -> String {
    all.iter()
        .map(|&x| format!("\"{}\"", name(x)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Strips a Markdown code fence some models wrap JSON in.
fn unfence(s: &str) -> &str {
    let t = s.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
            rest.strip_suffix("```").unwrap_or(rest).trim()
        }
        None => t,
    }
}

impl<'t> LlmClient<'t> {
    pub fn new(
        transport: &'t dyn Transport,
        url: impl Into<String>,
        key: Option<String>,
        cfg: LlmConfig,
    ) -> Self {
        Self {
            transport,
            url: url.into(),
            key,
            cfg,
        }
    }

    /// Endpoint and key from `CROWDGRAPH_LLM_URL` / `CROWDGRAPH_LLM_KEY`.
    pub fn from_env(transport: &'t dyn Transport, cfg: LlmConfig) -> Result<Self, String> {
        let url = std::env::var(URL_VAR).map_err(|_| format!("{URL_VAR} is not set"))?;
        Ok(Self::new(transport, url, std::env::var(KEY_VAR).ok(), cfg))
    }

    fn complete(&self, prompt: &str) -> Result<String, String> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "response_format": { "type": "json_object" },
            "messages": [
                { "role": "system", "content": "You design crowd scenarios. Reply with one JSON object only." },
                { "role": "user", "content": prompt },
            ],
        });
        let raw = self
            .transport
            .post_json(&self.url, self.key.as_deref(), &body)?;
        let v: Value = serde_json::from_str(&raw)
            .map_err(|e| format!("response is not JSON: {e}; body: {raw}"))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| format!("response has no message content: {raw}"))
    }

    /// One query with up to `max_attempts` tries; `check` may reject a
    /// well-formed answer, which also triggers a retry.
    fn query<T: DeserializeOwned, R>(
        &self,
        name: &'static str,
        prompt: &str,
        mut check: impl FnMut(T) -> Result<R, String>,
    ) -> Result<R, ScenarioError> {
        let mut last = (String::new(), String::new());
        for attempt in 1..=self.cfg.max_attempts.max(1) {
            let raw = match self.complete(prompt) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{name} attempt {attempt}: {e}");
                    last = (e, String::new());
                    continue;
                }
            };
            match serde_json::from_str::<T>(unfence(&raw))
                .map_err(|e| e.to_string())
                .and_then(&mut check)
            {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("{name} attempt {attempt}: {e}");
                    last = (e, raw);
                }
            }
        }
        Err(ScenarioError::Llm {
            query: name,
            message: last.0,
            raw: last.1,
        })
    }

    /// Runs the four queries in order, each prompt carrying earlier answers.
    pub fn generate_scenario(
        &self,
        sentence: &str,
        env_size: [f64; 2],
    ) -> Result<Scenario, ScenarioError> {
        if sentence.trim().is_empty() {
            return Err(ScenarioError::EmptySentence);
        }
        let [w, h] = env_size;
        let description = self.query("Q1", &format!(
            "Describe in one paragraph a crowd scenario for: \"{sentence}\". Say who is there, what they do and where. \
             Reply as {{\"description\": \"...\"}}."
        ), |q: Q1| if q.description.trim().is_empty() { Err("empty description".into()) } else { Ok(q.description) })?;

        let categories = vocabulary(&LocationCategory::ALL, LocationCategory::name);
        let environment = self.query("Q2", &format!(
            "Scenario: {description}\nThe environment is {w:.0} m by {h:.0} m. List 3 to 6 locations and areas relevant \
             to it. Each has a unique name, a category from [{categories}], a position [x, y] and scale [w, h] in meters \
             inside the environment, and an orientation in radians. Reply as {{\"locations\": [{{\"name\": ..., \
             \"category\": ..., \"position\": [x, y], \"scale\": [w, h], \"orientation\": 0.0}}]}}."
        ), |q: Q2| {
            let mut seen = BTreeSet::new();
            q.locations
                .into_iter()
                .map(|l| {
                    let category = LocationCategory::parse(&l.category).ok_or(format!("unknown category {:?}", l.category))?;
                    if !seen.insert(l.name.clone()) {
                        return Err(format!("duplicate location {:?}", l.name));
                    }
                    Ok(LocationSpec { name: l.name, category, position: l.position, scale: l.scale, orientation: l.orientation })
                })
                .collect::<Result<Vec<_>, String>>()
                .and_then(|v| if v.is_empty() { Err("no locations".into()) } else { Ok(v) })
        })?;
        let names: Vec<String> = environment.iter().map(|l| l.name.clone()).collect();
        let layout = serde_json::to_string(&environment).unwrap_or_default();

        let actions = vocabulary(&ActionLabel::ALL, ActionLabel::name);
        let action_table = self.query("Q3", &format!(
            "Scenario: {description}\nLocations: {layout}\nFor every location, select the top-5 most likely actions of \
             people there from [{actions}] and give each a probability so that they sum to 1 per location. Reply as \
             {{\"actions\": [{{\"location\": name, \"actions\": [{{\"action\": ..., \"probability\": p}}]}}]}}."
        ), |q: Q3| {
            let rows = q
                .actions
                .into_iter()
                .map(|r| {
                    if !names.contains(&r.location) {
                        return Err(format!("unknown location {:?}", r.location));
                    }
                    let mut acts = r
                        .actions
                        .into_iter()
                        .map(|a| Ok(ActionChoice {
                            action: ActionLabel::parse(&a.action).ok_or(format!("unknown action {:?}", a.action))?,
                            probability: a.probability,
                        }))
                        .collect::<Result<Vec<_>, String>>()?;
                    acts.sort_by(|a, b| b.probability.total_cmp(&a.probability));
                    acts.truncate(MAX_ACTIONS_PER_LOCATION);
                    Ok(LocationActions { location: r.location, actions: acts })
                })
                .collect::<Result<Vec<_>, String>>()?;
            match names.iter().find(|n| !rows.iter().any(|r| &r.location == *n)) {
                Some(n) => Err(format!("no actions for {n:?}")),
                None => Ok(rows),
            }
        })?;

        let movement_table = if names.len() == 1 {
            vec![MovementRow {
                location: names[0].clone(),
                targets: Vec::new(),
            }]
        } else {
            self.query("Q4", &format!(
                "Scenario: {description}\nLocations: {layout}\nFor every location, assign the probability that a person \
                 there moves next to each other location; probabilities from one location sum to 1 and exclude the \
                 location itself. Reply as {{\"movements\": [{{\"location\": name, \"targets\": [{{\"target\": name, \
                 \"probability\": p}}]}}]}}."
            ), |q: Q4| {
                let rows = q
                    .movements
                    .into_iter()
                    .map(|r| {
                        let targets = r
                            .targets
                            .into_iter()
                            .map(|t| if names.contains(&t.target) {
                                Ok(Movement { target: t.target, probability: t.probability })
                            } else {
                                Err(format!("unknown target {:?}", t.target))
                            })
                            .collect::<Result<Vec<_>, String>>()?;
                        Ok(MovementRow { location: r.location, targets })
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                match names.iter().find(|n| !rows.iter().any(|r| &r.location == *n)) {
                    Some(n) => Err(format!("no movement row for {n:?}")),
                    None => Ok(rows),
                }
            })?
        };

        let mut s = Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            seed_sentence: sentence.to_string(),
            description,
            environment,
            action_table,
            movement_table,
        };
        normalize_actions(&mut s);
        normalize_movements(&mut s);
        let violations = validate_scenario(&s);
        if violations.is_empty() {
            Ok(s)
        } else {
            Err(ScenarioError::Invalid(
                violations.iter().map(ToString::to_string).collect(),
            ))
        }
    }

    /// `n` distinct rewordings in one request.
    pub fn paraphrases(&self, sentence: &str, n: usize) -> Result<Vec<String>, ScenarioError> {
        self.query(
            "paraphrase",
            &format!(
            "Write {n} distinct paraphrases of: \"{sentence}\". Keep the meaning and the actions. \
             Reply as {{\"paraphrases\": [\"...\"]}}."
        ),
            |p: Paraphrases| {
                let mut seen = BTreeSet::new();
                let list: Vec<String> = p
                    .paraphrases
                    .into_iter()
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty() && s != sentence && seen.insert(s.clone()))
                    .collect();
                if list.len() < n {
                    Err(format!("{} distinct paraphrases, wanted {n}", list.len()))
                } else {
                    Ok(list.into_iter().take(n).collect())
                }
            },
        )
    }
}

/// Language-model paraphrases, or the offline ones when the client is
/// absent or fails. The flag is true when the fallback was used.
pub fn paraphrases_or_offline(
    client: Option<&LlmClient<'_>>,
    sentence: &str,
    n: usize,
    seed: u64,
) -> (Vec<String>, bool) {
    if let Some(c) = client {
        match c.paraphrases(sentence, n) {
            Ok(v) => return (v, false),
            Err(e) => {
                log::warn!("paraphrasing {sentence:?} fell back to offline mode: {e}");
                return (paraphrase_offline(sentence, n, seed), true);
            }
        }
    }
    (paraphrase_offline(sentence, n, seed), false)
}
