//! Deterministic scenario synthesizer that needs no network access.
//!
//! Keyword stems in the seed sentence select location templates and the
//! actions the sentence mentions; the rest of the layout is filled from a
//! per-domain bank. Every random choice comes from a generator seeded by
//! `(rng_seed, seed_sentence)`.

use super::{
    normalize_actions, normalize_movements, ActionChoice, LocationActions, LocationSpec, Movement,
    MovementRow, Scenario, ScenarioError, SCENARIO_SCHEMA_VERSION,
};
use crate::prelude::*;
use crate::rng::{mix, SimRng};
use crate::vocab::{ActionLabel, LocationCategory};

use ActionLabel as A;
use LocationCategory as L;

pub const MIN_LOCATIONS: usize = 3;
pub const MAX_LOCATIONS: usize = 6;
pub const ENV_SIZE_RANGE: (f64, f64) = (10.0, 200.0);
/// Per-axis draw when the caller does not fix the environment size.
pub const DEFAULT_ENV_DRAW: (f64, f64) = (20.0, 100.0);

/// Actions each location category affords, most characteristic first.
pub fn category_menu(c: LocationCategory) -> &'static [ActionLabel] {
    match c {
        L::Building => &[
            A::EnterExit,
            A::Wander,
            A::LookAt,
            A::Wait,
            A::Meet,
            A::LeaveGroup,
        ],
        L::Room => &[A::Sit, A::Talk, A::Read, A::Meet, A::TalkToPhone, A::Wait],
        L::Entrance => &[
            A::EnterExit,
            A::Wait,
            A::Meet,
            A::WaveAt,
            A::StandStill,
            A::Carry,
            A::LeaveGroup,
        ],
        L::Exhibit => &[A::LookAt, A::StandStill, A::Talk, A::Read, A::Wander],
        L::Furniture => &[
            A::Sit,
            A::Read,
            A::Talk,
            A::TalkToPhone,
            A::Wait,
            A::ObjectInteract,
        ],
        L::OutdoorArea => &[
            A::Wander,
            A::Talk,
            A::Meet,
            A::StandStill,
            A::WaveAt,
            A::Carry,
            A::Sit,
            A::TalkToPhone,
            A::LeaveGroup,
        ],
        L::Item => &[A::ObjectInteract, A::Carry, A::LookAt, A::StandStill],
        L::ServiceArea => &[
            A::Queue,
            A::Wait,
            A::ObjectInteract,
            A::Talk,
            A::Carry,
            A::StandStill,
        ],
    }
}

/// Word stems that signal an action.
const VERB_STEMS: &[(&str, ActionLabel)] = &[
    ("queue", A::Queue),
    ("line up", A::Queue),
    ("lining", A::Queue),
    ("sit", A::Sit),
    ("sat", A::Sit),
    ("seat", A::Sit),
    ("read", A::Read),
    ("newspaper", A::Read),
    ("study", A::Read),
    ("studi", A::Read),
    ("talk", A::Talk),
    ("chat", A::Talk),
    ("convers", A::Talk),
    ("discuss", A::Talk),
    ("phone", A::TalkToPhone),
    ("call", A::TalkToPhone),
    ("wait", A::Wait),
    ("wander", A::Wander),
    ("stroll", A::Wander),
    ("walk", A::Wander),
    ("roam", A::Wander),
    ("meet", A::Meet),
    ("gather", A::Meet),
    ("wave", A::WaveAt),
    ("greet", A::WaveAt),
    ("look", A::LookAt),
    ("watch", A::LookAt),
    ("brows", A::LookAt),
    ("admir", A::LookAt),
    ("check", A::LookAt),
    ("carry", A::Carry),
    ("carri", A::Carry),
    ("luggage", A::Carry),
    ("suitcase", A::Carry),
    ("enter", A::EnterExit),
    ("exit", A::EnterExit),
    ("arriv", A::EnterExit),
    ("depart", A::EnterExit),
    ("board", A::EnterExit),
    ("leave", A::EnterExit),
    ("stand", A::StandStill),
    ("buy", A::ObjectInteract),
    ("order", A::ObjectInteract),
    ("grab", A::ObjectInteract),
    ("print", A::ObjectInteract),
    ("use", A::ObjectInteract),
    ("using", A::ObjectInteract),
    ("split", A::LeaveGroup),
    ("separat", A::LeaveGroup),
];

struct LocationTemplate {
    stems: &'static [&'static str],
    name: &'static str,
    category: LocationCategory,
}

const fn t(
    stems: &'static [&'static str],
    name: &'static str,
    category: LocationCategory,
) -> LocationTemplate {
    LocationTemplate {
        stems,
        name,
        category,
    }
}

const KEYWORD_LOCATIONS: &[LocationTemplate] = &[
    t(
        &["coffee", "cafe", "café", "espresso"],
        "coffee shop",
        L::ServiceArea,
    ),
    t(&["ticket"], "ticket office", L::ServiceArea),
    t(
        &["kiosk", "shop", "store", "vendor", "snack"],
        "kiosk",
        L::ServiceArea,
    ),
    t(
        &["food", "cafeteria", "canteen", "lunch"],
        "food court",
        L::ServiceArea,
    ),
    t(&["bench"], "benches", L::Furniture),
    t(&["table", "desk"], "tables", L::Furniture),
    t(&["library"], "library", L::Building),
    t(&["lecture", "class", "seminar"], "lecture hall", L::Room),
    t(&["lounge", "waiting room"], "waiting lounge", L::Room),
    t(
        &["entrance", "gate", "door", "turnstile"],
        "main entrance",
        L::Entrance,
    ),
    t(&["platform", "track", "train"], "platform", L::OutdoorArea),
    t(
        &[
            "park",
            "lawn",
            "garden",
            "quad",
            "courtyard",
            "plaza",
            "square",
        ],
        "courtyard",
        L::OutdoorArea,
    ),
    t(
        &["outside", "outdoor", "forecourt"],
        "forecourt",
        L::OutdoorArea,
    ),
    t(
        &["station", "terminal", "concourse"],
        "station hall",
        L::Building,
    ),
    t(
        &["poster", "statue", "exhibit", "art", "notice"],
        "exhibition wall",
        L::Exhibit,
    ),
    t(
        &["timetable", "departure", "screen", "display", "board"],
        "departure board",
        L::Exhibit,
    ),
    t(
        &["vending", "machine", "atm", "locker"],
        "vending machine",
        L::Item,
    ),
    t(&["bike", "bicycle", "trolley"], "bike rack", L::Item),
];

const CAMPUS_FILL: &[(&str, LocationCategory)] = &[
    ("campus green", L::OutdoorArea),
    ("student center", L::Building),
    ("study room", L::Room),
    ("notice board", L::Exhibit),
    ("cafeteria counter", L::ServiceArea),
    ("picnic tables", L::Furniture),
    ("faculty entrance", L::Entrance),
    ("bike rack", L::Item),
];

const STATION_FILL: &[(&str, LocationCategory)] = &[
    ("concourse", L::Building),
    ("ticket machines", L::Item),
    ("waiting area", L::Room),
    ("departure board", L::Exhibit),
    ("station entrance", L::Entrance),
    ("newsstand", L::ServiceArea),
    ("seating row", L::Furniture),
    ("taxi stand", L::OutdoorArea),
];

const STATION_HINTS: &[&str] = &[
    "station",
    "train",
    "platform",
    "passenger",
    "commuter",
    "travel",
    "ticket",
    "rail",
];

/// Actions mentioned by the sentence, in order of first mention, without repeats.
pub fn seed_actions(sentence: &str) -> Vec<ActionLabel> {
    let lower = sentence.to_lowercase();
    let mut hits: Vec<(usize, ActionLabel)> = Vec::new();
    for &(stem, action) in VERB_STEMS {
        if let Some(pos) = find_word_start(&lower, stem) {
            hits.push((pos, action));
        }
    }
    hits.sort_by_key(|&(p, a)| (p, a.index()));
    let mut out = Vec::new();
    for (_, a) in hits {
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

/// Byte offset of the first occurrence of `stem` at the start of a word.
fn find_word_start(text: &str, stem: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = text[from..].find(stem) {
        let pos = from + rel;
        let at_boundary = pos == 0
            || !text[..pos]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        if at_boundary {
            return Some(pos);
        }
        from = pos + stem.len();
    }
    None
}

/// Builds a valid scenario from a seed sentence; a pure function of its inputs.
pub fn generate_offline(
    seed_sentence: &str,
    env_size: Option<[f64; 2]>,
    rng_seed: u64,
) -> Result<Scenario, ScenarioError> {
    let sentence = seed_sentence.trim();
    if sentence.is_empty() {
        return Err(ScenarioError::EmptySentence);
    }
    if let Some(sz) = env_size {
        let (lo, hi) = ENV_SIZE_RANGE;
        if !(lo..=hi).contains(&sz[0]) || !(lo..=hi).contains(&sz[1]) {
            return Err(ScenarioError::EnvSize(sz));
        }
    }
    let mut rng = SimRng::seed(mix(rng_seed, sentence));
    let size = env_size.unwrap_or_else(|| {
        let (lo, hi) = DEFAULT_ENV_DRAW;
        [rng.range(lo, hi), rng.range(lo, hi)]
    });
    let lower = sentence.to_lowercase();

    let mut chosen: Vec<(String, LocationCategory)> = Vec::new();
    let mut keyed = Vec::new();
    for tpl in KEYWORD_LOCATIONS {
        let pos = tpl
            .stems
            .iter()
            .filter_map(|s| find_word_start(&lower, s))
            .min();
        if let Some(p) = pos {
            keyed.push((p, tpl.name, tpl.category));
        }
    }
    keyed.sort_by_key(|k| k.0);
    for (_, name, cat) in keyed {
        if chosen.len() < MAX_LOCATIONS && !chosen.iter().any(|(n, _)| n == name) {
            chosen.push((name.to_string(), cat));
        }
    }
    let target = (MIN_LOCATIONS + rng.below(MAX_LOCATIONS - MIN_LOCATIONS + 1)).max(chosen.len());
    let station = STATION_HINTS.iter().any(|h| lower.contains(h));
    let mut fill: Vec<(&str, LocationCategory)> =
        if station { STATION_FILL } else { CAMPUS_FILL }.to_vec();
    rng.shuffle(&mut fill);
    for (name, cat) in fill {
        if chosen.len() >= target {
            break;
        }
        if !chosen.iter().any(|(n, _)| n == name) {
            chosen.push((name.to_string(), cat));
        }
    }

    let environment: Vec<LocationSpec> = chosen
        .iter()
        .map(|(name, cat)| {
            let max_scale = (size[0].min(size[1]) / 4.0).max(2.5);
            LocationSpec {
                name: name.clone(),
                category: *cat,
                position: [
                    round3(rng.range(0.0, size[0])),
                    round3(rng.range(0.0, size[1])),
                ],
                scale: [
                    round3(rng.range(2.0, max_scale)),
                    round3(rng.range(2.0, max_scale)),
                ],
                orientation: round3(rng.range(0.0, core::f64::consts::TAU)),
            }
        })
        .collect();

    let mentioned = seed_actions(sentence);
    let mut action_table = Vec::with_capacity(environment.len());
    for loc in &environment {
        let menu = category_menu(loc.category);
        let mut list: Vec<ActionLabel> = mentioned
            .iter()
            .copied()
            .filter(|a| menu.contains(a))
            .collect();
        list.truncate(super::MAX_ACTIONS_PER_LOCATION);
        let want = (3 + rng.below(3))
            .max(list.len())
            .min(super::MAX_ACTIONS_PER_LOCATION);
        let mut rest: Vec<ActionLabel> =
            menu.iter().copied().filter(|a| !list.contains(a)).collect();
        rng.shuffle(&mut rest);
        for a in rest {
            if list.len() >= want {
                break;
            }
            list.push(a);
        }
        let mut probs = sorted_gaps(&mut rng, list.len());
        probs.sort_by(|a, b| b.total_cmp(a));
        let actions = list
            .into_iter()
            .zip(probs)
            .map(|(action, probability)| ActionChoice {
                action,
                probability,
            })
            .collect();
        action_table.push(LocationActions {
            location: loc.name.clone(),
            actions,
        });
    }

    let mut movement_table = Vec::with_capacity(environment.len());
    for loc in &environment {
        let others: Vec<&LocationSpec> =
            environment.iter().filter(|o| o.name != loc.name).collect();
        let probs = sorted_gaps(&mut rng, others.len());
        let targets = others
            .iter()
            .zip(probs)
            .map(|(o, probability)| Movement {
                target: o.name.clone(),
                probability,
            })
            .collect();
        movement_table.push(MovementRow {
            location: loc.name.clone(),
            targets,
        });
    }

    let names: Vec<&str> = environment.iter().map(|l| l.name.as_str()).collect();
    let verbs: Vec<&str> = mentioned.iter().map(|a| a.name()).collect();
    let description = format!(
        "{} The scene covers roughly {:.0} by {:.0} meters and includes {}. {}",
        ensure_period(sentence),
        size[0],
        size[1],
        names.join(", "),
        if verbs.is_empty() {
            String::from("People move between these places at their own pace.")
        } else {
            format!(
                "Most people {} while others move between these places.",
                verbs.join(", ")
            )
        }
    );

    let mut scenario = Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed_sentence: sentence.to_string(),
        description,
        environment,
        action_table,
        movement_table,
    };
    normalize_actions(&mut scenario);
    normalize_movements(&mut scenario);
    Ok(scenario)
}

/// Gaps between sorted uniform cut points: a flat Dirichlet draw over `k` parts.
fn sorted_gaps(rng: &mut SimRng, k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.uniform()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(k);
    let mut prev = 0.0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    // keep every option reachable
    let floor = 0.02;
    let sum: f64 = out.iter().map(|p| p + floor).sum();
    out.iter().map(|p| (p + floor) / sum).collect()
}

fn round3(x: f64) -> f64 {
    crate::math::floor(x * 1000.0 + 0.5) / 1000.0
}

fn ensure_period(s: &str) -> String {
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}
