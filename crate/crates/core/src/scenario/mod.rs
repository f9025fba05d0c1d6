//! Scenario data model: environment layout, per-location action menus and
//! location-to-location movement probabilities, plus validation.
//!
//! Scenarios come either from the four-query language-model pipeline (in
//! the `crowdgraph` crate, which owns the network client) or from the
//! deterministic [`offline`] synthesizer.

pub mod offline;
pub mod paraphrase;

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::prelude::*;
use crate::vocab::{ActionLabel, LocationCategory};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const MAX_ACTIONS_PER_LOCATION: usize = 5;
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationSpec {
    pub name: String,
    pub category: LocationCategory,
    /// Meters.
    pub position: [f64; 2],
    /// Meters, both components positive.
    pub scale: [f64; 2],
    /// Radians.
    pub orientation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChoice {
    pub action: ActionLabel,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationActions {
    pub location: String,
    pub actions: Vec<ActionChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub target: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementRow {
    pub location: String,
    pub targets: Vec<Movement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub seed_sentence: String,
    pub description: String,
    pub environment: Vec<LocationSpec>,
    pub action_table: Vec<LocationActions>,
    pub movement_table: Vec<MovementRow>,
}

fn schema_version() -> u32 {
    SCENARIO_SCHEMA_VERSION
}

impl Scenario {
    pub fn location_index(&self, name: &str) -> Option<usize> {
        self.environment.iter().position(|l| l.name == name)
    }

    pub fn actions_at(&self, name: &str) -> Option<&[ActionChoice]> {
        self.action_table
            .iter()
            .find(|a| a.location == name)
            .map(|a| a.actions.as_slice())
    }

    pub fn movement_from(&self, name: &str) -> Option<&[Movement]> {
        self.movement_table
            .iter()
            .find(|m| m.location == name)
            .map(|m| m.targets.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyEnvironment,
    DuplicateName,
    NonPositiveScale,
    MissingActions,
    ActionCount(usize),
    ActionSum,
    NegativeProbability,
    UnknownLocation,
    MissingMovement,
    MovementSum,
    SelfTransition,
}

/// One failed invariant, naming the location and field it concerns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub field: &'static str,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}: {:?}", self.location, self.field, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("seed sentence is empty")]
    EmptySentence,
    #[error("environment size {0:?} outside [10, 200] m")]
    EnvSize([f64; 2]),
    #[error("scenario failed validation: {0:?}")]
    Invalid(Vec<String>),
    #[error("language model query {query} failed: {message}")]
    Llm {
        query: &'static str,
        message: String,
        raw: String,
    },
}

/// Every invariant of a [`Scenario`]; an empty result means it is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |location: &str, field: &'static str, kind: ViolationKind| {
        out.push(Violation {
            location: location.to_string(),
            field,
            kind,
        });
    };
    if s.environment.is_empty() {
        push("", "environment", ViolationKind::EmptyEnvironment);
    }
    let names: BTreeSet<&str> = s.environment.iter().map(|l| l.name.as_str()).collect();
    let mut seen = BTreeSet::new();
    for l in &s.environment {
        if !seen.insert(l.name.as_str()) {
            push(&l.name, "name", ViolationKind::DuplicateName);
        }
        if !(l.scale[0] > 0.0 && l.scale[1] > 0.0) {
            push(&l.name, "scale", ViolationKind::NonPositiveScale);
        }
    }
    for l in &s.environment {
        match s.actions_at(&l.name) {
            None => push(&l.name, "action_table", ViolationKind::MissingActions),
            Some(acts) => {
                if acts.is_empty() || acts.len() > MAX_ACTIONS_PER_LOCATION {
                    push(
                        &l.name,
                        "action_table",
                        ViolationKind::ActionCount(acts.len()),
                    );
                }
                if acts
                    .iter()
                    .any(|a| a.probability < 0.0 || !a.probability.is_finite())
                {
                    push(&l.name, "action_table", ViolationKind::NegativeProbability);
                }
                let sum: f64 = acts.iter().map(|a| a.probability).sum();
                if !acts.is_empty() && (sum - 1.0).abs() > PROB_TOLERANCE {
                    push(&l.name, "action_table", ViolationKind::ActionSum);
                }
            }
        }
    }
    for a in &s.action_table {
        if !names.contains(a.location.as_str()) {
            push(&a.location, "action_table", ViolationKind::UnknownLocation);
        }
    }
    let multi = s.environment.len() > 1;
    for l in &s.environment {
        match s.movement_from(&l.name) {
            None if multi => push(&l.name, "movement_table", ViolationKind::MissingMovement),
            None => {}
            Some(row) => {
                for m in row {
                    if m.target == l.name {
                        push(&l.name, "movement_table", ViolationKind::SelfTransition);
                    } else if !names.contains(m.target.as_str()) {
                        push(&l.name, "movement_table", ViolationKind::UnknownLocation);
                    }
                    if m.probability < 0.0 || !m.probability.is_finite() {
                        push(
                            &l.name,
                            "movement_table",
                            ViolationKind::NegativeProbability,
                        );
                    }
                }
                let sum: f64 = row.iter().map(|m| m.probability).sum();
                if (multi || !row.is_empty()) && (sum - 1.0).abs() > PROB_TOLERANCE {
                    push(&l.name, "movement_table", ViolationKind::MovementSum);
                }
            }
        }
    }
    for m in &s.movement_table {
        if !names.contains(m.location.as_str()) {
            push(
                &m.location,
                "movement_table",
                ViolationKind::UnknownLocation,
            );
        }
    }
    out
}

/// Drops self-transitions and unknown targets, then rescales each row to sum to one.
pub fn normalize_movements(s: &mut Scenario) {
    let names: BTreeSet<String> = s.environment.iter().map(|l| l.name.clone()).collect();
    for row in &mut s.movement_table {
        let from = row.location.clone();
        row.targets
            .retain(|m| m.target != from && names.contains(&m.target) && m.probability >= 0.0);
        let sum: f64 = row.targets.iter().map(|m| m.probability).sum();
        if sum > 0.0 {
            for m in &mut row.targets {
                m.probability /= sum;
            }
        } else if !row.targets.is_empty() {
            let u = 1.0 / row.targets.len() as f64;
            for m in &mut row.targets {
                m.probability = u;
            }
        }
    }
}

/// Keeps the five most probable actions per location and rescales to sum to one.
pub fn normalize_actions(s: &mut Scenario) {
    for la in &mut s.action_table {
        la.actions
            .retain(|a| a.probability >= 0.0 && a.probability.is_finite());
        la.actions
            .sort_by(|a, b| b.probability.total_cmp(&a.probability));
        la.actions.truncate(MAX_ACTIONS_PER_LOCATION);
        let sum: f64 = la.actions.iter().map(|a| a.probability).sum();
        if sum > 0.0 {
            for a in &mut la.actions {
                a.probability /= sum;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_location_scenario(probs: &[f64]) -> Scenario {
        let loc = |name: &str| LocationSpec {
            name: name.to_string(),
            category: LocationCategory::Room,
            position: [1.0, 1.0],
            scale: [2.0, 2.0],
            orientation: 0.0,
        };
        let acts = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| ActionChoice {
                action: ActionLabel::ALL[i],
                probability: p,
            })
            .collect();
        Scenario {
            schema_version: 1,
            seed_sentence: "test".into(),
            description: String::new(),
            environment: vec![loc("a"), loc("b")],
            action_table: vec![
                LocationActions {
                    location: "a".into(),
                    actions: acts,
                },
                LocationActions {
                    location: "b".into(),
                    actions: vec![ActionChoice {
                        action: ActionLabel::Sit,
                        probability: 1.0,
                    }],
                },
            ],
            movement_table: vec![
                MovementRow {
                    location: "a".into(),
                    targets: vec![Movement {
                        target: "b".into(),
                        probability: 1.0,
                    }],
                },
                MovementRow {
                    location: "b".into(),
                    targets: vec![Movement {
                        target: "a".into(),
                        probability: 1.0,
                    }],
                },
            ],
        }
    }

    #[test]
    fn balanced_pair_is_valid() {
        assert!(validate_scenario(&two_location_scenario(&[0.5, 0.5])).is_empty());
    }

    #[test]
    fn over_unit_sum_is_one_violation() {
        let v = validate_scenario(&two_location_scenario(&[0.6, 0.6]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::ActionSum);
        assert_eq!(v[0].location, "a");
    }

    #[test]
    fn six_actions_is_cardinality_violation() {
        let v = validate_scenario(&two_location_scenario(&[1.0 / 6.0; 6]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::ActionCount(6));
    }

    #[test]
    fn self_transition_flagged_and_normalized_away() {
        let mut s = two_location_scenario(&[1.0]);
        s.movement_table[0].targets.push(Movement {
            target: "a".into(),
            probability: 0.5,
        });
        let v = validate_scenario(&s);
        assert!(v.iter().any(|x| x.kind == ViolationKind::SelfTransition));
        normalize_movements(&mut s);
        assert!(validate_scenario(&s).is_empty());
    }

    #[test]
    fn duplicate_names_and_bad_scale() {
        let mut s = two_location_scenario(&[1.0]);
        s.environment[1].name = "a".into();
        s.environment[0].scale = [0.0, 1.0];
        let kinds: Vec<_> = validate_scenario(&s).into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::DuplicateName));
        assert!(kinds.contains(&ViolationKind::NonPositiveScale));
    }
}
