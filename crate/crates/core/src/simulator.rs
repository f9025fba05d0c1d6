//! Action/location simulation over a scenario.
//!
//! Agents are spawned alone or in small groups. Each unit repeatedly picks
//! an action from its current location's menu, spends that action's
//! duration on it, then picks the next location from the movement row.
//! Both choices are flattened by a temperature that rises linearly to 1.
//! Units advance on a shared event queue ordered by completion time.

use alloc::collections::BinaryHeap;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::prelude::*;
use crate::rng::SimRng;
use crate::scenario::{validate_scenario, Scenario};
use crate::vocab::{ActionLabel, LocationCategory};

pub const MAX_SEQUENCE_LENGTH: usize = 10;
pub const MAX_GROUP_AGENTS: usize = 6;
const PROB_TOLERANCE: f64 = 1e-6;
/// Spawns happen within this leading fraction of the simulated period.
const SPAWN_WINDOW: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(&'static str),
    #[error("scenario has no locations")]
    EmptyEnvironment,
    #[error("scenario failed validation: {0:?}")]
    InvalidScenario(Vec<String>),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Seconds spent on each action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionDurations(pub BTreeMap<ActionLabel, f64>);

impl Default for ActionDurations {
    fn default() -> Self {
        use ActionLabel as A;
        let table = [
            (A::StandStill, 10.0),
            (A::Sit, 40.0),
            (A::Wait, 20.0),
            (A::Wander, 15.0),
            (A::Queue, 30.0),
            (A::ObjectInteract, 15.0),
            (A::Talk, 20.0),
            (A::Meet, 25.0),
            (A::EnterExit, 8.0),
            (A::LeaveGroup, 5.0),
            (A::TalkToPhone, 25.0),
            (A::WaveAt, 5.0),
            (A::Read, 35.0),
            (A::LookAt, 10.0),
            (A::Carry, 15.0),
        ];
        Self(table.into_iter().collect())
    }
}

impl ActionDurations {
    /// Falls back to ten seconds for actions missing from the table.
    pub fn get(&self, a: ActionLabel) -> f64 {
        self.0.get(&a).copied().unwrap_or(10.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub agent_count: usize,
    /// Probabilities of spawning a unit of size 1, 2 and 3.
    pub group_size_probs: [f64; 3],
    /// Seconds.
    pub duration: f64,
    pub temp_start: f64,
    pub rng_seed: u64,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    #[serde(default = "default_max_group")]
    pub max_group_agents: usize,
    #[serde(default)]
    pub durations: ActionDurations,
}

fn default_max_len() -> usize {
    MAX_SEQUENCE_LENGTH
}

fn default_max_group() -> usize {
    MAX_GROUP_AGENTS
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            agent_count: 10,
            group_size_probs: [0.4, 0.35, 0.25],
            duration: 150.0,
            temp_start: 0.8,
            rng_seed: 0,
            max_sequence_length: MAX_SEQUENCE_LENGTH,
            max_group_agents: MAX_GROUP_AGENTS,
            durations: ActionDurations::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let sum: f64 = self.group_size_probs.iter().sum();
        if self
            .group_size_probs
            .iter()
            .any(|p| *p < 0.0 || !p.is_finite())
            || (sum - 1.0).abs() > PROB_TOLERANCE
        {
            return bad(format!(
                "group_size_probs {:?} must be a probability vector",
                self.group_size_probs
            ));
        }
        if !(0.7..=1.0).contains(&self.temp_start) {
            return bad(format!("temp_start {} outside [0.7, 1]", self.temp_start));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if self.max_sequence_length == 0 || self.max_sequence_length > MAX_SEQUENCE_LENGTH {
            return bad(format!(
                "max_sequence_length {} outside [1, {MAX_SEQUENCE_LENGTH}]",
                self.max_sequence_length
            ));
        }
        if self.durations.0.values().any(|d| !(*d > 0.0)) {
            return bad("action durations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub t: usize,
    pub action: ActionLabel,
    pub location_category: LocationCategory,
    pub location_name: String,
    pub partners: BTreeSet<usize>,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: usize,
    pub entries: Vec<RecordEntry>,
}

/// `p_i^temp`, renormalized. Exponents below one flatten the distribution.
pub fn temper(probs: &[f64], temp: f64) -> Result<Vec<f64>, SimError> {
    if probs.is_empty() {
        return Err(SimError::InvalidProbabilities("empty"));
    }
    if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(SimError::InvalidProbabilities(
            "negative or non-finite entry",
        ));
    }
    if !(temp > 0.0 && temp <= 1.0) {
        return Err(SimError::InvalidProbabilities("temperature outside (0, 1]"));
    }
    let powered: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { math::powf(p, temp) } else { 0.0 })
        .collect();
    let sum: f64 = powered.iter().sum();
    if sum <= 0.0 {
        return Err(SimError::InvalidProbabilities("all entries are zero"));
    }
    Ok(powered.into_iter().map(|p| p / sum).collect())
}

/// Inverse-CDF draw of one index.
pub fn sample_categorical(probs: &[f64], rng: &mut SimRng) -> Result<usize, SimError> {
    if probs.is_empty() {
        return Err(SimError::InvalidProbabilities("empty"));
    }
    if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(SimError::InvalidProbabilities(
            "negative or non-finite entry",
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(SimError::InvalidProbabilities("entries do not sum to one"));
    }
    let u = rng.uniform() * sum;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// A group (or single agent) acting together.
struct Unit {
    members: Vec<usize>,
    location: usize,
}

#[derive(PartialEq)]
struct Event {
    time: f64,
    unit: usize,
}

impl Eq for Event {}

impl Ord for Event {
    // min-heap on time, ties broken by unit id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.unit.cmp(&self.unit))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Temperature at simulated time `now`: linear from `start` to 1 over `duration`.
pub fn temperature_at(start: f64, now: f64, duration: f64) -> f64 {
    let frac = (now / duration).clamp(0.0, 1.0);
    start + (1.0 - start) * frac
}

pub fn run_simulation(s: &Scenario, cfg: &SimulationConfig) -> Result<Vec<AgentRecord>, SimError> {
    if s.environment.is_empty() {
        return Err(SimError::EmptyEnvironment);
    }
    let violations = validate_scenario(s);
    if !violations.is_empty() {
        return Err(SimError::InvalidScenario(
            violations.iter().map(|v| v.to_string()).collect(),
        ));
    }
    cfg.validate()?;
    let mut rng = SimRng::seed(cfg.rng_seed);

    let action_menus: Vec<(Vec<ActionLabel>, Vec<f64>)> = s
        .environment
        .iter()
        .map(|l| {
            let acts = s.actions_at(&l.name).unwrap_or(&[]);
            (
                acts.iter().map(|a| a.action).collect(),
                acts.iter().map(|a| a.probability).collect(),
            )
        })
        .collect();
    let movement_rows: Vec<(Vec<usize>, Vec<f64>)> = s
        .environment
        .iter()
        .map(|l| {
            let row = s.movement_from(&l.name).unwrap_or(&[]);
            let targets = row
                .iter()
                .filter_map(|m| s.location_index(&m.target))
                .collect();
            (targets, row.iter().map(|m| m.probability).collect())
        })
        .collect();

    let mut units: Vec<Unit> = Vec::new();
    let mut queue = BinaryHeap::new();
    let mut spawned = 0;
    while spawned < cfg.agent_count {
        let size = 1 + sample_categorical(&cfg.group_size_probs, &mut rng)?;
        let size = size.min(cfg.agent_count - spawned);
        let members: Vec<usize> = (spawned..spawned + size).collect();
        spawned += size;
        let location = rng.below(s.environment.len());
        let time = rng.uniform() * cfg.duration * SPAWN_WINDOW;
        queue.push(Event {
            time,
            unit: units.len(),
        });
        units.push(Unit { members, location });
    }

    let mut records: Vec<AgentRecord> = (0..cfg.agent_count)
        .map(|agent_id| AgentRecord {
            agent_id,
            entries: Vec::new(),
        })
        .collect();

    while let Some(Event { time, unit }) = queue.pop() {
        if time >= cfg.duration {
            continue;
        }
        let members = units[unit].members.clone();
        let t = records[members[0]].entries.len();
        if t >= cfg.max_sequence_length {
            continue;
        }
        let temp = temperature_at(cfg.temp_start, time, cfg.duration);
        let loc = units[unit].location;
        let (acts, probs) = &action_menus[loc];
        let action = acts[sample_categorical(&temper(probs, temp)?, &mut rng)?];
        let duration = cfg.durations.get(action);
        let spec = &s.environment[loc];
        for &m in &members {
            let partners = members.iter().copied().filter(|&o| o != m).collect();
            records[m].entries.push(RecordEntry {
                t,
                action,
                location_category: spec.category,
                location_name: spec.name.clone(),
                partners,
                duration,
            });
        }
        let (targets, mprobs) = &movement_rows[loc];
        let next_loc = if targets.is_empty() {
            loc
        } else {
            targets[sample_categorical(&temper(mprobs, temp)?, &mut rng)?]
        };
        let next_time = time + duration;
        if action == ActionLabel::LeaveGroup && members.len() > 1 {
            units[unit].members = vec![members[0]];
            units[unit].location = next_loc;
            queue.push(Event {
                time: next_time,
                unit,
            });
            for &m in &members[1..] {
                let id = units.len();
                units.push(Unit {
                    members: vec![m],
                    location: next_loc,
                });
                queue.push(Event {
                    time: next_time,
                    unit: id,
                });
            }
        } else {
            units[unit].location = next_loc;
            queue.push(Event {
                time: next_time,
                unit,
            });
        }
    }
    Ok(records)
}

/// Checks sequence numbering, length cap and partner symmetry.
pub fn check_records(records: &[AgentRecord], max_len: usize) -> Result<(), String> {
    let by_id: BTreeMap<usize, &AgentRecord> = records.iter().map(|r| (r.agent_id, r)).collect();
    if by_id.len() != records.len() {
        return Err("duplicate agent id".into());
    }
    for r in records {
        if r.entries.is_empty() || r.entries.len() > max_len {
            return Err(format!(
                "agent {} has {} entries",
                r.agent_id,
                r.entries.len()
            ));
        }
        for (i, e) in r.entries.iter().enumerate() {
            if e.t != i {
                return Err(format!("agent {} step {} numbered {}", r.agent_id, i, e.t));
            }
            if e.partners.contains(&r.agent_id) {
                return Err(format!("agent {} partners itself at t={}", r.agent_id, e.t));
            }
            for p in &e.partners {
                let other = by_id.get(p).and_then(|o| o.entries.get(e.t));
                match other {
                    Some(o) if o.partners.contains(&r.agent_id) && o.action == e.action => {}
                    _ => {
                        return Err(format!(
                            "asymmetric partnership {} -> {} at t={}",
                            r.agent_id, p, e.t
                        ))
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::entropy_bits;
    use crate::scenario::offline::generate_offline;
    use crate::scenario::{ActionChoice, LocationActions, LocationSpec};
    use proptest::prelude::*;

    #[test]
    fn temper_examples() {
        assert_eq!(temper(&[0.7, 0.3], 1.0).unwrap(), vec![0.7, 0.3]);
        let sym = temper(&[0.5, 0.5], 0.7).unwrap();
        assert!((sym[0] - 0.5).abs() < 1e-12);
        // 0.7^0.7 = 0.77904, 0.3^0.7 = 0.43052
        let t = temper(&[0.7, 0.3], 0.7).unwrap();
        assert!(
            (t[0] - 0.6441).abs() < 1e-4 && (t[1] - 0.3559).abs() < 1e-4,
            "{t:?}"
        );
        assert!(temper(&[0.0, 0.0], 0.8).is_err());
    }

    #[test]
    fn categorical_forced_and_frequency() {
        let mut rng = SimRng::seed(42);
        assert_eq!(sample_categorical(&[1.0], &mut rng).unwrap(), 0);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
        }
        let mut rng = SimRng::seed(42);
        let zeros = (0..10_000)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let f = zeros as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
        assert!(sample_categorical(&[0.6, 0.6], &mut rng).is_err());
        assert!(sample_categorical(&[], &mut rng).is_err());
    }

    fn single_sit_scenario() -> Scenario {
        Scenario {
            schema_version: 1,
            seed_sentence: "sit".into(),
            description: String::new(),
            environment: vec![LocationSpec {
                name: "bench".into(),
                category: LocationCategory::Furniture,
                position: [0.0, 0.0],
                scale: [1.0, 1.0],
                orientation: 0.0,
            }],
            action_table: vec![LocationActions {
                location: "bench".into(),
                actions: vec![ActionChoice {
                    action: ActionLabel::Sit,
                    probability: 1.0,
                }],
            }],
            movement_table: Vec::new(),
        }
    }

    #[test]
    fn forced_single_agent_sits_three_times() {
        let cfg = SimulationConfig {
            agent_count: 1,
            group_size_probs: [1.0, 0.0, 0.0],
            max_sequence_length: 3,
            duration: 1000.0,
            ..SimulationConfig::default()
        };
        let recs = run_simulation(&single_sit_scenario(), &cfg).unwrap();
        assert_eq!(recs.len(), 1);
        let steps: Vec<_> = recs[0].entries.iter().map(|e| (e.t, e.action)).collect();
        assert_eq!(
            steps,
            vec![
                (0, ActionLabel::Sit),
                (1, ActionLabel::Sit),
                (2, ActionLabel::Sit)
            ]
        );
        assert!(recs[0].entries.iter().all(|e| e.partners.is_empty()));
    }

    #[test]
    fn pair_shares_every_step() {
        let cfg = SimulationConfig {
            agent_count: 2,
            group_size_probs: [0.0, 1.0, 0.0],
            ..SimulationConfig::default()
        };
        let s = generate_offline(
            "Students sit and read at the library",
            Some([50.0, 50.0]),
            1,
        )
        .unwrap();
        let recs = run_simulation(&s, &cfg).unwrap();
        check_records(&recs, 10).unwrap();
        for (a, b) in recs[0].entries.iter().zip(&recs[1].entries) {
            if !a.partners.is_empty() {
                assert!(a.partners.contains(&1) && b.partners.contains(&0));
                assert_eq!(a.action, b.action);
            }
        }
        assert!(recs[0].entries[0].partners.contains(&1));
    }

    #[test]
    fn deterministic_and_valid_over_many_seeds() {
        let s = generate_offline(
            "Passengers queue for tickets and wait on the platform",
            None,
            3,
        )
        .unwrap();
        for seed in 0..50 {
            let cfg = SimulationConfig {
                rng_seed: seed,
                agent_count: 12,
                ..SimulationConfig::default()
            };
            let a = run_simulation(&s, &cfg).unwrap();
            let b = run_simulation(&s, &cfg).unwrap();
            assert_eq!(a, b);
            check_records(&a, 10).unwrap();
            for r in &a {
                for e in &r.entries {
                    let menu = s.actions_at(&e.location_name).unwrap();
                    assert!(menu.iter().any(|c| c.action == e.action));
                }
                for w in r.entries.windows(2) {
                    if w[0].location_name != w[1].location_name {
                        let row = s.movement_from(&w[0].location_name).unwrap();
                        assert!(row.iter().any(|m| m.target == w[1].location_name));
                    }
                }
            }
        }
    }

    #[test]
    fn leave_group_dissolves() {
        let mut s = single_sit_scenario();
        s.action_table[0].actions = vec![
            ActionChoice {
                action: ActionLabel::LeaveGroup,
                probability: 0.5,
            },
            ActionChoice {
                action: ActionLabel::Sit,
                probability: 0.5,
            },
        ];
        let cfg = SimulationConfig {
            agent_count: 3,
            group_size_probs: [0.0, 0.0, 1.0],
            duration: 1000.0,
            rng_seed: 5,
            ..SimulationConfig::default()
        };
        let recs = run_simulation(&s, &cfg).unwrap();
        check_records(&recs, 10).unwrap();
        let e = &recs[0].entries;
        let left = e
            .iter()
            .position(|x| x.action == ActionLabel::LeaveGroup)
            .expect("leave group sampled");
        assert!(e[left + 1..].iter().all(|x| x.partners.is_empty()));
    }

    #[test]
    fn rejects_bad_config() {
        let s = single_sit_scenario();
        let cfg = SimulationConfig {
            temp_start: 0.5,
            ..SimulationConfig::default()
        };
        assert!(matches!(
            run_simulation(&s, &cfg),
            Err(SimError::InvalidConfig(_))
        ));
        let mut empty = s.clone();
        empty.environment.clear();
        assert_eq!(
            run_simulation(&empty, &SimulationConfig::default()),
            Err(SimError::EmptyEnvironment)
        );
    }

    #[test]
    fn entropy_grows_as_temperature_drops() {
        let mut rng = SimRng::seed(11);
        for _ in 0..1000 {
            let k = 2 + rng.below(6);
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut prev = entropy_bits(&p);
            for temp in [0.95, 0.9, 0.8, 0.7, 0.5] {
                let h = entropy_bits(&temper(&p, temp).unwrap());
                assert!(h >= prev - 1e-12, "entropy fell from {prev} to {h}");
                prev = h;
            }
        }
    }

    proptest! {
        #[test]
        fn tempered_output_is_distribution(v in prop::collection::vec(0.0f64..1.0, 1..8), temp in 0.05f64..1.0) {
            prop_assume!(v.iter().sum::<f64>() > 1e-6);
            let sum: f64 = v.iter().sum();
            let p: Vec<f64> = v.iter().map(|x| x / sum).collect();
            let t = temper(&p, temp).unwrap();
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.iter().zip(&t) {
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
        }
    }
}
