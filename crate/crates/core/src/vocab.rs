//! Fixed action and location vocabularies.

use core::fmt;

#[allow(unused_imports)]
use crate::prelude::*;

use serde::{Deserialize, Serialize};

pub const NUM_ACTIONS: usize = 15;
pub const NUM_LOCATIONS: usize = 8;

/// One of the fifteen high-level actions, in the fixed vocabulary order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    StandStill,
    Sit,
    Wait,
    Wander,
    Queue,
    ObjectInteract,
    Talk,
    Meet,
    EnterExit,
    LeaveGroup,
    TalkToPhone,
    WaveAt,
    Read,
    LookAt,
    Carry,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; NUM_ACTIONS] = [
        ActionLabel::StandStill,
        ActionLabel::Sit,
        ActionLabel::Wait,
        ActionLabel::Wander,
        ActionLabel::Queue,
        ActionLabel::ObjectInteract,
        ActionLabel::Talk,
        ActionLabel::Meet,
        ActionLabel::EnterExit,
        ActionLabel::LeaveGroup,
        ActionLabel::TalkToPhone,
        ActionLabel::WaveAt,
        ActionLabel::Read,
        ActionLabel::LookAt,
        ActionLabel::Carry,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionLabel::StandStill => "stand still",
            ActionLabel::Sit => "sit",
            ActionLabel::Wait => "wait",
            ActionLabel::Wander => "wander",
            ActionLabel::Queue => "queue",
            ActionLabel::ObjectInteract => "object interact",
            ActionLabel::Talk => "talk",
            ActionLabel::Meet => "meet",
            ActionLabel::EnterExit => "enter/exit",
            ActionLabel::LeaveGroup => "leave group",
            ActionLabel::TalkToPhone => "talk to phone",
            ActionLabel::WaveAt => "wave at",
            ActionLabel::Read => "read",
            ActionLabel::LookAt => "look at",
            ActionLabel::Carry => "carry",
        }
    }

    /// Accepts the display name or the snake_case identifier.
    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', " ");
        Self::ALL.iter().copied().find(|a| {
            let n = a.name();
            n == norm || n.replace('/', " ") == norm || n.replace('/', "") == norm.replace(' ', "")
        })
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the eight location categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationCategory {
    Building,
    Room,
    Entrance,
    Exhibit,
    Furniture,
    OutdoorArea,
    Item,
    ServiceArea,
}

impl LocationCategory {
    pub const ALL: [LocationCategory; NUM_LOCATIONS] = [
        LocationCategory::Building,
        LocationCategory::Room,
        LocationCategory::Entrance,
        LocationCategory::Exhibit,
        LocationCategory::Furniture,
        LocationCategory::OutdoorArea,
        LocationCategory::Item,
        LocationCategory::ServiceArea,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LocationCategory::Building => "building",
            LocationCategory::Room => "room",
            LocationCategory::Entrance => "entrance",
            LocationCategory::Exhibit => "exhibit",
            LocationCategory::Furniture => "furniture",
            LocationCategory::OutdoorArea => "outdoor area",
            LocationCategory::Item => "item",
            LocationCategory::ServiceArea => "service area",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', " ");
        Self::ALL.iter().copied().find(|c| c.name() == norm)
    }
}

impl fmt::Display for LocationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
