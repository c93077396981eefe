use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Goal-oriented driver intention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intention {
    /// Background (no specific maneuver).
    BG,
    /// Intersection passing.
    IP,
    LT,
    RT,
    /// Left / right lane change.
    LLC,
    RLC,
    /// Left / right lane branch.
    LLB,
    RLB,
    /// Crosswalk passing.
    CP,
    /// Railroad passing.
    RP,
    /// Merge.
    MG,
    /// U-turn.
    UT,
}

impl Intention {
    pub const COUNT: usize = 12;
    pub const ALL: [Intention; 12] = [
        Self::BG,
        Self::IP,
        Self::LT,
        Self::RT,
        Self::LLC,
        Self::RLC,
        Self::LLB,
        Self::RLB,
        Self::CP,
        Self::RP,
        Self::MG,
        Self::UT,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Stimulus-driven annotation of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stimulus {
    Stop,
    Deviate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Response {
    Go,
    Stop,
}

impl Response {
    /// Class index used by the classifier: Go = 0, Stop = 1.
    pub fn index(self) -> usize {
        match self {
            Response::Go => 0,
            Response::Stop => 1,
        }
    }
}

/// Per-frame annotation layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLayers {
    pub goal: Vec<Intention>,
    pub stimulus: Vec<Option<Stimulus>>,
}

/// Clip-level labels from the last of the first `n` frames. Deviate merges
/// into Stop; frames without a stimulus label are Go.
pub fn derive_clip_labels(layers: &LabelLayers, n: usize) -> Result<(Intention, Response)> {
    if n == 0 || layers.goal.is_empty() || layers.stimulus.is_empty() {
        return Err(Error::EmptyLabels);
    }
    if layers.goal.len() < n || layers.stimulus.len() < n {
        return Err(Error::invalid(
            "label layers",
            format!("{} frames requested, layers cover {}", n, layers.goal.len().min(layers.stimulus.len())),
        ));
    }
    let intention = layers.goal[n - 1];
    let response = match layers.stimulus[n - 1] {
        Some(Stimulus::Stop | Stimulus::Deviate) => Response::Stop,
        None => Response::Go,
    };
    Ok((intention, response))
}
