use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simulation::annotator::LaborSummary;
use crate::workspace::ImageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Seeded,
    Augmented,
    Trained,
    Detected,
    AwaitingReview,
    Merged,
    Evaluated,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Seeded,
        Phase::Augmented,
        Phase::Trained,
        Phase::Detected,
        Phase::AwaitingReview,
        Phase::Merged,
        Phase::Evaluated,
    ];

    /// The phase a successful `step` moves to. `Evaluated` wraps around to
    /// `Augmented` of the next iteration.
    pub fn next(self) -> Phase {
        match self {
            Phase::Seeded | Phase::Evaluated => Phase::Augmented,
            Phase::Augmented => Phase::Trained,
            Phase::Trained => Phase::Detected,
            Phase::Detected => Phase::AwaitingReview,
            Phase::AwaitingReview => Phase::Merged,
            Phase::Merged => Phase::Evaluated,
        }
    }

    /// True when entering `next()` starts a new iteration.
    pub fn opens_iteration(self) -> bool {
        matches!(self, Phase::Seeded | Phase::Evaluated)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Seeded => "seeded",
            Phase::Augmented => "augmented",
            Phase::Trained => "trained",
            Phase::Detected => "detected",
            Phase::AwaitingReview => "awaiting-review",
            Phase::Merged => "merged",
            Phase::Evaluated => "evaluated",
        };
        f.write_str(name)
    }
}

/// Where the loop stands. Stored in the manifest so that it commits together
/// with the data it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub phase: Phase,
    /// 0 after seeding; iteration `i` trains the model scored in record `i`.
    pub iteration: u32,
    /// Images detected in this iteration and awaiting review, in order.
    #[serde(default)]
    pub pending_batch: Vec<ImageId>,
    /// Every train image was labeled by hand; no review happens.
    #[serde(default)]
    pub baseline: bool,
    /// Workspace-relative path of the current iteration's weights.
    #[serde(default)]
    pub weights: Option<String>,
    /// Labor of the last merge, credited to the next iteration's record.
    #[serde(default)]
    pub carry_labor: Option<LaborSummary>,
}

impl LoopState {
    pub fn seeded(baseline: bool, seed_labor: Option<LaborSummary>) -> Self {
        Self {
            phase: Phase::Seeded,
            iteration: 0,
            pending_batch: Vec::new(),
            baseline,
            weights: None,
            carry_labor: seed_labor,
        }
    }
}
