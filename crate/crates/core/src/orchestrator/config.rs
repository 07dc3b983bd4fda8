use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::geometry::AugmentationSpec;
use crate::metrics::EvalOptions;
use crate::simulation::annotator::AnnotatorCostModel;

use super::LoopError;

/// Loop settings, read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Unlabeled images detected and reviewed per iteration.
    pub batch_size: usize,
    /// Stop after this many evaluated iterations; `None` runs until the
    /// unlabeled pool is used up.
    pub max_iterations: Option<u32>,
    pub augmentation: AugmentationSpec,
    /// External detector commands. Required by `step` unless a detector is
    /// supplied in-process.
    pub adapter: Option<AdapterConfig>,
    /// Pass the previous iteration's weights to training as `{weights_in}`.
    /// Off by default: each iteration trains from scratch.
    pub fine_tune: bool,
    /// Predictions at or above this confidence start out accepted in review.
    pub auto_accept_confidence: Option<f64>,
    pub evaluation: EvalOptions,
    pub costs: AnnotatorCostModel,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            max_iterations: None,
            augmentation: AugmentationSpec::default(),
            adapter: None,
            fine_tune: false,
            auto_accept_confidence: None,
            evaluation: EvalOptions::default(),
            costs: AnnotatorCostModel::default(),
        }
    }
}

impl LoopConfig {
    pub fn from_json(text: &str) -> Result<Self, LoopError> {
        let cfg: LoopConfig =
            serde_json::from_str(text).map_err(|e| LoopError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LoopError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LoopError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_iterations == Some(0) {
            return bad("max_iterations must be at least 1".into());
        }
        if let Some(t) = self.auto_accept_confidence {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("auto_accept_confidence {t} not in (0, 1]"));
            }
        }
        self.augmentation
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        if let Some(a) = &self.adapter {
            a.validate().map_err(|e| LoopError::Config(e.to_string()))?;
        }
        self.costs
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        if !(self.evaluation.f1_iou_threshold > 0.0 && self.evaluation.f1_iou_threshold <= 1.0) {
            return bad("evaluation.f1_iou_threshold must be in (0, 1]".into());
        }
        if self.evaluation.grid.is_empty() || self.evaluation.grid.windows(2).any(|w| w[0] > w[1]) {
            return bad("evaluation.grid must be non-empty and ascending".into());
        }
        Ok(())
    }
}
