//! Edit-cost accounting for a review pass, and the simulated annotator that
//! corrects predictions to ground truth.
//!
//! Costs are abstract units standing in for annotator time. Drawing a box
//! from scratch is the expensive operation; confirming a good prediction is
//! nearly free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::labelfmt::{BoundingBox, Prediction};
use crate::metrics::{match_detections, MatchConfig};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid annotator cost model: {0}")]
pub struct CostModelError(String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorCostModel {
    pub cost_review: f64,
    pub cost_adjust: f64,
    pub cost_reclass: f64,
    pub cost_delete: f64,
    pub cost_draw: f64,
    /// A matched prediction at or above this IoU only needs a glance.
    pub accept_iou: f64,
    /// Predictions below this IoU with every truth are treated as spurious.
    pub match_iou: f64,
}

impl Default for AnnotatorCostModel {
    fn default() -> Self {
        Self {
            cost_review: 0.1,
            cost_adjust: 1.0,
            cost_reclass: 0.5,
            cost_delete: 0.5,
            cost_draw: 3.0,
            accept_iou: 0.95,
            match_iou: 0.5,
        }
    }
}

impl AnnotatorCostModel {
    pub fn validate(&self) -> Result<(), CostModelError> {
        let costs = [
            self.cost_review,
            self.cost_adjust,
            self.cost_reclass,
            self.cost_delete,
            self.cost_draw,
        ];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(CostModelError("costs must be finite and non-negative".into()));
        }
        if self.cost_draw < self.cost_adjust {
            return Err(CostModelError("cost_draw must be at least cost_adjust".into()));
        }
        if !(0.5..=1.0).contains(&self.accept_iou) {
            return Err(CostModelError(format!("accept_iou {} not in [0.5, 1]", self.accept_iou)));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= self.accept_iou) {
            return Err(CostModelError(format!(
                "match_iou {} not in (0, accept_iou]",
                self.match_iou
            )));
        }
        Ok(())
    }
}

/// Counts of each edit operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditHistogram {
    pub reviewed: usize,
    pub adjusted: usize,
    pub reclassed: usize,
    pub deleted: usize,
    pub drawn: usize,
}

impl EditHistogram {
    pub fn add(&mut self, other: &EditHistogram) {
        self.reviewed += other.reviewed;
        self.adjusted += other.adjusted;
        self.reclassed += other.reclassed;
        self.deleted += other.deleted;
        self.drawn += other.drawn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageLabor {
    pub cost: f64,
    pub ops: EditHistogram,
}

/// Cost of turning `predictions` into `final_labels`.
pub fn account_review(
    predictions: &[Prediction],
    final_labels: &[BoundingBox],
    costs: &AnnotatorCostModel,
) -> ImageLabor {
    let cfg = MatchConfig {
        iou_threshold: costs.match_iou,
        class_agnostic: true,
    };
    let outcome = match_detections(predictions, final_labels, &cfg);
    let mut labor = ImageLabor::default();
    for (pred, matched) in predictions.iter().zip(&outcome.matched_truth) {
        match matched {
            None => {
                labor.ops.deleted += 1;
                labor.cost += costs.cost_delete;
            }
            Some(g) => {
                let truth = &final_labels[*g];
                let good_fit = iou(&pred.bbox, truth) >= costs.accept_iou;
                let right_class = pred.bbox.class_id == truth.class_id;
                if !right_class {
                    labor.ops.reclassed += 1;
                    labor.cost += costs.cost_reclass;
                }
                if !good_fit {
                    labor.ops.adjusted += 1;
                    labor.cost += costs.cost_adjust;
                }
                if good_fit && right_class {
                    labor.ops.reviewed += 1;
                    labor.cost += costs.cost_review;
                }
            }
        }
    }
    labor.ops.drawn = outcome.unmatched_truths;
    labor.cost += outcome.unmatched_truths as f64 * costs.cost_draw;
    labor
}

/// Labor over a batch of reviewed images.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LaborSummary {
    pub images: usize,
    /// Boxes in the final labels.
    pub boxes: usize,
    pub total_cost: f64,
    pub per_image_cost: f64,
    /// Cost of drawing every final box from scratch.
    pub manual_cost: f64,
    pub ops: EditHistogram,
}

impl LaborSummary {
    pub fn add_image(&mut self, labor: &ImageLabor, final_boxes: usize, costs: &AnnotatorCostModel) {
        self.images += 1;
        self.boxes += final_boxes;
        self.total_cost += labor.cost;
        self.manual_cost += final_boxes as f64 * costs.cost_draw;
        self.ops.add(&labor.ops);
        self.per_image_cost = self.total_cost / self.images as f64;
    }

    /// Assisted cost as a fraction of the from-scratch cost.
    pub fn ratio_to_manual(&self) -> f64 {
        if self.manual_cost > 0.0 {
            self.total_cost / self.manual_cost
        } else {
            0.0
        }
    }
}

/// Result of the simulated annotator's pass over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedReview {
    pub corrected: Vec<BoundingBox>,
    pub labor: ImageLabor,
}

/// The simulated annotator always ends at the ground truth; only the cost
/// of getting there depends on the predictions.
pub fn simulate_review(
    predictions: &[Prediction],
    ground_truth: &[BoundingBox],
    costs: &AnnotatorCostModel,
) -> SimulatedReview {
    SimulatedReview {
        corrected: ground_truth.to_vec(),
        labor: account_review(predictions, ground_truth, costs),
    }
}
