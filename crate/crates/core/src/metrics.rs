//! Detection evaluation: greedy confidence-ordered matching, precision/recall
//! curves, all-point interpolated AP, mAP over classes and F1 across
//! confidence cutoffs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::labelfmt::{BoundingBox, LabelMap, Prediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no classes with ground truth to average over")]
    NoClasses,
    #[error("confidence grid is empty")]
    EmptyGrid,
    #[error("confidence grid must be ascending and inside [0, 1]")]
    UnsortedGrid,
    #[error("IoU threshold {0} not in (0, 1]")]
    BadThreshold(f64),
    #[error("{predictions} prediction lists but {truths} ground-truth lists")]
    MisalignedImages { predictions: usize, truths: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    #[serde(default)]
    pub class_agnostic: bool,
}

impl MatchConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, MetricsError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(MetricsError::BadThreshold(iou_threshold));
        }
        Ok(Self {
            iou_threshold,
            class_agnostic: false,
        })
    }

    fn same_class(&self, a: u32, b: u32) -> bool {
        self.class_agnostic || a == b
    }

    fn bucket(&self, class_id: u32) -> u32 {
        if self.class_agnostic {
            0
        } else {
            class_id
        }
    }
}

/// Per-image matching result. `true_positive` and `matched_truth` are indexed
/// like the input predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub true_positive: Vec<bool>,
    pub matched_truth: Vec<Option<usize>>,
    pub unmatched_truths: usize,
}

impl MatchOutcome {
    pub fn tp_count(&self) -> usize {
        self.true_positive.iter().filter(|t| **t).count()
    }

    pub fn fp_count(&self) -> usize {
        self.true_positive.len() - self.tp_count()
    }
}

/// Indices of `preds` by descending confidence; ties keep input order.
pub fn confidence_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].confidence.total_cmp(&preds[i].confidence));
    order
}

/// Greedy matching: predictions in descending confidence each take the
/// still-unmatched same-class truth of highest IoU (lowest index on ties)
/// and count as true positives when that IoU reaches the threshold.
pub fn match_detections(
    preds: &[Prediction],
    truths: &[BoundingBox],
    cfg: &MatchConfig,
) -> MatchOutcome {
    let mut taken = vec![false; truths.len()];
    let mut true_positive = vec![false; preds.len()];
    let mut matched_truth = vec![None; preds.len()];
    for p in confidence_order(preds) {
        let pred = &preds[p].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, truth) in truths.iter().enumerate() {
            if taken[g] || !cfg.same_class(pred.class_id, truth.class_id) {
                continue;
            }
            let overlap = iou(pred, truth);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, overlap)) = best {
            if overlap >= cfg.iou_threshold {
                taken[g] = true;
                true_positive[p] = true;
                matched_truth[p] = Some(g);
            }
        }
    }
    MatchOutcome {
        true_positive,
        matched_truth,
        unmatched_truths: taken.iter().filter(|t| !**t).count(),
    }
}

/// One scored detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Every detection at or above this confidence is counted.
    pub confidence: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall at each distinct confidence, highest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_gt: usize,
}

impl PrCurve {
    /// Builds the curve. Detections with equal confidence enter together,
    /// so the curve does not depend on how ties are ordered.
    pub fn from_matches(matches: &[ScoredMatch], total_gt: usize) -> Self {
        let mut sorted = matches.to_vec();
        sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut points = Vec::new();
        let (mut tp, mut seen) = (0usize, 0usize);
        let mut i = 0;
        while i < sorted.len() {
            let conf = sorted[i].confidence;
            while i < sorted.len() && sorted[i].confidence == conf {
                tp += sorted[i].true_positive as usize;
                seen += 1;
                i += 1;
            }
            points.push(PrPoint {
                confidence: conf,
                recall: ratio(tp, total_gt),
                precision: ratio(tp, seen),
            });
        }
        Self { points, total_gt }
    }
}

/// All-point interpolated AP: area under the precision envelope
/// `max{precision at recall >= r}`. Zero when there is no ground truth or
/// no detection.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.total_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    let mut envelope = vec![0.0; curve.points.len()];
    let mut running: f64 = 0.0;
    for (k, pt) in curve.points.iter().enumerate().rev() {
        running = running.max(pt.precision);
        envelope[k] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (pt, env) in curve.points.iter().zip(&envelope) {
        area += (pt.recall - prev_recall) * env;
        prev_recall = pt.recall;
    }
    area.clamp(0.0, 1.0)
}

/// Arithmetic mean of per-class AP.
pub fn mean_average_precision(per_class_ap: &BTreeMap<u32, f64>) -> Result<f64, MetricsError> {
    if per_class_ap.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    Ok(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    let sum = precision + recall;
    if sum <= 0.0 {
        return 0.0;
    }
    // Written as p * (2r / (p + r)) so that f1(p, p) == p exactly.
    precision * (2.0 * recall / sum)
}

/// `steps + 1` evenly spaced cutoffs from 0 to 1 inclusive.
pub fn confidence_grid(steps: u32) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub cutoff: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Sweep {
    pub points: Vec<SweepPoint>,
    pub best_f1: f64,
    pub best_f1_confidence: f64,
}

/// Matched detections and truth counts per class over a whole image set.
#[derive(Debug, Clone, Default)]
struct ClassTally {
    matches: BTreeMap<u32, Vec<ScoredMatch>>,
    truths: BTreeMap<u32, usize>,
}

impl ClassTally {
    fn collect(
        preds: &[Vec<Prediction>],
        truths: &[Vec<BoundingBox>],
        cfg: &MatchConfig,
    ) -> Result<Self, MetricsError> {
        if preds.len() != truths.len() {
            return Err(MetricsError::MisalignedImages {
                predictions: preds.len(),
                truths: truths.len(),
            });
        }
        let mut tally = ClassTally::default();
        for (image_preds, image_truths) in preds.iter().zip(truths) {
            let outcome = match_detections(image_preds, image_truths, cfg);
            for t in image_truths {
                *tally.truths.entry(cfg.bucket(t.class_id)).or_default() += 1;
            }
            for (p, tp) in image_preds.iter().zip(&outcome.true_positive) {
                tally
                    .matches
                    .entry(cfg.bucket(p.bbox.class_id))
                    .or_default()
                    .push(ScoredMatch {
                        confidence: p.confidence,
                        true_positive: *tp,
                    });
            }
        }
        Ok(tally)
    }

    /// Classes that have ground truth somewhere in the set.
    fn classes(&self) -> BTreeSet<u32> {
        self.truths.keys().copied().collect()
    }

    fn curve(&self, class_id: u32) -> PrCurve {
        let matches = self.matches.get(&class_id).map(Vec::as_slice).unwrap_or(&[]);
        PrCurve::from_matches(matches, self.truths.get(&class_id).copied().unwrap_or(0))
    }
}

/// F1 against confidence cutoff. At each cutoff, detections below it are
/// dropped, precision and recall are computed per class over the whole set
/// and F1 is averaged over the classes that have ground truth.
pub fn f1_confidence_sweep(
    preds: &[Vec<Prediction>],
    truths: &[Vec<BoundingBox>],
    cfg: &MatchConfig,
    grid: &[f64],
) -> Result<F1Sweep, MetricsError> {
    let tally = ClassTally::collect(preds, truths, cfg)?;
    sweep_from_tally(&tally, grid)
}

fn sweep_from_tally(tally: &ClassTally, grid: &[f64]) -> Result<F1Sweep, MetricsError> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if grid.windows(2).any(|w| w[0] > w[1]) || grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(MetricsError::UnsortedGrid);
    }
    let classes = tally.classes();
    let mut points = Vec::with_capacity(grid.len());
    for &cutoff in grid {
        let (mut sum_p, mut sum_r, mut sum_f1) = (0.0, 0.0, 0.0);
        for class_id in &classes {
            let (mut tp, mut kept) = (0usize, 0usize);
            for m in tally.matches.get(class_id).into_iter().flatten() {
                if m.confidence >= cutoff {
                    kept += 1;
                    tp += m.true_positive as usize;
                }
            }
            let precision = ratio(tp, kept);
            let recall = ratio(tp, tally.truths[class_id]);
            sum_p += precision;
            sum_r += recall;
            sum_f1 += f1(precision, recall);
        }
        let n = classes.len().max(1) as f64;
        points.push(SweepPoint {
            cutoff,
            precision: sum_p / n,
            recall: sum_r / n,
            f1: sum_f1 / n,
        });
    }
    let mut best = points[0];
    for pt in &points[1..] {
        if pt.f1 > best.f1 {
            best = *pt;
        }
    }
    Ok(F1Sweep {
        points,
        best_f1: best.f1,
        best_f1_confidence: best.cutoff,
    })
}

/// IoU thresholds at which mAP is reported.
pub const MAP_THRESHOLDS: [f64; 2] = [0.5, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub class_agnostic: bool,
    /// Confidence cutoffs for the F1 sweep.
    pub grid: Vec<f64>,
    /// IoU threshold used by the F1 sweep.
    pub f1_iou_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            class_agnostic: false,
            grid: confidence_grid(100),
            f1_iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub ground_truth: usize,
    pub predictions: usize,
    pub ap_50: f64,
    pub ap_90: f64,
}

/// Full evaluation of one detector over one image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub per_class: BTreeMap<u32, ClassEval>,
    pub map_50: f64,
    pub map_90: f64,
    pub f1_curve: Vec<SweepPoint>,
    pub best_f1: f64,
    pub best_f1_confidence: f64,
}

/// Evaluates aligned per-image predictions and truths. Classes with no
/// ground truth anywhere are left out of the averages; classes with ground
/// truth but no detections score AP 0.
pub fn evaluate(
    preds: &[Vec<Prediction>],
    truths: &[Vec<BoundingBox>],
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let cfg_at = |thr: f64| -> Result<MatchConfig, MetricsError> {
        Ok(MatchConfig {
            class_agnostic: opts.class_agnostic,
            ..MatchConfig::new(thr)?
        })
    };
    let tally_50 = ClassTally::collect(preds, truths, &cfg_at(MAP_THRESHOLDS[0])?)?;
    let tally_90 = ClassTally::collect(preds, truths, &cfg_at(MAP_THRESHOLDS[1])?)?;
    let classes = tally_50.classes();
    if classes.is_empty() {
        return Err(MetricsError::NoClasses);
    }

    let mut per_class = BTreeMap::new();
    let (mut aps_50, mut aps_90) = (BTreeMap::new(), BTreeMap::new());
    for &class_id in &classes {
        let ap_50 = average_precision(&tally_50.curve(class_id));
        let ap_90 = average_precision(&tally_90.curve(class_id));
        aps_50.insert(class_id, ap_50);
        aps_90.insert(class_id, ap_90);
        per_class.insert(
            class_id,
            ClassEval {
                ground_truth: tally_50.truths[&class_id],
                predictions: tally_50.matches.get(&class_id).map_or(0, Vec::len),
                ap_50,
                ap_90,
            },
        );
    }

    let sweep = if opts.f1_iou_threshold == MAP_THRESHOLDS[0] {
        sweep_from_tally(&tally_50, &opts.grid)?
    } else {
        f1_confidence_sweep(preds, truths, &cfg_at(opts.f1_iou_threshold)?, &opts.grid)?
    };

    Ok(EvalReport {
        images: truths.len(),
        per_class,
        map_50: mean_average_precision(&aps_50)?,
        map_90: mean_average_precision(&aps_90)?,
        f1_curve: sweep.points,
        best_f1: sweep.best_f1,
        best_f1_confidence: sweep.best_f1_confidence,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `cutoff,precision,recall,f1` rows for plotting.
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.f1_curve)
    }

    pub fn summary_table(&self, labels: Option<&LabelMap>) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>8}",
            "class", "gt", "preds", "AP@0.5", "AP@0.9"
        );
        for (class_id, c) in &self.per_class {
            let name = labels
                .and_then(|m| m.name(*class_id))
                .map(str::to_string)
                .unwrap_or_else(|| class_id.to_string());
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>8} {:>8.4} {:>8.4}",
                name, c.ground_truth, c.predictions, c.ap_50, c.ap_90
            );
        }
        let _ = writeln!(out, "mAP@0.5 {:.4}  mAP@0.9 {:.4}", self.map_50, self.map_90);
        let _ = writeln!(
            out,
            "best F1 {:.4} at confidence {:.2}",
            self.best_f1, self.best_f1_confidence
        );
        out
    }
}

pub fn curve_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("cutoff,precision,recall,f1\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6}",
            p.cutoff, p.precision, p.recall, p.f1
        );
    }
    out
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(class_id: u32, cx: f64, cy: f64, conf: f64) -> Prediction {
        Prediction::new(BoundingBox::new(class_id, cx, cy, 0.2, 0.2), conf)
    }

    fn scored(flags: &[(f64, bool)]) -> Vec<ScoredMatch> {
        flags
            .iter()
            .map(|&(confidence, true_positive)| ScoredMatch {
                confidence,
                true_positive,
            })
            .collect()
    }

    /// Maximum number of predictions that can be paired one-to-one with
    /// same-class truths at IoU >= threshold, by DP over truth subsets.
    fn brute_force_max_matching(
        preds: &[Prediction],
        truths: &[BoundingBox],
        threshold: f64,
    ) -> usize {
        fn go(
            p: usize,
            used: u32,
            feasible: &[Vec<usize>],
            memo: &mut std::collections::HashMap<(usize, u32), usize>,
        ) -> usize {
            if p == feasible.len() {
                return 0;
            }
            if let Some(v) = memo.get(&(p, used)) {
                return *v;
            }
            let mut best = go(p + 1, used, feasible, memo);
            for &g in &feasible[p] {
                if used & (1 << g) == 0 {
                    best = best.max(1 + go(p + 1, used | (1 << g), feasible, memo));
                }
            }
            memo.insert((p, used), best);
            best
        }
        let feasible: Vec<Vec<usize>> = preds
            .iter()
            .map(|p| {
                truths
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.class_id == p.bbox.class_id && iou(&p.bbox, t) >= threshold)
                    .map(|(g, _)| g)
                    .collect()
            })
            .collect();
        go(0, 0, &feasible, &mut Default::default())
    }

    #[test]
    fn exact_hit_is_a_true_positive() {
        let truth = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let out = match_detections(&[Prediction::new(truth, 0.9)], &[truth], &MatchConfig::new(0.5).unwrap());
        assert_eq!(out.true_positive, vec![true]);
        assert_eq!(out.unmatched_truths, 0);
    }

    #[test]
    fn one_truth_matches_once() {
        let truth = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let preds = [Prediction::new(truth, 0.6), Prediction::new(truth, 0.8)];
        let out = match_detections(&preds, &[truth], &MatchConfig::new(0.5).unwrap());
        assert_eq!(out.true_positive, vec![false, true]);
    }

    #[test]
    fn mixed_hits_and_miss_agree_with_brute_force() {
        let truths = [
            BoundingBox::new(0, 0.3, 0.3, 0.2, 0.2),
            BoundingBox::new(0, 0.7, 0.7, 0.2, 0.2),
        ];
        let preds = [
            pred(0, 0.31, 0.3, 0.9),
            pred(0, 0.5, 0.1, 0.8),
            pred(0, 0.7, 0.71, 0.7),
        ];
        let out = match_detections(&preds, &truths, &MatchConfig::new(0.5).unwrap());
        assert_eq!(out.true_positive, vec![true, false, true]);
        assert_eq!(out.tp_count(), brute_force_max_matching(&preds, &truths, 0.5));
        assert_eq!(out.tp_count(), 2);
    }

    #[test]
    fn classes_do_not_match_unless_agnostic() {
        let truth = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let p = [pred(1, 0.5, 0.5, 0.9)];
        assert_eq!(match_detections(&p, &[truth], &MatchConfig::new(0.5).unwrap()).tp_count(), 0);
        let agnostic = MatchConfig {
            class_agnostic: true,
            ..MatchConfig::new(0.5).unwrap()
        };
        assert_eq!(match_detections(&p, &[truth], &agnostic).tp_count(), 1);
    }

    #[test]
    fn ap_examples() {
        let perfect = PrCurve::from_matches(&scored(&[(0.9, true), (0.8, true)]), 2);
        assert_eq!(average_precision(&perfect), 1.0);
        assert_eq!(average_precision(&PrCurve::from_matches(&[], 3)), 0.0);
        let mixed = PrCurve::from_matches(&scored(&[(0.9, true), (0.8, false), (0.7, true)]), 2);
        let ap = average_precision(&mixed);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(format!("{ap:.6}"), "0.833333");
    }

    #[test]
    fn ap_without_ground_truth_is_zero() {
        let curve = PrCurve::from_matches(&scored(&[(0.9, false)]), 0);
        assert_eq!(average_precision(&curve), 0.0);
    }

    #[test]
    fn map_examples() {
        let m = |pairs: &[(u32, f64)]| mean_average_precision(&pairs.iter().copied().collect()).unwrap();
        assert!((m(&[(0, 0.6), (1, 0.8)]) - 0.7).abs() < 1e-15);
        assert_eq!(m(&[(0, 0.37)]), 0.37);
        assert_eq!(m(&[(0, 1.0), (1, 0.0), (2, 0.5)]), 0.5);
        assert_eq!(mean_average_precision(&BTreeMap::new()), Err(MetricsError::NoClasses));
    }

    #[test]
    fn f1_examples() {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            assert_eq!(f1(p, p), p);
        }
        assert_eq!(format!("{:.6}", f1(0.8, 0.9)), "0.847059");
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn sweep_perfect_and_all_false() {
        let truths = vec![vec![BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2)]; 3];
        let perfect: Vec<Vec<Prediction>> =
            truths.iter().map(|t| vec![Prediction::new(t[0], 1.0)]).collect();
        let cfg = MatchConfig::new(0.5).unwrap();
        let sweep = f1_confidence_sweep(&perfect, &truths, &cfg, &confidence_grid(100)).unwrap();
        assert!(sweep.points.iter().all(|p| p.f1 == 1.0));
        assert_eq!(sweep.best_f1, 1.0);

        let wrong: Vec<Vec<Prediction>> = (0..3).map(|_| vec![pred(0, 0.1, 0.1, 0.9)]).collect();
        let sweep = f1_confidence_sweep(&wrong, &truths, &cfg, &confidence_grid(100)).unwrap();
        assert!(sweep.points.iter().all(|p| p.f1 == 0.0));

        assert_eq!(
            f1_confidence_sweep(&wrong, &truths, &cfg, &[]),
            Err(MetricsError::EmptyGrid)
        );
        assert_eq!(
            f1_confidence_sweep(&wrong, &truths, &cfg, &[0.5, 0.2]),
            Err(MetricsError::UnsortedGrid)
        );
    }

    #[test]
    fn evaluate_reports_both_thresholds() {
        let truths = vec![
            vec![BoundingBox::new(0, 0.3, 0.3, 0.2, 0.2), BoundingBox::new(1, 0.7, 0.7, 0.2, 0.2)],
            vec![BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2)],
        ];
        let preds = vec![
            vec![pred(0, 0.3, 0.3, 0.9), pred(1, 0.72, 0.7, 0.6)],
            vec![pred(0, 0.5, 0.5, 0.8), pred(2, 0.1, 0.1, 0.5)],
        ];
        let report = evaluate(&preds, &truths, &EvalOptions::default()).unwrap();
        assert_eq!(report.per_class.len(), 2, "class 2 has no ground truth");
        assert_eq!(report.per_class[&0].ap_50, 1.0);
        assert_eq!(report.per_class[&1].ap_50, 1.0);
        // the shifted class-1 box has IoU 0.818 < 0.9
        assert_eq!(report.per_class[&1].ap_90, 0.0);
        assert_eq!(report.map_90, 0.5);
        assert_eq!(report.best_f1, 1.0);
        assert!(report.curve_csv().starts_with("cutoff,precision,recall,f1\n0.000000,"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["map_50"], 1.0);
        let map = LabelMap::new(["ballast", "plant"]).unwrap();
        assert!(report.summary_table(Some(&map)).contains("ballast"));
    }

    #[test]
    fn evaluate_without_truth_is_an_error() {
        let err = evaluate(&[vec![]], &[vec![]], &EvalOptions::default()).unwrap_err();
        assert_eq!(err, MetricsError::NoClasses);
        let err = evaluate(&[vec![]], &[], &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, MetricsError::MisalignedImages { .. }));
    }

    fn arb_scored() -> impl Strategy<Value = (Vec<ScoredMatch>, usize)> {
        prop::collection::vec((0u8..20, any::<bool>()), 0..15).prop_flat_map(|raw| {
            let tps = raw.iter().filter(|r| r.1).count();
            let matches: Vec<ScoredMatch> = raw
                .iter()
                .map(|&(c, tp)| ScoredMatch {
                    confidence: c as f64 / 20.0,
                    true_positive: tp,
                })
                .collect();
            (Just(matches), tps..tps + 5)
        })
    }

    fn arb_image() -> impl Strategy<Value = (Vec<Prediction>, Vec<BoundingBox>)> {
        let b = (0u32..2, 0.15f64..0.85, 0.15f64..0.85, 0.05f64..0.3, 0.05f64..0.3)
            .prop_map(|(c, cx, cy, w, h)| BoundingBox::new(c, cx, cy, w, h));
        (
            prop::collection::vec((b.clone(), 0u8..10), 0..6),
            prop::collection::vec(b, 0..6),
        )
            .prop_map(|(p, t)| {
                (
                    p.into_iter()
                        .map(|(b, c)| Prediction::new(b, c as f64 / 10.0))
                        .collect(),
                    t,
                )
            })
    }

    proptest! {
        #[test]
        fn ap_is_bounded_and_rank_invariant((matches, gt) in arb_scored()) {
            let ap = average_precision(&PrCurve::from_matches(&matches, gt));
            prop_assert!((0.0..=1.0).contains(&ap));
            let rescaled: Vec<ScoredMatch> = matches
                .iter()
                .map(|m| ScoredMatch { confidence: m.confidence.powi(3) * 0.5, ..*m })
                .collect();
            prop_assert_eq!(ap, average_precision(&PrCurve::from_matches(&rescaled, gt)));
        }

        #[test]
        fn trailing_false_positive_never_helps((matches, gt) in arb_scored()) {
            let ap = average_precision(&PrCurve::from_matches(&matches, gt));
            let mut more = matches.clone();
            let floor = matches.iter().map(|m| m.confidence).fold(1.0, f64::min);
            more.push(ScoredMatch { confidence: floor / 2.0 - 0.01, true_positive: false });
            prop_assert!(average_precision(&PrCurve::from_matches(&more, gt)) <= ap);
        }

        #[test]
        fn duplicating_the_set_changes_nothing(images in prop::collection::vec(arb_image(), 1..5)) {
            let (preds, truths): (Vec<_>, Vec<_>) = images.into_iter().unzip();
            if truths.iter().all(|t| t.is_empty()) {
                return Ok(());
            }
            let once = evaluate(&preds, &truths, &EvalOptions::default()).unwrap();
            let twice_p: Vec<_> = preds.iter().chain(&preds).cloned().collect();
            let twice_t: Vec<_> = truths.iter().chain(&truths).cloned().collect();
            let twice = evaluate(&twice_p, &twice_t, &EvalOptions::default()).unwrap();
            prop_assert_eq!(once.map_50, twice.map_50);
            prop_assert_eq!(once.map_90, twice.map_90);
            prop_assert_eq!(&once.f1_curve, &twice.f1_curve);
            for (k, c) in &once.per_class {
                prop_assert_eq!(c.ap_50, twice.per_class[k].ap_50);
            }
        }

        #[test]
        fn matching_is_deterministic((preds, truths) in arb_image()) {
            let cfg = MatchConfig::new(0.5).unwrap();
            prop_assert_eq!(match_detections(&preds, &truths, &cfg), match_detections(&preds, &truths, &cfg));
        }
    }
}
