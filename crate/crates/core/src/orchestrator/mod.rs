//! The annotation loop as a resumable state machine.
//!
//! ```text
//! Seeded -> Augmented -> Trained -> Detected -> AwaitingReview -> Merged -> Evaluated
//!              ^                                                              |
//!              +---------------------- next iteration ------------------------+
//! ```
//!
//! Each `step` performs exactly one transition and commits it with a single
//! manifest rename. Work done before the rename is regenerated when the step
//! is retried, so a crash anywhere leaves a state from which `step` resumes.

mod config;
mod journal;
mod report;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::LoopConfig;
pub use journal::{FaultInjection, Journal, JournalEntry, JournalEvent, CRASH_ENV, JOURNAL_FILE};
pub use report::{write_report, LoopReport, ReportRow};
pub use state::{LoopState, Phase};
pub use journal::Injected;

use crate::adapter::{self, AdapterError, Detector};
use crate::fsutil;
use crate::labelfmt::{parse_label_file, BoundingBox, LabelError, Prediction};
use crate::metrics::{evaluate, MetricsError};
use crate::review::{api::FinalizeResult, ExportSummary, ReviewDir, ReviewError};
use crate::simulation::annotator::{account_review, AnnotatorCostModel, EditHistogram, ImageLabor, LaborSummary};
use crate::workspace::{EvalSummary, ImageId, Origin, Pool, Workspace, WorkspaceError, WorkspaceManifest};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Config(String),
    #[error("workspace has not been seeded")]
    NotSeeded,
    #[error("workspace is already seeded")]
    AlreadySeeded,
    #[error("seed images without labels: {}", join_ids(.0))]
    SeedUnlabeled(Vec<ImageId>),
    #[error("no label file for {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingLabels(Vec<PathBuf>),
    #[error("{path}: {source}")]
    LabelFile {
        path: PathBuf,
        #[source]
        source: LabelError,
    },
    #[error("loop is in phase {actual}, expected {expected}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("review of iteration {iteration} is pending for {} image(s)", .pending.len())]
    ReviewPending { iteration: u32, pending: Vec<ImageId> },
    #[error("corrections do not cover the review batch: {0}")]
    BatchMismatch(String),
    #[error("no detector configured (set \"adapter\" in the loop config)")]
    NoDetector,
    #[error("no evaluated iterations")]
    NoIterations,
    #[error("interrupted after journal entry {0}")]
    Interrupted(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_ids(ids: &[ImageId]) -> String {
    ids.iter().map(ImageId::as_str).collect::<Vec<_>>().join(", ")
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LoopError {
    let path = path.into();
    move |source| LoopError::Io { path, source }
}

impl LoopError {
    /// Process exit code: 2 user error, 3 detector failure, 4 corrupt
    /// workspace.
    pub fn exit_code(&self) -> i32 {
        match self {
            LoopError::Adapter(_) | LoopError::NoDetector => 3,
            LoopError::Workspace(e) if e.is_corruption() => 4,
            LoopError::Review(ReviewError::Corrupt(_)) => 4,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Advanced { from: Phase, to: Phase, iteration: u32 },
    /// The batch awaits review; nothing changed.
    ReviewPending { iteration: u32, pending: Vec<ImageId> },
    /// No further iteration is due.
    Complete,
}

/// Imports images into `pool` together with their hand-made labels from
/// `labels_dir/<stem>.txt`. Every label file is read and validated before
/// anything is imported.
pub fn import_labeled(
    ws: &mut Workspace,
    images: &[PathBuf],
    labels_dir: &Path,
    pool: Pool,
) -> Result<Vec<ImageId>, LoopError> {
    let mut missing = Vec::new();
    let mut labels = Vec::with_capacity(images.len());
    for image in images {
        let path = labels_dir.join(format!("{}.txt", fsutil::file_stem(image)));
        match fs::read_to_string(&path) {
            Ok(text) => {
                let boxes: Vec<BoundingBox> = parse_label_file(&text)
                    .and_then(|b| ws.label_map().check_boxes(&b).map(|_| b))
                    .map_err(|source| LoopError::LabelFile { path: path.clone(), source })?;
                labels.push(boxes);
            }
            Err(_) => missing.push(path),
        }
    }
    if !missing.is_empty() {
        return Err(LoopError::MissingLabels(missing));
    }
    let report = ws.import_images(images, pool)?;
    let imported: BTreeSet<&ImageId> = report.imported.iter().collect();
    let mut manual = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (image, boxes) in images.iter().zip(labels) {
        let id = ImageId::from_content(&fs::read(image).map_err(io_err(image))?);
        if imported.contains(&id) && seen.insert(id.clone()) {
            manual.insert(id, boxes);
        }
    }
    ws.set_manual_labels(&manual)?;
    Ok(report.imported)
}

/// Cost of drawing every box of the train pool by hand.
fn manual_labor(ws: &Workspace, costs: &AnnotatorCostModel) -> Result<LaborSummary, LoopError> {
    let mut labor = LaborSummary::default();
    for id in ws.manifest().train_originals() {
        let boxes = ws.read_labels(id)?.len();
        let image = ImageLabor {
            cost: boxes as f64 * costs.cost_draw,
            ops: EditHistogram {
                drawn: boxes,
                ..Default::default()
            },
        };
        labor.add_image(&image, boxes, costs);
    }
    Ok(labor)
}

/// Marks the labeled train pool as the loop's starting point. In baseline
/// mode the loop never reviews: it trains and evaluates once on what is
/// there.
pub fn seed(ws: &mut Workspace, costs: &AnnotatorCostModel, baseline: bool) -> Result<LoopState, LoopError> {
    if ws.manifest().loop_state.is_some() {
        return Err(LoopError::AlreadySeeded);
    }
    let unlabeled: Vec<ImageId> = ws
        .manifest()
        .train_originals()
        .filter(|id| ws.manifest().images[*id].origin != Origin::Manual)
        .cloned()
        .collect();
    if !unlabeled.is_empty() {
        return Err(LoopError::SeedUnlabeled(unlabeled));
    }
    if ws.manifest().splits.train.is_empty() {
        return Err(WorkspaceError::EmptyTrainPool.into());
    }
    let labor = manual_labor(ws, costs)?;
    let state = LoopState::seeded(baseline, Some(labor));
    let mut journal = Journal::open(ws.root()).map_err(io_err(ws.root()))?;
    let at = ws.clock().timestamp();
    ws.commit_with(|m| {
        m.loop_state = Some(state.clone());
        Ok::<_, LoopError>(())
    })?;
    let _ = journal
        .append(JournalEvent::Commit, 0, None, Phase::Seeded, at)
        .map_err(io_err(ws.root()))?;
    Ok(state)
}

fn weights_rel(iteration: u32) -> String {
    format!("runs/iter_{iteration}/weights")
}

/// Links `ids` into a fresh directory as `<id>.<ext>`.
fn stage_images(ws: &Workspace, ids: &[ImageId], dir: &Path) -> Result<(), LoopError> {
    fsutil::reset_dir(dir).map_err(io_err(dir))?;
    for id in ids {
        let src = ws.image_path(id)?;
        let name = src.file_name().unwrap_or_default();
        fsutil::link_or_copy(&src, &dir.join(name)).map_err(io_err(&src))?;
    }
    Ok(())
}

fn by_id(preds: BTreeMap<String, Vec<Prediction>>) -> BTreeMap<ImageId, Vec<Prediction>> {
    preds.into_iter().map(|(k, v)| (ImageId::new(k), v)).collect()
}

pub struct Orchestrator {
    ws: Workspace,
    cfg: LoopConfig,
    detector: Option<Box<dyn Detector>>,
    journal: Journal,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("root", &self.ws.root())
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Orchestrator {
    /// Uses the command detector from `cfg.adapter` when present.
    pub fn new(ws: Workspace, cfg: LoopConfig) -> Result<Self, LoopError> {
        cfg.validate()?;
        let detector: Option<Box<dyn Detector>> = match &cfg.adapter {
            Some(a) => Some(Box::new(adapter::CommandDetector::new(a.clone())?)),
            None => None,
        };
        let journal = Journal::open(ws.root()).map_err(io_err(ws.root()))?;
        Ok(Self {
            ws,
            cfg,
            detector,
            journal,
        })
    }

    pub fn with_detector(mut self, detector: Box<dyn Detector>) -> Self {
        self.detector = Some(detector);
        self
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.journal = self.journal.with_fault(fault);
        self
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn into_workspace(self) -> Workspace {
        self.ws
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn state(&self) -> Result<&LoopState, LoopError> {
        self.ws.manifest().loop_state.as_ref().ok_or(LoopError::NotSeeded)
    }

    fn detector(&self) -> Result<&dyn Detector, LoopError> {
        self.detector.as_deref().ok_or(LoopError::NoDetector)
    }

    fn journal(&mut self, event: JournalEvent, iteration: u32, from: Phase, to: Phase) -> Result<(), LoopError> {
        let at = self.ws.clock().timestamp();
        let root = self.ws.root().to_path_buf();
        self.journal
            .append(event, iteration, Some(from), to, at)
            .map_err(io_err(root))?
            .map_err(|i| LoopError::Interrupted(i.0))
    }

    /// Runs `work`, which must commit the manifest at phase `to`, between
    /// journal `begin` and `commit` entries.
    fn transition(
        &mut self,
        iteration: u32,
        from: Phase,
        to: Phase,
        work: impl FnOnce(&mut Self) -> Result<(), LoopError>,
    ) -> Result<StepOutcome, LoopError> {
        tracing::info!(iteration, %from, %to, "transition");
        self.journal(JournalEvent::Begin, iteration, from, to)?;
        work(self)?;
        self.journal(JournalEvent::Commit, iteration, from, to)?;
        Ok(StepOutcome::Advanced { from, to, iteration })
    }

    fn reconcile_journal(&mut self) -> Result<(), LoopError> {
        let root = self.ws.root().to_path_buf();
        let Some(open) = self.journal.open_transition().map_err(io_err(&root))? else {
            return Ok(());
        };
        let state = self.state()?.clone();
        if state.phase == open.to && state.iteration == open.iteration {
            tracing::info!(iteration = open.iteration, to = %open.to, "recovering committed transition");
            let from = open.from.unwrap_or(open.to);
            self.journal(JournalEvent::Recovered, open.iteration, from, open.to)?;
        } else {
            tracing::info!(iteration = open.iteration, to = %open.to, "retrying interrupted transition");
        }
        Ok(())
    }

    /// True once no further iteration is due.
    pub fn is_complete(&self) -> Result<bool, LoopError> {
        let state = self.state()?;
        if state.phase != Phase::Evaluated {
            return Ok(false);
        }
        if self.cfg.max_iterations.is_some_and(|max| state.iteration >= max) {
            return Ok(true);
        }
        let m = self.ws.manifest();
        let grew = m
            .iterations
            .iter()
            .find(|r| r.index == state.iteration)
            .is_some_and(|r| r.merged > 0);
        Ok(state.baseline || (m.splits.unlabeled.is_empty() && !grew))
    }

    /// Advances the loop by one phase.
    pub fn step(&mut self) -> Result<StepOutcome, LoopError> {
        self.reconcile_journal()?;
        let state = self.state()?.clone();
        match state.phase {
            Phase::Seeded | Phase::Evaluated => {
                if self.is_complete()? {
                    return Ok(StepOutcome::Complete);
                }
                self.augment(&state)
            }
            Phase::Augmented => self.train(&state),
            Phase::Trained => self.detect(&state),
            Phase::Detected => self.export_review().map(|(outcome, _)| outcome),
            Phase::AwaitingReview => {
                let dir = ReviewDir::new(self.ws.root(), state.iteration);
                let session = dir.load_session()?;
                let pending = session.pending();
                if !pending.is_empty() {
                    return Ok(StepOutcome::ReviewPending {
                        iteration: state.iteration,
                        pending,
                    });
                }
                let corrected = dir.corrected_labels(&session)?;
                self.finalize_review(state.iteration, &corrected)?;
                Ok(StepOutcome::Advanced {
                    from: Phase::AwaitingReview,
                    to: Phase::Merged,
                    iteration: state.iteration,
                })
            }
            Phase::Merged => self.evaluate(&state),
        }
    }

    /// Steps until the loop completes, a review is pending, or `cycles`
    /// more iterations have been evaluated.
    pub fn run(&mut self, cycles: Option<u32>) -> Result<StepOutcome, LoopError> {
        let mut evaluated = 0;
        loop {
            let outcome = self.step()?;
            match &outcome {
                StepOutcome::Advanced { to: Phase::Evaluated, .. } => {
                    evaluated += 1;
                    if cycles.is_some_and(|c| evaluated >= c) {
                        return Ok(outcome);
                    }
                }
                StepOutcome::Advanced { .. } => {}
                StepOutcome::ReviewPending { .. } | StepOutcome::Complete => return Ok(outcome),
            }
        }
    }

    fn augment(&mut self, state: &LoopState) -> Result<StepOutcome, LoopError> {
        let next = state.iteration + 1;
        let spec = self.cfg.augmentation.clone();
        let carry = state.carry_labor.clone();
        let baseline = state.baseline;
        self.transition(next, state.phase, Phase::Augmented, |o| {
            o.ws.augment_split_with(&spec, next, |m, _| {
                if let Some(r) = m.iteration_mut(next) {
                    r.labor = carry;
                    r.baseline = baseline;
                }
                m.loop_state = Some(LoopState {
                    phase: Phase::Augmented,
                    iteration: next,
                    pending_batch: Vec::new(),
                    baseline,
                    weights: None,
                    carry_labor: None,
                });
            })?;
            Ok(())
        })
    }

    fn train(&mut self, state: &LoopState) -> Result<StepOutcome, LoopError> {
        let i = state.iteration;
        self.transition(i, Phase::Augmented, Phase::Trained, |o| {
            let run_dir = o.ws.runs_dir(i);
            let dataset = run_dir.join("dataset");
            adapter::write_dataset(o.ws.manifest(), o.ws.root(), &dataset)?;
            let weights_out = o.ws.path(&weights_rel(i));
            let previous = (o.cfg.fine_tune && i > 1).then(|| o.ws.path(&weights_rel(i - 1))).filter(|p| p.is_file());
            adapter::run_train(o.detector()?, &dataset, &weights_out, previous.as_deref(), i)?;
            let bytes = fs::read(&weights_out).map_err(io_err(&weights_out))?;
            let run_id = hex::encode(&Sha256::digest(&bytes)[..8]);
            o.ws.commit_with(|m| {
                if let Some(r) = m.iteration_mut(i) {
                    r.detector_run_id = Some(run_id);
                }
                let s = m.loop_state.as_mut().expect("seeded");
                s.phase = Phase::Trained;
                s.weights = Some(weights_rel(i));
                Ok::<_, LoopError>(())
            })
        })
    }

    fn weights_path(&self, state: &LoopState) -> Result<PathBuf, LoopError> {
        let rel = state
            .weights
            .as_ref()
            .ok_or_else(|| WorkspaceError::Corrupt("loop state has no weights".into()))?;
        Ok(self.ws.path(rel))
    }

    fn detect(&mut self, state: &LoopState) -> Result<StepOutcome, LoopError> {
        let i = state.iteration;
        let batch: Vec<ImageId> = self
            .ws
            .manifest()
            .splits
            .unlabeled
            .iter()
            .take(self.cfg.batch_size)
            .cloned()
            .collect();
        let weights = self.weights_path(state)?;
        self.transition(i, Phase::Trained, Phase::Detected, |o| {
            let preds_dir = o.ws.predictions_dir(i);
            if batch.is_empty() {
                tracing::info!(iteration = i, "unlabeled pool is empty; nothing to detect");
                fsutil::reset_dir(&preds_dir).map_err(io_err(&preds_dir))?;
            } else {
                let images_dir = o.ws.runs_dir(i).join("batch_images");
                stage_images(&o.ws, &batch, &images_dir)?;
                let map = o.ws.label_map().clone();
                adapter::run_detect(o.detector()?, &weights, &images_dir, &preds_dir, &map, i)?;
            }
            o.ws.commit_with(|m| {
                let s = m.loop_state.as_mut().expect("seeded");
                s.phase = Phase::Detected;
                s.pending_batch = batch;
                Ok::<_, LoopError>(())
            })
        })
    }

    fn batch_predictions(&self, state: &LoopState) -> Result<BTreeMap<ImageId, Vec<Prediction>>, LoopError> {
        load_predictions(&self.ws, state.iteration, &state.pending_batch)
    }

    /// Writes the review bundle for the detected batch and moves to
    /// `AwaitingReview`.
    pub fn export_review(&mut self) -> Result<(StepOutcome, ExportSummary), LoopError> {
        let state = self.state()?.clone();
        if state.phase != Phase::Detected {
            return Err(LoopError::WrongPhase {
                expected: Phase::Detected,
                actual: state.phase,
            });
        }
        let i = state.iteration;
        let preds = self.batch_predictions(&state)?;
        let threshold = self.cfg.auto_accept_confidence;
        let mut summary = None;
        let outcome = self.transition(i, Phase::Detected, Phase::AwaitingReview, |o| {
            let dir = ReviewDir::new(o.ws.root(), i);
            summary = Some(dir.export(o.ws.manifest(), o.ws.root(), &preds, threshold, o.ws.clock())?);
            o.ws.commit_with(|m| {
                m.loop_state.as_mut().expect("seeded").phase = Phase::AwaitingReview;
                Ok::<_, LoopError>(())
            })
        })?;
        Ok((outcome, summary.expect("export ran")))
    }

    /// Merges reviewed labels for the whole batch, accounting the labor
    /// from the difference between predictions and final labels.
    pub fn finalize_review(
        &mut self,
        iteration: u32,
        corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
    ) -> Result<FinalizeResult, LoopError> {
        let costs = self.cfg.costs;
        let at = self.ws.clock().timestamp();
        let ws = &mut self.ws;
        let journal = &mut self.journal;
        finalize_with_journal(ws, journal, &costs, iteration, corrected, at)
    }

    /// Finalizes from `review/iter_<i>/labels/` as edited on disk.
    pub fn merge_from_files(&mut self) -> Result<FinalizeResult, LoopError> {
        let state = self.state()?.clone();
        if state.phase != Phase::AwaitingReview {
            return Err(LoopError::WrongPhase {
                expected: Phase::AwaitingReview,
                actual: state.phase,
            });
        }
        let dir = ReviewDir::new(self.ws.root(), state.iteration);
        let session = dir.load_session()?;
        let corrected = dir.labels_from_files(&session, self.ws.label_map())?;
        self.finalize_review(state.iteration, &corrected)
    }

    fn evaluate(&mut self, state: &LoopState) -> Result<StepOutcome, LoopError> {
        let i = state.iteration;
        let val: Vec<ImageId> = self
            .ws
            .manifest()
            .splits
            .val
            .iter()
            .filter(|id| self.ws.manifest().images[*id].origin.is_labeled())
            .cloned()
            .collect();
        let weights = self.weights_path(state)?;
        self.transition(i, Phase::Merged, Phase::Evaluated, |o| {
            let summary = if val.is_empty() {
                tracing::warn!(iteration = i, "no labeled validation images; skipping evaluation");
                None
            } else {
                o.evaluate_val(i, &val, &weights)?
            };
            let finished = o.ws.clock().timestamp();
            o.ws.commit_with(|m| {
                if let Some(r) = m.iteration_mut(i) {
                    r.eval = summary;
                    r.finished_at = Some(finished);
                }
                m.loop_state.as_mut().expect("seeded").phase = Phase::Evaluated;
                Ok::<_, LoopError>(())
            })
        })
    }

    fn evaluate_val(&self, i: u32, val: &[ImageId], weights: &Path) -> Result<Option<EvalSummary>, LoopError> {
        let run_dir = self.ws.runs_dir(i);
        let images_dir = run_dir.join("val_images");
        let preds_dir = run_dir.join("val_predictions");
        stage_images(&self.ws, val, &images_dir)?;
        let map = self.ws.label_map().clone();
        let preds = by_id(adapter::run_detect(self.detector()?, weights, &images_dir, &preds_dir, &map, i)?);
        let mut pv = Vec::with_capacity(val.len());
        let mut tv = Vec::with_capacity(val.len());
        for id in val {
            pv.push(preds.get(id).cloned().unwrap_or_default());
            tv.push(self.ws.read_labels(id)?);
        }
        let report = match evaluate(&pv, &tv, &self.cfg.evaluation) {
            Ok(r) => r,
            Err(MetricsError::NoClasses) => {
                tracing::warn!(iteration = i, "validation labels contain no boxes; skipping evaluation");
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        for (name, body) in [("eval.json", report.to_json()), ("f1_curve.csv", report.curve_csv())] {
            let path = run_dir.join(name);
            fsutil::write_atomic(&path, body.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(Some(EvalSummary {
            best_f1: report.best_f1,
            best_f1_confidence: report.best_f1_confidence,
            map_50: report.map_50,
            map_90: report.map_90,
        }))
    }
}

/// Labor of a review: predictions against the labels the reviewer kept.
pub fn review_labor(
    predictions: &BTreeMap<ImageId, Vec<Prediction>>,
    corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
    costs: &AnnotatorCostModel,
) -> LaborSummary {
    let mut labor = LaborSummary::default();
    for (id, final_boxes) in corrected {
        let preds = predictions.get(id).map(Vec::as_slice).unwrap_or_default();
        labor.add_image(&account_review(preds, final_boxes, costs), final_boxes.len(), costs);
    }
    labor
}

/// Merges a finished review. Used by the loop driver and by the review
/// service, which holds the workspace only for the duration of the call.
pub fn finalize(
    ws: &mut Workspace,
    costs: &AnnotatorCostModel,
    iteration: u32,
    corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
) -> Result<FinalizeResult, LoopError> {
    let mut journal = Journal::open(ws.root()).map_err(io_err(ws.root()))?;
    let at = ws.clock().timestamp();
    finalize_with_journal(ws, &mut journal, costs, iteration, corrected, at)
}

/// The detector's output for `ids`, as written during the detect phase.
fn load_predictions(
    ws: &Workspace,
    iteration: u32,
    ids: &[ImageId],
) -> Result<BTreeMap<ImageId, Vec<Prediction>>, LoopError> {
    let dir = ws.predictions_dir(iteration);
    let mut out = BTreeMap::new();
    for id in ids {
        let path = dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).map_err(|_| AdapterError::MissingPrediction {
            image: id.to_string(),
            dir: dir.clone(),
        })?;
        let preds =
            parse_label_file(&text).map_err(|source| AdapterError::MalformedPrediction { file: path, source })?;
        out.insert(id.clone(), preds);
    }
    Ok(out)
}

fn finalize_with_journal(
    ws: &mut Workspace,
    journal: &mut Journal,
    costs: &AnnotatorCostModel,
    iteration: u32,
    corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
    at: String,
) -> Result<FinalizeResult, LoopError> {
    let state = ws.manifest().loop_state.clone().ok_or(LoopError::NotSeeded)?;
    if state.phase != Phase::AwaitingReview || state.iteration != iteration {
        return Err(LoopError::WrongPhase {
            expected: Phase::AwaitingReview,
            actual: state.phase,
        });
    }
    let batch: BTreeSet<&ImageId> = state.pending_batch.iter().collect();
    let given: BTreeSet<&ImageId> = corrected.keys().collect();
    if batch != given {
        let missing: Vec<ImageId> = batch.difference(&given).map(|id| (*id).clone()).collect();
        let extra: Vec<ImageId> = given.difference(&batch).map(|id| (*id).clone()).collect();
        return Err(LoopError::BatchMismatch(format!(
            "missing [{}], not in batch [{}]",
            join_ids(&missing),
            join_ids(&extra)
        )));
    }
    let dir = ReviewDir::new(ws.root(), iteration);
    let predictions = load_predictions(ws, iteration, &state.pending_batch)?;
    let labor = review_labor(&predictions, corrected, costs);

    let append = |journal: &mut Journal, event| -> Result<(), LoopError> {
        journal
            .append(event, iteration, Some(Phase::AwaitingReview), Phase::Merged, at.clone())
            .map_err(io_err(JOURNAL_FILE))?
            .map_err(|i| LoopError::Interrupted(i.0))
    };
    append(journal, JournalEvent::Begin)?;
    let report = ws.merge_reviewed_with(iteration, corrected, |m| {
        let s = m.loop_state.as_mut().expect("seeded");
        s.phase = Phase::Merged;
        s.pending_batch.clear();
        s.carry_labor = Some(labor);
    })?;
    dir.close(ws.clock())?;
    append(journal, JournalEvent::Commit)?;
    Ok(FinalizeResult {
        iteration,
        merged: report.merged.len(),
        train_size: report.train_size,
    })
}

/// Origin/pool snapshot used by tests and `verify`: no image leaves the
/// unlabeled pool except through a merge.
pub fn provenance(m: &WorkspaceManifest) -> BTreeMap<ImageId, (Origin, Vec<Pool>)> {
    m.images
        .iter()
        .map(|(id, e)| (id.clone(), (e.origin, m.splits.pools_of(id))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::harness::{drive, mock_detector, prepare_workspace};
    use crate::simulation::mock::MockDetectorModel;
    use crate::simulation::scenario::{Scenario, ScenarioSpec, Split};
    use crate::workspace::MANIFEST_FILE;

    fn scenario(dir: &Path) -> Scenario {
        let spec = ScenarioSpec {
            seed_images: 10,
            unlabeled_images: 30,
            val_images: 8,
            seed: 5,
            ..Default::default()
        };
        Scenario::generate(dir.join("scenario"), &spec).unwrap()
    }

    fn config() -> LoopConfig {
        LoopConfig {
            batch_size: 10,
            ..Default::default()
        }
    }

    fn model() -> MockDetectorModel {
        MockDetectorModel {
            reference_size: 10,
            seed: 4,
            ..Default::default()
        }
    }

    fn orchestrator(sc: &Scenario, root: &Path, cfg: LoopConfig) -> Orchestrator {
        let ws = prepare_workspace(sc, root, &cfg.costs, false).unwrap();
        Orchestrator::new(ws, cfg).unwrap().with_detector(Box::new(mock_detector(sc, model())))
    }

    fn reopen(sc: &Scenario, root: &Path, fault: FaultInjection) -> Orchestrator {
        let ws = Workspace::open(root).unwrap().with_clock(crate::clock::Clock::fixed_epoch(0));
        Orchestrator::new(ws, config())
            .unwrap()
            .with_detector(Box::new(mock_detector(sc, model())))
            .with_fault(fault)
    }

    #[test]
    fn seeding_guards() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let mut ws = Workspace::init(tmp.path().join("ws"), sc.label_map()).unwrap();
        let seeds = sc.images(Split::Seed).unwrap();
        let unlabeled = sc.images(Split::Unlabeled).unwrap();

        let mixed = [seeds[0].clone(), unlabeled[0].clone()];
        let err = import_labeled(&mut ws, &mixed, &sc.labels_dir(Split::Seed), Pool::Train).unwrap_err();
        assert!(matches!(&err, LoopError::MissingLabels(p) if p.len() == 1), "{err}");
        assert!(ws.manifest().images.is_empty());

        import_labeled(&mut ws, &seeds, &sc.labels_dir(Split::Seed), Pool::Train).unwrap();
        ws.import_images(&unlabeled[..1], Pool::Train).unwrap();
        let err = seed(&mut ws, &AnnotatorCostModel::default(), false).unwrap_err();
        assert!(matches!(&err, LoopError::SeedUnlabeled(ids) if ids.len() == 1));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seed_records_iteration_zero_and_rejects_reseed() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let mut ws = prepare_workspace(&sc, &tmp.path().join("ws"), &AnnotatorCostModel::default(), false).unwrap();
        let state = ws.manifest().loop_state.clone().unwrap();
        assert_eq!((state.phase, state.iteration), (Phase::Seeded, 0));
        assert_eq!(ws.manifest().splits.train.len(), 10);
        assert!(matches!(
            seed(&mut ws, &AnnotatorCostModel::default(), false),
            Err(LoopError::AlreadySeeded)
        ));
        assert!(matches!(LoopReport::from_manifest(ws.manifest()), Err(LoopError::NoIterations)));
    }

    #[test]
    fn steps_follow_the_phase_order_and_block_on_review() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let root = tmp.path().join("ws");
        let mut orch = orchestrator(&sc, &root, config());
        let mut seen = vec![Phase::Seeded];
        loop {
            match orch.step().unwrap() {
                StepOutcome::Advanced { from, to, iteration } => {
                    assert_eq!(from, *seen.last().unwrap());
                    assert_eq!(from.next(), to);
                    assert_eq!(iteration, 1);
                    seen.push(to);
                }
                StepOutcome::ReviewPending { iteration, pending } => {
                    assert_eq!(iteration, 1);
                    assert_eq!(pending.len(), 10);
                    break;
                }
                StepOutcome::Complete => unreachable!(),
            }
        }
        assert_eq!(*seen.last().unwrap(), Phase::AwaitingReview);
        let before = fs::read(root.join(MANIFEST_FILE)).unwrap();
        assert!(matches!(orch.step().unwrap(), StepOutcome::ReviewPending { .. }));
        assert_eq!(fs::read(root.join(MANIFEST_FILE)).unwrap(), before);
        assert!(matches!(orch.export_review(), Err(LoopError::WrongPhase { .. })));

        let batch = orch.state().unwrap().pending_batch.clone();
        let partial: BTreeMap<_, _> = batch[..3].iter().map(|id| (id.clone(), Vec::new())).collect();
        assert!(matches!(orch.finalize_review(1, &partial), Err(LoopError::BatchMismatch(_))));
        let full: BTreeMap<_, _> = batch.iter().map(|id| (id.clone(), sc.ground_truth(id).unwrap())).collect();
        let merged = orch.finalize_review(1, &full).unwrap();
        assert_eq!((merged.merged, merged.train_size), (10, 20));
        assert_eq!(orch.state().unwrap().phase, Phase::Merged);
    }

    #[test]
    fn full_run_grows_by_batch_and_records_each_iteration() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let mut orch = orchestrator(&sc, &tmp.path().join("ws"), config());
        drive(&mut orch, &sc).unwrap();
        let m = orch.workspace().manifest();
        let sizes: Vec<usize> = m.iterations.iter().map(|r| r.train_size_original).collect();
        assert_eq!(sizes, [10, 20, 30, 40]);
        let merged: Vec<usize> = m.iterations.iter().map(|r| r.merged).collect();
        assert_eq!(merged, [10, 10, 10, 0]);
        assert!(m.splits.unlabeled.is_empty());
        assert!(m.iterations.iter().all(|r| r.eval.is_some() && r.finished_at.is_some()));
        assert_eq!(orch.step().unwrap(), StepOutcome::Complete);
        assert!(crate::workspace::verify(orch.workspace().root()).unwrap().is_ok());
    }

    #[test]
    fn max_iterations_stops_the_loop() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let cfg = LoopConfig {
            max_iterations: Some(2),
            ..config()
        };
        let mut orch = orchestrator(&sc, &tmp.path().join("ws"), cfg);
        drive(&mut orch, &sc).unwrap();
        assert_eq!(orch.workspace().manifest().iterations.len(), 2);
    }

    #[test]
    fn resumes_to_identical_manifest_after_failure_at_any_journal_entry() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let cfg = LoopConfig {
            max_iterations: Some(2),
            ..config()
        };
        let reference = tmp.path().join("reference");
        let mut orch = orchestrator(&sc, &reference, cfg.clone());
        drive(&mut orch, &sc).unwrap();
        let expected = fs::read(reference.join(MANIFEST_FILE)).unwrap();
        let entries = orch.journal.len();
        drop(orch);
        assert!(entries > 10);

        for n in 2..=entries {
            let root = tmp.path().join(format!("crash_{n}"));
            let ws = prepare_workspace(&sc, &root, &cfg.costs, false).unwrap();
            drop(ws);
            let mut orch = reopen(&sc, &root, FaultInjection::FailAt(n));
            let err = drive(&mut orch, &sc).unwrap_err();
            assert!(err.to_string().contains("interrupted"), "{err}");
            drop(orch);
            let mut orch = reopen(&sc, &root, FaultInjection::Off);
            let ws_cfg = LoopConfig {
                max_iterations: Some(2),
                ..config()
            };
            orch.cfg = ws_cfg;
            drive(&mut orch, &sc).unwrap();
            assert_eq!(fs::read(root.join(MANIFEST_FILE)).unwrap(), expected, "failure at entry {n}");
        }
    }

    #[test]
    fn auto_accept_marks_the_confident_share_of_boxes() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let cfg = LoopConfig {
            auto_accept_confidence: Some(0.9),
            ..config()
        };
        let ws = prepare_workspace(&sc, &tmp.path().join("ws"), &cfg.costs, false).unwrap();
        let trained = MockDetectorModel {
            reference_size: 3,
            ..model()
        };
        let mut orch = Orchestrator::new(ws, cfg).unwrap().with_detector(Box::new(mock_detector(&sc, trained)));
        for _ in 0..3 {
            orch.step().unwrap();
        }
        let (_, summary) = orch.export_review().unwrap();
        let mut total = 0;
        let mut confident = 0;
        for f in fsutil::list_files(&orch.workspace().predictions_dir(1)).unwrap() {
            let preds: Vec<Prediction> = parse_label_file(&fs::read_to_string(f).unwrap()).unwrap();
            total += preds.len();
            confident += preds.iter().filter(|p| p.confidence >= 0.9).count();
        }
        assert!(confident > 0 && confident < total, "{confident} of {total}");
        assert_eq!(summary.boxes, total);
        assert_eq!(summary.pre_accepted_boxes, confident);
    }

    #[derive(Debug)]
    struct Failing;

    impl Detector for Failing {
        fn train(&self, _: &Path, _: &Path, _: Option<&Path>, _: u32) -> Result<(), AdapterError> {
            Err(AdapterError::TrainFailed {
                status: "exit 1".into(),
                output: "boom".into(),
            })
        }
        fn detect(&self, _: &Path, _: &Path, _: &Path, _: u32) -> Result<(), AdapterError> {
            unreachable!()
        }
    }

    #[test]
    fn adapter_failure_keeps_the_previous_phase() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = scenario(tmp.path());
        let ws = prepare_workspace(&sc, &tmp.path().join("ws"), &AnnotatorCostModel::default(), false).unwrap();
        let mut orch = Orchestrator::new(ws, config()).unwrap().with_detector(Box::new(Failing));
        orch.step().unwrap();
        let err = orch.step().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(orch.state().unwrap().phase, Phase::Augmented);

        let mut bare = Orchestrator::new(orch.into_workspace(), config()).unwrap();
        assert!(matches!(bare.step(), Err(LoopError::NoDetector)));
    }
}
