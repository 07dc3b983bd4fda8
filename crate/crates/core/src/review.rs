//! Review bundles and sessions.
//!
//! Exporting a detected batch writes `review/iter_<i>/`:
//!
//! ```text
//! session.json        item statuses and the auto-accept threshold
//! classes.txt
//! images/<id>.<ext>
//! labels/<id>.txt     predictions without confidence, editable in any YOLO tool
//! confidence/<id>.txt one confidence per line, aligned with labels/<id>.txt
//! staging/<id>.txt    corrections received through the review API
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::fsutil::{self, write_atomic};
use crate::labelfmt::{
    parse_label_file, serialize_label_file, BoundingBox, LabelError, LabelMap, Prediction,
    LABEL_MAP_FILE,
};
use crate::workspace::{self, ImageId, WorkspaceManifest};

pub const SESSION_FILE: &str = "session.json";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no review session for iteration {0}")]
    NoSession(u32),
    #[error("image {0} is not part of this review")]
    UnknownItem(ImageId),
    #[error("labels for {id}: {source}")]
    InvalidLabels {
        id: ImageId,
        #[source]
        source: LabelError,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("corrupt review bundle: {0}")]
    Corrupt(String),
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> ReviewError {
    let path = path.into();
    move |source| ReviewError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Edited,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub status: ItemStatus,
    /// Predicted boxes.
    pub boxes: usize,
    /// Predicted boxes at or above the auto-accept threshold.
    pub pre_accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub iteration: u32,
    pub items: BTreeMap<ImageId, ReviewItem>,
    #[serde(default)]
    pub auto_accept_confidence: Option<f64>,
    pub started_at: String,
    pub updated_at: String,
    #[serde(default)]
    pub closed: bool,
}

impl ReviewSession {
    pub fn pending(&self) -> Vec<ImageId> {
        self.items
            .iter()
            .filter(|(_, item)| item.status == ItemStatus::Pending)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn count(&self, status: ItemStatus) -> usize {
        self.items.values().filter(|i| i.status == status).count()
    }
}

/// A prediction as shown to the reviewer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReviewBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub pre_accepted: bool,
}

/// Whether a box clears the auto-accept threshold.
pub fn is_pre_accepted(confidence: f64, threshold: Option<f64>) -> bool {
    threshold.is_some_and(|t| confidence >= t)
}

/// An item starts accepted when it has predictions and every one of them
/// clears the threshold. Items with no predictions always need a look.
pub fn item_pre_accepted(preds: &[Prediction], threshold: Option<f64>) -> bool {
    !preds.is_empty() && preds.iter().all(|p| is_pre_accepted(p.confidence, threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub items: usize,
    pub boxes: usize,
    pub pre_accepted_boxes: usize,
    pub accepted_items: usize,
}

/// Handle on `review/iter_<i>/` of a workspace.
#[derive(Debug, Clone)]
pub struct ReviewDir {
    pub dir: PathBuf,
    pub iteration: u32,
}

impl ReviewDir {
    pub fn new(workspace_root: &Path, iteration: u32) -> Self {
        Self {
            dir: workspace::review_dir(workspace_root, iteration),
            iteration,
        }
    }

    fn sub(&self, name: &str, id: &ImageId) -> PathBuf {
        self.dir.join(name).join(format!("{id}.txt"))
    }

    pub fn labels_path(&self, id: &ImageId) -> PathBuf {
        self.sub("labels", id)
    }

    pub fn staging_path(&self, id: &ImageId) -> PathBuf {
        self.sub("staging", id)
    }

    /// Writes the bundle for `predictions` (one entry per batch image) and a
    /// fresh session. Re-exporting replaces any earlier bundle.
    pub fn export(
        &self,
        manifest: &WorkspaceManifest,
        workspace_root: &Path,
        predictions: &BTreeMap<ImageId, Vec<Prediction>>,
        auto_accept_confidence: Option<f64>,
        clock: Clock,
    ) -> Result<ExportSummary, ReviewError> {
        fsutil::reset_dir(&self.dir).map_err(io_err(&self.dir))?;
        for sub in ["images", "labels", "confidence", "staging"] {
            let d = self.dir.join(sub);
            fs::create_dir_all(&d).map_err(io_err(d))?;
        }
        let map_path = self.dir.join(LABEL_MAP_FILE);
        write_atomic(&map_path, manifest.label_map.to_text().as_bytes()).map_err(io_err(&map_path))?;

        let mut items = BTreeMap::new();
        let mut summary = ExportSummary {
            dir: self.dir.clone(),
            items: 0,
            boxes: 0,
            pre_accepted_boxes: 0,
            accepted_items: 0,
        };
        for (id, preds) in predictions {
            let entry = manifest
                .images
                .get(id)
                .ok_or_else(|| ReviewError::UnknownItem(id.clone()))?;
            let src = workspace_root.join(&entry.path);
            let name = Path::new(&entry.path).file_name().unwrap_or_default();
            let dst = self.dir.join("images").join(name);
            fsutil::link_or_copy(&src, &dst).map_err(io_err(&src))?;

            let boxes: Vec<BoundingBox> = preds.iter().map(|p| p.bbox).collect();
            let invalid = |source| ReviewError::InvalidLabels { id: id.clone(), source };
            let labels = serialize_label_file(&boxes).map_err(invalid)?;
            let path = self.labels_path(id);
            fs::write(&path, labels).map_err(io_err(&path))?;
            let confidences: String = preds
                .iter()
                .map(|p| format!("{:.6}\n", p.quantized().confidence))
                .collect();
            let path = self.sub("confidence", id);
            fs::write(&path, confidences).map_err(io_err(&path))?;

            let pre = preds
                .iter()
                .filter(|p| is_pre_accepted(p.confidence, auto_accept_confidence))
                .count();
            let accepted = item_pre_accepted(preds, auto_accept_confidence);
            summary.items += 1;
            summary.boxes += preds.len();
            summary.pre_accepted_boxes += pre;
            summary.accepted_items += usize::from(accepted);
            items.insert(
                id.clone(),
                ReviewItem {
                    status: if accepted { ItemStatus::Accepted } else { ItemStatus::Pending },
                    boxes: preds.len(),
                    pre_accepted: pre,
                },
            );
        }
        let now = clock.timestamp();
        self.save_session(&ReviewSession {
            iteration: self.iteration,
            items,
            auto_accept_confidence,
            started_at: now.clone(),
            updated_at: now,
            closed: false,
        })?;
        Ok(summary)
    }

    pub fn load_session(&self) -> Result<ReviewSession, ReviewError> {
        let path = self.dir.join(SESSION_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ReviewError::NoSession(self.iteration)),
            Err(e) => return Err(io_err(path)(e)),
        };
        serde_json::from_str(&text).map_err(|e| ReviewError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn save_session(&self, session: &ReviewSession) -> Result<(), ReviewError> {
        let path = self.dir.join(SESSION_FILE);
        let mut text = serde_json::to_string_pretty(session).expect("session serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(path))
    }

    /// Predictions re-joined with their confidences.
    pub fn predictions(&self, id: &ImageId) -> Result<Vec<Prediction>, ReviewError> {
        let corrupt = |what: String| ReviewError::Corrupt(format!("{id}: {what}"));
        let labels_path = self.labels_path(id);
        let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
        let boxes: Vec<BoundingBox> = parse_label_file(&text).map_err(|e| corrupt(e.to_string()))?;
        let conf_path = self.sub("confidence", id);
        let conf_text = fs::read_to_string(&conf_path).map_err(io_err(&conf_path))?;
        let confidences: Vec<f64> = conf_text
            .lines()
            .map(|l| l.trim().parse::<f64>().map_err(|e| corrupt(format!("confidence {l:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if confidences.len() != boxes.len() {
            return Err(corrupt(format!(
                "{} boxes but {} confidences",
                boxes.len(),
                confidences.len()
            )));
        }
        Ok(boxes
            .into_iter()
            .zip(confidences)
            .map(|(b, c)| Prediction::new(b, c))
            .collect())
    }

    pub fn review_boxes(&self, session: &ReviewSession, id: &ImageId) -> Result<Vec<ReviewBox>, ReviewError> {
        self.item(session, id)?;
        Ok(self
            .predictions(id)?
            .into_iter()
            .map(|p| ReviewBox {
                bbox: p.bbox,
                confidence: p.confidence,
                pre_accepted: is_pre_accepted(p.confidence, session.auto_accept_confidence),
            })
            .collect())
    }

    fn item<'a>(&self, session: &'a ReviewSession, id: &ImageId) -> Result<&'a ReviewItem, ReviewError> {
        session.items.get(id).ok_or_else(|| ReviewError::UnknownItem(id.clone()))
    }

    fn check_open(&self, session: &ReviewSession) -> Result<(), ReviewError> {
        if session.closed {
            return Err(ReviewError::Conflict(format!(
                "review of iteration {} is already finalized",
                session.iteration
            )));
        }
        Ok(())
    }

    pub fn staged(&self, id: &ImageId) -> Result<Option<Vec<BoundingBox>>, ReviewError> {
        let path = self.staging_path(id);
        match fs::read_to_string(&path) {
            Ok(text) => parse_label_file(&text)
                .map(Some)
                .map_err(|e| ReviewError::Corrupt(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    /// Stores a full replacement label list for one item. Repeating the same
    /// PUT leaves the same state.
    pub fn put_labels(
        &self,
        label_map: &LabelMap,
        id: &ImageId,
        boxes: &[BoundingBox],
        clock: Clock,
    ) -> Result<ReviewSession, ReviewError> {
        let mut session = self.load_session()?;
        self.check_open(&session)?;
        let item = self.item(&session, id)?;
        if item.status == ItemStatus::Accepted {
            return Err(ReviewError::Conflict(format!("image {id} is already accepted")));
        }
        let invalid = |source| ReviewError::InvalidLabels { id: id.clone(), source };
        for (line, b) in boxes.iter().enumerate() {
            b.check(line + 1).map_err(invalid)?;
        }
        label_map.check_boxes(boxes).map_err(invalid)?;
        let text = serialize_label_file(boxes).map_err(invalid)?;
        let path = self.staging_path(id);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        session.items.get_mut(id).expect("checked above").status = ItemStatus::Edited;
        session.updated_at = clock.timestamp();
        self.save_session(&session)?;
        Ok(session)
    }

    /// Accepts the predictions of one item as they are.
    pub fn accept(&self, id: &ImageId, clock: Clock) -> Result<ReviewSession, ReviewError> {
        let mut session = self.load_session()?;
        self.check_open(&session)?;
        match self.item(&session, id)?.status {
            ItemStatus::Accepted => return Ok(session),
            ItemStatus::Edited => {
                return Err(ReviewError::Conflict(format!("image {id} already has edited labels")))
            }
            ItemStatus::Pending => {}
        }
        session.items.get_mut(id).expect("checked above").status = ItemStatus::Accepted;
        session.updated_at = clock.timestamp();
        self.save_session(&session)?;
        Ok(session)
    }

    /// Final labels of every item: staged corrections for edited items,
    /// predictions without confidence for accepted ones. Fails while any
    /// item is pending.
    pub fn corrected_labels(&self, session: &ReviewSession) -> Result<BTreeMap<ImageId, Vec<BoundingBox>>, ReviewError> {
        let pending = session.pending();
        if !pending.is_empty() {
            return Err(ReviewError::Conflict(format!(
                "{} item(s) still pending review",
                pending.len()
            )));
        }
        let mut out = BTreeMap::new();
        for (id, item) in &session.items {
            let boxes = match item.status {
                ItemStatus::Edited => self
                    .staged(id)?
                    .ok_or_else(|| ReviewError::Corrupt(format!("edited item {id} has no staged labels")))?,
                ItemStatus::Accepted => self.predictions(id)?.into_iter().map(|p| p.bbox).collect(),
                ItemStatus::Pending => unreachable!("pending items rejected above"),
            };
            out.insert(id.clone(), boxes);
        }
        Ok(out)
    }

    /// Labels as edited on disk in `labels/`, for reviews done with an
    /// external labeling tool.
    pub fn labels_from_files(&self, session: &ReviewSession, label_map: &LabelMap) -> Result<BTreeMap<ImageId, Vec<BoundingBox>>, ReviewError> {
        let mut out = BTreeMap::new();
        for id in session.items.keys() {
            let path = self.labels_path(id);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let invalid = |source| ReviewError::InvalidLabels { id: id.clone(), source };
            let boxes: Vec<BoundingBox> = parse_label_file(&text).map_err(invalid)?;
            label_map.check_boxes(&boxes).map_err(invalid)?;
            out.insert(id.clone(), boxes);
        }
        Ok(out)
    }

    pub fn close(&self, clock: Clock) -> Result<(), ReviewError> {
        let mut session = self.load_session()?;
        session.closed = true;
        session.updated_at = clock.timestamp();
        self.save_session(&session)
    }
}

/// JSON bodies of the review API.
pub mod api {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SessionView {
        pub iteration: u32,
        pub phase: String,
        pub items_total: usize,
        pub pending: usize,
        pub edited: usize,
        pub accepted: usize,
        pub auto_accept_confidence: Option<f64>,
        pub started_at: String,
        pub updated_at: String,
        pub closed: bool,
    }

    impl SessionView {
        pub fn new(session: &ReviewSession, phase: impl ToString) -> Self {
            Self {
                iteration: session.iteration,
                phase: phase.to_string(),
                items_total: session.items.len(),
                pending: session.count(ItemStatus::Pending),
                edited: session.count(ItemStatus::Edited),
                accepted: session.count(ItemStatus::Accepted),
                auto_accept_confidence: session.auto_accept_confidence,
                started_at: session.started_at.clone(),
                updated_at: session.updated_at.clone(),
                closed: session.closed,
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ItemView {
        pub id: ImageId,
        pub status: ItemStatus,
        pub original_name: String,
        pub width: u32,
        pub height: u32,
        pub boxes: usize,
        pub pre_accepted: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ItemList {
        pub iteration: u32,
        pub items: Vec<ItemView>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct PredictionsView {
        pub id: ImageId,
        pub status: ItemStatus,
        pub width: u32,
        pub height: u32,
        pub auto_accept_confidence: Option<f64>,
        pub boxes: Vec<ReviewBox>,
        /// Labels stored by the last PUT, if any.
        pub staged: Option<Vec<BoundingBox>>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ClassEntry {
        pub id: u32,
        pub name: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LabelMapView {
        pub classes: Vec<ClassEntry>,
    }

    impl From<&LabelMap> for LabelMapView {
        fn from(map: &LabelMap) -> Self {
            Self {
                classes: map
                    .names()
                    .iter()
                    .enumerate()
                    .map(|(i, n)| ClassEntry {
                        id: i as u32,
                        name: n.clone(),
                    })
                    .collect(),
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LabelsBody {
        pub boxes: Vec<BoundingBox>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ItemUpdate {
        pub id: ImageId,
        pub status: ItemStatus,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FinalizeResult {
        pub iteration: u32,
        pub merged: usize,
        pub train_size: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub pending: Option<Vec<ImageId>>,
    }
}
