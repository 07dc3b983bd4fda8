//! Persistent dataset workspace.
//!
//! ```text
//! root/
//!   manifest.json          committed state, replaced via temp file + rename
//!   classes.txt            label map
//!   images/                <id>.<ext>; augmented copies <id>__aug<k>.png
//!   labels/                <stem>.txt, paired with images by stem
//!   predictions/iter_<i>/  detector output per iteration
//!   runs/iter_<i>/         dataset handoff, weights, evaluation
//!   review/iter_<i>/       review bundle and staged corrections
//!   journal.jsonl          loop transitions
//! ```
//!
//! Mutations hold an exclusive lock on `root/.lock`. Readers load the last
//! committed manifest without locking.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::ImageReader;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::fsutil::{self, write_atomic};
use crate::geometry::{
    resample_raster, sample_affine, transform_box, AugmentationSpec, GeometryError, ImageDims,
};
use crate::labelfmt::{
    parse_label_file, serialize_label_file, BoundingBox, LabelError, LabelMap, LABEL_MAP_FILE,
};
use crate::orchestrator::LoopState;
use crate::simulation::annotator::LaborSummary;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";
const STAGING_DIR: &str = ".staging";
const AUG_MARKER: &str = "__aug";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} already exists and is not empty")]
    NotEmpty(PathBuf),
    #[error("{0} is not a workspace (no {MANIFEST_FILE})")]
    NotAWorkspace(PathBuf),
    #[error("workspace {0} is locked by another process")]
    Locked(PathBuf),
    #[error("corrupt workspace: {0}")]
    Corrupt(String),
    #[error("unsupported manifest schema version {0}")]
    SchemaVersion(u32),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Label {
        context: String,
        #[source]
        source: LabelError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("image {id} is not in the {expected} pool")]
    WrongPool { id: ImageId, expected: Pool },
    #[error("image {id} is not part of iteration {iteration}'s review batch")]
    NotInBatch { id: ImageId, iteration: u32 },
    #[error("image {0} cannot take manual labels")]
    NotManual(ImageId),
    #[error("train pool has no labeled originals")]
    EmptyTrainPool,
    #[error("train image {0} has no labels")]
    UnlabeledTrainImage(ImageId),
}

impl WorkspaceError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> WorkspaceError {
        let path = path.into();
        move |source| WorkspaceError::Io { path, source }
    }

    fn label(context: impl fmt::Display) -> impl FnOnce(LabelError) -> WorkspaceError {
        let context = context.to_string();
        move |source| WorkspaceError::Label { context, source }
    }

    /// True when the on-disk state itself is broken rather than the request.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            WorkspaceError::Corrupt(_) | WorkspaceError::SchemaVersion(_)
        )
    }
}

type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

/// Image identifier: the first 16 hex digits of the SHA-256 of the file
/// bytes for imported images, `<parent>__aug<k>` for augmented copies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn from_content(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        Self(hex::encode(&digest[..8]))
    }

    pub fn augmented(&self, copy_index: u32) -> Self {
        Self(format!("{}{AUG_MARKER}{copy_index}", self.0))
    }

    pub fn is_augmented(&self) -> bool {
        self.0.contains(AUG_MARKER)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ImageId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Where an image's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    /// Imported into train/val, waiting for manual labels.
    ManualPending,
    Manual,
    /// Waiting for detection and review.
    Unlabeled,
    /// Labeled by reviewing detector output.
    Assisted,
    Augmented,
}

impl Origin {
    pub fn is_labeled(self) -> bool {
        matches!(self, Origin::Manual | Origin::Assisted | Origin::Augmented)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Train,
    Val,
    Unlabeled,
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Train => "train",
            Pool::Val => "val",
            Pool::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Pool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Pool::Train),
            "val" => Ok(Pool::Val),
            "unlabeled" => Ok(Pool::Unlabeled),
            other => Err(format!("unknown pool {other:?} (train, val, unlabeled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Workspace-relative path with forward slashes.
    pub path: String,
    pub original_name: String,
    pub width: u32,
    pub height: u32,
    pub origin: Origin,
    pub source_iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ImageId>,
}

impl ImageEntry {
    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: BTreeSet<ImageId>,
    pub val: BTreeSet<ImageId>,
    pub unlabeled: BTreeSet<ImageId>,
}

impl Splits {
    pub fn pool(&self, pool: Pool) -> &BTreeSet<ImageId> {
        match pool {
            Pool::Train => &self.train,
            Pool::Val => &self.val,
            Pool::Unlabeled => &self.unlabeled,
        }
    }

    pub fn pool_mut(&mut self, pool: Pool) -> &mut BTreeSet<ImageId> {
        match pool {
            Pool::Train => &mut self.train,
            Pool::Val => &mut self.val,
            Pool::Unlabeled => &mut self.unlabeled,
        }
    }

    pub fn pools_of(&self, id: &ImageId) -> Vec<Pool> {
        [Pool::Train, Pool::Val, Pool::Unlabeled]
            .into_iter()
            .filter(|p| self.pool(*p).contains(id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub best_f1: f64,
    pub best_f1_confidence: f64,
    pub map_50: f64,
    pub map_90: f64,
}

/// One pass of the loop: the training set it used, the labor that produced
/// that set's newest labels, and the resulting model's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub train_size_original: usize,
    pub train_size_augmented: usize,
    pub train_size_total: usize,
    #[serde(default)]
    pub baseline: bool,
    /// Labeling cost of the images that joined the train pool for this
    /// iteration (the seed set for iteration 1).
    #[serde(default)]
    pub labor: Option<LaborSummary>,
    /// Images merged from this iteration's review.
    #[serde(default)]
    pub merged: usize,
    #[serde(default)]
    pub eval: Option<EvalSummary>,
    #[serde(default)]
    pub detector_run_id: Option<String>,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
}

impl IterationRecord {
    pub fn new(index: u32, started_at: String) -> Self {
        Self {
            index,
            train_size_original: 0,
            train_size_augmented: 0,
            train_size_total: 0,
            baseline: false,
            labor: None,
            merged: 0,
            eval: None,
            detector_run_id: None,
            started_at,
            finished_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceManifest {
    pub schema_version: u32,
    pub label_map: LabelMap,
    pub images: BTreeMap<ImageId, ImageEntry>,
    pub splits: Splits,
    pub iterations: Vec<IterationRecord>,
    #[serde(default)]
    pub loop_state: Option<LoopState>,
}

impl WorkspaceManifest {
    pub fn new(label_map: LabelMap) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            label_map,
            images: BTreeMap::new(),
            splits: Splits::default(),
            iterations: Vec::new(),
            loop_state: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: WorkspaceManifest = serde_json::from_str(text)
            .map_err(|e| WorkspaceError::Corrupt(format!("{MANIFEST_FILE}: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(WorkspaceError::SchemaVersion(m.schema_version));
        }
        Ok(m)
    }

    pub fn entry(&self, id: &ImageId) -> Result<&ImageEntry> {
        self.images
            .get(id)
            .ok_or_else(|| WorkspaceError::UnknownImage(id.clone()))
    }

    /// Train images that are not augmented copies.
    pub fn train_originals(&self) -> impl Iterator<Item = &ImageId> + '_ {
        self.splits
            .train
            .iter()
            .filter(|id| self.images.get(*id).is_some_and(|e| e.origin != Origin::Augmented))
    }

    pub fn augmented(&self) -> impl Iterator<Item = &ImageId> + '_ {
        self.splits
            .train
            .iter()
            .filter(|id| self.images.get(*id).is_some_and(|e| e.origin == Origin::Augmented))
    }

    pub fn iteration_mut(&mut self, index: u32) -> Option<&mut IterationRecord> {
        self.iterations.iter_mut().find(|r| r.index == index)
    }

    /// Structural invariants; returns every violation found.
    pub fn check(&self) -> Vec<String> {
        let mut issues = Vec::new();
        for (id, entry) in &self.images {
            let pools = self.splits.pools_of(id);
            if pools.len() != 1 {
                issues.push(format!("image {id} is in {} pools {pools:?}", pools.len()));
            }
            if entry.origin == Origin::Augmented {
                match &entry.parent {
                    Some(p) if self.images.get(p).is_some_and(|e| e.origin != Origin::Augmented) => {}
                    Some(p) => issues.push(format!("augmented image {id} has missing parent {p}")),
                    None => issues.push(format!("augmented image {id} has no parent")),
                }
                if pools != [Pool::Train] {
                    issues.push(format!("augmented image {id} is outside the train pool"));
                }
            }
        }
        for pool in [Pool::Train, Pool::Val, Pool::Unlabeled] {
            for id in self.splits.pool(pool) {
                if !self.images.contains_key(id) {
                    issues.push(format!("{pool} pool lists unknown image {id}"));
                }
            }
        }
        for (idx, record) in self.iterations.iter().enumerate() {
            if record.index as usize != idx + 1 {
                issues.push(format!(
                    "iteration record {} at position {} (indices must run 1, 2, ...)",
                    record.index,
                    idx + 1
                ));
            }
            if record.train_size_total != record.train_size_original + record.train_size_augmented {
                issues.push(format!("iteration {} train sizes do not add up", record.index));
            }
            if let Some(e) = &record.eval {
                if !(0.0..=1.0).contains(&e.best_f1) {
                    issues.push(format!("iteration {} best_f1 out of range", record.index));
                }
            }
        }
        issues
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub imported: Vec<ImageId>,
    /// Files whose content was already in the workspace (or earlier in the
    /// same call); skipped.
    pub duplicates: Vec<(PathBuf, ImageId)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeReport {
    pub merged: Vec<ImageId>,
    pub train_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub originals: usize,
    pub augmented: usize,
    pub total: usize,
    pub boxes_dropped: usize,
    pub skipped: Vec<ImageId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub issues: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Augmented copies to generate: round-robin over the originals (sorted),
/// up to `copies_per_image` each, stopping at `augmented_budget`.
pub fn plan_augmentation(originals: &[ImageId], spec: &AugmentationSpec) -> Vec<(ImageId, u32)> {
    let mut sorted = originals.to_vec();
    sorted.sort();
    let budget = spec.augmented_budget.unwrap_or(usize::MAX);
    let mut plan = Vec::new();
    'passes: for copy in 0..spec.copies_per_image {
        for id in &sorted {
            if plan.len() >= budget {
                break 'passes;
            }
            plan.push((id.clone(), copy));
        }
    }
    plan
}

/// An open workspace holding the exclusive lock.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    manifest: WorkspaceManifest,
    clock: Clock,
    _lock: File,
}

impl Workspace {
    /// Creates the directory layout, `classes.txt` and an empty manifest.
    pub fn init(root: impl AsRef<Path>, label_map: LabelMap) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if root.exists() {
            let mut entries = fs::read_dir(&root).map_err(WorkspaceError::io(&root))?;
            if entries.next().is_some() {
                return Err(WorkspaceError::NotEmpty(root));
            }
        }
        for dir in ["images", "labels", "predictions", "runs", "review"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(WorkspaceError::io(p))?;
        }
        let map_path = root.join(LABEL_MAP_FILE);
        write_atomic(&map_path, label_map.to_text().as_bytes())
            .map_err(WorkspaceError::io(map_path))?;
        let lock = acquire_lock(&root)?;
        let manifest = WorkspaceManifest::new(label_map);
        let ws = Self {
            root,
            manifest,
            clock: Clock::from_env(),
            _lock: lock,
        };
        ws.write_manifest(&ws.manifest)?;
        Ok(ws)
    }

    /// Opens an existing workspace, taking the lock and finishing or rolling
    /// back any merge that was interrupted.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(WorkspaceError::NotAWorkspace(root));
        }
        let lock = acquire_lock(&root)?;
        let manifest = Self::load_manifest(&root)?;
        let ws = Self {
            root,
            manifest,
            clock: Clock::from_env(),
            _lock: lock,
        };
        ws.recover_staging()?;
        Ok(ws)
    }

    /// Reads the last committed manifest without locking.
    pub fn load_manifest(root: impl AsRef<Path>) -> Result<WorkspaceManifest> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(WorkspaceError::NotAWorkspace(root.as_ref().to_path_buf()))
            }
            Err(e) => return Err(WorkspaceError::io(path)(e)),
        };
        WorkspaceManifest::from_json(&text)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &WorkspaceManifest {
        &self.manifest
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.manifest.label_map
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn image_path(&self, id: &ImageId) -> Result<PathBuf> {
        Ok(self.path(&self.manifest.entry(id)?.path))
    }

    pub fn label_path(&self, id: &ImageId) -> PathBuf {
        label_path(&self.root, id)
    }

    pub fn predictions_dir(&self, iteration: u32) -> PathBuf {
        self.root.join("predictions").join(format!("iter_{iteration}"))
    }

    pub fn runs_dir(&self, iteration: u32) -> PathBuf {
        self.root.join("runs").join(format!("iter_{iteration}"))
    }

    pub fn review_dir(&self, iteration: u32) -> PathBuf {
        review_dir(&self.root, iteration)
    }

    /// Applies `f` to a copy of the manifest and commits the result with a
    /// single rename. On error nothing is committed.
    pub fn commit_with<T, E>(
        &mut self,
        f: impl FnOnce(&mut WorkspaceManifest) -> std::result::Result<T, E>,
    ) -> std::result::Result<T, E>
    where
        E: From<WorkspaceError>,
    {
        let mut next = self.manifest.clone();
        let out = f(&mut next)?;
        let issues = next.check();
        if !issues.is_empty() {
            return Err(WorkspaceError::Corrupt(issues.join("; ")).into());
        }
        self.write_manifest(&next)?;
        self.manifest = next;
        Ok(out)
    }

    fn write_manifest(&self, m: &WorkspaceManifest) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, m.to_json().as_bytes()).map_err(WorkspaceError::io(path))
    }

    /// Copies images into the workspace under content-hash ids. All files are
    /// decoded before anything is copied, so an undecodable file aborts the
    /// whole import.
    pub fn import_images(&mut self, paths: &[PathBuf], pool: Pool) -> Result<ImportReport> {
        let mut report = ImportReport::default();
        if paths.is_empty() {
            tracing::warn!("import called with no files");
            return Ok(report);
        }
        let mut staged = Vec::new();
        let mut seen = BTreeSet::new();
        for path in paths {
            let bytes = fs::read(path).map_err(WorkspaceError::io(path))?;
            let id = ImageId::from_content(&bytes);
            if self.manifest.images.contains_key(&id) || !seen.insert(id.clone()) {
                tracing::warn!(path = %path.display(), %id, "duplicate image skipped");
                report.duplicates.push((path.clone(), id));
                continue;
            }
            let (width, height) = decode_dims(path, &bytes)?;
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_else(|| "png".into());
            staged.push((id, path.clone(), bytes, width, height, ext));
        }
        let origin = match pool {
            Pool::Unlabeled => Origin::Unlabeled,
            Pool::Train | Pool::Val => Origin::ManualPending,
        };
        let iteration = self.current_iteration();
        let mut entries = Vec::new();
        for (id, src, bytes, width, height, ext) in staged {
            let rel = format!("images/{id}.{ext}");
            let dst = self.root.join(&rel);
            write_atomic(&dst, &bytes).map_err(WorkspaceError::io(&dst))?;
            entries.push((
                id.clone(),
                ImageEntry {
                    path: rel,
                    original_name: src
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    width,
                    height,
                    origin,
                    source_iteration: iteration,
                    parent: None,
                },
            ));
            report.imported.push(id);
        }
        self.commit_with(|m| {
            for (id, entry) in entries {
                m.splits.pool_mut(pool).insert(id.clone());
                m.images.insert(id, entry);
            }
            Ok::<_, WorkspaceError>(())
        })?;
        Ok(report)
    }

    fn current_iteration(&self) -> u32 {
        self.manifest.loop_state.as_ref().map_or(0, |s| s.iteration)
    }

    /// Stores hand-drawn labels for train or val images that are not yet
    /// labeled by any other route, and marks them manual.
    pub fn set_manual_labels(&mut self, labels: &BTreeMap<ImageId, Vec<BoundingBox>>) -> Result<()> {
        for (id, boxes) in labels {
            let entry = self.manifest.entry(id)?;
            if !matches!(entry.origin, Origin::ManualPending | Origin::Manual) {
                return Err(WorkspaceError::NotManual(id.clone()));
            }
            self.manifest
                .label_map
                .check_boxes(boxes)
                .map_err(WorkspaceError::label(format!("labels for {id}")))?;
        }
        for (id, boxes) in labels {
            self.write_labels(id, boxes)?;
        }
        self.commit_with(|m| {
            for id in labels.keys() {
                if let Some(e) = m.images.get_mut(id) {
                    e.origin = Origin::Manual;
                }
            }
            Ok::<_, WorkspaceError>(())
        })
    }

    fn write_labels(&self, id: &ImageId, boxes: &[BoundingBox]) -> Result<()> {
        let text = serialize_label_file(boxes).map_err(WorkspaceError::label(format!("labels for {id}")))?;
        let path = self.label_path(id);
        write_atomic(&path, text.as_bytes()).map_err(WorkspaceError::io(path))
    }

    pub fn read_labels(&self, id: &ImageId) -> Result<Vec<BoundingBox>> {
        read_labels(&self.root, id)
    }

    /// Moves reviewed images from the unlabeled pool into train with their
    /// corrected labels. See [`Workspace::merge_reviewed_with`].
    pub fn merge_reviewed(
        &mut self,
        iteration: u32,
        corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
    ) -> Result<MergeReport> {
        self.merge_reviewed_with(iteration, corrected, |_| {})
    }

    /// All-or-nothing merge. Labels are staged under `labels/.staging/`,
    /// the manifest rename commits the merge (together with whatever
    /// `finish` changes), and staged files are then moved into place. A crash
    /// before the rename leaves the previous state intact; a crash after it
    /// is rolled forward by the next [`Workspace::open`].
    pub fn merge_reviewed_with(
        &mut self,
        iteration: u32,
        corrected: &BTreeMap<ImageId, Vec<BoundingBox>>,
        finish: impl FnOnce(&mut WorkspaceManifest),
    ) -> Result<MergeReport> {
        let batch: Option<BTreeSet<&ImageId>> = self
            .manifest
            .loop_state
            .as_ref()
            .filter(|s| s.iteration == iteration)
            .map(|s| s.pending_batch.iter().collect());
        for (id, boxes) in corrected {
            self.manifest.entry(id)?;
            if !self.manifest.splits.unlabeled.contains(id) {
                return Err(WorkspaceError::WrongPool {
                    id: id.clone(),
                    expected: Pool::Unlabeled,
                });
            }
            if batch.as_ref().is_some_and(|b| !b.contains(id)) {
                return Err(WorkspaceError::NotInBatch {
                    id: id.clone(),
                    iteration,
                });
            }
            self.manifest
                .label_map
                .check_boxes(boxes)
                .map_err(WorkspaceError::label(format!("corrected labels for {id}")))?;
        }

        let staging = self.staging_dir(iteration);
        fsutil::reset_dir(&staging).map_err(WorkspaceError::io(&staging))?;
        for (id, boxes) in corrected {
            let text = serialize_label_file(boxes)
                .map_err(WorkspaceError::label(format!("corrected labels for {id}")))?;
            let path = staging.join(format!("{id}.txt"));
            write_atomic(&path, text.as_bytes()).map_err(WorkspaceError::io(path))?;
        }

        let report = self.commit_with(|m| {
            for id in corrected.keys() {
                m.splits.unlabeled.remove(id);
                m.splits.train.insert(id.clone());
                if let Some(e) = m.images.get_mut(id) {
                    e.origin = Origin::Assisted;
                    e.source_iteration = iteration;
                }
            }
            if let Some(r) = m.iteration_mut(iteration) {
                r.merged += corrected.len();
            }
            finish(m);
            Ok::<_, WorkspaceError>(MergeReport {
                merged: corrected.keys().cloned().collect(),
                train_size: m.train_originals().count(),
            })
        })?;
        self.recover_staging()?;
        Ok(report)
    }

    fn staging_dir(&self, iteration: u32) -> PathBuf {
        self.root
            .join("labels")
            .join(STAGING_DIR)
            .join(format!("iter_{iteration}"))
    }

    /// Moves staged labels whose images the manifest already counts as
    /// assisted; discards the rest.
    fn recover_staging(&self) -> Result<()> {
        let base = self.root.join("labels").join(STAGING_DIR);
        let Ok(dirs) = fs::read_dir(&base) else {
            return Ok(());
        };
        for dir in dirs {
            let dir = dir.map_err(WorkspaceError::io(&base))?.path();
            for file in fsutil::list_files(&dir).map_err(WorkspaceError::io(&dir))? {
                let id = ImageId::new(fsutil::file_stem(&file));
                let committed = self.manifest.splits.train.contains(&id)
                    && self.manifest.images.get(&id).is_some_and(|e| e.origin == Origin::Assisted);
                if committed {
                    let dst = self.label_path(&id);
                    fs::rename(&file, &dst).map_err(WorkspaceError::io(dst))?;
                } else {
                    fs::remove_file(&file).map_err(WorkspaceError::io(&file))?;
                }
            }
            fs::remove_dir_all(&dir).map_err(WorkspaceError::io(&dir))?;
        }
        Ok(())
    }

    /// Regenerates augmented copies of every labeled train original and
    /// records the counts in iteration `iteration`'s record.
    pub fn augment_split(&mut self, spec: &AugmentationSpec, iteration: u32) -> Result<AugmentReport> {
        self.augment_split_with(spec, iteration, |_, _| {})
    }

    pub fn augment_split_with(
        &mut self,
        spec: &AugmentationSpec,
        iteration: u32,
        finish: impl FnOnce(&mut WorkspaceManifest, &AugmentReport),
    ) -> Result<AugmentReport> {
        spec.validate()?;
        let mut originals = Vec::new();
        for id in self.manifest.train_originals() {
            if !self.manifest.images[id].origin.is_labeled() {
                return Err(WorkspaceError::UnlabeledTrainImage(id.clone()));
            }
            originals.push(id.clone());
        }
        if originals.is_empty() {
            return Err(WorkspaceError::EmptyTrainPool);
        }
        let plan = plan_augmentation(&originals, spec);
        let results = self.render_augmentations(spec, &plan);

        let mut report = AugmentReport {
            originals: originals.len(),
            ..Default::default()
        };
        let mut new_entries = Vec::new();
        for ((parent, _), result) in plan.iter().zip(results) {
            match result {
                Ok((id, entry, dropped)) => {
                    report.boxes_dropped += dropped;
                    new_entries.push((id, entry));
                }
                Err(e) => {
                    tracing::warn!(%parent, error = %e, "augmentation skipped");
                    report.skipped.push(parent.clone());
                }
            }
        }
        report.augmented = new_entries.len();
        report.total = report.originals + report.augmented;

        let old: Vec<ImageId> = self.manifest.augmented().cloned().collect();
        let keep: BTreeSet<ImageId> = new_entries.iter().map(|(id, _)| id.clone()).collect();
        let started = self.clock.timestamp();
        self.commit_with(|m| {
            for id in &old {
                m.splits.train.remove(id);
                m.images.remove(id);
            }
            for (id, entry) in new_entries {
                m.splits.train.insert(id.clone());
                m.images.insert(id, entry);
            }
            if m.iteration_mut(iteration).is_none() && iteration as usize == m.iterations.len() + 1 {
                m.iterations.push(IterationRecord::new(iteration, started));
            }
            if let Some(r) = m.iteration_mut(iteration) {
                r.train_size_original = report.originals;
                r.train_size_augmented = report.augmented;
                r.train_size_total = report.total;
            }
            finish(m, &report);
            Ok::<_, WorkspaceError>(())
        })?;
        for id in old.iter().filter(|id| !keep.contains(*id)) {
            let _ = fs::remove_file(self.root.join("images").join(format!("{id}.png")));
            let _ = fs::remove_file(self.label_path(id));
        }
        Ok(report)
    }

    fn render_augmentations(
        &self,
        spec: &AugmentationSpec,
        plan: &[(ImageId, u32)],
    ) -> Vec<Result<(ImageId, ImageEntry, usize)>> {
        plan.par_iter()
            .map(|(parent, k)| self.render_one(spec, parent, *k))
            .collect()
    }

    fn render_one(
        &self,
        spec: &AugmentationSpec,
        parent: &ImageId,
        copy: u32,
    ) -> Result<(ImageId, ImageEntry, usize)> {
        let entry = self.manifest.entry(parent)?;
        let src = self.root.join(&entry.path);
        let raster = image::open(&src)
            .map_err(|e| WorkspaceError::Decode {
                path: src.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let dims = ImageDims::new(raster.width(), raster.height())?;
        let t = sample_affine(spec, dims, parent.as_str(), copy);
        let out = resample_raster(&raster, &t)?;
        let boxes = self.read_labels(parent)?;
        let mut moved = Vec::with_capacity(boxes.len());
        for b in &boxes {
            if let Some(nb) = transform_box(b, &t, dims, spec.min_area_keep_fraction)? {
                moved.push(nb);
            }
        }
        let id = parent.augmented(copy);
        let rel = format!("images/{id}.png");
        let dst = self.root.join(&rel);
        let mut png = Vec::new();
        out.write_to(&mut io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| WorkspaceError::Decode {
                path: dst.clone(),
                message: e.to_string(),
            })?;
        write_atomic(&dst, &png).map_err(WorkspaceError::io(&dst))?;
        self.write_labels(&id, &moved)?;
        let aug_entry = ImageEntry {
            path: rel,
            original_name: format!("{}{AUG_MARKER}{copy}.png", fsutil::file_stem(Path::new(&entry.original_name))),
            width: dims.width,
            height: dims.height,
            origin: Origin::Augmented,
            source_iteration: self.current_iteration(),
            parent: Some(parent.clone()),
        };
        Ok((id, aug_entry, boxes.len() - moved.len()))
    }
}

fn acquire_lock(root: &Path) -> Result<File> {
    let path = root.join(LOCK_FILE);
    let file = fs::OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(WorkspaceError::io(&path))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => Err(WorkspaceError::Locked(root.to_path_buf())),
        Err(fs::TryLockError::Error(e)) => Err(WorkspaceError::io(path)(e)),
    }
}

fn decode_dims(path: &Path, bytes: &[u8]) -> Result<(u32, u32)> {
    let decode_err = |message: String| WorkspaceError::Decode {
        path: path.to_path_buf(),
        message,
    };
    let img = ImageReader::new(io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(decode_err("empty image".into()));
    }
    Ok((img.width(), img.height()))
}

pub fn label_path(root: &Path, id: &ImageId) -> PathBuf {
    root.join("labels").join(format!("{id}.txt"))
}

pub fn review_dir(root: &Path, iteration: u32) -> PathBuf {
    root.join("review").join(format!("iter_{iteration}"))
}

pub fn read_labels(root: &Path, id: &ImageId) -> Result<Vec<BoundingBox>> {
    let path = label_path(root, id);
    let text = fs::read_to_string(&path).map_err(WorkspaceError::io(&path))?;
    parse_label_file(&text).map_err(WorkspaceError::label(path.display()))
}

/// Walks the workspace and cross-checks files against the manifest.
pub fn verify(root: impl AsRef<Path>) -> Result<VerifyReport> {
    let root = root.as_ref();
    let manifest = Workspace::load_manifest(root)?;
    let mut issues = manifest.check();

    match fs::read_to_string(root.join(LABEL_MAP_FILE)) {
        Ok(text) => match LabelMap::parse(&text) {
            Ok(map) if map == manifest.label_map => {}
            Ok(_) => issues.push(format!("{LABEL_MAP_FILE} differs from the manifest label map")),
            Err(e) => issues.push(format!("{LABEL_MAP_FILE}: {e}")),
        },
        Err(e) => issues.push(format!("{LABEL_MAP_FILE}: {e}")),
    }

    let mut image_files: BTreeSet<String> = BTreeSet::new();
    for entry in manifest.images.values() {
        image_files.insert(entry.path.clone());
    }
    let images_dir = root.join("images");
    for file in fsutil::list_files(&images_dir).map_err(WorkspaceError::io(&images_dir))? {
        let rel = format!("images/{}", file.file_name().unwrap_or_default().to_string_lossy());
        if !image_files.contains(&rel) {
            issues.push(format!("{rel} is not in the manifest"));
        }
    }
    for (id, entry) in &manifest.images {
        if !root.join(&entry.path).is_file() {
            issues.push(format!("image file {} for {id} is missing", entry.path));
        }
        let lp = label_path(root, id);
        if entry.origin.is_labeled() {
            match fs::read_to_string(&lp) {
                Ok(text) => match parse_label_file::<BoundingBox>(&text) {
                    Ok(boxes) => {
                        if let Err(e) = manifest.label_map.check_boxes(&boxes) {
                            issues.push(format!("labels for {id}: {e}"));
                        }
                    }
                    Err(e) => issues.push(format!("labels for {id}: {e}")),
                },
                Err(_) => issues.push(format!("labeled image {id} has no label file")),
            }
        }
    }
    let labels_dir = root.join("labels");
    for file in fsutil::list_files(&labels_dir).map_err(WorkspaceError::io(&labels_dir))? {
        let id = ImageId::new(fsutil::file_stem(&file));
        match manifest.images.get(&id) {
            None => issues.push(format!("label file {} has no image", file.display())),
            Some(e) if e.origin == Origin::Unlabeled => {
                issues.push(format!("unlabeled image {id} has a stale label file"))
            }
            Some(_) => {}
        }
    }
    Ok(VerifyReport { issues })
}
