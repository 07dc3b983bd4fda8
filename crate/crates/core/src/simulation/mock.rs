//! A detector whose errors shrink as its training set grows.
//!
//! Training only records the training-set size `n`; detection perturbs the
//! hidden ground truth with noise scaled by `s(n) = sqrt(n0 / n)`. The random
//! draws for an image depend only on `(seed, image id)`, so two models that
//! differ only in `n` see the same underlying noise and the larger one is
//! never worse box by box.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, Detector};
use crate::fsutil::{self, write_atomic};
use crate::labelfmt::{parse_label_file, serialize_label_file, BoundingBox, Prediction};
use crate::rng::keyed_rng;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid mock detector model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockDetectorModel {
    /// Std-dev of the center offset, relative to box width/height.
    pub center_jitter: f64,
    /// Std-dev of the log size ratio.
    pub size_jitter: f64,
    pub miss_rate: f64,
    /// Expected spurious boxes per true box.
    pub spurious_rate: f64,
    /// Training-set size at which the base parameters apply.
    pub reference_size: u32,
    /// Perturbation magnitude at which confidence bottoms out.
    pub confidence_scale: f64,
    pub seed: u64,
}

impl Default for MockDetectorModel {
    fn default() -> Self {
        Self {
            center_jitter: 0.08,
            size_jitter: 0.10,
            miss_rate: 0.10,
            spurious_rate: 0.20,
            reference_size: 100,
            confidence_scale: 1.0,
            seed: 0,
        }
    }
}

pub const MIN_CONFIDENCE: f64 = 0.05;
pub const MAX_CONFIDENCE: f64 = 0.99;
/// Spurious boxes score in `[MIN_CONFIDENCE, SPURIOUS_MAX_CONFIDENCE)`.
pub const SPURIOUS_MAX_CONFIDENCE: f64 = 0.45;

impl MockDetectorModel {
    pub fn noiseless() -> Self {
        Self {
            center_jitter: 0.0,
            size_jitter: 0.0,
            miss_rate: 0.0,
            spurious_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MockError> {
        let bad = |m: &str| Err(MockError::InvalidModel(m.into()));
        if !(self.center_jitter >= 0.0 && self.size_jitter >= 0.0) {
            return bad("jitters must be non-negative");
        }
        if !((0.0..1.0).contains(&self.miss_rate) && (0.0..1.0).contains(&self.spurious_rate)) {
            return bad("miss and spurious rates must be in [0, 1)");
        }
        if self.reference_size == 0 {
            return bad("reference_size must be positive");
        }
        if !(self.confidence_scale > 0.0 && self.confidence_scale.is_finite()) {
            return bad("confidence_scale must be positive");
        }
        Ok(())
    }
}

/// Error parameters in effect after training on `train_size` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub center_jitter: f64,
    pub size_jitter: f64,
    pub miss_rate: f64,
    pub spurious_rate: f64,
}

/// Contents of a mock weights file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockWeights {
    pub train_size: usize,
    pub scale: f64,
    pub effective: EffectiveParams,
    pub confidence_scale: f64,
    pub seed: u64,
}

impl MockWeights {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("weights serialize");
        s.push('\n');
        s
    }
}

pub fn mock_train(model: &MockDetectorModel, train_size: usize) -> Result<MockWeights, MockError> {
    model.validate()?;
    if train_size == 0 {
        return Err(MockError::EmptyTrainingSet);
    }
    let scale = (model.reference_size as f64 / train_size as f64).sqrt();
    let rate_scale = scale.min(1.0);
    Ok(MockWeights {
        train_size,
        scale,
        effective: EffectiveParams {
            center_jitter: model.center_jitter * scale,
            size_jitter: model.size_jitter * scale,
            miss_rate: model.miss_rate * rate_scale,
            spurious_rate: model.spurious_rate * rate_scale,
        },
        confidence_scale: model.confidence_scale,
        seed: model.seed,
    })
}

/// Smallest `k` with `P(X <= k) >= u` for `X ~ Poisson(lambda)`. Monotone in
/// `lambda` for fixed `u`, which keeps the spurious count stable as the
/// model improves.
fn poisson_quantile(lambda: f64, u: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0;
    while cdf < u && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// Predictions for one image.
pub fn mock_detect(weights: &MockWeights, image_id: &str, truth: &[BoundingBox], classes: u32) -> Vec<Prediction> {
    let eff = &weights.effective;
    let mut out = Vec::with_capacity(truth.len());
    for (i, gt) in truth.iter().enumerate() {
        let mut rng = keyed_rng("mock-detect", weights.seed, image_id, i as u64);
        let miss_draw: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if miss_draw < eff.miss_rate {
            continue;
        }
        let cx = gt.cx + z[0] * eff.center_jitter * gt.w;
        let cy = gt.cy + z[1] * eff.center_jitter * gt.h;
        let w = gt.w * (z[2] * eff.size_jitter).exp();
        let h = gt.h * (z[3] * eff.size_jitter).exp();
        let x0 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x1 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y0 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y1 = (cy + h / 2.0).clamp(0.0, 1.0);
        if x1 - x0 < 1e-3 || y1 - y0 < 1e-3 {
            continue;
        }
        let magnitude = (z[0] * eff.center_jitter).hypot(z[1] * eff.center_jitter)
            .hypot((z[2] * eff.size_jitter).hypot(z[3] * eff.size_jitter));
        let confidence = (1.0 - magnitude / weights.confidence_scale).clamp(MIN_CONFIDENCE, MAX_CONFIDENCE);
        out.push(Prediction::new(
            BoundingBox::from_corners(gt.class_id, x0, y0, x1, y1),
            confidence,
        ));
    }

    let mut count_rng = keyed_rng("mock-spurious-count", weights.seed, image_id, 0);
    let spurious = poisson_quantile(eff.spurious_rate * truth.len() as f64, count_rng.random());
    for k in 0..spurious {
        let mut rng = keyed_rng("mock-spurious", weights.seed, image_id, k as u64);
        let w: f64 = rng.random_range(0.05..0.3);
        let h: f64 = rng.random_range(0.05..0.3);
        let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
        let class_id = rng.random_range(0..classes.max(1));
        let confidence = rng.random_range(MIN_CONFIDENCE..SPURIOUS_MAX_CONFIDENCE);
        out.push(Prediction::new(BoundingBox::new(class_id, cx, cy, w, h), confidence));
    }
    out
}

/// Stems that are augmented copies rather than originals.
pub fn is_augmented_stem(stem: &str) -> bool {
    stem.contains("__aug")
}

/// In-process detector over hidden ground truth stored as
/// `<ground_truth_dir>/<image id>.txt`.
#[derive(Debug, Clone)]
pub struct MockDetector {
    pub model: MockDetectorModel,
    pub ground_truth_dir: PathBuf,
    pub classes: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AdapterError + '_ {
    move |source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl MockDetector {
    pub fn new(model: MockDetectorModel, ground_truth_dir: impl Into<PathBuf>, classes: u32) -> Self {
        Self {
            model,
            ground_truth_dir: ground_truth_dir.into(),
            classes,
        }
    }

    fn load_truth(&self, stem: &str) -> Result<Vec<BoundingBox>, AdapterError> {
        let path = self.ground_truth_dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_label_file(&text).map_err(|source| AdapterError::MalformedPrediction { file: path, source })
    }
}

/// Number of original (non-augmented) images in a dataset directory.
pub fn count_originals(dataset_dir: &Path) -> Result<usize, AdapterError> {
    let images = dataset_dir.join("images");
    Ok(fsutil::list_files(&images)
        .map_err(io_err(&images))?
        .iter()
        .filter(|p| !is_augmented_stem(&fsutil::file_stem(p)))
        .count())
}

impl Detector for MockDetector {
    fn train(
        &self,
        dataset_dir: &Path,
        weights_out: &Path,
        _weights_in: Option<&Path>,
        _iteration: u32,
    ) -> Result<(), AdapterError> {
        let n = count_originals(dataset_dir)?;
        let weights = mock_train(&self.model, n).map_err(|e| AdapterError::TrainFailed {
            status: "mock".into(),
            output: e.to_string(),
        })?;
        write_atomic(weights_out, weights.to_json().as_bytes()).map_err(io_err(weights_out))
    }

    fn detect(
        &self,
        weights: &Path,
        images_dir: &Path,
        predictions_dir: &Path,
        _iteration: u32,
    ) -> Result<(), AdapterError> {
        let text = fs::read_to_string(weights).map_err(io_err(weights))?;
        let weights: MockWeights = serde_json::from_str(&text).map_err(|e| AdapterError::DetectFailed {
            status: "mock".into(),
            output: format!("unreadable weights: {e}"),
        })?;
        let stems: Vec<String> = fsutil::list_files(images_dir)
            .map_err(io_err(images_dir))?
            .iter()
            .map(|p| fsutil::file_stem(p))
            .collect();
        stems.par_iter().try_for_each(|stem| {
            let truth = self.load_truth(stem)?;
            let preds = mock_detect(&weights, stem, &truth, self.classes);
            let text = serialize_label_file(&preds).map_err(|source| AdapterError::MalformedPrediction {
                file: predictions_dir.join(stem),
                source,
            })?;
            let out = predictions_dir.join(format!("{stem}.txt"));
            write_atomic(&out, text.as_bytes()).map_err(io_err(&out))
        })
    }
}

/// Runs the mock over a map of image id to truth; used by tests and the
/// standalone CLI commands.
pub fn mock_detect_all(
    weights: &MockWeights,
    truths: &BTreeMap<String, Vec<BoundingBox>>,
    classes: u32,
) -> BTreeMap<String, Vec<Prediction>> {
    truths
        .par_iter()
        .map(|(id, gt)| (id.clone(), mock_detect(weights, id, gt, classes)))
        .collect()
}
