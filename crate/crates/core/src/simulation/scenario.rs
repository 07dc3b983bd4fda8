//! Synthetic scenarios: images with known boxes, split into a labeled seed
//! set, an unlabeled pool and a labeled validation set.
//!
//! ```text
//! <dir>/scenario.json
//! <dir>/classes.txt
//! <dir>/images/{seed,unlabeled,val}/img_NNNN.png
//! <dir>/labels/{seed,val}/img_NNNN.txt      hand labels, by file stem
//! <dir>/simulation/ground_truth/<id>.txt    hidden truth, by image id
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{self, write_atomic};
use crate::labelfmt::{parse_label_file, serialize_label_file, BoundingBox, LabelError, LabelMap};
use crate::rng::keyed_rng;
use crate::workspace::ImageId;

pub const SCENARIO_FILE: &str = "scenario.json";
pub const GROUND_TRUTH_DIR: &str = "simulation/ground_truth";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Label {
        path: PathBuf,
        #[source]
        source: LabelError,
    },
    #[error("{0}: not a scenario directory")]
    NotAScenario(PathBuf),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed_images: usize,
    pub unlabeled_images: usize,
    pub val_images: usize,
    pub classes: Vec<String>,
    pub width: u32,
    pub height: u32,
    pub max_boxes: u32,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed_images: 100,
            unlabeled_images: 300,
            val_images: 100,
            classes: vec!["ballast".into(), "vegetation".into(), "debris".into()],
            width: 64,
            height: 48,
            max_boxes: 4,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.seed_images == 0 {
            return Err(ScenarioError::Invalid("seed_images must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(ScenarioError::Invalid("at least one class is required".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(ScenarioError::Invalid("images must be at least 16x16".into()));
        }
        if self.max_boxes == 0 {
            return Err(ScenarioError::Invalid("max_boxes must be at least 1".into()));
        }
        LabelMap::new(&self.classes).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Seed,
    Unlabeled,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Seed => "seed",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
        }
    }
}

/// A generated scenario on disk.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dir: PathBuf,
    pub spec: ScenarioSpec,
}

fn random_boxes(rng: &mut impl Rng, classes: u32, max_boxes: u32) -> Vec<BoundingBox> {
    let k = rng.random_range(1..=max_boxes);
    (0..k)
        .map(|_| {
            let w = rng.random_range(0.12..0.4);
            let h = rng.random_range(0.12..0.4);
            let x = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let y = rng.random_range(h / 2.0..1.0 - h / 2.0);
            BoundingBox::new(rng.random_range(0..classes), x, y, w, h).quantized()
        })
        .collect()
}

const PALETTE: [[u8; 3]; 6] = [
    [200, 60, 40],
    [40, 170, 60],
    [50, 80, 210],
    [210, 190, 40],
    [160, 50, 180],
    [40, 180, 190],
];

fn render(spec: &ScenarioSpec, index: u64, boxes: &[BoundingBox]) -> RgbImage {
    let mut rng = keyed_rng("scenario-pixels", spec.seed, "", index);
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::from_fn(w, h, |_, _| {
        let v: u8 = rng.random_range(90..140);
        Rgb([v, v, v])
    });
    for b in boxes {
        let color = PALETTE[b.class_id as usize % PALETTE.len()];
        let x0 = (b.x_min() * w as f64).round() as u32;
        let x1 = ((b.x_max() * w as f64).round() as u32).min(w);
        let y0 = (b.y_min() * h as f64).round() as u32;
        let y1 = ((b.y_max() * h as f64).round() as u32).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}

fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

impl Scenario {
    /// Writes a scenario into `dir`, which must be empty or absent. Output
    /// depends only on `spec`.
    pub fn generate(dir: impl Into<PathBuf>, spec: &ScenarioSpec) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let dir = dir.into();
        if dir.exists() && fs::read_dir(&dir).map_err(io_err(&dir))?.next().is_some() {
            return Err(ScenarioError::Invalid(format!("{} is not empty", dir.display())));
        }
        let gt_dir = dir.join(GROUND_TRUTH_DIR);
        fs::create_dir_all(&gt_dir).map_err(io_err(&gt_dir))?;
        let map = LabelMap::new(&spec.classes).expect("validated");
        let classes_path = dir.join("classes.txt");
        write_atomic(&classes_path, map.to_text().as_bytes()).map_err(io_err(&classes_path))?;

        let splits = [
            (Split::Seed, spec.seed_images),
            (Split::Unlabeled, spec.unlabeled_images),
            (Split::Val, spec.val_images),
        ];
        let mut jobs = Vec::new();
        let mut index = 0u64;
        for (split, count) in splits {
            for d in ["images", "labels"] {
                let p = dir.join(d).join(split.dir_name());
                fs::create_dir_all(&p).map_err(io_err(&p))?;
            }
            for _ in 0..count {
                jobs.push((split, index));
                index += 1;
            }
        }
        let classes = spec.classes.len() as u32;
        jobs.par_iter().try_for_each(|&(split, i)| {
            let mut rng = keyed_rng("scenario-boxes", spec.seed, "", i);
            let boxes = random_boxes(&mut rng, classes, spec.max_boxes);
            let png = encode_png(&render(spec, i, &boxes));
            let id = ImageId::from_content(&png);
            let name = format!("img_{i:04}");
            let text = serialize_label_file(&boxes).expect("generated boxes are valid");
            let image_path = dir.join("images").join(split.dir_name()).join(format!("{name}.png"));
            write_atomic(&image_path, &png).map_err(io_err(&image_path))?;
            let gt_path = gt_dir.join(format!("{id}.txt"));
            write_atomic(&gt_path, text.as_bytes()).map_err(io_err(&gt_path))?;
            if split != Split::Unlabeled {
                let label_path = dir.join("labels").join(split.dir_name()).join(format!("{name}.txt"));
                write_atomic(&label_path, text.as_bytes()).map_err(io_err(&label_path))?;
            }
            Ok::<_, ScenarioError>(())
        })?;

        let spec_path = dir.join(SCENARIO_FILE);
        let body = serde_json::to_string_pretty(spec).expect("spec serializes") + "\n";
        write_atomic(&spec_path, body.as_bytes()).map_err(io_err(&spec_path))?;
        Ok(Self { dir, spec: spec.clone() })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ScenarioError> {
        let dir = dir.into();
        let path = dir.join(SCENARIO_FILE);
        let text = fs::read_to_string(&path).map_err(|_| ScenarioError::NotAScenario(dir.clone()))?;
        let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| ScenarioError::Decode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(Self { dir, spec })
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::new(&self.spec.classes).expect("validated")
    }

    pub fn images(&self, split: Split) -> Result<Vec<PathBuf>, ScenarioError> {
        let d = self.dir.join("images").join(split.dir_name());
        fsutil::list_files(&d).map_err(io_err(&d))
    }

    /// Hand labels for the seed or validation split, keyed by file stem.
    pub fn labels_dir(&self, split: Split) -> PathBuf {
        self.dir.join("labels").join(split.dir_name())
    }

    pub fn ground_truth_dir(&self) -> PathBuf {
        self.dir.join(GROUND_TRUTH_DIR)
    }

    pub fn ground_truth(&self, id: &ImageId) -> Result<Vec<BoundingBox>, ScenarioError> {
        let path = self.ground_truth_dir().join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_label_file(&text).map_err(|source| ScenarioError::Label { path, source })
    }
}
