//! Runs the full loop over a scenario with the mock detector standing in for
//! training and the simulated annotator standing in for the reviewer.

use std::collections::BTreeMap;
use std::fs;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::fsutil::{self, write_atomic};
use crate::orchestrator::{self, LoopConfig, LoopError, LoopReport, Orchestrator, ReportRow, StepOutcome};
use crate::labelfmt::serialize_label_file;
use crate::workspace::{ImageId, Pool, Workspace};

use super::annotator::AnnotatorCostModel;
use super::mock::{MockDetector, MockDetectorModel};
use super::scenario::{Scenario, ScenarioError, Split};

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<crate::workspace::WorkspaceError> for SimulationError {
    fn from(e: crate::workspace::WorkspaceError) -> Self {
        SimulationError::Loop(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub seeds: Vec<u64>,
    pub model: MockDetectorModel,
    pub loop_config: LoopConfig,
    /// Also run the all-manual baseline for each seed.
    pub baseline: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            model: MockDetectorModel::default(),
            loop_config: LoopConfig::default(),
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub baseline: bool,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub runs: Vec<SeedRun>,
}

pub const CSV_HEADER: &str = "iteration,train_size,best_f1,map50,map90,labor_total,labor_per_image";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn csv_row(out: &mut String, iteration: u32, train: usize, vals: [Option<f64>; 5]) {
    let _ = write!(out, "{iteration},{train}");
    for v in vals {
        let _ = write!(out, ",{}", opt(v));
    }
    out.push('\n');
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl SeedRun {
    pub fn csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            csv_row(
                &mut out,
                r.iteration,
                r.train_size,
                [r.best_f1, r.map50, r.map90, r.labor_total, r.labor_per_image],
            );
        }
        out
    }
}

impl SimulationReport {
    pub fn loop_runs(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(|r| !r.baseline)
    }

    /// Median over seeds of `field` at each iteration index.
    pub fn median_by_iteration(&self, field: impl Fn(&ReportRow) -> Option<f64>) -> BTreeMap<u32, f64> {
        let mut by_iter: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for run in self.loop_runs() {
            for row in &run.rows {
                if let Some(v) = field(row) {
                    by_iter.entry(row.iteration).or_default().push(v);
                }
            }
        }
        by_iter
            .into_iter()
            .filter_map(|(i, mut v)| median(&mut v).map(|m| (i, m)))
            .collect()
    }

    pub fn median_csv(&self) -> String {
        let cols: [fn(&ReportRow) -> Option<f64>; 5] = [
            |r| r.best_f1,
            |r| r.map50,
            |r| r.map90,
            |r| r.labor_total,
            |r| r.labor_per_image,
        ];
        let medians: Vec<BTreeMap<u32, f64>> = cols.iter().map(|f| self.median_by_iteration(f)).collect();
        let train: BTreeMap<u32, usize> = self
            .loop_runs()
            .flat_map(|r| r.rows.iter().map(|row| (row.iteration, row.train_size)))
            .collect();
        let mut out = format!("{CSV_HEADER}\n");
        for (&i, &n) in &train {
            let vals = [0, 1, 2, 3, 4].map(|k| medians[k].get(&i).copied());
            csv_row(&mut out, i, n, vals);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            let tag = if run.baseline { "baseline" } else { "loop" };
            let _ = writeln!(out, "seed {} ({tag})", run.seed);
            out.push_str(&LoopReport { rows: run.rows.clone() }.table());
        }
        out.push_str("median over seeds\n");
        out.push_str(&self.median_csv());
        out
    }

    /// Writes `<mode>_seed_<s>.csv` per run, `median.csv` and `report.txt`.
    pub fn write(&self, dir: &Path) -> Result<(), SimulationError> {
        let put = |name: String, body: String| {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes()).map_err(|source| SimulationError::Io { path, source })
        };
        for run in &self.runs {
            let mode = if run.baseline { "baseline" } else { "loop" };
            put(format!("{mode}_seed_{}.csv", run.seed), run.csv())?;
        }
        put("median.csv".into(), self.median_csv())?;
        put("report.txt".into(), self.table())
    }
}

/// Builds a seeded workspace at `root` from a scenario: seed images with
/// their hand labels in the train pool, the rest unlabeled, and the
/// validation split labeled. In baseline mode every loop image is
/// hand-labeled up front.
pub fn prepare_workspace(
    scenario: &Scenario,
    root: &Path,
    costs: &AnnotatorCostModel,
    baseline: bool,
) -> Result<Workspace, SimulationError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SimulationError::Io { path, source }
    };
    let mut ws = Workspace::init(root, scenario.label_map())?.with_clock(Clock::fixed_epoch(0));
    let seed_images = scenario.images(Split::Seed)?;
    orchestrator::import_labeled(&mut ws, &seed_images, &scenario.labels_dir(Split::Seed), Pool::Train)?;
    let rest = scenario.images(Split::Unlabeled)?;
    if baseline {
        let stage = tempfile_dir(root)?;
        for img in &rest {
            let id = ImageId::from_content(&fs::read(img).map_err(io(img))?);
            let text = serialize_label_file(&scenario.ground_truth(&id)?).expect("valid truth");
            let path = stage.join(format!("{}.txt", fsutil::file_stem(img)));
            write_atomic(&path, text.as_bytes()).map_err(io(&path))?;
        }
        orchestrator::import_labeled(&mut ws, &rest, &stage, Pool::Train)?;
        fs::remove_dir_all(&stage).map_err(io(&stage))?;
    } else {
        ws.import_images(&rest, Pool::Unlabeled)?;
    }
    let val = scenario.images(Split::Val)?;
    if !val.is_empty() {
        orchestrator::import_labeled(&mut ws, &val, &scenario.labels_dir(Split::Val), Pool::Val)?;
    }
    orchestrator::seed(&mut ws, costs, baseline)?;
    Ok(ws)
}

fn tempfile_dir(root: &Path) -> Result<PathBuf, SimulationError> {
    let dir = root.with_extension("labels");
    fsutil::reset_dir(&dir).map_err(|source| SimulationError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

pub fn mock_detector(scenario: &Scenario, model: MockDetectorModel) -> MockDetector {
    MockDetector::new(model, scenario.ground_truth_dir(), scenario.spec.classes.len() as u32)
}

/// Runs the loop to completion, answering every review with the hidden
/// ground truth.
pub fn drive(orch: &mut Orchestrator, scenario: &Scenario) -> Result<(), SimulationError> {
    loop {
        match orch.run(None)? {
            StepOutcome::Complete => return Ok(()),
            StepOutcome::ReviewPending { iteration, .. } => {
                let batch = orch.state()?.pending_batch.clone();
                let mut corrected = BTreeMap::new();
                for id in batch {
                    let truth = scenario.ground_truth(&id)?;
                    corrected.insert(id, truth);
                }
                orch.finalize_review(iteration, &corrected)?;
            }
            StepOutcome::Advanced { .. } => {}
        }
    }
}

/// One loop run on a fresh workspace under `work_dir`.
pub fn run_seed(
    scenario: &Scenario,
    work_dir: &Path,
    cfg: &SimulationConfig,
    seed: u64,
    baseline: bool,
) -> Result<SeedRun, SimulationError> {
    let mode = if baseline { "baseline" } else { "loop" };
    let root = work_dir.join(format!("{mode}_seed_{seed}"));
    let mut loop_cfg = cfg.loop_config.clone();
    loop_cfg.augmentation.seed = seed;
    loop_cfg.adapter = None;
    let ws = prepare_workspace(scenario, &root, &loop_cfg.costs, baseline)?;
    let detector = mock_detector(scenario, MockDetectorModel { seed, ..cfg.model });
    let mut orch = Orchestrator::new(ws, loop_cfg)?.with_detector(Box::new(detector));
    drive(&mut orch, scenario)?;
    let report = LoopReport::from_manifest(orch.workspace().manifest())?;
    Ok(SeedRun {
        seed,
        baseline,
        rows: report.rows,
    })
}

/// Runs every seed (and the baseline when asked) in `work_dir`.
pub fn simulate(scenario: &Scenario, work_dir: &Path, cfg: &SimulationConfig) -> Result<SimulationReport, SimulationError> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        tracing::info!(seed, "simulating loop");
        runs.push(run_seed(scenario, work_dir, cfg, seed, false)?);
        if cfg.baseline {
            runs.push(run_seed(scenario, work_dir, cfg, seed, true)?);
        }
    }
    Ok(SimulationReport { runs })
}
