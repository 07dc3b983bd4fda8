//! Process contract for external detectors.
//!
//! A detector is two commands. `train` reads a dataset directory in the
//! usual YOLO layout and must leave a weights file at `{weights_out}`;
//! `detect` reads `{weights_in}` and writes one `<stem>.txt` prediction file
//! per image of `{images_dir}` into `{predictions_dir}`. Exit code 0 means
//! success. Commands are split shell-style and run without a shell.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::fsutil;
use crate::labelfmt::{parse_label_file, LabelError, LabelMap, Prediction, LABEL_MAP_FILE};
use crate::workspace::{label_path, WorkspaceManifest};

pub const ITERATION_ENV: &str = "LOOPMARK_ITER";

/// Placeholders a template may use.
pub const PLACEHOLDERS: [&str; 5] = [
    "dataset_dir",
    "weights_out",
    "weights_in",
    "images_dir",
    "predictions_dir",
];

/// Captured output kept per failed call.
const OUTPUT_TAIL_BYTES: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("cannot start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("train command failed ({status})\n{output}")]
    TrainFailed { status: String, output: String },
    #[error("detect command failed ({status})\n{output}")]
    DetectFailed { status: String, output: String },
    #[error("{stage} command timed out after {seconds}s\n{output}")]
    Timeout {
        stage: Stage,
        seconds: f64,
        output: String,
    },
    #[error("train command succeeded but produced no weights at {path}\n{output}")]
    MissingWeights { path: PathBuf, output: String },
    #[error("no prediction file for image {image} in {dir}")]
    MissingPrediction { image: String, dir: PathBuf },
    #[error("malformed prediction file {file}: {source}")]
    MalformedPrediction {
        file: PathBuf,
        #[source]
        source: LabelError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> AdapterError {
    let path = path.into();
    move |source| AdapterError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Detect,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Detect => "detect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub train_command: String,
    pub detect_command: String,
    /// Per call.
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_s: f64,
}

fn default_heartbeat() -> f64 {
    30.0
}

impl AdapterConfig {
    pub fn new(train_command: impl Into<String>, detect_command: impl Into<String>, timeout_s: f64) -> Self {
        Self {
            train_command: train_command.into(),
            detect_command: detect_command.into(),
            timeout_s,
            workdir: None,
            heartbeat_s: default_heartbeat(),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        check_template("train_command", &self.train_command, &["dataset_dir", "weights_out"])?;
        check_template(
            "detect_command",
            &self.detect_command,
            &["weights_in", "images_dir", "predictions_dir"],
        )?;
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(AdapterError::InvalidConfig("timeout_s must be positive".into()));
        }
        if !(self.heartbeat_s.is_finite() && self.heartbeat_s > 0.0) {
            return Err(AdapterError::InvalidConfig("heartbeat_s must be positive".into()));
        }
        Ok(())
    }
}

fn placeholders_in(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        let Some(end) = after.find('}') else { break };
        out.push(&after[..end]);
        rest = &after[end + 1..];
    }
    out
}

fn check_template(field: &str, template: &str, required: &[&str]) -> Result<(), AdapterError> {
    let tokens = shlex::split(template)
        .ok_or_else(|| AdapterError::InvalidConfig(format!("{field}: unbalanced quotes")))?;
    if tokens.is_empty() {
        return Err(AdapterError::InvalidConfig(format!("{field} is empty")));
    }
    let used = placeholders_in(template);
    if let Some(unknown) = used.iter().find(|p| !PLACEHOLDERS.contains(p)) {
        return Err(AdapterError::InvalidConfig(format!(
            "{field}: unknown placeholder {{{unknown}}}"
        )));
    }
    if let Some(missing) = required.iter().find(|r| !used.contains(r)) {
        return Err(AdapterError::InvalidConfig(format!(
            "{field} must contain {{{missing}}}"
        )));
    }
    Ok(())
}

/// Splits `template` into argv and substitutes placeholders token by token,
/// so substituted paths never need quoting.
pub fn render_command(template: &str, values: &BTreeMap<&str, String>) -> Result<Vec<String>, AdapterError> {
    let tokens = shlex::split(template)
        .ok_or_else(|| AdapterError::InvalidConfig(format!("unbalanced quotes in {template:?}")))?;
    Ok(tokens
        .into_iter()
        .map(|mut tok| {
            for (key, value) in values {
                tok = tok.replace(&format!("{{{key}}}"), value);
            }
            tok
        })
        .collect())
}

#[derive(Debug)]
struct Finished {
    status: Option<ExitStatus>,
    output: String,
}

fn tail(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(OUTPUT_TAIL_BYTES);
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}

/// Runs argv with a timeout, logging a heartbeat while it runs. `status` is
/// `None` when the process was killed for exceeding the timeout.
fn run_process(
    argv: &[String],
    cfg: &AdapterConfig,
    iteration: u32,
    stage: Stage,
) -> Result<Finished, AdapterError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| AdapterError::InvalidConfig("empty command".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .env(ITERATION_ENV, iteration.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &cfg.workdir {
        cmd.current_dir(dir);
    }
    #[cfg(unix)]
    std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
    tracing::info!(%stage, command = %argv.join(" "), "starting detector command");
    let mut child = cmd.spawn().map_err(|source| AdapterError::Spawn {
        program: program.clone(),
        source,
    })?;
    let readers: Vec<_> = [
        child.stdout.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
        child.stderr.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
    ]
    .into_iter()
    .flatten()
    .map(|mut pipe| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = pipe.read_to_end(&mut buf);
            buf
        })
    })
    .collect();

    let started = Instant::now();
    let deadline = Duration::from_secs_f64(cfg.timeout_s);
    let heartbeat = Duration::from_secs_f64(cfg.heartbeat_s);
    let status = loop {
        let remaining = deadline.saturating_sub(started.elapsed());
        if remaining.is_zero() {
            kill_tree(&mut child);
            let _ = child.wait();
            break None;
        }
        match child.wait_timeout(remaining.min(heartbeat)).map_err(io_err(program))? {
            Some(status) => break Some(status),
            None if started.elapsed() < deadline => {
                tracing::info!(%stage, elapsed_s = started.elapsed().as_secs(), "detector command still running");
            }
            None => {}
        }
    };
    let mut output = Vec::new();
    for reader in readers {
        output.extend(reader.join().unwrap_or_default());
    }
    Ok(Finished {
        status,
        output: tail(&output),
    })
}

/// Kills the command and anything it spawned; a lingering grandchild would
/// otherwise hold the output pipes open.
fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    if let Ok(pid) = i32::try_from(child.id()) {
        // SAFETY: plain syscall on the process group we created at spawn.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}

/// A detector the loop can train and run.
pub trait Detector: Send + Sync {
    fn train(
        &self,
        dataset_dir: &Path,
        weights_out: &Path,
        weights_in: Option<&Path>,
        iteration: u32,
    ) -> Result<(), AdapterError>;

    fn detect(
        &self,
        weights: &Path,
        images_dir: &Path,
        predictions_dir: &Path,
        iteration: u32,
    ) -> Result<(), AdapterError>;
}

/// Detector backed by the configured external commands.
#[derive(Debug, Clone)]
pub struct CommandDetector {
    cfg: AdapterConfig,
}

impl CommandDetector {
    pub fn new(cfg: AdapterConfig) -> Result<Self, AdapterError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn values(pairs: &[(&'static str, &Path)]) -> BTreeMap<&'static str, String> {
        let mut map: BTreeMap<&'static str, String> =
            PLACEHOLDERS.iter().map(|p| (*p, String::new())).collect();
        for (k, v) in pairs {
            map.insert(k, absolute(v).display().to_string());
        }
        map
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Detector for CommandDetector {
    fn train(
        &self,
        dataset_dir: &Path,
        weights_out: &Path,
        weights_in: Option<&Path>,
        iteration: u32,
    ) -> Result<(), AdapterError> {
        let mut pairs = vec![("dataset_dir", dataset_dir), ("weights_out", weights_out)];
        if let Some(w) = weights_in {
            pairs.push(("weights_in", w));
        }
        let argv = render_command(&self.cfg.train_command, &Self::values(&pairs))?;
        let done = run_process(&argv, &self.cfg, iteration, Stage::Train)?;
        match done.status {
            None => Err(AdapterError::Timeout {
                stage: Stage::Train,
                seconds: self.cfg.timeout_s,
                output: done.output,
            }),
            Some(s) if !s.success() => Err(AdapterError::TrainFailed {
                status: s.to_string(),
                output: done.output,
            }),
            Some(_) if !weights_out.is_file() => Err(AdapterError::MissingWeights {
                path: weights_out.to_path_buf(),
                output: done.output,
            }),
            Some(_) => Ok(()),
        }
    }

    fn detect(
        &self,
        weights: &Path,
        images_dir: &Path,
        predictions_dir: &Path,
        iteration: u32,
    ) -> Result<(), AdapterError> {
        let values = Self::values(&[
            ("weights_in", weights),
            ("images_dir", images_dir),
            ("predictions_dir", predictions_dir),
        ]);
        let argv = render_command(&self.cfg.detect_command, &values)?;
        let done = run_process(&argv, &self.cfg, iteration, Stage::Detect)?;
        match done.status {
            None => Err(AdapterError::Timeout {
                stage: Stage::Detect,
                seconds: self.cfg.timeout_s,
                output: done.output,
            }),
            Some(s) if !s.success() => Err(AdapterError::DetectFailed {
                status: s.to_string(),
                output: done.output,
            }),
            Some(_) => Ok(()),
        }
    }
}

/// Trains and checks that the weights file exists.
pub fn run_train(
    detector: &dyn Detector,
    dataset_dir: &Path,
    weights_out: &Path,
    weights_in: Option<&Path>,
    iteration: u32,
) -> Result<PathBuf, AdapterError> {
    for sub in ["images", "labels", LABEL_MAP_FILE] {
        if !dataset_dir.join(sub).exists() {
            return Err(AdapterError::InvalidConfig(format!(
                "dataset {} lacks {sub}",
                dataset_dir.display()
            )));
        }
    }
    if let Some(parent) = weights_out.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    detector.train(dataset_dir, weights_out, weights_in, iteration)?;
    if !weights_out.is_file() {
        return Err(AdapterError::MissingWeights {
            path: weights_out.to_path_buf(),
            output: String::new(),
        });
    }
    Ok(weights_out.to_path_buf())
}

/// Runs detection over `images_dir` and parses every prediction file.
/// Returns predictions keyed by image stem.
pub fn run_detect(
    detector: &dyn Detector,
    weights: &Path,
    images_dir: &Path,
    predictions_dir: &Path,
    label_map: &LabelMap,
    iteration: u32,
) -> Result<BTreeMap<String, Vec<Prediction>>, AdapterError> {
    if !weights.is_file() {
        return Err(AdapterError::MissingWeights {
            path: weights.to_path_buf(),
            output: String::new(),
        });
    }
    let images = fsutil::list_files(images_dir).map_err(io_err(images_dir))?;
    if images.is_empty() {
        return Err(AdapterError::InvalidConfig(format!(
            "{} has no images",
            images_dir.display()
        )));
    }
    fsutil::reset_dir(predictions_dir).map_err(io_err(predictions_dir))?;
    detector.detect(weights, images_dir, predictions_dir, iteration)?;
    read_predictions(images_dir, predictions_dir, label_map)
}

/// Loads `<stem>.txt` for every image, failing on the first missing or
/// malformed file.
pub fn read_predictions(
    images_dir: &Path,
    predictions_dir: &Path,
    label_map: &LabelMap,
) -> Result<BTreeMap<String, Vec<Prediction>>, AdapterError> {
    let mut out = BTreeMap::new();
    for image in fsutil::list_files(images_dir).map_err(io_err(images_dir))? {
        let stem = fsutil::file_stem(&image);
        let file = predictions_dir.join(format!("{stem}.txt"));
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(AdapterError::MissingPrediction {
                    image: stem,
                    dir: predictions_dir.to_path_buf(),
                })
            }
            Err(e) => return Err(io_err(file)(e)),
        };
        let malformed = |source| AdapterError::MalformedPrediction {
            file: file.clone(),
            source,
        };
        let preds: Vec<Prediction> = parse_label_file(&text).map_err(malformed)?;
        label_map.check_boxes(&preds).map_err(malformed)?;
        out.insert(stem, preds);
    }
    Ok(out)
}

/// Lays out the train pool (originals and augmented copies) as a dataset
/// directory an off-the-shelf trainer can read: `images/`, `labels/`,
/// `classes.txt` and `data.yaml`. Returns the number of images.
pub fn write_dataset(manifest: &WorkspaceManifest, workspace_root: &Path, out: &Path) -> Result<usize, AdapterError> {
    let images = out.join("images");
    let labels = out.join("labels");
    fsutil::reset_dir(&images).map_err(io_err(&images))?;
    fsutil::reset_dir(&labels).map_err(io_err(&labels))?;
    for id in &manifest.splits.train {
        let entry = &manifest.images[id];
        let src = workspace_root.join(&entry.path);
        let name = Path::new(&entry.path).file_name().unwrap_or_default();
        fsutil::link_or_copy(&src, &images.join(name)).map_err(io_err(&src))?;
        let label = label_path(workspace_root, id);
        fs::copy(&label, labels.join(format!("{id}.txt"))).map_err(io_err(&label))?;
    }
    let map_path = out.join(LABEL_MAP_FILE);
    fsutil::write_atomic(&map_path, manifest.label_map.to_text().as_bytes()).map_err(io_err(&map_path))?;
    let yaml_path = out.join("data.yaml");
    fsutil::write_atomic(&yaml_path, data_yaml(&absolute(out), &manifest.label_map).as_bytes())
        .map_err(io_err(&yaml_path))?;
    Ok(manifest.splits.train.len())
}

/// Dataset metadata in the layout YOLO trainers expect. The validation
/// entry points at the training images: the workspace's held-out split is
/// never handed to the trainer.
pub fn data_yaml(dataset_dir: &Path, label_map: &LabelMap) -> String {
    let quote = |s: &str| serde_json::to_string(s).expect("string serializes");
    let mut out = format!(
        "path: {}\ntrain: images\nval: images\nnc: {}\nnames:\n",
        quote(&dataset_dir.display().to_string()),
        label_map.len()
    );
    for (i, name) in label_map.names().iter().enumerate() {
        out.push_str(&format!("  {i}: {}\n", quote(name)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, format!("#!/bin/sh\nset -e\n{body}\n")).unwrap();
        fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    fn map() -> LabelMap {
        LabelMap::new(["a", "b"]).unwrap()
    }

    fn dataset(root: &Path) -> PathBuf {
        let d = root.join("dataset");
        fs::create_dir_all(d.join("images")).unwrap();
        fs::create_dir_all(d.join("labels")).unwrap();
        fs::write(d.join("images/x.png"), b"png").unwrap();
        fs::write(d.join("labels/x.txt"), "0 0.5 0.5 0.1 0.1\n").unwrap();
        fs::write(d.join(LABEL_MAP_FILE), "a\nb\n").unwrap();
        d
    }

    fn detector(train: &Path, detect: &Path, timeout_s: f64) -> CommandDetector {
        CommandDetector::new(AdapterConfig::new(
            format!("{} {{dataset_dir}} {{weights_out}}", train.display()),
            format!("{} {{weights_in}} {{images_dir}} {{predictions_dir}}", detect.display()),
            timeout_s,
        ))
        .unwrap()
    }

    #[test]
    fn validation_requires_placeholders() {
        let ok = AdapterConfig::new("t {dataset_dir} {weights_out}", "d {weights_in} {images_dir} {predictions_dir}", 5.0);
        assert!(ok.validate().is_ok());
        let missing = AdapterConfig::new("t {dataset_dir}", ok.detect_command.clone(), 5.0);
        assert!(missing.validate().is_err());
        let unknown = AdapterConfig::new("t {dataset_dir} {weights_out} {gpu}", ok.detect_command.clone(), 5.0);
        assert!(unknown.validate().is_err());
        let zero = AdapterConfig { timeout_s: 0.0, ..ok };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn substitution_is_per_token() {
        let mut values = BTreeMap::new();
        values.insert("dataset_dir", "/tmp/with space".to_string());
        let argv = render_command("train --data={dataset_dir} 'two words'", &values).unwrap();
        assert_eq!(argv, ["train", "--data=/tmp/with space", "two words"]);
    }

    #[test]
    fn train_and_detect_round_trip_stays_in_its_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let data = dataset(root);
        let train = script(root, "train.sh", "test \"$LOOPMARK_ITER\" = 3\necho n=$(ls \"$1/images\" | wc -l) > \"$2\"");
        let detect = script(
            root,
            "detect.sh",
            "for f in \"$2\"/*; do s=$(basename \"$f\" .png); echo '1 0.5 0.5 0.2 0.2 0.8' > \"$3/$s.txt\"; done",
        );
        let det = detector(&train, &detect, 10.0);

        let snapshot = |root: &Path| {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.push((p.clone(), fs::read(&p).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let before = snapshot(root);
        let weights = root.join("out/weights.txt");
        run_train(&det, &data, &weights, None, 3).unwrap();
        assert_eq!(fs::read_to_string(&weights).unwrap().trim(), "n=1");
        let preds_dir = root.join("preds");
        let preds = run_detect(&det, &weights, &data.join("images"), &preds_dir, &map(), 3).unwrap();
        assert_eq!(preds["x"].len(), 1);

        let after: Vec<_> = snapshot(root)
            .into_iter()
            .filter(|(p, _)| !p.starts_with(&preds_dir) && p != &weights)
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn nonzero_exit_is_train_failed_with_output() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        let train = script(tmp.path(), "t.sh", "echo boom >&2\nexit 1");
        let det = detector(&train, &train, 10.0);
        let err = run_train(&det, &data, &tmp.path().join("w"), None, 1).unwrap_err();
        match err {
            AdapterError::TrainFailed { output, .. } => assert!(output.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_weights_is_distinct() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        let train = script(tmp.path(), "t.sh", "true");
        let det = detector(&train, &train, 10.0);
        assert!(matches!(
            run_train(&det, &data, &tmp.path().join("w"), None, 1),
            Err(AdapterError::MissingWeights { .. })
        ));
    }

    #[test]
    fn sleeping_command_times_out() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        let train = script(tmp.path(), "t.sh", "sleep 30");
        let mut det = detector(&train, &train, 1.0);
        det.cfg.heartbeat_s = 0.3;
        let started = Instant::now();
        let err = run_train(&det, &data, &tmp.path().join("w"), None, 1).unwrap_err();
        assert!(matches!(err, AdapterError::Timeout { stage: Stage::Train, .. }), "{err:?}");
        assert!(started.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn five_field_predictions_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        fs::write(tmp.path().join("w"), "").unwrap();
        let detect = script(tmp.path(), "d.sh", "echo '0 0.5 0.5 0.2 0.2' > \"$3/x.txt\"");
        let det = detector(&detect, &detect, 10.0);
        let err = run_detect(&det, &tmp.path().join("w"), &data.join("images"), &tmp.path().join("p"), &map(), 1)
            .unwrap_err();
        match err {
            AdapterError::MalformedPrediction { file, source } => {
                assert!(file.ends_with("x.txt"));
                assert!(matches!(source, LabelError::FieldCount { line: 1, .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_empty_prediction_files() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        fs::write(data.join("images/y.png"), b"png").unwrap();
        fs::write(tmp.path().join("w"), "").unwrap();
        let partial = script(tmp.path(), "d.sh", ": > \"$3/x.txt\"");
        let det = detector(&partial, &partial, 10.0);
        let err = run_detect(&det, &tmp.path().join("w"), &data.join("images"), &tmp.path().join("p"), &map(), 1)
            .unwrap_err();
        assert!(matches!(err, AdapterError::MissingPrediction { ref image, .. } if image == "y"));

        let all = script(tmp.path(), "d2.sh", ": > \"$3/x.txt\"\n: > \"$3/y.txt\"");
        let det = detector(&all, &all, 10.0);
        let preds = run_detect(&det, &tmp.path().join("w"), &data.join("images"), &tmp.path().join("p"), &map(), 1)
            .unwrap();
        assert!(preds.values().all(Vec::is_empty));
    }

    #[test]
    fn data_yaml_lists_classes_in_order() {
        let yaml = data_yaml(Path::new("/d"), &LabelMap::new(["ballast", "plant \"x\""]).unwrap());
        assert_eq!(
            yaml,
            "path: \"/d\"\ntrain: images\nval: images\nnc: 2\nnames:\n  0: \"ballast\"\n  1: \"plant \\\"x\\\"\"\n"
        );
    }

    #[test]
    fn unknown_class_in_predictions_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let data = dataset(tmp.path());
        fs::write(tmp.path().join("w"), "").unwrap();
        let detect = script(tmp.path(), "d.sh", "echo '5 0.5 0.5 0.2 0.2 0.9' > \"$3/x.txt\"");
        let det = detector(&detect, &detect, 10.0);
        assert!(matches!(
            run_detect(&det, &tmp.path().join("w"), &data.join("images"), &tmp.path().join("p"), &map(), 1),
            Err(AdapterError::MalformedPrediction { .. })
        ));
    }
}
