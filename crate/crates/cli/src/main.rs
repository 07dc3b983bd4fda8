//! `loopmark`: drive an annotation-loop workspace from the shell.
//!
//! Exit codes: 0 success, 2 usage or state error, 3 detector failure,
//! 4 corrupt workspace.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use loopmark::adapter::{AdapterError, Detector};
use loopmark::labelfmt::{parse_label_file, BoundingBox, LabelError, LabelMap};
use loopmark::orchestrator::{self, FaultInjection, LoopConfig, LoopError, Orchestrator, StepOutcome};
use loopmark::simulation::harness::{self, SimulationConfig, SimulationError};
use loopmark::simulation::mock::{MockDetector, MockDetectorModel};
use loopmark::simulation::scenario::{Scenario, ScenarioError, ScenarioSpec, SCENARIO_FILE};
use loopmark::workspace::{self, ImageId, Pool, Workspace, WorkspaceError};
use loopmark_client::{ClientError, ReviewClient};
use loopmark_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "loopmark", version, about = "Model-assisted annotation loop")]
struct Cli {
    /// Workspace directory.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    workspace: PathBuf,
    /// Loop configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for augmentation and the mock detector.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log level: error, warn, info, debug or trace. `LOOPMARK_LOG` overrides.
    #[arg(long, global = true, default_value = "info")]
    log: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create an empty workspace.
    Init {
        /// classes.txt with one class name per line.
        #[arg(long, conflicts_with = "names", required_unless_present = "names")]
        classes: Option<PathBuf>,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
    },
    /// Copy images into a pool, with their labels when given.
    Import {
        /// Image files or directories of images.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "unlabeled")]
        pool: Pool,
        /// Directory of `<stem>.txt` label files, one per image.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Start the loop from the labeled train pool.
    Seed {
        /// Train and evaluate once on the train pool, without review.
        #[arg(long)]
        baseline: bool,
    },
    /// Advance the loop by one phase.
    Step(DetectorArgs),
    /// Advance until review is needed, the loop completes, or N iterations
    /// have been evaluated.
    Run {
        #[arg(long)]
        cycles: Option<u32>,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Write the review bundle for the detected batch.
    ExportReview,
    /// Merge the labels edited in the review bundle's `labels/` directory.
    Merge,
    /// Print the per-iteration table and write CSV files.
    Report {
        /// Output directory; defaults to `<workspace>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the workspace for inconsistencies.
    Verify,
    /// Generate a synthetic scenario.
    Scenario {
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        seed_images: usize,
        #[arg(long, default_value_t = 300)]
        unlabeled_images: usize,
        #[arg(long, default_value_t = 100)]
        val_images: usize,
    },
    /// Run the loop over a scenario with the mock detector and simulated
    /// annotator, once per seed.
    Simulate {
        /// Scenario directory; a default scenario is generated if it is empty.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also run the all-manual baseline.
        #[arg(long)]
        baseline: bool,
        /// Results directory; defaults to `<scenario>/results`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mock detector parameters (JSON).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Serve the review API for the workspace.
    ReviewServe {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Built review UI to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Talk to a running review service.
    Review {
        #[arg(long, default_value = "http://127.0.0.1:8765")]
        url: String,
        #[command(subcommand)]
        action: ReviewAction,
    },
    /// Mock training: record the training-set size as weights.
    MockTrain {
        dataset: PathBuf,
        weights_out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Mock detection over hidden ground truth.
    MockDetect {
        weights: PathBuf,
        images: PathBuf,
        predictions: PathBuf,
        /// Directory of `<image id>.txt` ground-truth files.
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        classes: u32,
    },
}

#[derive(Debug, Args)]
struct DetectorArgs {
    /// Use the mock detector over this scenario's hidden ground truth
    /// instead of the configured adapter.
    #[arg(long)]
    mock_scenario: Option<PathBuf>,
    /// Mock detector parameters (JSON).
    #[arg(long, requires = "mock_scenario")]
    model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ReviewAction {
    /// Session summary.
    Status,
    /// List items and their status.
    Items,
    /// Accept one item's predictions as they are.
    Accept { id: String },
    /// Accept every pending item.
    AcceptAll,
    /// Replace one item's labels with a YOLO label file.
    Put { id: String, labels: PathBuf },
    /// Merge the finished review.
    Finalize {
        #[arg(long)]
        iteration: Option<u32>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Usage(String),
    #[error("workspace has {0} issue(s)")]
    Inconsistent(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<WorkspaceError> for CliError {
    fn from(e: WorkspaceError) -> Self {
        CliError::Loop(e.into())
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        CliError::Loop(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Loop(e) => e.exit_code() as u8,
            CliError::Simulation(SimulationError::Loop(e)) => e.exit_code() as u8,
            CliError::Inconsistent(_) => 4,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(cli: &Cli) -> Result<LoopConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => LoopConfig::load(path)?,
        None => LoopConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.augmentation.seed = seed;
    }
    Ok(cfg)
}

fn load_model(path: Option<&Path>, seed: Option<u64>) -> Result<MockDetectorModel, CliError> {
    let mut model = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => MockDetectorModel::default(),
    };
    if let Some(seed) = seed {
        model.seed = seed;
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(model)
}

/// Files directly under each directory argument, plus the plain files.
fn expand_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && !e.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn orchestrator(cli: &Cli, args: &DetectorArgs) -> Result<Orchestrator, CliError> {
    let ws = Workspace::open(&cli.workspace)?;
    let mut cfg = load_config(cli)?;
    let mock = match &args.mock_scenario {
        Some(dir) => {
            cfg.adapter = None;
            let scenario = Scenario::open(dir)?;
            let model = load_model(args.model.as_deref(), cli.seed)?;
            Some(harness::mock_detector(&scenario, model))
        }
        None => None,
    };
    let mut orch = Orchestrator::new(ws, cfg)?.with_fault(FaultInjection::from_env());
    if let Some(m) = mock {
        orch = orch.with_detector(Box::new(m));
    }
    Ok(orch)
}

fn print_outcome(outcome: &StepOutcome) {
    match outcome {
        StepOutcome::Advanced { from, to, iteration } => println!("iteration {iteration}: {from} -> {to}"),
        StepOutcome::ReviewPending { iteration, pending } => {
            println!("review pending: iteration {iteration}, {} image(s) not yet reviewed", pending.len())
        }
        StepOutcome::Complete => println!("loop complete"),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io {
            path: PathBuf::from("<runtime>"),
            source: e,
        })
}

fn review(url: &str, action: &ReviewAction) -> Result<(), CliError> {
    let client = ReviewClient::new(url)?;
    runtime()?.block_on(async {
        match action {
            ReviewAction::Status => {
                let s = client.session().await?;
                println!(
                    "iteration {}: {} items, {} pending, {} edited, {} accepted",
                    s.iteration, s.items_total, s.pending, s.edited, s.accepted
                );
            }
            ReviewAction::Items => {
                for item in client.items().await?.items {
                    println!(
                        "{}  {:<8}  {} box(es)  {}",
                        item.id,
                        format!("{:?}", item.status).to_lowercase(),
                        item.boxes,
                        item.original_name
                    );
                }
            }
            ReviewAction::Accept { id } => {
                let u = client.accept(&ImageId::new(id.clone())).await?;
                println!("{} {:?}", u.id, u.status);
            }
            ReviewAction::AcceptAll => {
                let mut n = 0;
                for item in client.items().await?.items {
                    if item.status == loopmark::review::ItemStatus::Pending {
                        client.accept(&item.id).await?;
                        n += 1;
                    }
                }
                println!("accepted {n} item(s)");
            }
            ReviewAction::Put { id, labels } => {
                let text = std::fs::read_to_string(labels).map_err(io_err(labels))?;
                let boxes: Vec<BoundingBox> = parse_label_file(&text)
                    .map_err(|e: LabelError| CliError::Usage(format!("{}: {e}", labels.display())))?;
                let u = client.put_labels(&ImageId::new(id.clone()), &boxes).await?;
                println!("{} {:?}", u.id, u.status);
            }
            ReviewAction::Finalize { iteration } => {
                let r = client.finalize(*iteration).await?;
                println!(
                    "iteration {}: merged {} image(s), train pool {}",
                    r.iteration, r.merged, r.train_size
                );
            }
        }
        Ok(())
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Init { classes, names } => {
            let map = match classes {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                    LabelMap::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
                }
                None => LabelMap::new(names).map_err(|e| CliError::Usage(e.to_string()))?,
            };
            Workspace::init(&cli.workspace, map)?;
            println!("initialized {}", cli.workspace.display());
        }
        Command::Import { paths, pool, labels } => {
            let files = expand_paths(paths)?;
            let mut ws = Workspace::open(&cli.workspace)?;
            let imported = match labels {
                Some(dir) => orchestrator::import_labeled(&mut ws, &files, dir, *pool)?.len(),
                None => ws.import_images(&files, *pool)?.imported.len(),
            };
            println!("imported {imported} of {} file(s) into {pool}", files.len());
        }
        Command::Seed { baseline } => {
            let cfg = load_config(cli)?;
            let mut ws = Workspace::open(&cli.workspace)?;
            orchestrator::seed(&mut ws, &cfg.costs, *baseline)?;
            let n = ws.manifest().train_originals().count();
            println!("seeded with {n} labeled image(s){}", if *baseline { " (baseline)" } else { "" });
        }
        Command::Step(args) => {
            let mut orch = orchestrator(cli, args)?;
            print_outcome(&orch.step()?);
        }
        Command::Run { cycles, detector } => {
            let mut orch = orchestrator(cli, detector)?;
            print_outcome(&orch.run(*cycles)?);
        }
        Command::ExportReview => {
            let mut orch = orchestrator(cli, &DetectorArgs { mock_scenario: None, model: None })?;
            let (_, summary) = orch.export_review()?;
            println!(
                "exported {} image(s), {} box(es), {} pre-accepted, to {}",
                summary.items,
                summary.boxes,
                summary.pre_accepted_boxes,
                summary.dir.display()
            );
        }
        Command::Merge => {
            let mut orch = orchestrator(cli, &DetectorArgs { mock_scenario: None, model: None })?;
            let r = orch.merge_from_files()?;
            println!("iteration {}: merged {} image(s), train pool {}", r.iteration, r.merged, r.train_size);
        }
        Command::Report { out } => {
            let manifest = Workspace::load_manifest(&cli.workspace)?;
            let out = out.clone().unwrap_or_else(|| cli.workspace.join("reports"));
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let report = orchestrator::write_report(&cli.workspace, &manifest, &out)?;
            print!("{}", report.table());
        }
        Command::Verify => {
            let report = workspace::verify(&cli.workspace)?;
            if report.is_ok() {
                println!("ok");
            } else {
                for issue in &report.issues {
                    println!("{issue}");
                }
                return Err(CliError::Inconsistent(report.issues.len()));
            }
        }
        Command::Scenario {
            dir,
            seed_images,
            unlabeled_images,
            val_images,
        } => {
            let spec = ScenarioSpec {
                seed_images: *seed_images,
                unlabeled_images: *unlabeled_images,
                val_images: *val_images,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            Scenario::generate(dir, &spec)?;
            println!("scenario written to {}", dir.display());
        }
        Command::Simulate {
            scenario,
            seeds,
            baseline,
            out,
            model,
        } => {
            let scenario = if scenario.join(SCENARIO_FILE).is_file() {
                Scenario::open(scenario)?
            } else {
                Scenario::generate(scenario, &ScenarioSpec::default())?
            };
            let first = cli.seed.unwrap_or(0);
            let cfg = SimulationConfig {
                seeds: (first..first + seeds).collect(),
                model: load_model(model.as_deref(), None)?,
                loop_config: load_config(cli)?,
                baseline: *baseline,
            };
            let out = out.clone().unwrap_or_else(|| scenario.dir.join("results"));
            let work = out.join("workspaces");
            if work.exists() {
                std::fs::remove_dir_all(&work).map_err(io_err(&work))?;
            }
            std::fs::create_dir_all(&work).map_err(io_err(&work))?;
            let report = harness::simulate(&scenario, &work, &cfg)?;
            report.write(&out)?;
            print!("{}", report.median_csv());
            println!("results in {}", out.display());
        }
        Command::ReviewServe { port, host, ui } => {
            let cfg = ServiceConfig {
                workspace: cli.workspace.clone(),
                costs: load_config(cli)?.costs,
                ui_dir: ui.clone(),
            };
            let addr = format!("{host}:{port}");
            runtime()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(io_err(Path::new(&addr)))?;
                println!("review service on http://{}", listener.local_addr().map_err(io_err(Path::new(&addr)))?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                loopmark_service::serve(listener, cfg, shutdown)
                    .await
                    .map_err(io_err(Path::new(&addr)))
            })?;
        }
        Command::Review { url, action } => review(url, action)?,
        Command::MockTrain {
            dataset,
            weights_out,
            model,
        } => {
            let model = load_model(model.as_deref(), cli.seed)?;
            let detector = MockDetector::new(model, PathBuf::new(), 1);
            detector.train(dataset, weights_out, None, 0)?;
        }
        Command::MockDetect {
            weights,
            images,
            predictions,
            ground_truth,
            classes,
        } => {
            let detector = MockDetector::new(MockDetectorModel::default(), ground_truth, *classes);
            std::fs::create_dir_all(predictions).map_err(io_err(predictions))?;
            detector.detect(weights, images, predictions, 0)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = std::env::var("LOOPMARK_LOG")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(cli.log);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
