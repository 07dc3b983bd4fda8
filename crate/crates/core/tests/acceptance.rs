//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 regardless of failures unless `LOOPMARK_ACCEPTANCE_STRICT=1`.
//! The crash-resume check re-runs this binary as a worker process, selected
//! by `LOOPMARK_ACCEPTANCE_WORKER`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loopmark::clock::Clock;
use loopmark::geometry::{iou, sample_affine, transform_box, transformed_hull, Affine2, AugmentationSpec, DegreeRange, ImageDims};
use loopmark::labelfmt::{parse_label_file, serialize_label_file, BoundingBox, LabelMap, Prediction};
use loopmark::metrics::{
    average_precision, f1, match_detections, mean_average_precision, MatchConfig, PrCurve, ScoredMatch,
};
use loopmark::orchestrator::{self, FaultInjection, LoopConfig, Orchestrator, Phase, CRASH_ENV, JOURNAL_FILE};
use loopmark::simulation::harness::{self, SimulationConfig};
use loopmark::simulation::mock::MockDetectorModel;
use loopmark::simulation::scenario::{Scenario, ScenarioSpec, Split};
use loopmark::workspace::{plan_augmentation, ImageId, Pool, Workspace};

const WORKER_ENV: &str = "LOOPMARK_ACCEPTANCE_WORKER";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(r: &mut ChaCha8Rng, class_id: u32, min_side: f64, max_side: f64) -> BoundingBox {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    let x0 = r.random_range(0.0..1.0 - w);
    let y0 = r.random_range(0.0..1.0 - h);
    BoundingBox::from_corners(class_id, x0, y0, x0 + w, y0 + h)
}

fn jitter(r: &mut ChaCha8Rng, b: &BoundingBox, amount: f64) -> BoundingBox {
    let dx = r.random_range(-amount..amount) * b.w;
    let dy = r.random_range(-amount..amount) * b.h;
    let sw = 1.0 + r.random_range(-amount..amount);
    let sh = 1.0 + r.random_range(-amount..amount);
    let (w, h) = ((b.w * sw).min(1.0), (b.h * sh).min(1.0));
    let cx = (b.cx + dx).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = (b.cy + dy).clamp(h / 2.0, 1.0 - h / 2.0);
    BoundingBox::new(b.class_id, cx, cy, w, h)
}

// ---------------------------------------------------------------- metrics

/// AP by enumerating every confidence cutoff: precision and recall are
/// recounted from scratch at each cutoff, and the envelope at recall `r` is
/// the best precision of any cutoff reaching at least `r`.
fn brute_force_ap(matches: &[ScoredMatch], total_gt: usize) -> f64 {
    if total_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    let mut cutoffs: Vec<f64> = matches.iter().map(|m| m.confidence).collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    let points: Vec<(f64, f64)> = cutoffs
        .iter()
        .map(|&c| {
            let kept: Vec<&ScoredMatch> = matches.iter().filter(|m| m.confidence >= c).collect();
            let tp = kept.iter().filter(|m| m.true_positive).count();
            (tp as f64 / total_gt as f64, tp as f64 / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let envelope = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (r - prev) * envelope;
        prev = r;
    }
    area
}

/// Maximum-cardinality matching between predictions and truths of the same
/// class with IoU at least `threshold`, by augmenting paths.
fn max_matching(preds: &[Prediction], truths: &[BoundingBox], threshold: f64) -> usize {
    let edges: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            (0..truths.len())
                .filter(|&g| truths[g].class_id == p.bbox.class_id && iou(&p.bbox, &truths[g]) >= threshold)
                .collect()
        })
        .collect();
    fn augment(p: usize, edges: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &edges[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, edges, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; truths.len()];
    (0..preds.len())
        .filter(|&p| augment(p, &edges, &mut vec![false; truths.len()], &mut owner))
        .count()
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = MatchConfig::new(0.5).unwrap();
    let mut worst_ap = 0.0f64;
    let mut tp_agree = 0;
    const N: usize = 1000;
    for seed in 0..N as u64 {
        let mut r = rng(seed);
        let classes = r.random_range(1..=3u32);
        let truths: Vec<BoundingBox> = (0..r.random_range(0..=10))
            .map(|_| {
                let c = r.random_range(0..classes);
                random_box(&mut r, c, 0.05, 0.4)
            })
            .collect();
        let n_preds = r.random_range(0..=10);
        let coarse = r.random_bool(0.3);
        let preds: Vec<Prediction> = (0..n_preds)
            .map(|_| {
                let bbox = if !truths.is_empty() && r.random_bool(0.7) {
                    let t = truths[r.random_range(0..truths.len())];
                    jitter(&mut r, &t, 0.3)
                } else {
                    let c = r.random_range(0..classes);
                    random_box(&mut r, c, 0.05, 0.4)
                };
                let conf: f64 = r.random();
                // coarse confidences produce ties
                let conf = if coarse { (conf * 5.0).round() / 5.0 } else { conf };
                Prediction::new(bbox, conf)
            })
            .collect();
        let m = match_detections(&preds, &truths, &cfg);
        let scored: Vec<ScoredMatch> = preds
            .iter()
            .zip(&m.true_positive)
            .map(|(p, &tp)| ScoredMatch {
                confidence: p.confidence,
                true_positive: tp,
            })
            .collect();
        let ap = average_precision(&PrCurve::from_matches(&scored, truths.len()));
        worst_ap = worst_ap.max((ap - brute_force_ap(&scored, truths.len())).abs());
        if m.tp_count() == max_matching(&preds, &truths, 0.5) {
            tp_agree += 1;
        }
    }
    let elapsed = start.elapsed();
    let share = tp_agree as f64 / N as f64;
    outcome(
        worst_ap <= 1e-9 && share >= 0.95 && elapsed < Duration::from_secs(10),
        format!(
            "max |AP - oracle| = {worst_ap:.1e}, greedy TP = max matching in {:.1}% of {N}, {:.2}s",
            share * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn formula_checks() -> Outcome {
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let f1_identity = grid.iter().all(|&p| f1(p, p) == p);

    let mut r = rng(7);
    let mut map_mean = true;
    for _ in 0..200 {
        let aps: BTreeMap<u32, f64> = (0..r.random_range(1..6u32)).map(|c| (c, r.random())).collect();
        let mean = aps.values().sum::<f64>() / aps.len() as f64;
        map_mean &= mean_average_precision(&aps).unwrap() == mean;
    }

    // Two truths; detections at 0.9 (TP), 0.8 (FP), 0.7 (TP).
    let scored = [(0.9, true), (0.8, false), (0.7, true)].map(|(c, tp)| ScoredMatch {
        confidence: c,
        true_positive: tp,
    });
    let ap = format!("{:.6}", average_precision(&PrCurve::from_matches(&scored, 2)));
    let f = format!("{:.6}", f1(0.8, 0.9));
    outcome(
        f1_identity && map_mean && ap == "0.833333" && f == "0.847059",
        format!("f1(p,p)=p on 1001 points: {f1_identity}; mAP = mean: {map_mean}; AP {ap}; F1 {f}"),
    )
}

// ---------------------------------------------------------------- geometry

/// IoU by counting cells of an `n` x `n` grid laid over the pair's joint
/// extent. A cell belongs to a box when its center lies inside it.
fn raster_iou(a: &BoundingBox, b: &BoundingBox, n: usize) -> f64 {
    let (gx0, gx1) = (a.x_min().min(b.x_min()), a.x_max().max(b.x_max()));
    let (gy0, gy1) = (a.y_min().min(b.y_min()), a.y_max().max(b.y_max()));
    let cell = |i: usize, lo: f64, hi: f64| lo + (i as f64 + 0.5) / n as f64 * (hi - lo);
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..n {
        let y = cell(j, gy0, gy1);
        let in_a_y = y >= a.y_min() && y < a.y_max();
        let in_b_y = y >= b.y_min() && y < b.y_max();
        for i in 0..n {
            let x = cell(i, gx0, gx1);
            let in_a = in_a_y && x >= a.x_min() && x < a.x_max();
            let in_b = in_b_y && x >= b.x_min() && x < b.x_max();
            inter += usize::from(in_a && in_b);
            union += usize::from(in_a || in_b);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou_vs_raster() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a = random_box(&mut r, 0, 0.1, 0.6);
        let b = if r.random_bool(0.8) {
            jitter(&mut r, &a, 0.5)
        } else {
            random_box(&mut r, 0, 0.1, 0.6)
        };
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b, 1000)).abs());
    }
    outcome(worst <= 2e-3, format!("500 pairs, 1000x1000 cells over each pair's extent, max error {worst:.2e}"))
}

fn random_transform(r: &mut ChaCha8Rng, dims: ImageDims, k: u32) -> Affine2 {
    let spec = AugmentationSpec {
        flip_horizontal_probability: 0.5,
        rotation_range_deg: DegreeRange::symmetric(45.0),
        shear_range_deg_x: DegreeRange::symmetric(20.0),
        shear_range_deg_y: DegreeRange::symmetric(20.0),
        seed: r.random(),
        ..AugmentationSpec::default()
    };
    sample_affine(&spec, dims, "acceptance", k)
}

fn geometry_properties() -> Outcome {
    let mut r = rng(13);
    let dims_list = [ImageDims::new(640, 480).unwrap(), ImageDims::new(500, 500).unwrap()];

    let mut flip_err = 0.0f64;
    for _ in 0..1000 {
        let dims = dims_list[r.random_range(0..2)];
        let b = random_box(&mut r, 0, 0.05, 0.5);
        let flip = Affine2::flip_horizontal(dims.w());
        let once = transform_box(&b, &flip, dims, 0.25).unwrap().unwrap();
        let twice = transform_box(&once, &flip, dims, 0.25).unwrap().unwrap();
        for (x, y) in [(b.cx, twice.cx), (b.cy, twice.cy), (b.w, twice.w), (b.h, twice.h)] {
            flip_err = flip_err.max((x - y).abs());
        }
    }

    let mut fixed_point = true;
    for _ in 0..1000 {
        let dims = dims_list[r.random_range(0..2)];
        let (w, h) = (r.random_range(0.05..0.5), r.random_range(0.05..0.5));
        let b = BoundingBox::new(0, 0.5, 0.5, w, h);
        let t = Affine2::rotation_about(r.random_range(-180.0..180.0), dims.w() / 2.0, dims.h() / 2.0);
        if let Some(out) = transform_box(&b, &t, dims, 0.0).unwrap() {
            fixed_point &= out.cx == 0.5 && out.cy == 0.5;
        }
    }

    let square = ImageDims::new(1000, 1000).unwrap();
    let rot = Affine2::rotation_about(15.0, 500.0, 500.0);
    let got = transform_box(&BoundingBox::new(0, 0.5, 0.5, 0.2, 0.1), &rot, square, 0.25)
        .unwrap()
        .unwrap();
    let got = (format!("{:.6}", got.w), format!("{:.6}", got.h));
    let (s, c) = 15f64.to_radians().sin_cos();
    let oracle = (
        format!("{:.6}", 2.0 * (0.1 * c + 0.05 * s)),
        format!("{:.6}", 2.0 * (0.1 * s + 0.05 * c)),
    );
    let literal = ("0.219066".to_string(), "0.148365".to_string());
    let worked = got == literal;

    let mut conservative = true;
    for k in 0..1000 {
        let dims = dims_list[r.random_range(0..2)];
        let b = random_box(&mut r, 0, 0.05, 0.5);
        let t = random_transform(&mut r, dims, k);
        let (x0, y0, x1, y1) = transformed_hull(&b, &t, dims);
        for _ in 0..100 {
            let px = r.random_range(b.x_min()..=b.x_max()) * dims.w();
            let py = r.random_range(b.y_min()..=b.y_max()) * dims.h();
            let (qx, qy) = t.apply(px, py);
            conservative &= qx >= x0 - 1e-9 && qx <= x1 + 1e-9 && qy >= y0 - 1e-9 && qy <= y1 + 1e-9;
        }
    }

    outcome(
        flip_err <= 1e-9 && fixed_point && worked && conservative,
        format!(
            "double flip max error {flip_err:.1e}; center fixed: {fixed_point}; AABB conservative: {conservative}; \
             +15 deg example w,h = ({}, {}), expected ({}, {}), corner-enumeration oracle ({}, {})",
            got.0, got.1, literal.0, literal.1, oracle.0, oracle.1
        ),
    )
}

// ---------------------------------------------------------------- formats

fn format_round_trips() -> Outcome {
    let mut r = rng(17);
    let mut identity = true;
    let mut idempotent = true;
    for _ in 0..1000 {
        let boxes: Vec<BoundingBox> = (0..r.random_range(0..20))
            .map(|_| {
                let w = r.random_range(1..=1_000_000u32);
                let h = r.random_range(1..=1_000_000u32);
                // centers chosen so both edges stay on the canvas at 6 dp
                let cx = r.random_range(w.div_ceil(2)..=1_000_000 - w.div_ceil(2));
                let cy = r.random_range(h.div_ceil(2)..=1_000_000 - h.div_ceil(2));
                let u = |v: u32| v as f64 / 1e6;
                BoundingBox::new(r.random_range(0..80), u(cx), u(cy), u(w), u(h))
            })
            .collect();
        let text = serialize_label_file(&boxes).unwrap();
        let parsed: Vec<BoundingBox> = parse_label_file(&text).unwrap();
        identity &= parsed == boxes;
        idempotent &= serialize_label_file(&parsed).unwrap() == text;
    }
    let map = LabelMap::new(["ballast", "vegetation", "tie plate", "débris"]).unwrap();
    let classes = LabelMap::parse(&map.to_text()).map(|m| m == map && m.to_text() == map.to_text()) == Ok(true);
    outcome(
        identity && idempotent && classes,
        format!("1000 label files: parse(serialize) = id {identity}, byte-stable {idempotent}; classes.txt {classes}"),
    )
}

// ---------------------------------------------------------------- workspace

fn labeled_scenario(dir: &Path, seed_images: usize, unlabeled: usize, val: usize) -> Scenario {
    let spec = ScenarioSpec {
        seed_images,
        unlabeled_images: unlabeled,
        val_images: val,
        ..ScenarioSpec::default()
    };
    Scenario::generate(dir, &spec).unwrap()
}

fn table_ii_fixture() -> Outcome {
    // (originals, copies per image, augmented budget, expected total)
    let fixtures = [
        ('A', 100, 3, 216, 316),
        ('B', 200, 2, 220, 420),
        ('C', 300, 2, 416, 716),
        ('D', 400, 2, 618, 1018),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let scenario = labeled_scenario(&tmp.path().join("scenario"), 400, 1, 1);
    let images = scenario.images(Split::Seed).unwrap();
    let mut ws = Workspace::init(tmp.path().join("ws"), scenario.label_map()).unwrap();
    let mut pass = true;
    let mut seen = Vec::new();
    let mut imported = 0;
    for (name, originals, copies, budget, total) in fixtures {
        let batch = &images[imported..originals];
        orchestrator::import_labeled(&mut ws, batch, &scenario.labels_dir(Split::Seed), Pool::Train).unwrap();
        imported = originals;
        let spec = AugmentationSpec {
            copies_per_image: copies,
            augmented_budget: Some(budget),
            ..AugmentationSpec::default()
        };
        let ids: Vec<ImageId> = ws.manifest().train_originals().cloned().collect();
        let planned = ids.len() + plan_augmentation(&ids, &spec).len();
        let report = ws.augment_split(&spec, 1).unwrap();
        let in_pool = ws.manifest().splits.train.len();
        pass &= planned == total && report.total == total && in_pool == total && report.originals == originals;
        seen.push(format!("{name} {originals}+{}={in_pool}", report.augmented));
    }
    outcome(pass, seen.join(", "))
}

fn export_throughput() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = labeled_scenario(&tmp.path().join("scenario"), 100, 100, 10);
    let ws = harness::prepare_workspace(&scenario, &tmp.path().join("ws"), &Default::default(), false).unwrap();
    let cfg = LoopConfig {
        batch_size: 100,
        ..LoopConfig::default()
    };
    let detector = harness::mock_detector(&scenario, MockDetectorModel::default());
    let mut orch = Orchestrator::new(ws, cfg).unwrap().with_detector(Box::new(detector));
    while orch.state().unwrap().phase != Phase::Detected {
        orch.step().unwrap();
    }
    let start = Instant::now();
    let (_, summary) = orch.export_review().unwrap();
    let elapsed = start.elapsed();
    outcome(
        summary.items == 100 && elapsed < Duration::from_secs(5),
        format!("{} images, {} boxes exported in {:.3}s", summary.items, summary.boxes, elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- simulation

fn simulated_loop() -> (Outcome, Outcome) {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let scenario = labeled_scenario(&tmp.path().join("scenario"), 100, 300, 100);
    let cfg = SimulationConfig {
        seeds: (0..5).collect(),
        loop_config: LoopConfig {
            batch_size: 100,
            ..LoopConfig::default()
        },
        ..SimulationConfig::default()
    };
    let work = tmp.path().join("runs");
    fs::create_dir_all(&work).unwrap();
    let report = harness::simulate(&scenario, &work, &cfg).unwrap();
    let elapsed = start.elapsed();

    let sizes_ok = report.loop_runs().all(|run| {
        run.rows.iter().map(|r| (r.iteration, r.train_size)).collect::<Vec<_>>()
            == [(1, 100), (2, 200), (3, 300), (4, 400)]
    });
    let f1 = report.median_by_iteration(|r| r.best_f1);
    let medians: Vec<f64> = (1..=4).map(|i| f1.get(&i).copied().unwrap_or(f64::NAN)).collect();
    let rising = medians.windows(2).all(|w| w[1] > w[0]);
    let worst_drop = report
        .loop_runs()
        .flat_map(|run| run.rows.windows(2).map(|w| w[0].best_f1.unwrap_or(0.0) - w[1].best_f1.unwrap_or(0.0)))
        .fold(f64::NEG_INFINITY, f64::max);
    let trend = outcome(
        sizes_ok && rising && worst_drop <= 0.02 && elapsed < Duration::from_secs(120),
        format!(
            "train sizes 100..400: {sizes_ok}; median best_f1 {}; largest single-seed drop {worst_drop:.4}; {:.1}s",
            medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" -> "),
            elapsed.as_secs_f64()
        ),
    );

    let all_within = report.loop_runs().all(|run| {
        run.rows
            .iter()
            .filter(|r| (2..=4).contains(&r.iteration))
            .all(|r| r.labor_ratio.is_some_and(|x| x <= 0.5))
    });
    let ratio = report.median_by_iteration(|r| r.labor_ratio);
    let ratios: Vec<f64> = (2..=4).map(|i| ratio.get(&i).copied().unwrap_or(f64::NAN)).collect();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let labor = outcome(
        all_within && decreasing,
        format!(
            "review cost / manual draw cost, median at iterations 2-4: {}; every seed <= 50%: {all_within}",
            ratios.iter().map(|m| format!("{:.1}%", m * 100.0)).collect::<Vec<_>>().join(" -> ")
        ),
    );
    (trend, labor)
}

// ---------------------------------------------------------------- crash-resume

/// Worker: drive the loop in `root` to completion with the mock detector.
/// Honors the crash variable, which aborts the process mid-run.
fn worker(spec: &str) {
    let (scenario, root) = spec.split_once('|').expect("scenario|root");
    let scenario = Scenario::open(scenario).unwrap();
    let ws = Workspace::open(root).unwrap().with_clock(Clock::fixed_epoch(0));
    let cfg = LoopConfig {
        batch_size: 5,
        ..LoopConfig::default()
    };
    let detector = harness::mock_detector(&scenario, MockDetectorModel::default());
    let mut orch = Orchestrator::new(ws, cfg)
        .unwrap()
        .with_detector(Box::new(detector))
        .with_fault(FaultInjection::from_env());
    harness::drive(&mut orch, &scenario).unwrap();
}

fn spawn_worker(scenario: &Path, root: &Path, crash_at: Option<usize>) -> std::process::ExitStatus {
    let mut cmd = Command::new(std::env::current_exe().unwrap());
    cmd.env(WORKER_ENV, format!("{}|{}", scenario.display(), root.display()))
        .env_remove(CRASH_ENV)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null());
    if let Some(n) = crash_at {
        cmd.env(CRASH_ENV, n.to_string());
    }
    cmd.status().unwrap()
}

fn crash_resume() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = labeled_scenario(&tmp.path().join("scenario"), 8, 10, 6);
    let fresh = |name: &str| -> PathBuf {
        let root = tmp.path().join(name);
        drop(harness::prepare_workspace(&scenario, &root, &Default::default(), false).unwrap());
        root
    };
    let reference = fresh("reference");
    if !spawn_worker(&scenario.dir, &reference, None).success() {
        return outcome(false, "uninterrupted run failed");
    }
    let expected = fs::read(reference.join("manifest.json")).unwrap();
    let entries = fs::read_to_string(reference.join(JOURNAL_FILE)).unwrap().lines().count();

    let mut failures = Vec::new();
    let mut killed = 0;
    // entry 1 is written while seeding, before the loop process starts
    for n in 2..=entries {
        let root = fresh(&format!("crash_{n}"));
        let first = spawn_worker(&scenario.dir, &root, Some(n));
        if first.success() {
            failures.push(format!("{n}: no abort"));
            continue;
        }
        killed += 1;
        if !spawn_worker(&scenario.dir, &root, None).success() {
            failures.push(format!("{n}: resume failed"));
        } else if fs::read(root.join("manifest.json")).unwrap() != expected {
            failures.push(format!("{n}: manifest differs"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("aborted after each of journal entries 2..={entries} ({killed} runs); every resume matches byte for byte")
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    if let Ok(spec) = std::env::var(WORKER_ENV) {
        worker(&spec);
        return;
    }
    let (trend, labor) = simulated_loop();
    let results = [
        ("metrics oracle equivalence", metrics_oracle()),
        ("F1/mAP formula checks", formula_checks()),
        ("IoU vs rasterized oracle", iou_vs_raster()),
        ("geometry properties", geometry_properties()),
        ("format round-trips", format_round_trips()),
        ("augmentation count fixtures", table_ii_fixture()),
        ("export throughput", export_throughput()),
        ("simulated loop trend", trend),
        ("labor reduction", labor),
        ("crash-resume", crash_resume()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("LOOPMARK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
