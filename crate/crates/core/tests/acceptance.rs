//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p gvi-core --test acceptance`. The full run trains
//! one 128x128 regressor and benchmarks mean shift on 1000 images, so expect
//! several minutes on a single core.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::gradcheck::{check_all, random_case};
use gvi_core::geo::{self, LatLon, RoadNetwork, Way};
use gvi_core::gradcam::grad_cam;
use gvi_core::imagery;
use gvi_core::meanshift::{gvi_of_mask, segment_vegetation, GreenParams, MeanShiftParams};
use gvi_core::metrics::{self, EvalReport};
use gvi_core::nnet::{self, save_checkpoint, ConvNet, Head, LossKind, NetConfig, Target, TrainConfig, TrainSample};
use gvi_core::pipeline::{self, Estimator};
use gvi_core::raster::{BinaryMask, RgbImage};
use gvi_core::synth::{self, SynthConfig, SynthImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METRIC_REL_TOL: f64 = 1e-12;
const METRIC_PAIRS: usize = 50;
const METRIC_BUDGET_S: f64 = 1.0;

const TONE_SIZE: u32 = 64;
const TONE_BUDGET_S: f64 = 10.0;

const FD_STEP: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;
const FD_FLOOR: f64 = 1.0;
const FD_BUDGET_S: f64 = 60.0;

const TRAIN_SEED: u64 = 11;
const TRAIN_N: usize = 400;
const TEST_N: usize = 100;
const TRAIN_DISTRACTOR_PROB: f64 = 0.5;
const MAX_EPOCHS: usize = 30;
const TARGET_MAE: f64 = 0.05;

const CAM_IMAGES: u64 = 20;
const CAM_MIN_HITS: usize = 16;
const CAM_MIN_MASS: f64 = 0.6;

const BENCH_IMAGES: usize = 1000;
const BENCH_MIN_RATIO: f64 = 5.0;
const BENCH_BUDGET_S: f64 = 15.0 * 60.0;

const POLYLINES: usize = 100;
const POLYLINE_TOL_DEG: f64 = 1e-6;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= METRIC_REL_TOL * a.abs().max(b.abs())
}

// ---------------------------------------------------------------- metrics

struct OracleRow {
    iou: f64,
    gvi_pred: f64,
    gvi_true: f64,
}

fn oracle_row(pred: &BinaryMask, truth: &BinaryMask) -> OracleRow {
    let mut p = BTreeSet::new();
    let mut t = BTreeSet::new();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if pred.get(x, y) {
                p.insert((x, y));
            }
            if truth.get(x, y) {
                t.insert((x, y));
            }
        }
    }
    let inter = p.intersection(&t).count();
    let union = p.union(&t).count();
    let n = (pred.width() * pred.height()) as f64;
    OracleRow {
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        gvi_pred: p.len() as f64 / n,
        gvi_true: t.len() as f64 / n,
    }
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, density: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density)).unwrap()
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = Vec::new();
    for i in 0..METRIC_PAIRS {
        let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let density = rng.random_range(0.0..1.0);
        let truth = random_mask(&mut rng, w, h, density);
        let pred = match i % 5 {
            0 => BinaryMask::new(w, h).unwrap(),
            1 => truth.clone(),
            _ => {
                let flip = rng.random_range(0.0..0.5);
                BinaryMask::from_fn(w, h, |x, y| truth.get(x, y) ^ rng.random_bool(flip)).unwrap()
            }
        };
        pairs.push((pred, truth));
    }
    // Pair 0 predicts nothing; make its truth empty too.
    pairs[0].1 = BinaryMask::new(pairs[0].1.width(), pairs[0].1.height()).unwrap();

    let started = Instant::now();
    let evals: Vec<_> = pairs
        .iter()
        .enumerate()
        .map(|(i, (p, t))| metrics::eval_pair(&format!("img{i:03}"), p, t).unwrap())
        .collect();
    let ious: Vec<f64> = evals.iter().map(|e| e.iou.unwrap()).collect();
    let deltas: Vec<f64> = evals.iter().map(|e| e.delta).collect();
    let preds: Vec<f64> = evals.iter().map(|e| e.gvi_pred).collect();
    let truths: Vec<f64> = evals.iter().map(|e| e.gvi_true).collect();
    let miou = metrics::mean_iou(&ious).unwrap();
    let mae = metrics::mean_abs_error(&deltas).unwrap();
    let r = metrics::pearson_r(&preds, &truths).unwrap();
    let (q05, q95) = metrics::error_band(&deltas).unwrap();
    let report = EvalReport::from_evals(evals.clone()).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let rows: Vec<OracleRow> = pairs.iter().map(|(p, t)| oracle_row(p, t)).collect();
    let mut bad = Vec::new();
    for (i, (e, o)) in evals.iter().zip(&rows).enumerate() {
        let delta = o.gvi_pred - o.gvi_true;
        if !(rel_close(e.iou.unwrap(), o.iou)
            && rel_close(e.gvi_pred, o.gvi_pred)
            && rel_close(e.gvi_true, o.gvi_true)
            && rel_close(e.delta, delta))
        {
            bad.push(format!("pair {i}"));
        }
    }
    let n = rows.len() as f64;
    let o_miou = rows.iter().map(|o| o.iou).sum::<f64>() / n;
    let o_deltas: Vec<f64> = rows.iter().map(|o| o.gvi_pred - o.gvi_true).collect();
    let o_mae = o_deltas.iter().map(|d| d.abs()).sum::<f64>() / n;
    let o_r = oracle_pearson(
        &rows.iter().map(|o| o.gvi_pred).collect::<Vec<_>>(),
        &rows.iter().map(|o| o.gvi_true).collect::<Vec<_>>(),
    );
    for (name, got, want) in [
        ("mean IoU", miou, o_miou),
        ("MAE", mae, o_mae),
        ("pearson r", r, o_r),
        ("q05", q05, oracle_percentile(&o_deltas, 0.05)),
        ("q95", q95, oracle_percentile(&o_deltas, 0.95)),
        ("report mean IoU", report.mean_iou.unwrap(), o_miou),
        ("report MAE", report.mean_abs_error, o_mae),
        ("report r", report.pearson_r.unwrap(), o_r),
    ] {
        if !rel_close(got, want) {
            bad.push(format!("{name} {got} vs {want}"));
        }
    }
    if rows[0].iou != 1.0 || ious[0] != 1.0 {
        bad.push("both-empty IoU".into());
    }
    if secs >= METRIC_BUDGET_S {
        bad.push(format!("took {secs:.3}s"));
    }
    check(
        bad.is_empty(),
        format!("{METRIC_PAIRS} pairs, r={r:.4}, mean IoU={miou:.4}, {secs:.4}s; mismatches: {bad:?}"),
    )
}

// ---------------------------------------------------------------- k-tone

const PALETTE: [[u8; 3]; 4] = [[40, 180, 50], [128, 128, 128], [90, 140, 220], [20, 110, 30]];
/// Worked out by hand from the green rule: g beats r and b by more than the
/// margin and the excess green exceeds its threshold.
const PALETTE_GREEN: [bool; 4] = [true, false, false, true];

fn tone_label(layout: usize, k: usize, x: u32, y: u32) -> usize {
    let s = TONE_SIZE as usize;
    match layout {
        0 => x as usize * k / s,
        1 => y as usize * k / s,
        _ => {
            let c = (s as f64 - 1.0) / 2.0;
            let d = (x as f64 - c).abs().max((y as f64 - c).abs()).floor() as usize;
            (d * k / (s / 2)).min(k - 1)
        }
    }
}

fn k_tone_regions() -> Verdict {
    let started = Instant::now();
    let ms = MeanShiftParams::default();
    let green = GreenParams::default();
    let mut cases = 0;
    let mut bad = Vec::new();
    for k in 1..=4 {
        for layout in 0..3 {
            for rot in 0..4 {
                let colors: Vec<usize> = (0..k).map(|i| (i + rot) % 4).collect();
                let img = RgbImage::from_fn(TONE_SIZE, TONE_SIZE, |x, y| PALETTE[colors[tone_label(layout, k, x, y)]])
                    .unwrap();
                let (seg, mask) = segment_vegetation(&img, &ms, &green).unwrap();
                cases += 1;
                let tag = format!("k={k} layout={layout} rot={rot}");
                if seg.region_count() != k {
                    bad.push(format!("{tag}: {} regions", seg.region_count()));
                    continue;
                }
                let mut seen = BTreeSet::new();
                for (r, stats) in seg.regions.iter().enumerate() {
                    let first = seg.labels.iter().position(|&l| l as usize == r).unwrap();
                    let px = img.pixel(first);
                    let uniform = seg.labels.iter().zip(img.pixels()).all(|(&l, p)| l as usize != r || p == px);
                    let exact = stats.mean_rgb == px.map(f64::from);
                    if !(uniform && exact) {
                        bad.push(format!("{tag}: region {r} mean {:?}", stats.mean_rgb));
                    }
                    seen.insert(px);
                }
                if seen.len() != k {
                    bad.push(format!("{tag}: colors merged"));
                }
                let expected = img
                    .pixels()
                    .map(|p| PALETTE_GREEN[PALETTE.iter().position(|&c| c == p).unwrap()])
                    .collect::<Vec<_>>();
                if mask.as_slice() != expected.as_slice() {
                    bad.push(format!("{tag}: green flags"));
                }
                let want = expected.iter().filter(|&&g| g).count() as f64 / (TONE_SIZE * TONE_SIZE) as f64;
                if gvi_of_mask(&mask) != want {
                    bad.push(format!("{tag}: GVI {} vs {want}", gvi_of_mask(&mask)));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= TONE_BUDGET_S {
        bad.push(format!("took {secs:.2}s"));
    }
    check(bad.is_empty(), format!("{cases} images {TONE_SIZE}x{TONE_SIZE}, {secs:.2}s; failures: {bad:?}"))
}

// ---------------------------------------------------------------- gradients

fn gradient_check() -> Verdict {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for head in [Head::Regression, Head::Segmentation] {
        for loss in [LossKind::Mse, LossKind::Bce] {
            let (net, batch, targets) = random_case(head, 11);
            let r = check_all(&net, &batch, &targets, loss, FD_STEP, FD_FLOOR);
            if r.checked != net.param_count() {
                return Err(format!("{head:?}/{loss:?}: checked {} of {}", r.checked, net.param_count()));
            }
            worst = worst.max(r.worst);
            parts.push(format!("{head:?}/{loss:?} {:.1e}", r.worst));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst < FD_TOL && secs < FD_BUDGET_S,
        format!("worst {worst:.2e} (tol {FD_TOL:.0e}, step {FD_STEP:.0e}): {}; {secs:.1}s", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- regressor

struct Trained {
    net: ConvNet,
    mae: f64,
    first_below: Option<usize>,
    secs: f64,
}

fn regression_mae(net: &ConvNet, set: &[SynthImage]) -> f64 {
    let imgs: Vec<&RgbImage> = set.iter().map(|s| &s.image).collect();
    let preds = nnet::predict_gvi_batch(net, &imgs).unwrap();
    preds.iter().zip(set).map(|(p, s)| (p - s.gvi).abs()).sum::<f64>() / set.len() as f64
}

fn train_cfg() -> SynthConfig {
    SynthConfig { distractor_prob: TRAIN_DISTRACTOR_PROB, ..Default::default() }
}

fn test_indices(cfg: &SynthConfig) -> Vec<SynthImage> {
    (TRAIN_N..TRAIN_N + TEST_N).map(|i| synth::generate(cfg, TRAIN_SEED, i as u64).unwrap()).collect()
}

fn train_regressor() -> Trained {
    let started = Instant::now();
    let cfg = train_cfg();
    let train: Vec<TrainSample> = (0..TRAIN_N)
        .map(|i| {
            let s = synth::generate(&cfg, TRAIN_SEED, i as u64).unwrap();
            TrainSample { image: s.image, target: Target::Gvi(s.gvi as f32) }
        })
        .collect();
    let test = test_indices(&cfg);
    let mut net = ConvNet::new(NetConfig::regression(vec![8, 8]).with_input(128, 128), 1).unwrap();
    let tc = TrainConfig { learning_rate: 0.05, batch_size: 8, epochs: MAX_EPOCHS, ..Default::default() };
    let mut first_below = None;
    nnet::train(&mut net, &train, &tc, |e, n| {
        if first_below.is_none() && regression_mae(n, &test) < TARGET_MAE {
            first_below = Some(e.epoch + 1);
        }
        Ok(())
    })
    .unwrap();
    let mae = regression_mae(&net, &test);
    Trained { net, mae, first_below, secs: started.elapsed().as_secs_f64() }
}

fn regressor_accuracy(t: &Trained) -> Verdict {
    check(
        t.mae < TARGET_MAE,
        format!(
            "test MAE {:.4} after {MAX_EPOCHS} epochs (target < {TARGET_MAE}), first below at epoch {:?}; trained in {:.0}s",
            t.mae, t.first_below, t.secs
        ),
    )
}

fn distractor_robustness(t: &Trained) -> Verdict {
    let cfg = SynthConfig { distractor_prob: 1.0, ..train_cfg() };
    let test = test_indices(&cfg);
    if test.iter().any(|s| s.distractors.is_empty()) {
        return Err("a test image has no distractor".into());
    }
    let reg = regression_mae(&t.net, &test);
    let (ms, green) = (MeanShiftParams::default(), GreenParams::default());
    let base = test
        .iter()
        .map(|s| (gvi_of_mask(&segment_vegetation(&s.image, &ms, &green).unwrap().1) - s.gvi).abs())
        .sum::<f64>()
        / test.len() as f64;
    check(reg < base, format!("{TEST_N} distractor images: regressor MAE {reg:.4}, mean shift MAE {base:.4}"))
}

fn gradcam_localization(t: &Trained) -> Verdict {
    let cfg = SynthConfig { min_patches: 1, max_patches: 1, distractor_prob: 0.0, ..Default::default() };
    let layer = t.net.last_conv_layer().unwrap();
    let mut hits = 0;
    let mut fractions = Vec::new();
    for i in 0..CAM_IMAGES {
        let s = synth::generate(&cfg, 77, i).unwrap();
        let cam = grad_cam(&t.net, &s.image, layer).unwrap();
        let total = cam.heatmap.mass();
        let inside: f64 = (0..s.mask.height())
            .flat_map(|y| (0..s.mask.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| s.mask.get(x, y))
            .map(|(x, y)| f64::from(cam.heatmap.get(x, y)))
            .sum();
        let frac = if total > 0.0 { inside / total } else { 0.0 };
        if frac >= CAM_MIN_MASS {
            hits += 1;
        }
        fractions.push(format!("{frac:.2}"));
    }
    let mut zeroed = t.net.clone();
    let head = zeroed.params().len() - 2;
    zeroed.params_mut()[head].fill(0.0);
    let s = synth::generate(&cfg, 77, 0).unwrap();
    let flat = grad_cam(&zeroed, &s.image, layer).unwrap().heatmap.as_slice().iter().all(|&v| v == 0.0);
    check(
        hits >= CAM_MIN_HITS && flat,
        format!(
            "{hits}/{CAM_IMAGES} images with >= {:.0}% mass inside the region (need {CAM_MIN_HITS}); zero-head map all zero: {flat}; fractions [{}]",
            CAM_MIN_MASS * 100.0,
            fractions.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- bench

fn throughput(t: &Trained) -> Verdict {
    let payloads = pipeline::synthetic_payloads(&SynthConfig::default(), 5, 1).unwrap();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let reg = pipeline::run_bench(&Estimator::Regressor(t.net.clone()), &payloads, &[BENCH_IMAGES], jobs).unwrap();
    let ms = Estimator::MeanShift { params: MeanShiftParams::default(), green: GreenParams::default() };
    let base = pipeline::run_bench(&ms, &payloads, &[BENCH_IMAGES], jobs).unwrap();
    let (r, m) = (reg.rows[0].seconds, base.rows[0].seconds);
    let ratio = m / r;
    check(
        ratio >= BENCH_MIN_RATIO && m + r < BENCH_BUDGET_S,
        format!("{BENCH_IMAGES} images at parallelism {jobs}: mean shift {m:.1}s, regressor {r:.1}s, ratio {ratio:.1}x (need >= {BENCH_MIN_RATIO}x)"),
    )
}

// ---------------------------------------------------------------- determinism

fn chain_outputs(data: &Path, reg: &ConvNet, jobs: usize) -> Vec<(String, Vec<u8>)> {
    let manifest = imagery::load_manifest(&data.join("manifest.jsonl")).unwrap();
    let cfg = pipeline::PipelineConfig::default();
    let mut files = Vec::new();

    let out = tempfile::tempdir().unwrap();
    let ms = Estimator::MeanShift { params: MeanShiftParams::default(), green: GreenParams::default() };
    let run = pipeline::run_segment(&manifest, &ms, out.path(), jobs).unwrap();
    pipeline::write_outcome(&run, out.path()).unwrap();
    let agg = pipeline::aggregate_point_gvi(&run.results, None).unwrap();
    let report = pipeline::run_eval(&run.results, out.path(), &manifest).unwrap();
    for r in &run.results {
        let p = r.mask_path.as_ref().unwrap();
        files.push((p.clone(), std::fs::read(out.path().join(p)).unwrap()));
    }
    files.push(("results.jsonl".into(), std::fs::read(out.path().join("results.jsonl")).unwrap()));
    files.push(("points".into(), pipeline::report_json(&cfg, "meanshift", &agg).unwrap().into_bytes()));
    files.push(("eval".into(), pipeline::report_json(&cfg, "meanshift", &report).unwrap().into_bytes()));

    let out = tempfile::tempdir().unwrap();
    let run = pipeline::run_images(&manifest, &Estimator::Regressor(reg.clone()), out.path(), jobs).unwrap();
    pipeline::write_outcome(&run, out.path()).unwrap();
    files.push(("reg results".into(), std::fs::read(out.path().join("results.jsonl")).unwrap()));

    let out = tempfile::tempdir().unwrap();
    let (cams, errors) = pipeline::run_gradcam(reg, &manifest, None, out.path(), jobs).unwrap();
    assert!(errors.is_empty());
    for c in cams {
        for ext in ["png", "json"] {
            let name = format!("{}.{ext}", c.image_id);
            files.push((name.clone(), std::fs::read(out.path().join(&name)).unwrap()));
        }
    }
    files
}

fn small_checkpoint(data: &Path) -> Vec<u8> {
    let manifest = imagery::load_manifest(&data.join("manifest.jsonl")).unwrap();
    let samples = pipeline::training_samples(&manifest, Head::Regression).unwrap();
    let mut net = ConvNet::new(NetConfig::regression(vec![4]).with_input(32, 32), 3).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 3, seed: 9, ..Default::default() };
    nnet::train(&mut net, &samples, &tc, |_, _| Ok(())).unwrap();
    save_checkpoint(&net)
}

fn determinism() -> Verdict {
    let cfg = SynthConfig { width: 48, height: 40, distractor_prob: 0.5, ..Default::default() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::write_synthetic_dataset(&cfg, 21, 8, d1.path()).unwrap();
    pipeline::write_synthetic_dataset(&cfg, 21, 8, d2.path()).unwrap();
    let read_tree = |d: &Path| -> Vec<Vec<u8>> {
        let mut v = vec![std::fs::read(d.join("manifest.jsonl")).unwrap()];
        for sub in ["images", "masks"] {
            let mut names: Vec<_> = std::fs::read_dir(d.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            v.extend(names.iter().map(|p| std::fs::read(p).unwrap()));
        }
        v
    };
    let mut bad = Vec::new();
    if read_tree(d1.path()) != read_tree(d2.path()) {
        bad.push("synthetic dataset".to_string());
    }

    let ck1 = small_checkpoint(d1.path());
    let ck2 = small_checkpoint(d1.path());
    if ck1 != ck2 {
        bad.push("checkpoint".into());
    }
    let reg = nnet::load_checkpoint(&ck1).unwrap();

    let runs = [(1, chain_outputs(d1.path(), &reg, 1)), (1, chain_outputs(d1.path(), &reg, 1)), (4, chain_outputs(d1.path(), &reg, 4))];
    let reference = &runs[0].1;
    for (jobs, files) in &runs[1..] {
        if files.len() != reference.len() {
            bad.push(format!("jobs={jobs}: {} files vs {}", files.len(), reference.len()));
            continue;
        }
        for ((name, a), (_, b)) in reference.iter().zip(files) {
            if a != b {
                bad.push(format!("jobs={jobs}: {name}"));
            }
        }
    }
    check(
        bad.is_empty(),
        format!(
            "{} artifacts compared over 2 runs and jobs 1/4, checkpoint {} bytes; differing: {bad:?}",
            reference.len(),
            ck1.len()
        ),
    )
}

// ---------------------------------------------------------------- sampling

fn oracle_haversine(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((b.lon - a.lon).to_radians() / 2.0).sin().powi(2);
    2.0 * 6_371_000.0 * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Walks from the first vertex every time, segment by segment.
fn oracle_point(line: &[LatLon], offset: f64) -> LatLon {
    let mut walked = 0.0;
    for (i, w) in line.windows(2).enumerate() {
        let len = oracle_haversine(w[0], w[1]);
        let last = i + 2 == line.len();
        if walked + len > offset || last {
            let t = if len > 0.0 { ((offset - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
            return LatLon::new(w[0].lat + t * (w[1].lat - w[0].lat), w[0].lon + t * (w[1].lon - w[0].lon));
        }
        walked += len;
    }
    unreachable!()
}

fn distance_to_polyline_deg(line: &[LatLon], p: LatLon) -> f64 {
    line.windows(2)
        .map(|w| {
            let (ax, ay, bx, by) = (w[0].lon, w[0].lat, w[1].lon, w[1].lat);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 { (((p.lon - ax) * dx + (p.lat - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            ((ax + t * dx - p.lon).powi(2) + (ay + t * dy - p.lat).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_polyline(rng: &mut ChaCha8Rng) -> Vec<LatLon> {
    let mut p = LatLon::new(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0));
    let mut line = vec![p];
    for _ in 0..rng.random_range(1..=7) {
        if rng.random_bool(0.1) {
            line.push(p);
            continue;
        }
        let (bearing, d): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(5.0..500.0));
        let m_per_deg = 6_371_000.0f64.to_radians();
        p = LatLon::new(
            p.lat + d * bearing.cos() / m_per_deg,
            p.lon + d * bearing.sin() / (m_per_deg * p.lat.to_radians().cos()),
        );
        line.push(p);
    }
    line
}

fn sampling_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut net = RoadNetwork::default();
    let mut lines = Vec::new();
    let mut next = 1;
    for w in 0..POLYLINES {
        let line = random_polyline(&mut rng);
        let ids: Vec<i64> = (next..next + line.len() as i64).collect();
        for (id, p) in ids.iter().zip(&line) {
            net.nodes.insert(*id, *p);
        }
        next += ids.len() as i64;
        net.ways.push(Way { id: w as i64 + 1, nodes: ids, highway: "residential".into() });
        lines.push(line);
    }
    let spacing = rng.random_range(3.0..120.0);
    let points = geo::sample_points(&net, spacing).unwrap();
    let mut worst_pos = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut bad = Vec::new();
    for (w, line) in lines.iter().enumerate() {
        let id = w as i64 + 1;
        let got: Vec<_> = points.iter().filter(|p| p.way_id == id).collect();
        let total: f64 = line.windows(2).map(|s| oracle_haversine(s[0], s[1])).sum();
        let q = total / spacing;
        let expected = if q.fract() == 0.0 { q as usize } else { q.floor() as usize + 1 };
        if got.len() != expected {
            bad.push(format!("way {id}: {} points, expected {expected}", got.len()));
            continue;
        }
        for (k, p) in got.iter().enumerate() {
            let offset = k as f64 * spacing;
            let o = oracle_point(line, offset);
            let here = LatLon::new(p.lat, p.lon);
            worst_pos = worst_pos.max((o.lat - p.lat).abs().max((o.lon - p.lon).abs()));
            worst_residual = worst_residual.max(distance_to_polyline_deg(line, here));
            if p.offset_m != offset || p.point_id != geo::point_id(id, k) {
                bad.push(format!("way {id} point {k}: offset {} id {}", p.offset_m, p.point_id));
            }
        }
    }
    check(
        bad.is_empty() && worst_pos < POLYLINE_TOL_DEG && worst_residual < POLYLINE_TOL_DEG,
        format!(
            "{POLYLINES} polylines, {} points at {spacing:.2} m: worst oracle gap {worst_pos:.1e} deg, worst residual {worst_residual:.1e} deg; count/offset errors {bad:?}",
            points.len()
        ),
    )
}

// ---------------------------------------------------------------- runner

fn run(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Verdict) {
    let started = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {name} [{secs:.1}s]: {detail}");
    results.push(verdict.is_ok());
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    run(&mut results, "1 metrics vs brute-force oracle", metrics_oracle);
    run(&mut results, "2 k-tone mean-shift regions", k_tone_regions);
    run(&mut results, "3 finite-difference gradients", gradient_check);
    run(&mut results, "9 polyline sampling vs arc-length walker", sampling_oracle);

    let trained = catch_unwind(train_regressor).ok();
    let trained = trained.as_ref();
    let with_model = |f: fn(&Trained) -> Verdict| {
        move || match trained {
            Some(t) => f(t),
            None => Err("training the shared regressor panicked".into()),
        }
    };
    run(&mut results, "4 regressor test MAE", with_model(regressor_accuracy));
    run(&mut results, "5 regressor beats mean shift on distractors", with_model(distractor_robustness));
    run(&mut results, "6 Grad-CAM localization", with_model(gradcam_localization));
    run(&mut results, "7 regressor throughput vs mean shift", with_model(throughput));
    run(&mut results, "8 byte-identical outputs", determinism);

    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
