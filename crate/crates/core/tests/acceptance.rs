//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. A free argument runs only the criteria whose key contains it.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::gradcheck;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitiseg::analysis::*;
use vitiseg::imaging::{BinaryMask, RasterImage};
use vitiseg::manifest::Split;
use vitiseg::metrics::*;
use vitiseg::nn::checkpoint::to_bytes;
use vitiseg::nn::ops::*;
use vitiseg::nn::{NetworkConfig, NetworkModel, TrainConfig};
use vitiseg::patching::{grid_origins, PatchSpec};
use vitiseg::pipeline::*;
use vitiseg::synth::{write_dataset, ColorProfile, SyntheticSceneSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn architecture() -> Verdict {
    // (layer, channels, side) for every size printed in the architecture description
    let expected: [(&str, usize, usize); 16] = [
        ("enc1_2", 64, 224),
        ("enc2_2", 128, 112),
        ("enc3_3", 256, 56),
        ("enc4_3", 512, 28),
        ("enc5_3", 512, 14),
        ("pool5", 512, 7),
        ("up1", 256, 14),
        ("pool4", 512, 14),
        ("cat1", 768, 14),
        ("dec1", 256, 14),
        ("up2", 128, 28),
        ("pool3", 256, 28),
        ("cat2", 384, 28),
        ("dec2", 128, 28),
        ("up3", 2, 224),
        ("logits", 2, 224),
    ];
    let mut mismatches = Vec::new();
    let mut forward_time = Duration::ZERO;
    for channels in [3, 4] {
        let model = NetworkModel::new(NetworkConfig::vgg16(channels), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(channels as u64);
        let x = random_tensor(&mut rng, &[channels, 224, 224]);
        let trace = model.shape_trace(&x).unwrap();
        for (name, c, side) in expected {
            let got = trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
            if got.as_deref() != Some(&[c, side, side][..]) {
                mismatches.push(format!("{channels}ch {name}: {got:?}"));
            }
        }
        let start = Instant::now();
        let probs = model.forward(&x).unwrap();
        forward_time = forward_time.max(start.elapsed());
        let plane = 224 * 224;
        let v = probs.values();
        if (0..plane).any(|i| (v[i] + v[plane + i] - 1.0).abs() > 1e-12) {
            mismatches.push(format!("{channels}ch: probabilities do not sum to 1"));
        }
    }
    let pass = mismatches.is_empty() && forward_time < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} shapes checked for 3 and 4 channels, mismatches {:?}; slowest 224 px forward {:.2?}",
            expected.len(),
            mismatches,
            forward_time
        ),
    )
}

// ---------------------------------------------------------------- 2

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut rows = vec![
        ("conv", gradcheck::conv_worst(), gradcheck::TOL),
        ("maxpool", gradcheck::maxpool_worst(), gradcheck::TOL),
        ("concat", gradcheck::concat_worst(), gradcheck::TOL),
        ("softmax-xent", gradcheck::softmax_xent_worst(), gradcheck::XENT_TOL),
        ("micro net", gradcheck::micro_network_worst().0, gradcheck::TOL),
        ("toy net", gradcheck::toy_network_worst().0, gradcheck::TOL),
    ];
    for (s, e) in gradcheck::deconv_worst() {
        rows.push((if s == 2 { "deconv s=2" } else { "deconv s=8" }, e, gradcheck::TOL));
    }
    let elapsed = start.elapsed();
    let pass = rows.iter().all(|&(_, e, tol)| e < tol) && elapsed < Duration::from_secs(30);
    let summary: Vec<String> = rows.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect();
    verdict(pass, format!("max rel err: {}; {elapsed:.2?}", summary.join(", ")))
}

// ---------------------------------------------------------------- 3

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut failures = Vec::new();

    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let density = rng.gen_range(0.05..0.7);
        let mask = random_mask(&mut rng, w, h, density);
        let map = label_regions(&mask, 0);
        let mut sets = vec![std::collections::BTreeSet::new(); map.objects.len()];
        for (i, &l) in map.labels.iter().enumerate() {
            if l > 0 {
                sets[l as usize - 1].insert((i % w, i / w));
            }
        }
        if sets.into_iter().collect::<std::collections::BTreeSet<_>>() != flood_fill_components(&mask) {
            failures.push(format!("labeling differs on a {w}×{h} mask"));
            break;
        }
    }

    let mut worst_op: f64 = 0.0;
    for &(c, oc, h, k, s, p) in &[(3, 4, 9, 3, 1, 1), (2, 3, 11, 3, 2, 1), (4, 2, 8, 5, 1, 2), (1, 1, 6, 1, 1, 0)] {
        let x = random_tensor(&mut rng, &[c, h, h + 1]);
        let w = random_tensor(&mut rng, &[oc, c, k, k]);
        let b = random_tensor(&mut rng, &[oc]);
        let fast = conv2d_padded(&x, &w, Some(&b), s, p).unwrap();
        worst_op = worst_op.max(max_abs_diff(fast.values(), naive_conv(&x, &w, Some(&b), s, p).values()));
    }
    for &(c, oc, h, k, s, p) in &[(3, 2, 5, 4, 2, 1), (4, 2, 3, 8, 8, 0), (2, 3, 4, 3, 1, 1)] {
        let x = random_tensor(&mut rng, &[c, h, h]);
        let w = random_tensor(&mut rng, &[c, oc, k, k]);
        let b = random_tensor(&mut rng, &[oc]);
        let fast = deconv2d_forward(&x, &w, Some(&b), s, p).unwrap();
        worst_op = worst_op.max(max_abs_diff(fast.values(), naive_deconv(&x, &w, Some(&b), s, p).values()));
    }
    for &(c, h, w) in &[(3, 8, 8), (2, 14, 6), (5, 2, 2)] {
        let x = random_tensor(&mut rng, &[c, h, w]);
        let fast = maxpool2x2_forward(&x).unwrap().output;
        worst_op = worst_op.max(max_abs_diff(fast.values(), naive_pool(&x).values()));
    }
    if worst_op >= 1e-10 {
        failures.push(format!("op deviation {worst_op:e}"));
    }

    for _ in 0..500 {
        let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (da, db) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = random_mask(&mut rng, w, h, da);
        let b = random_mask(&mut rng, w, h, db);
        for (class, object) in [(0, true), (1, false)] {
            if class_iou(&a, &b, class).unwrap() != set_iou(&pixel_set(&a, object), &pixel_set(&b, object)) {
                failures.push(format!("IoU class {class} differs on {w}×{h}"));
            }
        }
    }

    // same instance stream as the unit test, independent of the draws above
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let trials = 1000;
    let (mut exact, mut optimal) = (0, 0);
    for _ in 0..trials {
        let (pred, truth) = detection_instance(&mut rng);
        let pairs = match_pairs(&pred, &truth, 9.0).unwrap();
        exact += (pairs == exhaustive_greedy_pairs(&pred, &truth, 9.0)) as usize;
        let best = brute_force_matching(&pred, &truth, 9.0);
        if pairs.len() > best {
            failures.push("matching exceeds the exhaustive optimum".into());
        }
        optimal += (pairs.len() == best) as usize;
    }
    if exact != trials {
        failures.push(format!("greedy order differs in {} instances", trials - exact));
    }
    if optimal * 100 < trials * 99 {
        failures.push(format!("greedy optimal in only {optimal}/{trials}"));
    }
    let long_run = (0..10_000)
        .filter(|_| {
            let (pred, truth) = detection_instance(&mut rng);
            match_pairs(&pred, &truth, 9.0).unwrap().len() == brute_force_matching(&pred, &truth, 9.0)
        })
        .count();
    verdict(
        failures.is_empty(),
        format!(
            "1000 labelings, op max deviation {worst_op:.1e}, 1000 IoU pairs, matching equals exhaustive greedy \
             {exact}/{trials} and the exhaustive optimum {optimal}/{trials} \
             ({:.2}% over a further 10000); failures {failures:?}",
            long_run as f64 / 100.0
        ),
    )
}

// ---------------------------------------------------------------- 4

/// A fixed per-pixel map from color to a background probability.
fn pixel_function(px: &[u8]) -> f64 {
    let v = px.iter().enumerate().map(|(i, &c)| (2 * i + 3) * c as usize).sum::<usize>();
    (v % 256) as f64 / 255.0
}

fn tiling_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut bad = Vec::new();
    for _ in 0..50 {
        let side = [16, 32, 64, 224][rng.gen_range(0..4)];
        let (w, h) = (rng.gen_range(side..=3 * side + 7), rng.gen_range(side..=3 * side + 7));
        let data = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = RasterImage::new(w, h, 3, data).unwrap();
        let whole: Vec<f64> = img.data().chunks_exact(3).map(pixel_function).collect();
        for tiling in [Tiling::Adjacent, Tiling::Overlap50] {
            let map = segment_with(&img, side, tiling, |patch| {
                Ok(patch.data().chunks_exact(3).map(pixel_function).collect())
            })
            .unwrap();
            if map.values() != whole.as_slice() {
                bad.push(format!("{w}×{h} side {side} {tiling}"));
            }
        }
    }
    verdict(bad.is_empty(), format!("50 image sizes × 2 tilings, mismatches {bad:?}"))
}

// ---------------------------------------------------------------- 5

fn mode_arithmetic() -> Verdict {
    let full = vec![(5472, 3648); 5];
    let grid = grid_origins(5472, 3648, &PatchSpec::grid(224)).unwrap().len();
    let overlap = grid_origins(5472, 3648, &PatchSpec::overlap50(224)).unwrap().len();
    let da = mode_patch_count(&full, TrainMode::FiveCoverDa, 224, 100).unwrap();
    let ratio = overlap as f64 / grid as f64;

    // the same arithmetic through actual patch extraction on smaller images
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let images: Vec<(RasterImage, BinaryMask)> = (0..6)
        .map(|_| {
            let (w, h) = (rng.gen_range(64..200), rng.gen_range(64..200));
            let img = RasterImage::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
            (img, random_mask(&mut rng, w, h, 0.2))
        })
        .collect();
    let sizes: Vec<_> = images.iter().map(|(i, _)| (i.width(), i.height())).collect();
    let five_grid: usize = sizes[..5]
        .iter()
        .map(|&(w, h)| grid_origins(w, h, &PatchSpec::grid(64)).unwrap().len())
        .sum();
    let extracted = mode_patches(&images, TrainMode::FiveCoverDa, 64, 7, 1).unwrap().len();

    let pass = grid == 425
        && da == 5 * grid * 4
        && da == 8500
        && (3.5..=4.0).contains(&ratio)
        && extracted == five_grid * 4;
    verdict(
        pass,
        format!(
            "5472×3648: adjacent {grid}, overlap50 {overlap} (ratio {ratio:.3}), 5-cover-da {da}; \
             extracted 5-cover-da {extracted} = 4 × {five_grid}"
        ),
    )
}

// ---------------------------------------------------------------- 6 and 7

struct SyntheticRun {
    checkpoint: Vec<u8>,
    report: EvaluationReport,
    masks: Vec<BinaryMask>,
    elapsed: Duration,
}

fn scene_spec(profile: ColorProfile) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        name: format!("{profile:?}").to_lowercase(),
        width: 256,
        height: 256,
        channels: 3,
        count_range: (20, 60),
        size_range: (4.0, 4.0),
        profile,
        min_gap: 4,
        train_images: 30,
        eval_images: 15,
        test_images: 0,
        seed: 7,
        ..SyntheticSceneSpec::default()
    }
}

fn train_options() -> TrainOptions {
    TrainOptions {
        mode: TrainMode::AllRandDa,
        network: NetworkConfig::toy(3),
        train: TrainConfig {
            batch_size: 20,
            learning_rate: 1e-3,
            epochs: 23,
            momentum: 0.99,
            seed: 7,
            object_weight: 1.0,
        },
        random_count: 16,
    }
}

/// Generate, train, segment and evaluate on one thread.
fn synthetic_run(profile: ColorProfile) -> SyntheticRun {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&scene_spec(profile), dir.path()).unwrap();
        let outcome = train_from_manifest(&manifest, &train_options(), |_, _| {}).unwrap();
        let mut pairs = Vec::new();
        for r in manifest.records_in(Split::Eval) {
            let map = segment_image(&outcome.model, &manifest.load_image(r).unwrap(), Tiling::Overlap50).unwrap();
            pairs.push((r.id.clone(), postprocess(&map, 127), manifest.ground_truth(r).unwrap()));
        }
        let p = &manifest.params;
        assert_eq!(p.tolerance, 9.0);
        let report = evaluate_pairs(&pairs, p.min_region_size, p.tolerance).unwrap();
        SyntheticRun {
            checkpoint: to_bytes(&outcome.model),
            report,
            masks: pairs.into_iter().map(|(_, m, _)| m).collect(),
            elapsed: start.elapsed(),
        }
    })
}

fn worst_count_error(report: &EvaluationReport) -> f64 {
    report
        .images
        .iter()
        .map(|r| {
            let d = &r.detection;
            let (found, truth) = ((d.tp + d.fp) as f64, (d.tp + d.fn_) as f64);
            (found - truth).abs() / truth
        })
        .fold(0.0, f64::max)
}

fn end_to_end(easy: &SyntheticRun, hard: &SyntheticRun) -> Verdict {
    let (e, h) = (&easy.report.mean, &hard.report.mean);
    let count = worst_count_error(&easy.report);
    let total = easy.elapsed + hard.elapsed;
    let pass = e.iou0 >= 0.70
        && e.f1 >= 0.90
        && count <= 0.05
        && h.iou0 < e.iou0
        && easy.elapsed < Duration::from_secs(20 * 60);
    verdict(
        pass,
        format!(
            "easy IoU0 {:.4} mIoU {:.4} F1 {:.4} worst count error {:.2}% ({:.0?}); hard IoU0 {:.4} F1 {:.4} ({:.0?}); total {:.0?}",
            e.iou0,
            e.miou,
            e.f1,
            100.0 * count,
            easy.elapsed,
            h.iou0,
            h.f1,
            hard.elapsed,
            total
        ),
    )
}

fn determinism(first: &SyntheticRun) -> Verdict {
    let second = synthetic_run(ColorProfile::Easy);
    let same_model = first.checkpoint == second.checkpoint;
    let same_report = serde_json::to_string(&first.report).unwrap() == serde_json::to_string(&second.report).unwrap();
    let same_masks = first.masks == second.masks;
    verdict(
        same_model && same_report && same_masks,
        format!(
            "checkpoint identical {same_model} ({} bytes), report identical {same_report}, masks identical {same_masks}",
            first.checkpoint.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn analysis_math() -> Verdict {
    let mut failures = Vec::new();

    let mut stair = BinaryMask::empty(40, 50);
    for i in 0..=40 {
        stair.set(i * 30 / 40, i, true);
    }
    let objs = region_label(&stair, &AnalysisParams::new(1, 1.0));
    let length = pedicel_lengths(&objs, &[TopN::Count(1)])[0].mean_length;
    if objs.len() != 1 || length != 50.0 {
        failures.push(format!("3-4-5 pedicel gave {length} over {} objects", objs.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(800);
    for _ in 0..200 {
        // a chain with every step below the threshold is one cluster ...
        let t = rng.gen_range(1.0..20.0);
        let n = rng.gen_range(2..25);
        let mut pts = vec![(0.0, 0.0)];
        for _ in 1..n {
            let (x, y) = *pts.last().unwrap();
            let (step, a) = (t * rng.gen_range(0.05..0.999), rng.gen_range(0.0..std::f64::consts::TAU));
            pts.push((x + step * a.cos(), y + step * a.sin()));
        }
        let chain = cluster_objects(&objects_at(&pts), t).unwrap();
        if chain.cluster_count != 1 {
            failures.push(format!("chain of {n} split into {}", chain.cluster_count));
        }
        // ... and the partition is unchanged when coordinates and threshold scale together
        let cloud: Vec<(f64, f64)> = (0..rng.gen_range(0..30))
            .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let base = cluster_objects(&objects_at(&cloud), t).unwrap();
        for k in [0.25, 2.0, 8.0] {
            let scaled: Vec<(f64, f64)> = cloud.iter().map(|&(x, y)| (x * k, y * k)).collect();
            let r = cluster_objects(&objects_at(&scaled), t * k).unwrap();
            if partition(&objects_at(&scaled), &r) != partition(&objects_at(&cloud), &base) {
                failures.push(format!("scale {k} changed the partition"));
            }
        }
    }

    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..60), rng.gen_range(1..60));
        let density = rng.gen_range(0.1..0.6);
        let mask = random_mask(&mut rng, w, h, density);
        let mut prev = usize::MAX;
        for min in 0..20 {
            let n = region_label(&mask, &AnalysisParams::new(min, 1.0)).len();
            if n > prev {
                failures.push(format!("count rose from {prev} to {n} at min size {min}"));
            }
            prev = n;
        }
    }
    verdict(
        failures.is_empty(),
        format!("pedicel length {length}; 200 chains, 600 scaled partitions, 200 sweeps; failures {failures:?}"),
    )
}

// ----------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id} {name}: {} [{:.1?}] {}",
        if v.pass { "PASS" } else { "FAIL" },
        start.elapsed(),
        v.detail
    );
    v.pass
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filter.is_empty() || filter.iter().any(|f| key.contains(f.as_str()));
    let mut results = Vec::new();

    if wanted("architecture") {
        results.push(run(1, "architecture", architecture));
    }
    if wanted("gradients") {
        results.push(run(2, "gradients", gradients));
    }
    if wanted("oracles") {
        results.push(run(3, "oracles", oracles));
    }
    if wanted("tiling") {
        results.push(run(4, "tiling", tiling_identity));
    }
    if wanted("modes") {
        results.push(run(5, "modes", mode_arithmetic));
    }
    if wanted("end_to_end") || wanted("determinism") {
        // criterion 7 repeats the easy run made for criterion 6
        let mut easy = None;
        if wanted("end_to_end") {
            results.push(run(6, "end_to_end", || {
                let e = easy.insert(synthetic_run(ColorProfile::Easy));
                end_to_end(e, &synthetic_run(ColorProfile::Hard))
            }));
        }
        if wanted("determinism") {
            results.push(run(7, "determinism", || {
                let first = easy.get_or_insert_with(|| synthetic_run(ColorProfile::Easy));
                determinism(first)
            }));
        }
    }
    if wanted("analysis") {
        results.push(run(8, "analysis", analysis_math));
    }

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
