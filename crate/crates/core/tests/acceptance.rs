//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//! `VCORR_ACCEPTANCE=1,3` restricts the run to the listed criteria.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcorr::affinity::{
    compute_affinity, compute_inter_affinity, mutual_weights, mutual_weights_from_similarity, normalize_backward,
    renormalize_positive, weighted_affinity, BatchFeatures, FeatureMap,
};
use vcorr::backbone::{Backbone, BackboneConfig};
use vcorr::codec::TransformCodec;
use vcorr::dataset::{index_dataset, load_index_png, Keypoint, VideoEntry};
use vcorr::image::Image;
use vcorr::losses::LossSwitches;
use vcorr::metrics::{boundary_f, default_radius, jaccard, keypoint_scale, miou, pck};
use vcorr::objective::{batch_objective, ObjectiveSettings, PairSample};
use vcorr::pipeline::{evaluate_dataset, mean_region_similarity, pad_to_stride, propagate_dataset, EvalTask};
use vcorr::propagation::{
    frame_features, labels_to_mask, mask_to_labels, propagate_keypoints, propagate_masks, LabelKind, PropagationConfig,
};
use vcorr::synth::{generate_synthetic, SyntheticSpec};
use vcorr::trainer::{run_training, TrainConfig};

type Outcome = Result<String, String>;

/// Name, check and runtime budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, f64);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, Array2::from_shape_fn((c, h * w), |_| rng.gen_range(-1.0..1.0))).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Softmax over explicitly concatenated reference columns, evaluated with scalar loops.
fn brute_force_inter(target: &FeatureMap, refs: &[FeatureMap], temperature: f64) -> Array2<f64> {
    let total: usize = refs.iter().map(FeatureMap::cells).sum();
    let mut out = Array2::zeros((target.cells(), total));
    for i in 0..target.cells() {
        let mut logits = Vec::with_capacity(total);
        for r in refs {
            for j in 0..r.cells() {
                let mut dot = 0.0;
                for c in 0..target.channels() {
                    dot += target.values()[[c, i]] * r.values()[[c, j]];
                }
                logits.push(dot / temperature);
            }
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            out[[i, j]] = (l - m).exp() / z;
        }
    }
    out
}

fn affinity_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut row_err, mut brute_err, mut pos_err, mut single_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let c = rng.gen_range(1..=8);
        let temperature = rng.gen_range(0.05..1.0);
        let target = random_map(&mut rng, h, w, c);
        let refs: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut rng, h, w, c)).collect();
        let pos = rng.gen_range(0..n);
        let batch = BatchFeatures::new(refs.clone(), pos).map_err(|e| e.to_string())?;
        let (inter, sub) = compute_inter_affinity(&target, &batch, temperature).map_err(|e| e.to_string())?;
        for row in inter.values().rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }
        brute_err = brute_err.max(max_abs_diff(inter.values(), &brute_force_inter(&target, &refs, temperature)));
        let intra = compute_affinity(&target, &refs[pos], temperature).map_err(|e| e.to_string())?;
        for row in intra.values().rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }
        let renorm = renormalize_positive(&sub).map_err(|e| e.to_string())?;
        pos_err = pos_err.max(max_abs_diff(renorm.values(), intra.values()));
        if n == 1 {
            single_err = single_err.max(max_abs_diff(inter.values(), intra.values()));
            check(sub.negative.ncols() == 0, || "n = 1 left a nonempty negative block".into())?;
        }
    }
    let single = BatchFeatures::new(vec![random_map(&mut rng, 3, 2, 5)], 0).unwrap();
    let t = random_map(&mut rng, 2, 3, 5);
    let (inter, _) = compute_inter_affinity(&t, &single, 0.3).unwrap();
    single_err = single_err.max(max_abs_diff(inter.values(), compute_affinity(&t, &single.maps()[0], 0.3).unwrap().values()));
    let detail = format!("row {row_err:.1e}, brute force {brute_err:.1e}, positive {pos_err:.1e}, n=1 {single_err:.1e}");
    check(row_err <= 1e-5 && brute_err <= 1e-6 && pos_err <= 1e-5 && single_err <= 1e-6, || detail.clone())?;
    Ok(detail)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let codec = TransformCodec::color(4);
    let settings = ObjectiveSettings { temperature: 0.5, switches: LossSwitches::ALL };
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // checkerboards of low and high pixels. Every pixel lies outside (0.25, 0.75)
        // while every 4x4 cell mean, and so every bilinear reconstruction, lies inside
        // it: below 0.5 for video 0 and above 0.5 for video 1. Neither the self loss nor
        // the intra-inter L1 term can then sit at a kink within the step.
        let samples: Vec<PairSample> = (0..2)
            .map(|v| {
                let off = 0.125 * v as f64;
                let mut pixel = |parity: usize| {
                    let base = if parity.is_multiple_of(2) { 0.75 } else { 0.0 };
                    base + off + rng.gen_range(0.0..0.125)
                };
                let a = Image::from_fn(8, 8, |c, y, x| pixel(c + y + x));
                let b = Image::from_fn(8, 8, |c, y, x| pixel(c + y + x + 1));
                PairSample::new(&codec, a, b).unwrap()
            })
            .collect();
        // raw (unnormalized) backbone features, normalized inside the loss path as in training
        let raw: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.1..1.0))).collect();
        let total = |raw: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let maps: Vec<(FeatureMap, Vec<f64>)> =
                raw.iter().map(|v| FeatureMap::new(2, 2, v.clone()).unwrap().normalized_with_norms()).collect();
            let refs: Vec<FeatureMap> = maps[..2].iter().map(|m| m.0.clone()).collect();
            let tgts: Vec<FeatureMap> = maps[2..].iter().map(|m| m.0.clone()).collect();
            let out = batch_objective(&samples, &refs, &tgts, &codec, settings).unwrap();
            let grads = (0..4)
                .map(|k| {
                    let g = if k < 2 { &out.gradients[k].reference } else { &out.gradients[k - 2].target };
                    normalize_backward(maps[k].0.values(), &maps[k].1, g)
                })
                .collect();
            (out.report.total, grads)
        };
        let (_, analytic) = total(&raw);
        for k in 0..4 {
            for idx in [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3), (2, 0), (2, 1), (2, 2), (2, 3)] {
                let mut plus = raw.clone();
                plus[k][idx] += h;
                let mut minus = raw.clone();
                minus[k][idx] -= h;
                let num = (total(&plus).0 - total(&minus).0) / (2.0 * h);
                let a = analytic[k][idx];
                let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let detail = format!("max relative error {worst:.2e} over 20 trials");
    check(worst <= 1e-3, || detail.clone())?;
    Ok(detail)
}

fn mutual_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ones_err = 0.0f64;
    for _ in 0..100 {
        let (h, w, c) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=8));
        let t = random_map(&mut rng, h, w, c).normalized().unwrap();
        let r = random_map(&mut rng, w, h, c).normalized().unwrap();
        let wts = mutual_weights(&t, &r).map_err(|e| e.to_string())?;
        for &v in &wts {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let ones = Array2::ones((t.cells(), r.cells()));
        let weighted = weighted_affinity(&t, &r, &ones, 0.1).map_err(|e| e.to_string())?;
        ones_err = ones_err.max(max_abs_diff(weighted.values(), compute_affinity(&t, &r, 0.1).unwrap().values()));
    }
    let worked = mutual_weights_from_similarity(&ndarray::array![[1.0, 0.5], [0.5, 1.0]]);
    let worked_err = max_abs_diff(&worked, &ndarray::array![[1.0, 0.25], [0.25, 1.0]]);
    let detail = format!("w in [{lo:.3}, {hi:.3}], worked case err {worked_err:.1e}, all-ones err {ones_err:.1e}");
    check(lo >= 0.0 && hi <= 1.0 && worked_err <= 1e-12 && ones_err <= 1e-6, || detail.clone())?;
    Ok(detail)
}

fn quantized(mask: &Array2<u8>, stride: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let classes = mask.iter().copied().max().unwrap_or(0) as usize + 1;
    labels_to_mask(&mask_to_labels(mask, stride, classes).unwrap(), stride).slice(s![..h, ..w]).to_owned()
}

fn propagation_identity() -> Outcome {
    let cfg = PropagationConfig::default();
    // one-hot features are pairwise distinct by construction
    let (gh, gw, stride) = (8, 8, 4);
    let onehot = FeatureMap::new(gh, gw, Array2::eye(gh * gw)).unwrap();
    let features = vec![onehot; 6];
    let aligned = Array2::from_shape_fn((gh * stride, gw * stride), |(y, x)| u8::from((8..20).contains(&y) && (4..24).contains(&x)));
    let masks = propagate_masks(&features, &aligned, stride, &cfg).map_err(|e| e.to_string())?;
    let aligned_j = masks.iter().map(|m| jaccard_u8(m, &aligned)).fold(1.0, f64::min);
    let kps = vec![Keypoint { id: 0, x: 6.0, y: 10.0 }, Keypoint { id: 1, x: 18.0, y: 26.0 }, Keypoint { id: 2, x: 30.0, y: 2.0 }];
    let kcfg = PropagationConfig { kind: LabelKind::Keypoint, ..cfg };
    let pred = propagate_keypoints(&features, &kps, stride, &kcfg).map_err(|e| e.to_string())?;
    let gt: Vec<(f64, f64)> = kps.iter().map(|k| (k.x, k.y)).collect();
    let scale = keypoint_scale(&gt);
    let mut pck_min = 1.0f64;
    for frame in &pred {
        let p: Vec<(f64, f64)> = frame.iter().map(|k| (k.x, k.y)).collect();
        pck_min = pck_min.min(pck(&p, &gt, 0.1, scale).unwrap());
    }

    // static synthetic video through a random backbone
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { video_count: 1, frames_per_video: 6, max_speed: 0.0, seed: 4, ..SyntheticSpec::default() };
    generate_synthetic(&spec, dir.path()).map_err(|e| e.to_string())?;
    let entry = &index_dataset(dir.path()).map_err(|e| e.to_string())?.videos[0];
    let bb = Backbone::new(BackboneConfig::default()).map_err(|e| e.to_string())?;
    let frames: Vec<Image> = entry.load_frames().map_err(|e| e.to_string())?;
    let feats = frame_features(&bb, &frames.iter().map(|f| pad_to_stride(f, bb.stride())).collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let gt0 = load_index_png(entry.mask_path(0).unwrap()).map_err(|e| e.to_string())?;
    let synth = propagate_masks(&feats, &gt0, bb.stride(), &cfg).map_err(|e| e.to_string())?;
    let q = quantized(&gt0, bb.stride());
    let (mut synth_q, mut synth_raw) = (1.0f64, 1.0f64);
    for m in &synth[1..] {
        synth_q = synth_q.min(jaccard_u8(m, &q));
        synth_raw = synth_raw.min(jaccard_u8(m, &gt0));
    }
    let detail = format!(
        "one-hot J {aligned_j:.4}, PCK@0.1 {pck_min:.4}; synthetic J vs cell grid {synth_q:.4} (pixel J {synth_raw:.4})"
    );
    check(aligned_j == 1.0 && pck_min == 1.0 && synth_q == 1.0, || detail.clone())?;
    Ok(detail)
}

fn jaccard_u8(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let ids: std::collections::BTreeSet<u8> = b.iter().copied().filter(|&v| v > 0).collect();
    ids.iter().map(|&id| jaccard(&a.mapv(|v| v == id), &b.mapv(|v| v == id)).unwrap()).fold(1.0, f64::min)
}

fn desk_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let train = SyntheticSpec { video_count: 16, frames_per_video: 20, width: 64, height: 64, seed: 1, ..SyntheticSpec::default() };
    generate_synthetic(&train, &root.join("train")).map_err(|e| e.to_string())?;
    let held_out = SyntheticSpec { video_count: 10, seed: 2, ..train.clone() };
    generate_synthetic(&held_out, &root.join("test")).map_err(|e| e.to_string())?;
    let index = index_dataset(&root.join("test")).map_err(|e| e.to_string())?;
    let videos: Vec<&VideoEntry> = index.videos.iter().collect();
    let pcfg = PropagationConfig::default();
    let base = TrainConfig {
        dataset: root.join("train"),
        batch_size: 4,
        patch_size: 64,
        total_epochs: 20,
        warmup_epochs: 5,
        steps_per_epoch: 100,
        ..TrainConfig::default()
    };
    let random = Backbone::new(base.backbone).map_err(|e| e.to_string())?;
    let j_random = mean_region_similarity(&random, &videos, &pcfg).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for (name, switches) in [("full", LossSwitches::ALL), ("intra", LossSwitches::INTRA_ONLY)] {
        let cfg = TrainConfig { output: root.join(name), switches, ..base.clone() };
        let summary = run_training(&cfg, None).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = summary.reports.iter().map(|r| r.1.self_loss).collect();
        check(losses.len() == 2000, || format!("{name} ran {} steps", losses.len()))?;
        let first = losses[..100].iter().sum::<f64>() / 100.0;
        let last = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        let bb = Backbone::load(&summary.final_checkpoint).map_err(|e| e.to_string())?;
        let j = mean_region_similarity(&bb, &videos, &pcfg).map_err(|e| e.to_string())?;
        results.push((first, last, j));
    }
    let (first, last, j_full) = results[0];
    let j_intra = results[1].2;
    let ratio = last / first;
    let detail = format!(
        "(a) L_self last/first {last:.4}/{first:.4} = {ratio:.3} (need <= 0.60); (b) J full {j_full:.4}, random {j_random:.4}, intra {j_intra:.4} (need margins 0.15 and 0.02)"
    );
    check(ratio <= 0.6 && j_full >= j_random + 0.15 && j_full >= j_intra + 0.02, || detail.clone())?;
    Ok(detail)
}

fn negative_count() -> Outcome {
    let map = FeatureMap::new(32, 32, Array2::zeros((1, 32 * 32))).unwrap();
    let refs = BatchFeatures::new(vec![map.clone(); 16], 3).map_err(|e| e.to_string())?;
    let tgts = BatchFeatures::new(vec![map; 16], 3).map_err(|e| e.to_string())?;
    let count = refs.negative_count() + tgts.negative_count();
    let expected = 15 * (32 * 32 * 2);
    check(count == expected, || format!("{count} != {expected}"))?;
    Ok(format!("{count} negatives from block offsets {:?}..", &refs.offsets()[..3]))
}

fn metric_suite() -> Outcome {
    use ndarray::array;
    let m = |v: Array2<u8>| v.mapv(|x| x == 1);
    let a = m(array![[1, 1], [0, 0]]);
    let b = m(array![[0, 1], [0, 1]]);
    check(jaccard(&a, &a).unwrap() == 1.0, || "J identical".into())?;
    check(jaccard(&a, &m(array![[0, 0], [1, 1]])).unwrap() == 0.0, || "J disjoint".into())?;
    check(jaccard(&a, &b).unwrap() == 1.0 / 3.0, || "J 1/3".into())?;

    let mut sq1 = Array2::from_elem((12, 12), false);
    sq1.slice_mut(s![4..6, 4..6]).fill(true);
    let mut sq2 = Array2::from_elem((12, 12), false);
    sq2.slice_mut(s![4..6, 5..7]).fill(true);
    let mut far = Array2::from_elem((12, 12), false);
    far.slice_mut(s![9..11, 0..2]).fill(true);
    check(boundary_f(&sq1, &sq1, 1.0).unwrap() == 1.0, || "F identical".into())?;
    check(boundary_f(&sq1, &far, 1.0).unwrap() == 0.0, || "F far".into())?;
    check(boundary_f(&sq1, &sq2, 1.0).unwrap() == 1.0, || "F offset squares".into())?;
    check(default_radius(480, 854) == 8.0, || "default radius".into())?;

    let gt: Vec<(f64, f64)> = (0..15).map(|i| (i as f64 * 10.0, 5.0)).collect();
    check(pck(&gt, &gt, 0.1, 100.0).unwrap() == 1.0, || "PCK zero error".into())?;
    let far_pts: Vec<(f64, f64)> = gt.iter().map(|p| (p.0 + 50.0, p.1)).collect();
    check(pck(&far_pts, &gt, 0.1, 100.0).unwrap() == 0.0, || "PCK far".into())?;
    let three: Vec<(f64, f64)> = gt.iter().enumerate().map(|(i, p)| (p.0 + if i < 3 { 5.0 } else { 50.0 }, p.1)).collect();
    check(pck(&three, &gt, 0.1, 100.0).unwrap() == 0.2, || "PCK 3 of 15".into())?;

    let g = array![[1u8, 1, 1], [1, 1, 0], [0, 1, 0]];
    let p = array![[1u8, 1, 1], [1, 0, 1], [1, 0, 0]];
    check(miou(&g, &g, 2).unwrap() == 1.0, || "mIoU identical".into())?;
    check(miou(&g, &g.mapv(|v| 1 - v), 2).unwrap() == 0.0, || "mIoU disagreeing".into())?;
    let v = miou(&p, &g, 2).unwrap();
    check((v - 0.35).abs() < 1e-15, || format!("mIoU worked case {v}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let gt: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
        let pred: Vec<(f64, f64)> = gt.iter().map(|p| (p.0 + rng.gen_range(-20.0..20.0), p.1 + rng.gen_range(-20.0..20.0))).collect();
        let mut prev = 0.0;
        for i in 0..=20 {
            let v = pck(&pred, &gt, i as f64 * 0.05, 100.0).unwrap();
            check(v >= prev, || format!("PCK decreased at alpha {}", i as f64 * 0.05))?;
            prev = v;
        }
    }
    Ok("all worked examples exact, PCK monotone over 200 sweeps".into())
}

fn pipeline_run(root: &Path) -> Result<String, String> {
    let spec = SyntheticSpec { video_count: 3, frames_per_video: 6, width: 32, height: 32, seed: 8, min_radius: 5.0, max_radius: 7.0, ..SyntheticSpec::default() };
    generate_synthetic(&spec, &root.join("data")).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        dataset: root.join("data"),
        output: root.join("run"),
        batch_size: 2,
        patch_size: 16,
        total_epochs: 2,
        warmup_epochs: 1,
        steps_per_epoch: 3,
        workers: 1,
        seed: 8,
        ..TrainConfig::default()
    };
    let summary = run_training(&cfg, None).map_err(|e| e.to_string())?;
    let bb = Backbone::load(&summary.final_checkpoint).map_err(|e| e.to_string())?;
    let index = index_dataset(&root.join("data")).map_err(|e| e.to_string())?;
    let pcfg = PropagationConfig::default();
    propagate_dataset(&bb, &index, &pcfg, &root.join("pred"), None).map_err(|e| e.to_string())?;
    let report = evaluate_dataset(&root.join("pred"), &index, EvalTask::Vos, None).map_err(|e| e.to_string())?;
    Ok(report.to_json())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let ra = pipeline_run(a.path())?;
    let rb = pipeline_run(b.path())?;
    check(ra == rb, || "metric reports differ".into())?;
    Ok(format!("identical {}-byte reports", ra.len()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let criteria: [Criterion; 8] = [
        ("affinity algebra", affinity_algebra, 10.0),
        ("gradient check", gradient_check, 30.0),
        ("mutual correlation", mutual_suite, f64::INFINITY),
        ("propagation identity", propagation_identity, f64::INFINITY),
        ("desk-scale training", desk_training, 1800.0),
        ("negative count", negative_count, f64::INFINITY),
        ("metric suite", metric_suite, f64::INFINITY),
        ("determinism", determinism, f64::INFINITY),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("VCORR_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > *budget => Err(format!("{d}; took {secs:.1}s, budget {budget}s")),
            other => other,
        };
        match outcome {
            Ok(d) => println!("[PASS] {id} {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
