//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use poolkp::annotation_io::rescale_annotation;
use poolkp::heatmap::{
    channel_entropy, cross_entropy_loss, decode, make_target_volume, softmax_normalize, DecodeParams, DetectionSet,
    FrameAnnotation, HeatmapVolume,
};
use poolkp::homography::{
    corner_error, correspondences_from_detections, estimate_dlt, estimate_ransac, localize_frame, BaseTarget,
    Correspondence, RansacParams,
};
use poolkp::metrics::{evaluate, f1_from, EvalParams};
use poolkp::pool_model::{build_base_model, BasePoolModel, KeyPointClass, KeyPointId, PoolConfig, NUM_KEYPOINTS};
use poolkp::synth::{
    frame_to_base, generate_geometry, generate_scene, scene_seed, synthesize_volume, NoiseParams, SynthParams, View,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const BASE_SCALE: f64 = 20.0;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn all_configs() -> Vec<PoolConfig> {
    PoolConfig::all_standard()
}

fn model_for(i: usize) -> BasePoolModel {
    let configs = all_configs();
    build_base_model(configs[i % configs.len()].clone()).unwrap()
}

fn c1_channel_count() -> Outcome {
    let types = PoolConfig::standard_types();
    let mut bad = Vec::new();
    for config in all_configs() {
        let model = build_base_model(config.clone()).unwrap();
        let ann = FrameAnnotation::new("f", 8, 8, vec![]).unwrap();
        let target = make_target_volume(&ann, 8, 8).unwrap();
        let synth = synthesize_volume(&ann, 8, 8, &NoiseParams::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        if model.entries().len() != 96 || target.num_channels() != 96 || synth.num_channels() != 96 {
            bad.push(format!("{}x{}", config.lanes, config.length_m));
        }
    }
    outcome(types.len() == 9 && bad.is_empty(), format!("{} pool types, failures: {bad:?}", types.len()))
}

fn c2_table_f1() -> Outcome {
    let rows = [(0.7756, 0.8941, 0.8307), (0.7105, 0.7892, 0.7478), (0.8235, 0.8435, 0.8333)];
    let worst = rows.iter().map(|&(p, r, f)| (f1_from(p, r) - f).abs()).fold(0.0, f64::max);
    outcome(worst <= 5e-4, format!("max |f1 - printed| = {worst:.2e}"))
}

fn random_volume(rng: &mut impl Rng, channels: usize, rows: usize, cols: usize) -> HeatmapVolume {
    let raw: Vec<f64> = (0..channels)
        .flat_map(|_| {
            let temperature = 10f64.powf(rng.random_range(-1.0..1.5));
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * temperature).collect::<Vec<_>>()
        })
        .collect();
    softmax_normalize(&raw, rows, cols, channels).unwrap()
}

fn c3_entropy_gate() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (m, n) in [(2usize, 2usize), (4, 4), (288, 512)] {
        let flat = vec![1.0 / (m * n) as f64; m * n];
        let h = channel_entropy(&flat).unwrap();
        ok &= (h - ((m * n) as f64).ln()).abs() <= 1e-9;
        let mut delta = vec![0.0; m * n];
        delta[m * n / 2] = 1.0;
        ok &= channel_entropy(&delta).unwrap() == 0.0;
    }

    // channel 0 flat, channel 1 delta, on a 2x2 grid
    let mut data = vec![0.25; NUM_KEYPOINTS * 4];
    data[4..8].copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    let vol = HeatmapVolume::new(2, 2, NUM_KEYPOINTS, data).unwrap();
    let det = decode("g", &vol, DecodeParams::new(0.9).unwrap()).unwrap();
    let ids: Vec<_> = det.detections.iter().map(|d| d.id).collect();
    let gate_ok = ids == vec![KeyPointId::from_channel(1).unwrap()];
    ok &= gate_ok;
    notes.push(format!("2x2 flat {:.4} >= {:.4}", 4f64.ln(), 0.9 * 4f64.ln()));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let betas = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 1.0];
    let mut nested = 0;
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let vol = random_volume(&mut rng, NUM_KEYPOINTS, m, n);
        let sets: Vec<BTreeSet<_>> = betas
            .iter()
            .map(|&b| decode("r", &vol, DecodeParams::new(b).unwrap()).unwrap().detections.iter().map(|d| d.id).collect())
            .collect();
        if sets.windows(2).all(|w| w[0].is_subset(&w[1])) {
            nested += 1;
        }
    }
    ok &= nested == 200;
    notes.push(format!("nested on {nested}/200 volumes"));
    outcome(ok, notes.join("; "))
}

fn brute_force_loss(t: &HeatmapVolume, p: &HeatmapVolume) -> f64 {
    let mut total = 0.0;
    for c in 0..t.num_channels() {
        let (tc, pc) = (t.channel(c), p.channel(c));
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                let k = i * t.cols() + j;
                if tc[k] > 0.0 {
                    total += -tc[k] * pc[k].max(1e-12).ln();
                }
            }
        }
    }
    total
}

fn c4_loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut gibbs, mut self_loss) = (0.0f64, true, 0.0f64);
    for _ in 0..100 {
        let t = random_volume(&mut rng, 3, 4, 4);
        let p = random_volume(&mut rng, 3, 4, 4);
        let loss = cross_entropy_loss(&t, &p).unwrap();
        worst = worst.max((loss - brute_force_loss(&t, &p)).abs());
        let h: f64 = t.channels().map(|c| channel_entropy(c).unwrap()).sum();
        gibbs &= loss >= h - 1e-9;

        let mut delta = vec![0.0; 48];
        for c in 0..3 {
            delta[c * 16 + rng.random_range(0..16)] = 1.0;
        }
        let d = HeatmapVolume::new(4, 4, 3, delta).unwrap();
        self_loss = self_loss.max(cross_entropy_loss(&d, &d).unwrap());
        gibbs &= cross_entropy_loss(&d, &p).unwrap() >= -1e-9;
    }
    outcome(
        worst <= 1e-9 && self_loss <= 1e-9 && gibbs,
        format!("max |loss - oracle| = {worst:.2e}, max loss(t,t) = {self_loss:.1e}, gibbs holds: {gibbs}"),
    )
}

fn c5_resolution() -> Outcome {
    let ann = FrameAnnotation::new("f", 1080, 1920, vec![]).unwrap();
    let small = rescale_annotation(&ann, 3.75).unwrap();
    let mut params = SynthParams::new(1080, 1920, View::Full, 0);
    params.volume_downscale = 3.75;
    let dims = [(small.rows, small.cols), (params.volume_rows(), params.volume_cols())];
    outcome(dims.iter().all(|&d| d == (288, 512)), format!("{dims:?}"))
}

fn mixed_correspondences(i: usize) -> Option<(BasePoolModel, Vec<Correspondence>, poolkp::homography::Homography)> {
    let model = model_for(i);
    let params = SynthParams::new(1080, 1920, View::Partial, i as u64);
    let (camera, ann) = generate_geometry(&model, &params, scene_seed(6, i as u64), "s").ok()?;
    let corrs = correspondences_from_detections(&DetectionSet::from_annotation(&ann), &model, BASE_SCALE).unwrap();
    let lines = corrs.iter().filter(|c| matches!(c.base, BaseTarget::HorizontalLine { .. })).count();
    (lines > 0 && lines < corrs.len()).then(|| (model, corrs, frame_to_base(&camera, BASE_SCALE).unwrap()))
}

fn c6_homography() -> Outcome {
    // the first 1000 partial-view scenes that carry both constraint kinds
    let scenes: Vec<_> = (0..1500).into_par_iter().filter_map(mixed_correspondences).collect();
    let scenes = &scenes[..scenes.len().min(1000)];
    let worst = scenes
        .par_iter()
        .map(|(_, corrs, truth)| match estimate_dlt(corrs) {
            Ok(h) => corner_error(&h, truth, 1080, 1920).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        })
        .reduce(|| 0.0, f64::max);

    let threshold = 3.0;
    let recovered: usize = (0..100)
        .into_par_iter()
        .map(|trial| {
            let (model, inliers, truth) = &scenes[trial];
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
            let n_out = (0.3 * inliers.len() as f64 / 0.7).round() as usize;
            let targets: Vec<_> = model.existing().collect();
            let mut corrs = inliers.clone();
            while corrs.len() < inliers.len() + n_out {
                let entry = targets[rng.random_range(0..targets.len())];
                let image = (rng.random_range(0.0..1919.0), rng.random_range(0.0..1079.0));
                let base = match entry.location.unwrap() {
                    poolkp::pool_model::BaseLocation::FixedPoint { x_m, y_m } => BaseTarget::Point { x: x_m * BASE_SCALE, y: y_m * BASE_SCALE },
                    poolkp::pool_model::BaseLocation::HorizontalLine { y_m } => BaseTarget::HorizontalLine { y: y_m * BASE_SCALE },
                };
                let c = Correspondence::new(entry.id, image, base).unwrap();
                if c.residual(truth) > 10.0 * threshold {
                    corrs.push(c);
                }
            }
            let expected: Vec<bool> = (0..corrs.len()).map(|k| k < inliers.len()).collect();
            let params = RansacParams { iterations: 1000, inlier_threshold_px: threshold, seed: trial as u64 };
            match estimate_ransac(&corrs, &params) {
                Ok(out) => usize::from(out.inliers == expected),
                Err(_) => 0,
            }
        })
        .sum();
    outcome(
        scenes.len() == 1000 && worst < 1e-6 && recovered >= 99,
        format!("{} mixed scenes, max corner error {worst:.2e} px; RANSAC recovered {recovered}/100", scenes.len()),
    )
}

fn c7_end_to_end() -> Outcome {
    let results: Vec<_> = (0..100usize)
        .into_par_iter()
        .map(|i| {
            let model = model_for(i);
            let view = if i % 2 == 0 { View::Full } else { View::Partial };
            let mut params = SynthParams::new(1080, 1920, view, 7);
            params.volume_downscale = 3.75;
            let id = format!("scene_{i:03}");
            let scene = generate_scene(&model, &params, scene_seed(7, i as u64), &id).unwrap();
            let det = decode(&id, &scene.volume, DecodeParams::new(0.9).unwrap()).unwrap();

            let ransac = RansacParams::default();
            let exact = localize_frame(&DetectionSet::from_annotation(&scene.frame_annotation), &model, BASE_SCALE, &ransac)
                .and_then(|loc| corner_error(&loc.homography, &scene.homography_gt, 1080, 1920))
                .unwrap_or(f64::INFINITY);
            let decoded = poolkp::annotation_io::rescale_detections(&det, 1.0 / 3.75)
                .and_then(|d| localize_frame(&d, &model, BASE_SCALE, &ransac))
                .and_then(|loc| corner_error(&loc.homography, &scene.homography_gt, 1080, 1920))
                .unwrap_or(f64::INFINITY);
            ((det, scene.annotation), exact, decoded)
        })
        .collect();
    let exact = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let mut decoded: Vec<f64> = results.iter().map(|r| r.2).collect();
    decoded.sort_by(f64::total_cmp);
    let pairs: Vec<_> = results.into_iter().map(|r| r.0).collect();
    let report = evaluate(&pairs, &EvalParams::new(5.0, 0.9).unwrap()).unwrap();
    outcome(
        report.mean_f1 == 1.0 && exact < 1e-6,
        format!(
            "mean F1 {:.6}; corner error from scene key-points {exact:.2e} px; from decoded 288x512 key-points median {:.2} px (grid-quantized)",
            report.mean_f1,
            decoded[50]
        ),
    )
}

fn degraded_f1() -> (f64, f64) {
    let pairs: Vec<_> = (0..100usize)
        .into_par_iter()
        .map(|i| {
            let model = model_for(i);
            let mut params = SynthParams::new(288, 512, View::Partial, 8);
            params.noise.loc_sigma_px = 2.0;
            let id = format!("scene_{i:03}");
            let scene = generate_scene(&model, &params, scene_seed(8, i as u64), &id).unwrap();
            (decode(&id, &scene.volume, DecodeParams::new(0.9).unwrap()).unwrap(), scene.annotation)
        })
        .collect();
    let f1 = |tolerance| evaluate(&pairs, &EvalParams::new(tolerance, 0.9).unwrap()).unwrap().mean_f1;
    (f1(5.0), f1(2.0))
}

fn c8_degradation() -> Outcome {
    let (loose, tight) = degraded_f1();
    let repeat = degraded_f1();
    outcome(
        loose > tight && repeat == (loose, tight),
        format!("mean F1 {loose:.4} at 5 px vs {tight:.4} at 2 px; rerun identical: {}", repeat == (loose, tight)),
    )
}

fn existing(model: &BasePoolModel) -> BTreeSet<KeyPointId> {
    model.existing().map(|e| e.id).collect()
}

fn c9_pool_rules() -> Outcome {
    let mut bad = Vec::new();
    for (lanes, length) in PoolConfig::standard_types() {
        let bulkhead = lanes > 10;
        let with = build_base_model(PoolConfig::new(lanes, length, true, bulkhead)).unwrap();
        let without = build_base_model(PoolConfig::new(lanes, length, false, bulkhead)).unwrap();
        let flipped: BTreeSet<_> = existing(&with).symmetric_difference(&existing(&without)).copied().collect();
        let per_section = if bulkhead { lanes / 2 } else { lanes } as u8;
        let expected: BTreeSet<_> = KeyPointClass::ALL
            .iter()
            .filter(|c| c.is_lane_indexed())
            .filter(|c| bulkhead || !matches!(c, KeyPointClass::BulkheadLeft | KeyPointClass::BulkheadRight))
            .flat_map(|&c| [1, per_section + 1].map(|i| KeyPointId::new(c, i).unwrap()))
            .collect();
        if flipped != expected {
            bad.push(format!("{lanes}x{length} bumpers"));
        }
        for model in [&with, &without] {
            let t4 = [KeyPointClass::WallTop, KeyPointClass::WallBottom]
                .map(|c| model.location(KeyPointId::new(c, 4).unwrap()).is_some());
            // the mark at 25 m lies inside the span only on 50 m pools
            if t4 != [!bulkhead && length == 50; 2] {
                bad.push(format!("{lanes}x{length} T4"));
            }
        }
    }
    outcome(bad.is_empty(), format!("{} pool types checked, failures: {bad:?}", PoolConfig::standard_types().len()))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("channel count", Duration::from_secs(1), c1_channel_count),
        ("reference F1 consistency", Duration::from_secs(1), c2_table_f1),
        ("entropy gate", Duration::from_secs(10), c3_entropy_gate),
        ("loss oracle", Duration::from_secs(5), c4_loss_oracle),
        ("resolution contract", Duration::from_secs(1), c5_resolution),
        ("homography recovery", Duration::from_secs(60), c6_homography),
        ("end-to-end identity", Duration::from_secs(60), c7_end_to_end),
        ("graceful degradation", Duration::from_secs(60), c8_degradation),
        ("pool-model rules", Duration::from_secs(1), c9_pool_rules),
    ];
    let mut failed = 0;
    for (n, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let ok = out.ok && elapsed <= *budget;
        failed += usize::from(!ok);
        println!(
            "{} {}. {name}: {} ({:.2} s, budget {} s)",
            if ok { "PASS" } else { "FAIL" },
            n + 1,
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
