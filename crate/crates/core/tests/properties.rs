use approx::assert_relative_eq;
use nalgebra::Matrix3;
use poolkp::annotation_io::{parse_cvat, rescale_annotation, serialize_cvat};
use poolkp::heatmap::{
    channel_entropy, cross_entropy_loss, decode, decode_volume, encode_volume, softmax_normalize, AnnotatedPoint,
    DecodeParams, Detection, DetectionSet, FrameAnnotation, HeatmapVolume,
};
use poolkp::homography::{estimate_dlt, project, BaseTarget, Correspondence, Homography};
use poolkp::metrics::{evaluate, f1_from, match_frame, EvalParams};
use poolkp::pool_model::{build_base_model, BasePoolModel, KeyPointId, PoolConfig, NUM_KEYPOINTS};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn volume(channels: usize) -> impl Strategy<Value = HeatmapVolume> {
    (1usize..5, 1usize..5, -1.0f64..2.0).prop_flat_map(move |(m, n, log_t)| {
        prop::collection::vec(-1.0f64..1.0, channels * m * n).prop_map(move |raw| {
            let t = 10f64.powf(log_t);
            let raw: Vec<f64> = raw.iter().map(|x| x * t).collect();
            softmax_normalize(&raw, m, n, channels).unwrap()
        })
    })
}

fn annotation(frame_id: &'static str, rows: usize, cols: usize) -> impl Strategy<Value = FrameAnnotation> {
    subsequence((0..NUM_KEYPOINTS).collect::<Vec<_>>(), 0..20).prop_flat_map(move |channels| {
        let n = channels.len();
        prop::collection::vec((0.0..cols as f64, 0.0..rows as f64), n).prop_map(move |uv| {
            let points = channels
                .iter()
                .zip(uv)
                .map(|(&k, (u, v))| AnnotatedPoint { id: KeyPointId::from_channel(k).unwrap(), u, v })
                .collect();
            FrameAnnotation::new(frame_id, rows, cols, points).unwrap()
        })
    })
}

/// Ground truth plus detections scattered around it, some spurious.
fn frame_pair(frame_id: &'static str) -> impl Strategy<Value = (DetectionSet, FrameAnnotation)> {
    (annotation(frame_id, 100, 100), prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0, any::<bool>()), 96))
        .prop_map(move |(gt, jitter)| {
            let mut detections = Vec::new();
            for (k, (du, dv, keep)) in jitter.into_iter().enumerate() {
                let id = KeyPointId::from_channel(k).unwrap();
                let at = gt.point(id).map(|p| (p.u, p.v)).unwrap_or((50.0, 50.0));
                if keep {
                    let u = (at.0 + du).clamp(0.0, 99.0);
                    let v = (at.1 + dv).clamp(0.0, 99.0);
                    detections.push(Detection { id, u, v, entropy: 0.0 });
                }
            }
            (DetectionSet { frame_id: frame_id.into(), rows: 100, cols: 100, detections }, gt)
        })
}

fn homography() -> impl Strategy<Value = Homography> {
    (
        0.5f64..2.0,
        -0.3f64..0.3,
        -0.3f64..0.3,
        0.5f64..2.0,
        -50.0f64..50.0,
        -50.0f64..50.0,
        -1e-3f64..1e-3,
        -1e-3f64..1e-3,
    )
        .prop_map(|(a, b, c, d, tx, ty, g, h)| Homography::from_row_major([a, b, tx, c, d, ty, g, h, 1.0]).unwrap())
}

fn ids(det: &DetectionSet) -> Vec<KeyPointId> {
    det.detections.iter().map(|d| d.id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_sets_grow_with_beta(vol in volume(NUM_KEYPOINTS), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = decode("f", &vol, DecodeParams::new(lo).unwrap()).unwrap();
        let large = decode("f", &vol, DecodeParams::new(hi).unwrap()).unwrap();
        let large_ids = ids(&large);
        prop_assert!(ids(&small).iter().all(|id| large_ids.contains(id)));
    }

    #[test]
    fn cross_entropy_bounded_by_entropy((t, p) in (1usize..4).prop_flat_map(|c| (volume(c), volume(c)))
        .prop_filter("same grid", |(t, p)| t.rows() == p.rows() && t.cols() == p.cols())) {
        let h: f64 = t.channels().map(|c| channel_entropy(c).unwrap()).sum();
        prop_assert!(cross_entropy_loss(&t, &p).unwrap() >= h - 1e-9);
        prop_assert!((cross_entropy_loss(&t, &t).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn softmax_ignores_channel_offsets(raw in prop::collection::vec(-20.0f64..20.0, 2 * 6), shift in prop::collection::vec(-500.0f64..500.0, 2)) {
        let shifted: Vec<f64> = raw.iter().enumerate().map(|(i, x)| x + shift[i / 6]).collect();
        let a = softmax_normalize(&raw, 2, 3, 2).unwrap();
        let b = softmax_normalize(&shifted, 2, 3, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_from(p, r);
        if p + r == 0.0 {
            prop_assert_eq!(f, 0.0);
        } else {
            prop_assert!(f >= p.min(r) - 1e-15 && f <= p.max(r) + 1e-15);
            prop_assert!(f <= (p + r) / 2.0 + 1e-15);
        }
    }

    #[test]
    fn more_tolerance_never_hurts((det, gt) in frame_pair("f"), a in 0.0f64..12.0, b in 0.0f64..12.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let tight = match_frame(&det, &gt, &EvalParams::new(lo, 0.9).unwrap()).unwrap().counts;
        let loose = match_frame(&det, &gt, &EvalParams::new(hi, 0.9).unwrap()).unwrap().counts;
        prop_assert!(loose.true_pos >= tight.true_pos);
        prop_assert!(loose.false_pos <= tight.false_pos && loose.false_neg <= tight.false_neg);
    }

    #[test]
    fn frame_order_is_irrelevant(frames in (frame_pair("a"), frame_pair("b"), frame_pair("c")), rot in 0usize..3) {
        let mut pairs = vec![frames.0, frames.1, frames.2];
        let params = EvalParams::default();
        let reference = evaluate(&pairs, &params).unwrap();
        pairs.rotate_left(rot);
        pairs.swap(0, 1);
        prop_assert_eq!(evaluate(&pairs, &params).unwrap(), reference);
    }

    #[test]
    fn rescaling_composes(ann in annotation("f", 1080, 1920), f in 0.5f64..4.0, g in 0.5f64..4.0) {
        let twice = rescale_annotation(&rescale_annotation(&ann, f).unwrap(), g).unwrap();
        let once = rescale_annotation(&ann, f * g).unwrap();
        for (x, y) in twice.points.iter().zip(&once.points) {
            prop_assert_eq!(x.id, y.id);
            prop_assert!((x.u - y.u).abs() < 1e-9 && (x.v - y.v).abs() < 1e-9);
        }
    }

    #[test]
    fn cvat_round_trip(a in annotation("frame_a", 288, 512), b in annotation("frame_b", 1080, 1920)) {
        let frames = vec![a, b];
        prop_assert_eq!(parse_cvat(&serialize_cvat(&frames)).unwrap(), frames);
    }

    #[test]
    fn volume_file_round_trip(vol in volume(3)) {
        let back = decode_volume(&encode_volume(&vol)).unwrap();
        prop_assert_eq!((back.rows(), back.cols(), back.num_channels()), (vol.rows(), vol.cols(), vol.num_channels()));
        for (x, y) in vol.data().iter().zip(back.data()) {
            prop_assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
        }
    }

    #[test]
    fn inverse_undoes_projection(h in homography(), u in 0.0f64..1920.0, v in 0.0f64..1080.0) {
        let there = project(&h, (u, v)).unwrap();
        let back = project(&h.inverse().unwrap(), there).unwrap();
        prop_assert!((back.0 - u).abs() < 1e-6 && (back.1 - v).abs() < 1e-6);
    }

    #[test]
    fn dlt_follows_image_similarity(h in homography(), s in 0.3f64..3.0, theta in -3.1f64..3.1, tx in -300.0f64..300.0, ty in -300.0f64..300.0) {
        let model = build_base_model(PoolConfig::new(8, 50, true, false)).unwrap();
        let corrs = exact_correspondences(&model, &h);
        let (sn, cs) = theta.sin_cos();
        let sim = Homography::from_matrix(&Matrix3::new(s * cs, -s * sn, tx, s * sn, s * cs, ty, 0.0, 0.0, 1.0)).unwrap();
        let moved: Vec<_> = corrs
            .iter()
            .map(|c| Correspondence { image: project(&sim, c.image).unwrap(), ..*c })
            .collect();
        let est = estimate_dlt(&moved).unwrap();
        let expected = h.after(&sim.inverse().unwrap()).unwrap();
        prop_assert!(est.max_abs_diff(&expected) < 1e-8, "{:?} vs {:?}", est, expected);
    }
}

/// Frame -> base correspondences of every existing key-point for a base -> frame camera `h^-1`.
fn exact_correspondences(model: &BasePoolModel, frame_to_base: &Homography) -> Vec<Correspondence> {
    let base_to_frame = frame_to_base.inverse().unwrap();
    model
        .existing()
        .map(|e| {
            let loc = e.location.unwrap();
            let (x, y) = match loc {
                poolkp::pool_model::BaseLocation::FixedPoint { x_m, y_m } => (x_m * 20.0, y_m * 20.0),
                // any point along the rope
                poolkp::pool_model::BaseLocation::HorizontalLine { y_m } => (330.0, y_m * 20.0),
            };
            let image = project(&base_to_frame, (x, y)).unwrap();
            let base = if e.id.class().is_floating() { BaseTarget::HorizontalLine { y } } else { BaseTarget::Point { x, y } };
            Correspondence::new(e.id, image, base).unwrap()
        })
        .collect()
}

#[test]
fn model_json_round_trips_for_all_configs() {
    for config in PoolConfig::all_standard() {
        let model = build_base_model(config).unwrap();
        let back = BasePoolModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        assert_relative_eq!(back.config().width_m(), model.config().width_m());
    }
}
