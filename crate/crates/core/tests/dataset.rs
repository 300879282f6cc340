use std::fs;
use std::path::Path;

use poolkp::annotation_io::read_annotation;
use poolkp::heatmap::{decode, read_volume, DecodeParams};
use poolkp::metrics::{evaluate, EvalParams};
use poolkp::pool_model::{build_base_model, PoolConfig};
use poolkp::synth::{generate_dataset, GroundTruthHomography, Manifest, SynthParams, View};

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["", "annotations", "volumes", "homographies"] {
        let d = dir.join(sub);
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_file() {
                files.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn dataset_is_reproducible_and_consistent() {
    let model = build_base_model(PoolConfig::new(10, 50, true, false)).unwrap();
    let mut params = SynthParams::new(72, 128, View::Partial, 11);
    params.noise.loc_sigma_px = 0.7;
    params.noise.false_positive_rate = 0.05;

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&model, 6, &params, a.path()).unwrap();
    generate_dataset(&model, 6, &params, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let on_disk: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    assert_eq!(manifest.scenes.len(), 6);

    let mut pairs = Vec::new();
    for scene in &manifest.scenes {
        let ann = read_annotation(a.path().join(&scene.annotation_path)).unwrap();
        let vol = read_volume(a.path().join(&scene.volume_path)).unwrap();
        let gt: GroundTruthHomography =
            serde_json::from_str(&fs::read_to_string(a.path().join(&scene.homography_path)).unwrap()).unwrap();
        assert_eq!(ann.frame_id, scene.id);
        assert_eq!(gt.frame_id, scene.id);
        assert_eq!((vol.rows(), vol.cols(), vol.num_channels()), (72, 128, 96));
        pairs.push((decode(&scene.id, &vol, DecodeParams::new(0.9).unwrap()).unwrap(), ann));
    }
    let report = evaluate(&pairs, &EvalParams::default()).unwrap();
    assert!(report.mean_f1 > 0.8, "{}", report.mean_f1);
}

#[test]
fn different_seeds_differ() {
    let model = build_base_model(PoolConfig::new(6, 25, false, false)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&model, 2, &SynthParams::new(36, 64, View::Full, 1), a.path()).unwrap();
    generate_dataset(&model, 2, &SynthParams::new(36, 64, View::Full, 2), b.path()).unwrap();
    assert_ne!(tree(a.path()), tree(b.path()));
}

#[test]
fn invalid_params_write_nothing() {
    let model = build_base_model(PoolConfig::new(8, 50, true, false)).unwrap();
    let mut params = SynthParams::new(36, 64, View::Full, 1);
    params.noise.dropout_rate = -0.1;
    let dir = tempfile::tempdir().unwrap();
    let err = generate_dataset(&model, 2, &params, dir.path().join("out")).unwrap_err();
    assert_eq!(err.category(), "validation");
    assert!(!dir.path().join("out").exists());
}
