//! Synthetic scenes with known ground truth.
//!
//! A scene is a random camera looking at the base pool model, the key-points
//! it sees (fixed points inside the frame, floating points where lane-ropes
//! leave the frame through its left or right edge) and a heatmap volume that
//! encodes them with configurable corruption.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation_io::{rescale_annotation, write_annotation, write_text};
use crate::error::{Error, Result};
use crate::heatmap::{fit_annotation, nearest_cell, write_volume, AnnotatedPoint, FrameAnnotation, HeatmapVolume};
use crate::homography::{project, Homography};
use crate::pool_model::{canonical_channel_index, BaseLocation, BasePoolModel, KeyPointClass, NUM_KEYPOINTS};

/// Share of the frame the pool fills before zoom.
const FIT_FILL: f64 = 0.9;
const MAX_CAMERA_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// The whole pool inside the frame.
    Full,
    /// Zoomed in; at least one wall leaves the frame.
    Partial,
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(View::Full),
            "partial" => Ok(View::Partial),
            _ => Err(Error::validation("view", format!("`{s}` is not full or partial"))),
        }
    }
}

/// Ranges the camera is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraJitter {
    /// Roll, uniform in `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Keystone strength: 0 is a top-down view, towards 1 the far wall shrinks.
    pub perspective: (f64, f64),
    /// Zoom relative to the fitted pool.
    pub scale: (f64, f64),
    /// Offset of the frame centre, as a fraction of the half frame, times zoom.
    pub translation: f64,
}

impl CameraJitter {
    pub fn none() -> Self {
        Self { rotation_deg: 0.0, perspective: (0.0, 0.0), scale: (1.0, 1.0), translation: 0.0 }
    }

    pub fn full_view() -> Self {
        Self { rotation_deg: 4.0, perspective: (0.1, 0.5), scale: (0.85, 1.0), translation: 0.05 }
    }

    pub fn partial_view() -> Self {
        Self { rotation_deg: 6.0, perspective: (0.1, 0.6), scale: (1.6, 3.5), translation: 0.6 }
    }

    fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max {
                Ok(())
            } else {
                Err(Error::validation(name, format!("range ({lo}, {hi}) not inside [{min}, {max}]")))
            }
        };
        range("rotation_deg", (-self.rotation_deg, self.rotation_deg), -45.0, 45.0)?;
        range("perspective", self.perspective, 0.0, 0.95)?;
        range("scale", self.scale, 1e-3, 1e3)?;
        range("translation", (0.0, self.translation), 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub loc_sigma_px: f64,
    pub dropout_rate: f64,
    pub false_positive_rate: f64,
    /// Probability mass of a channel's peak cell, in `(0, 1]`.
    pub peak_mass: f64,
}

impl NoiseParams {
    /// Exact delta channels for visible key-points, flat elsewhere.
    pub fn none() -> Self {
        Self { loc_sigma_px: 0.0, dropout_rate: 0.0, false_positive_rate: 0.0, peak_mass: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loc_sigma_px >= 0.0 && self.loc_sigma_px.is_finite()) {
            return Err(Error::validation("loc_sigma_px", "must be >= 0"));
        }
        for (name, rate) in [("dropout_rate", self.dropout_rate), ("false_positive_rate", self.false_positive_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::validation(name, format!("{rate} outside [0, 1]")));
            }
        }
        if !(self.peak_mass > 0.0 && self.peak_mass <= 1.0) {
            return Err(Error::validation("peak_mass", format!("{} outside (0, 1]", self.peak_mass)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub frame_rows: usize,
    pub frame_cols: usize,
    pub view: View,
    pub jitter: CameraJitter,
    pub noise: NoiseParams,
    /// Volumes are built at the frame size divided by this factor.
    pub volume_downscale: f64,
    pub base_scale_px_per_m: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(frame_rows: usize, frame_cols: usize, view: View, seed: u64) -> Self {
        let jitter = match view {
            View::Full => CameraJitter::full_view(),
            View::Partial => CameraJitter::partial_view(),
        };
        Self {
            frame_rows,
            frame_cols,
            view,
            jitter,
            noise: NoiseParams::none(),
            volume_downscale: 1.0,
            base_scale_px_per_m: 20.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_rows < 2 || self.frame_cols < 2 {
            return Err(Error::validation("frame_rows/frame_cols", "frame must be at least 2x2"));
        }
        if !(self.volume_downscale >= 1.0 && self.volume_downscale.is_finite()) {
            return Err(Error::validation("volume_downscale", "must be >= 1"));
        }
        if !(self.base_scale_px_per_m > 0.0 && self.base_scale_px_per_m.is_finite()) {
            return Err(Error::validation("base_scale_px_per_m", "must be positive"));
        }
        self.jitter.validate()?;
        self.noise.validate()
    }

    pub fn volume_rows(&self) -> usize {
        (self.frame_rows as f64 / self.volume_downscale).round() as usize
    }

    pub fn volume_cols(&self) -> usize {
        (self.frame_cols as f64 / self.volume_downscale).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Frame pixels to base pixels.
    pub homography_gt: Homography,
    /// Key-points at frame resolution.
    pub frame_annotation: FrameAnnotation,
    /// Key-points at volume resolution.
    pub annotation: FrameAnnotation,
    pub volume: HeatmapVolume,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Last pixel column/row; emitted points stay inside `[0, cols-1] x [0, rows-1]`.
fn frame_extent(rows: usize, cols: usize) -> (f64, f64) {
    ((cols - 1) as f64, (rows - 1) as f64)
}

fn inside(p: (f64, f64), extent: (f64, f64)) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= extent.0 && p.1 <= extent.1
}

fn pool_corners(model: &BasePoolModel) -> [(f64, f64); 4] {
    let (w, h) = (model.config().span_m(), model.config().width_m());
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Draws a base-meters to frame-pixels map for `params.view`.
pub fn sample_camera(model: &BasePoolModel, params: &SynthParams, rng: &mut impl Rng) -> Result<Homography> {
    params.validate()?;
    for _ in 0..MAX_CAMERA_ATTEMPTS {
        let h = draw_camera(model, params, rng)?;
        if camera_acceptable(model, params, &h) {
            return Ok(h);
        }
    }
    Err(Error::Sampling { attempts: MAX_CAMERA_ATTEMPTS })
}

fn draw_camera(model: &BasePoolModel, params: &SynthParams, rng: &mut impl Rng) -> Result<Homography> {
    let (rows, cols) = (params.frame_rows as f64, params.frame_cols as f64);
    let (span, width) = (model.config().span_m(), model.config().width_m());
    let j = &params.jitter;

    let roll = uniform(rng, (-j.rotation_deg, j.rotation_deg)).to_radians();
    let keystone = uniform(rng, j.perspective);
    let zoom = uniform(rng, j.scale);
    let tx = uniform(rng, (-j.translation, j.translation)) * zoom * cols / 2.0;
    let ty = uniform(rng, (-j.translation, j.translation)) * zoom * rows / 2.0;

    // Pool centre to the origin, image rows growing towards the bottom wall.
    let fit = FIT_FILL * (cols / span).min(rows / width);
    let centre = Matrix3::new(fit, 0.0, -fit * span / 2.0, 0.0, -fit, fit * width / 2.0, 0.0, 0.0, 1.0);
    // Rows above the centre (far side) shrink.
    let tilt = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -keystone / (rows / 2.0), 1.0);
    let (s, c) = roll.sin_cos();
    let rotate = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let place = Matrix3::new(zoom, 0.0, cols / 2.0 - tx, 0.0, zoom, rows / 2.0 - ty, 0.0, 0.0, 1.0);
    Homography::from_matrix(&(place * rotate * tilt * centre))
}

fn camera_acceptable(model: &BasePoolModel, params: &SynthParams, h: &Homography) -> bool {
    let extent = frame_extent(params.frame_rows, params.frame_cols);
    let m = h.row_major();
    // the whole pool in front of the camera
    let in_front = pool_corners(model).iter().all(|&(x, y)| m[6] * x + m[7] * y + m[8] > 1e-3 * m[8].abs());
    if !in_front {
        return false;
    }
    let Ok(corners) = pool_corners(model).map(|p| project(h, p)).into_iter().collect::<Result<Vec<_>>>() else {
        return false;
    };
    let visible: Vec<usize> = (0..4).filter(|&i| inside(corners[i], extent)).collect();
    let view_ok = match params.view {
        View::Full => visible.len() == 4,
        // a wall is clipped when one of its end corners is outside
        View::Partial => visible.len() < 4,
    };
    view_ok && has_general_position_points(model, h, extent)
}

/// True when the visible fixed key-points include two on each of two
/// different pool lines, none of them shared, i.e. four points in general
/// position.
fn has_general_position_points(model: &BasePoolModel, h: &Homography, extent: (f64, f64)) -> bool {
    let c = model.config();
    let mut lines: Vec<Box<dyn Fn(f64, f64) -> bool>> = vec![
        Box::new(|x, _| x == 0.0),
        Box::new(move |x, _| x == c.span_m()),
        Box::new(|_, y| y == 0.0),
        Box::new(move |_, y| y == c.width_m()),
    ];
    if let Some(b) = c.bulkhead_position_m() {
        lines.push(Box::new(move |x, _| x == b));
    }
    let visible: Vec<(f64, f64)> = model
        .existing()
        .filter_map(|e| match e.location {
            Some(BaseLocation::FixedPoint { x_m, y_m }) => Some((x_m, y_m)),
            _ => None,
        })
        .filter(|&p| project(h, p).is_ok_and(|q| inside(q, extent)))
        .collect();
    for a in 0..lines.len() {
        for b in a + 1..lines.len() {
            let only = |on: &dyn Fn(f64, f64) -> bool, off: &dyn Fn(f64, f64) -> bool| {
                let mut pts: Vec<_> = visible.iter().filter(|p| on(p.0, p.1) && !off(p.0, p.1)).collect();
                pts.dedup();
                pts.len()
            };
            if only(&*lines[a], &*lines[b]) >= 2 && only(&*lines[b], &*lines[a]) >= 2 {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

/// Segment parameter and the frame edge crossed there.
type Crossing = (f64, Option<Edge>);

/// Liang-Barsky clip of `p0 -> p1` to `[0, umax] x [0, vmax]`: entry and exit
/// parameters with the edge crossed there (`None` when the endpoint is inside).
fn clip_segment(
    p0: (f64, f64),
    p1: (f64, f64),
    (umax, vmax): (f64, f64),
) -> Option<(Crossing, Crossing)> {
    let (du, dv) = (p1.0 - p0.0, p1.1 - p0.1);
    let (mut t0, mut t1) = (0.0, 1.0);
    let (mut e0, mut e1) = (None, None);
    for (p, q, edge) in [
        (-du, p0.0, Edge::Left),
        (du, umax - p0.0, Edge::Right),
        (-dv, p0.1, Edge::Top),
        (dv, vmax - p0.1, Edge::Bottom),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            if r > t1 {
                return None;
            }
            if r > t0 {
                t0 = r;
                e0 = Some(edge);
            }
        } else {
            if r < t0 {
                return None;
            }
            if r < t1 {
                t1 = r;
                e1 = Some(edge);
            }
        }
    }
    Some(((t0, e0), (t1, e1)))
}

/// Key-points visible under the base-meters to frame map `h`.
pub fn project_scene(model: &BasePoolModel, h: &Homography, rows: usize, cols: usize, frame_id: &str) -> Result<FrameAnnotation> {
    if rows < 2 || cols < 2 {
        return Err(Error::validation("rows/cols", "frame must be at least 2x2"));
    }
    h.inverse()?;
    let extent = frame_extent(rows, cols);
    let span = model.config().span_m();
    let mut points = Vec::new();

    for entry in model.existing() {
        match entry.location.unwrap() {
            BaseLocation::FixedPoint { x_m, y_m } => {
                if let Ok(p) = project(h, (x_m, y_m)) {
                    if inside(p, extent) {
                        points.push(AnnotatedPoint { id: entry.id, u: p.0, v: p.1 });
                    }
                }
            }
            BaseLocation::HorizontalLine { y_m } => {
                let p0 = project(h, (0.0, y_m))?;
                let p1 = project(h, (span, y_m))?;
                let Some(((t0, e0), (t1, e1))) = clip_segment(p0, p1, extent) else {
                    continue;
                };
                let (t, edge) = match entry.id.class() {
                    KeyPointClass::FloatingLeft => (t0, e0),
                    _ => (t1, e1),
                };
                let u = match edge {
                    Some(Edge::Left) => 0.0,
                    Some(Edge::Right) => extent.0,
                    _ => continue,
                };
                let v = (p0.1 + t * (p1.1 - p0.1)).clamp(0.0, extent.1);
                points.push(AnnotatedPoint { id: entry.id, u, v });
            }
        }
    }
    points.sort_by_key(|p| canonical_channel_index(p.id));
    FrameAnnotation::new(frame_id, rows, cols, points)
}

fn peak_channel(channel: &mut [f64], cell: usize, peak_mass: f64) {
    let cells = channel.len();
    if cells == 1 {
        channel[0] = 1.0;
        return;
    }
    channel.fill((1.0 - peak_mass) / (cells - 1) as f64);
    channel[cell] = peak_mass;
}

/// Heatmap volume for `ann` with detector-like corruption.
pub fn synthesize_volume(
    ann: &FrameAnnotation,
    rows: usize,
    cols: usize,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<HeatmapVolume> {
    noise.validate()?;
    let ann = fit_annotation(ann, rows, cols)?;
    let mut truth = [None; NUM_KEYPOINTS];
    for p in &ann.points {
        truth[canonical_channel_index(p.id)] = Some((p.u, p.v));
    }
    let jitter = Normal::new(0.0, noise.loc_sigma_px).map_err(|e| Error::validation("loc_sigma_px", e.to_string()))?;

    let mut volume = HeatmapVolume::flat(rows, cols, NUM_KEYPOINTS)?;
    let cells = rows * cols;
    let data = volume.data_mut();
    for (k, at) in truth.iter().enumerate() {
        let channel = &mut data[k * cells..(k + 1) * cells];
        match at {
            Some((u, v)) => {
                if rng.random::<f64>() < noise.dropout_rate {
                    continue;
                }
                let (du, dv) = if noise.loc_sigma_px > 0.0 {
                    (jitter.sample(rng), jitter.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                let (r, c) = nearest_cell(u + du, v + dv, rows, cols);
                peak_channel(channel, r * cols + c, noise.peak_mass);
            }
            None => {
                if rng.random::<f64>() < noise.false_positive_rate {
                    let cell = rng.random_range(0..cells);
                    peak_channel(channel, cell, noise.peak_mass);
                }
            }
        }
    }
    Ok(volume)
}

/// Sub-seed of scene `index` (splitmix64 of the pair).
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frame-pixels to base-pixels ground truth for a base-meters to frame camera.
pub fn frame_to_base(camera: &Homography, base_scale_px_per_m: f64) -> Result<Homography> {
    let scale = Matrix3::new(base_scale_px_per_m, 0.0, 0.0, 0.0, base_scale_px_per_m, 0.0, 0.0, 0.0, 1.0);
    Homography::from_matrix(&(scale * camera.inverse()?.matrix()))
}

/// Camera and frame-resolution key-points of one scene, without a volume.
pub fn generate_geometry(model: &BasePoolModel, params: &SynthParams, seed: u64, frame_id: &str) -> Result<(Homography, FrameAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = sample_camera(model, params, &mut rng)?;
    let ann = project_scene(model, &camera, params.frame_rows, params.frame_cols, frame_id)?;
    Ok((camera, ann))
}

pub fn generate_scene(model: &BasePoolModel, params: &SynthParams, seed: u64, frame_id: &str) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = sample_camera(model, params, &mut rng)?;
    let frame_annotation = project_scene(model, &camera, params.frame_rows, params.frame_cols, frame_id)?;
    let annotation = if params.volume_downscale == 1.0 {
        frame_annotation.clone()
    } else {
        let mut a = rescale_annotation(&frame_annotation, params.volume_downscale)?;
        (a.rows, a.cols) = (params.volume_rows(), params.volume_cols());
        a.validate()?;
        a
    };
    let volume = synthesize_volume(&annotation, annotation.rows, annotation.cols, &params.noise, &mut rng)?;
    Ok(SynthScene { homography_gt: frame_to_base(&camera, params.base_scale_px_per_m)?, frame_annotation, annotation, volume })
}

/// Ground-truth homography file written next to each scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHomography {
    pub frame_id: String,
    /// Frame pixels to base pixels, row-major.
    pub h: [f64; 9],
    pub frame_rows: usize,
    pub frame_cols: usize,
    pub base_scale_px_per_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub seed: u64,
    pub annotation_path: String,
    pub volume_path: String,
    pub homography_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: SynthParams,
    pub pool: crate::pool_model::PoolConfig,
    pub scenes: Vec<ManifestScene>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Writes `count` scenes under `out_dir` (annotations/, volumes/,
/// homographies/) plus `manifest.json`.
pub fn generate_dataset(model: &BasePoolModel, count: usize, params: &SynthParams, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    params.validate()?;
    let out = out_dir.as_ref();
    for sub in ["annotations", "volumes", "homographies"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let scenes = (0..count)
        .into_par_iter()
        .map(|index| {
            let id = scene_id(index);
            let seed = scene_seed(params.seed, index as u64);
            let scene = generate_scene(model, params, seed, &id)?;
            let entry = ManifestScene {
                annotation_path: format!("annotations/{id}.json"),
                volume_path: format!("volumes/{id}.pkhv"),
                homography_path: format!("homographies/{id}.json"),
                id: id.clone(),
                seed,
            };
            write_annotation(&scene.annotation, out.join(&entry.annotation_path))?;
            write_volume(&scene.volume, out.join(&entry.volume_path))?;
            let gt = GroundTruthHomography {
                frame_id: id,
                h: scene.homography_gt.row_major(),
                frame_rows: params.frame_rows,
                frame_cols: params.frame_cols,
                base_scale_px_per_m: params.base_scale_px_per_m,
            };
            write_text(&out.join(&entry.homography_path), &serde_json::to_string_pretty(&gt).unwrap())?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest { params: params.clone(), pool: model.config().clone(), scenes };
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(manifest)
}
