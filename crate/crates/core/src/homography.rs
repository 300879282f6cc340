//! Frame-to-base homography estimation from key-point correspondences.
//!
//! Fixed key-points give the usual two DLT rows per correspondence. A floating
//! key-point only pins the base ordinate, so it contributes the single row
//! `h21 u + h22 v + h23 = y (h31 u + h32 v + h33)`. Both point sets are
//! similarity-normalized before the null vector is extracted.

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::DetectionSet;
use crate::pool_model::{BaseLocation, BasePoolModel, KeyPointId};

const MIN_EQUATIONS: usize = 8;

/// Relative singular-value floor used for the rank test.
const RANK_TOLERANCE: f64 = 1e-8;

const MIN_DETERMINANT: f64 = 1e-12;
const MIN_DENOMINATOR: f64 = 1e-12;

/// A 3x3 projective map, stored row-major with unit Frobenius norm and a
/// positive last nonzero entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: [f64; 9],
}

impl Homography {
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let norm = m.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Singular);
        }
        let mut n = m / norm;
        if let Some(last) = n.transpose().iter().rev().find(|x| **x != 0.0) {
            if *last < 0.0 {
                n = -n;
            }
        }
        if !(n.determinant().abs() > MIN_DETERMINANT) {
            return Err(Error::Singular);
        }
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[3 * r + c] = n[(r, c)];
            }
        }
        Ok(Self { h })
    }

    pub fn from_row_major(h: [f64; 9]) -> Result<Self> {
        Self::from_matrix(&Matrix3::from_row_slice(&h))
    }

    pub fn identity() -> Self {
        Self::from_matrix(&Matrix3::identity()).unwrap()
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_matrix(&Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)).unwrap()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.h)
    }

    pub fn row_major(&self) -> [f64; 9] {
        self.h
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.matrix().try_inverse().ok_or(Error::Singular)?;
        Self::from_matrix(&inv)
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Result<Self> {
        Self::from_matrix(&(self.matrix() * first.matrix()))
    }

    /// Largest absolute entry difference after canonicalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.h.iter().zip(&other.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn project(h: &Homography, p: (f64, f64)) -> Result<(f64, f64)> {
    let m = &h.h;
    let w = m[6] * p.0 + m[7] * p.1 + m[8];
    if !(w.abs() > MIN_DENOMINATOR) {
        return Err(Error::Projective { denominator: w });
    }
    Ok(((m[0] * p.0 + m[1] * p.1 + m[2]) / w, (m[3] * p.0 + m[4] * p.1 + m[5]) / w))
}

/// Largest distance between where `estimate` and `truth` send the corners of
/// a `rows x cols` frame.
pub fn corner_error(estimate: &Homography, truth: &Homography, rows: usize, cols: usize) -> Result<f64> {
    let (w, h) = (cols as f64, rows as f64);
    let mut worst: f64 = 0.0;
    for corner in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
        let a = project(estimate, corner)?;
        let b = project(truth, corner)?;
        worst = worst.max((a.0 - b.0).hypot(a.1 - b.1));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseTarget {
    Point { x: f64, y: f64 },
    /// Only the base ordinate is known.
    HorizontalLine { y: f64 },
}

impl BaseTarget {
    pub fn equations(&self) -> usize {
        match self {
            BaseTarget::Point { .. } => 2,
            BaseTarget::HorizontalLine { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub id: KeyPointId,
    /// Frame pixel `(u, v)`.
    pub image: (f64, f64),
    pub base: BaseTarget,
}

impl Correspondence {
    pub fn new(id: KeyPointId, image: (f64, f64), base: BaseTarget) -> Result<Self> {
        let is_line = matches!(base, BaseTarget::HorizontalLine { .. });
        if is_line != id.class().is_floating() {
            return Err(Error::validation("correspondence", format!("{id} does not take a {base:?} target")));
        }
        Ok(Self { id, image, base })
    }

    /// Reprojection distance for points, ordinate distance for lines.
    pub fn residual(&self, h: &Homography) -> f64 {
        match project(h, self.image) {
            Ok((x, y)) => match self.base {
                BaseTarget::Point { x: bx, y: by } => (x - bx).hypot(y - by),
                BaseTarget::HorizontalLine { y: by } => (y - by).abs(),
            },
            Err(_) => f64::INFINITY,
        }
    }
}

pub fn count_equations(corrs: &[Correspondence]) -> usize {
    corrs.iter().map(|c| c.base.equations()).sum()
}

/// Similarity `T` with `T p = s (p - c)`.
#[derive(Debug, Clone, Copy)]
struct Similarity {
    cx: f64,
    cy: f64,
    s: f64,
}

impl Similarity {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.s * (x - self.cx), self.s * (y - self.cy))
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.s, 0.0, -self.s * self.cx, 0.0, self.s, -self.s * self.cy, 0.0, 0.0, 1.0)
    }

    fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(1.0 / self.s, 0.0, self.cx, 0.0, 1.0 / self.s, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Centroid to the origin, mean distance from it `sqrt(2)`.
fn isotropic(points: &[(f64, f64)]) -> Option<Similarity> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    (mean > 0.0 && mean.is_finite()).then(|| Similarity { cx, cy, s: std::f64::consts::SQRT_2 / mean })
}

fn base_normalization(corrs: &[Correspondence]) -> Similarity {
    let fixed: Vec<_> = corrs
        .iter()
        .filter_map(|c| match c.base {
            BaseTarget::Point { x, y } => Some((x, y)),
            BaseTarget::HorizontalLine { .. } => None,
        })
        .collect();
    if let Some(t) = (fixed.len() >= 2).then(|| isotropic(&fixed)).flatten() {
        return t;
    }
    // Too few fixed points: centre the ordinates and scale by their spread.
    let ys: Vec<f64> = corrs
        .iter()
        .map(|c| match c.base {
            BaseTarget::Point { y, .. } | BaseTarget::HorizontalLine { y } => y,
        })
        .collect();
    let cy = ys.iter().sum::<f64>() / ys.len() as f64;
    let spread = ys.iter().map(|y| (y - cy).abs()).sum::<f64>() / ys.len() as f64;
    let cx = fixed.first().map_or(0.0, |p| p.0);
    Similarity { cx, cy, s: if spread > 0.0 { 1.0 / spread } else { 1.0 } }
}

fn all_collinear(points: &[(f64, f64)]) -> bool {
    let Some(t) = isotropic(points) else {
        return true;
    };
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (x, y) = t.apply(x, y);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    // smallest eigenvalue of the scatter matrix relative to the largest
    let mean = 0.5 * (sxx + syy);
    let dev = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    (mean - dev) <= 1e-12 * (mean + dev)
}

/// Least-squares null vector of the stacked point and line constraints.
pub fn estimate_dlt(corrs: &[Correspondence]) -> Result<Homography> {
    let image: Vec<(f64, f64)> = corrs.iter().map(|c| c.image).collect();
    if image.len() < 2 || all_collinear(&image) {
        return Err(Error::Degenerate("image points are collinear".into()));
    }
    let equations = count_equations(corrs);
    if equations < MIN_EQUATIONS {
        return Err(Error::Rank { equations });
    }

    let t_image = isotropic(&image).expect("non-collinear points have spread");
    let t_base = base_normalization(corrs);

    let rows = equations.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    let mut r = 0;
    for c in corrs {
        let (u, v) = t_image.apply(c.image.0, c.image.1);
        match c.base {
            BaseTarget::Point { x, y } => {
                let (x, y) = t_base.apply(x, y);
                a.row_mut(r).copy_from_slice(&[u, v, 1.0, 0.0, 0.0, 0.0, -x * u, -x * v, -x]);
                a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, u, v, 1.0, -y * u, -y * v, -y]);
                r += 2;
            }
            BaseTarget::HorizontalLine { y } => {
                let y = t_base.s * (y - t_base.cy);
                a.row_mut(r).copy_from_slice(&[0.0, 0.0, 0.0, u, v, 1.0, -y * u, -y * v, -y]);
                r += 1;
            }
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .take(8)
        .filter(|&&i| svd.singular_values[i] > RANK_TOLERANCE * largest)
        .count();
    if rank < 8 {
        return Err(Error::Degenerate(format!("constraint matrix has numerical rank {rank} < 8")));
    }
    let null = v_t.row(order[8]);
    let h_normalized = Matrix3::from_row_slice(null.transpose().as_slice());
    let h = t_base.inverse_matrix() * h_normalized * t_image.matrix();
    Homography::from_matrix(&h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// In base-frame units (base pixels).
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 1000, inlier_threshold_px: 3.0, seed: 0 }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("iterations", "must be at least 1"));
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err(Error::validation("inlier_threshold_px", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

struct Consensus {
    mask: Vec<bool>,
    count: usize,
    residual: f64,
}

fn consensus(h: &Homography, corrs: &[Correspondence], threshold: f64) -> Option<Consensus> {
    let mut mask = vec![false; corrs.len()];
    let (mut count, mut residual, mut equations) = (0, 0.0, 0);
    for (c, m) in corrs.iter().zip(mask.iter_mut()) {
        let r = c.residual(h);
        if r <= threshold {
            *m = true;
            count += 1;
            residual += r;
            equations += c.base.equations();
        }
    }
    (equations >= MIN_EQUATIONS).then_some(Consensus { mask, count, residual })
}

fn better(a: &Consensus, b: &Consensus) -> bool {
    a.count > b.count || (a.count == b.count && a.residual < b.residual)
}

fn subset(corrs: &[Correspondence], mask: &[bool]) -> Vec<Correspondence> {
    corrs.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect()
}

/// Robust fit: uniform minimal samples of at least eight equations, largest
/// consensus wins (ties go to the lower summed inlier residual), then the
/// winner is re-fitted on its consensus set.
pub fn estimate_ransac(corrs: &[Correspondence], params: &RansacParams) -> Result<RansacOutcome> {
    params.validate()?;
    let equations = count_equations(corrs);
    if equations < MIN_EQUATIONS {
        return Err(Error::Rank { equations });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pool: Vec<usize> = (0..corrs.len()).collect();
    let mut sample = Vec::with_capacity(8);
    let mut best: Option<(Homography, Consensus)> = None;

    for _ in 0..params.iterations {
        sample.clear();
        let mut sampled_equations = 0;
        let mut taken = 0;
        while sampled_equations < MIN_EQUATIONS {
            let j = rng.random_range(taken..pool.len());
            pool.swap(taken, j);
            let c = corrs[pool[taken]];
            taken += 1;
            sampled_equations += c.base.equations();
            sample.push(c);
        }
        let Ok(h) = estimate_dlt(&sample) else {
            continue;
        };
        if let Some(c) = consensus(&h, corrs, params.inlier_threshold_px) {
            if best.as_ref().is_none_or(|(_, b)| better(&c, b)) {
                best = Some((h, c));
            }
        }
    }

    let (mut h, mut support) = best.ok_or(Error::NoModel { iterations: params.iterations })?;
    // Re-fit on the consensus set while that does not shrink it.
    for _ in 0..5 {
        let Ok(refit) = estimate_dlt(&subset(corrs, &support.mask)) else {
            break;
        };
        match consensus(&refit, corrs, params.inlier_threshold_px) {
            Some(c) if c.count >= support.count => {
                let unchanged = c.mask == support.mask;
                h = refit;
                support = c;
                if unchanged {
                    break;
                }
            }
            _ => break,
        }
    }
    Ok(RansacOutcome { homography: h, inliers: support.mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMix {
    pub point: usize,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub homography: Homography,
    pub correspondences: Vec<Correspondence>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub mean_residual_px: f64,
    /// Constraint kinds among the inliers.
    pub constraints: ConstraintMix,
}

/// Correspondences in base pixels for every detection in `det`.
pub fn correspondences_from_detections(
    det: &DetectionSet,
    model: &BasePoolModel,
    scale_px_per_m: f64,
) -> Result<Vec<Correspondence>> {
    if !(scale_px_per_m > 0.0) {
        return Err(Error::validation("scale_px_per_m", "must be positive"));
    }
    det.detections
        .iter()
        .map(|d| {
            let base = match model.location(d.id) {
                Some(BaseLocation::FixedPoint { x_m, y_m }) => BaseTarget::Point {
                    x: x_m * scale_px_per_m,
                    y: y_m * scale_px_per_m,
                },
                Some(BaseLocation::HorizontalLine { y_m }) => BaseTarget::HorizontalLine { y: y_m * scale_px_per_m },
                None => {
                    return Err(Error::Input(format!("detection {} does not exist in this pool model", d.id)));
                }
            };
            Correspondence::new(d.id, (d.u, d.v), base)
        })
        .collect()
}

/// Maps a frame onto the base pool image from its decoded key-points.
pub fn localize_frame(
    det: &DetectionSet,
    model: &BasePoolModel,
    scale_px_per_m: f64,
    params: &RansacParams,
) -> Result<Localization> {
    let corrs = correspondences_from_detections(det, model, scale_px_per_m)?;
    let equations = count_equations(&corrs);
    if equations < MIN_EQUATIONS {
        let lines = corrs.iter().filter(|c| c.base.equations() == 1).count();
        let found = if corrs.is_empty() {
            "none".to_string()
        } else {
            corrs.iter().map(|c| c.id.label()).collect::<Vec<_>>().join(", ")
        };
        return Err(Error::InsufficientDetections { equations, points: corrs.len() - lines, lines, found });
    }
    let outcome = estimate_ransac(&corrs, params)?;
    let mut mix = ConstraintMix { point: 0, line: 0 };
    let mut residual = 0.0;
    for (c, _) in corrs.iter().zip(&outcome.inliers).filter(|(_, &m)| m) {
        match c.base {
            BaseTarget::Point { .. } => mix.point += 1,
            BaseTarget::HorizontalLine { .. } => mix.line += 1,
        }
        residual += c.residual(&outcome.homography);
    }
    let inlier_count = mix.point + mix.line;
    Ok(Localization {
        homography: outcome.homography,
        correspondences: corrs,
        inliers: outcome.inliers,
        inlier_count,
        mean_residual_px: residual / inlier_count as f64,
        constraints: mix,
    })
}

/// Homography file: `{frame_id, h, inliers, mean_residual_px, constraints}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyRecord {
    pub frame_id: String,
    pub h: [f64; 9],
    pub inliers: usize,
    pub mean_residual_px: f64,
    pub constraints: ConstraintMix,
}

impl HomographyRecord {
    pub fn from_localization(frame_id: &str, loc: &Localization) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            h: loc.homography.row_major(),
            inliers: loc.inlier_count,
            mean_residual_px: loc.mean_residual_px,
            constraints: loc.constraints,
        }
    }

    pub fn homography(&self) -> Result<Homography> {
        Homography::from_row_major(self.h)
    }
}
