//! Detector output contract: per-channel probability maps over the frame.
//!
//! A volume holds `C` channels of `rows x cols` cells; channel `k` belongs to
//! the key-point with canonical channel index `k`. Present key-points are
//! trained towards a delta at their cell, absent ones towards a flat channel,
//! and decoding keeps a channel only when its entropy is below `beta` times
//! the flat-channel entropy `ln(rows * cols)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pool_model::{canonical_channel_index, KeyPointId, NUM_KEYPOINTS};

/// Lower clamp applied to predictions inside `ln`.
pub const LOG_EPSILON: f64 = 1e-12;

/// Tolerance for a channel's total mass.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl HeatmapVolume {
    /// Wraps channel-major, row-major-within-channel data after checking
    /// that every channel is a distribution.
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let volume = Self::from_parts(rows, cols, channels, data)?;
        volume.validate()?;
        Ok(volume)
    }

    fn from_parts(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty volume {channels}x{rows}x{cols}")));
        }
        if data.len() != rows * cols * channels {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{rows}x{cols} volume",
                data.len()
            )));
        }
        Ok(Self { rows, cols, channels, data })
    }

    /// Every channel uniform over its cells.
    pub fn flat(rows: usize, cols: usize, channels: usize) -> Result<Self> {
        let value = 1.0 / (rows * cols) as f64;
        Self::from_parts(rows, cols, channels, vec![value; rows * cols * channels])
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        for (k, channel) in self.channels().enumerate() {
            let mut total = 0.0;
            for (i, &p) in channel.iter().enumerate() {
                if !p.is_finite() {
                    return Err(Error::Numeric { channel: k, cell: i });
                }
                if p < 0.0 {
                    return Err(Error::Domain(format!("channel {k} cell {i} is negative ({p})")));
                }
                total += p;
            }
            if (total - 1.0).abs() > MASS_TOLERANCE {
                return Err(Error::Domain(format!("channel {k} sums to {total}")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// True when the channel count matches the 96-key-point model.
    pub fn is_canonical(&self) -> bool {
        self.channels == NUM_KEYPOINTS
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cells())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedPoint {
    pub id: KeyPointId,
    /// Column, in pixels.
    pub u: f64,
    /// Row, in pixels.
    pub v: f64,
}

/// Ground-truth key-points of one frame at a given resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<AnnotatedPoint>,
}

impl FrameAnnotation {
    pub fn new(frame_id: impl Into<String>, rows: usize, cols: usize, points: Vec<AnnotatedPoint>) -> Result<Self> {
        let ann = Self { frame_id: frame_id.into(), rows, cols, points };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("rows/cols", "must be positive"));
        }
        let mut seen = [false; NUM_KEYPOINTS];
        for p in &self.points {
            let k = canonical_channel_index(p.id);
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::validation("points", format!("duplicate key-point {}", p.id)));
            }
            if !in_bounds(p.u, p.v, self.rows, self.cols) {
                return Err(Error::OutOfBounds { u: p.u, v: p.v, rows: self.rows, cols: self.cols });
            }
        }
        Ok(())
    }

    pub fn point(&self, id: KeyPointId) -> Option<&AnnotatedPoint> {
        self.points.iter().find(|p| p.id == id)
    }
}

fn in_bounds(u: f64, v: f64, rows: usize, cols: usize) -> bool {
    u >= 0.0 && v >= 0.0 && u < cols as f64 && v < rows as f64
}

/// Nearest cell (half-up), clamped into the grid.
pub fn nearest_cell(u: f64, v: f64, rows: usize, cols: usize) -> (usize, usize) {
    let row = ((v + 0.5).floor().max(0.0) as usize).min(rows - 1);
    let col = ((u + 0.5).floor().max(0.0) as usize).min(cols - 1);
    (row, col)
}

/// Builds the training target: a delta at each annotated cell, flat channels
/// for key-points not in the annotation.
///
/// An annotation at a different resolution is accepted when it is a uniform
/// scaling of `rows x cols` (e.g. 1080x1920 against 288x512); its coordinates
/// are divided by that factor before rounding.
pub fn make_target_volume(ann: &FrameAnnotation, rows: usize, cols: usize) -> Result<HeatmapVolume> {
    let ann = fit_annotation(ann, rows, cols)?;
    let mut volume = HeatmapVolume::flat(rows, cols, NUM_KEYPOINTS)?;
    let cells = rows * cols;
    for p in &ann.points {
        if !in_bounds(p.u, p.v, rows, cols) {
            return Err(Error::OutOfBounds { u: p.u, v: p.v, rows, cols });
        }
        let (row, col) = nearest_cell(p.u, p.v, rows, cols);
        let k = canonical_channel_index(p.id);
        let channel = &mut volume.data[k * cells..(k + 1) * cells];
        channel.fill(0.0);
        channel[row * cols + col] = 1.0;
    }
    Ok(volume)
}

pub(crate) fn fit_annotation(ann: &FrameAnnotation, rows: usize, cols: usize) -> Result<std::borrow::Cow<'_, FrameAnnotation>> {
    if ann.rows == rows && ann.cols == cols {
        return Ok(std::borrow::Cow::Borrowed(ann));
    }
    let row_factor = ann.rows as f64 / rows as f64;
    let col_factor = ann.cols as f64 / cols as f64;
    if (row_factor - col_factor).abs() > 1e-9 * row_factor.max(col_factor) {
        return Err(Error::Shape(format!(
            "annotation {}x{} is not a uniform scaling of {rows}x{cols}",
            ann.rows, ann.cols
        )));
    }
    let points = ann
        .points
        .iter()
        .map(|p| AnnotatedPoint { id: p.id, u: p.u / col_factor, v: p.v / row_factor })
        .collect();
    Ok(std::borrow::Cow::Owned(FrameAnnotation { frame_id: ann.frame_id.clone(), rows, cols, points }))
}

/// Per-channel soft-max of raw logits (channel-major layout).
pub fn softmax_normalize(raw: &[f64], rows: usize, cols: usize, channels: usize) -> Result<HeatmapVolume> {
    let mut volume = HeatmapVolume::from_parts(rows, cols, channels, raw.to_vec())?;
    let cells = volume.cells();
    for (k, channel) in volume.data.chunks_exact_mut(cells).enumerate() {
        if let Some(i) = channel.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric { channel: k, cell: i });
        }
        let max = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in channel.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in channel.iter_mut() {
            *x /= total;
        }
    }
    Ok(volume)
}

/// Cross-entropy summed with equal weight over all channels, in nats.
pub fn cross_entropy_loss(target: &HeatmapVolume, pred: &HeatmapVolume) -> Result<f64> {
    if (target.rows, target.cols, target.channels) != (pred.rows, pred.cols, pred.channels) {
        return Err(Error::Shape(format!(
            "target {}x{}x{} vs prediction {}x{}x{}",
            target.channels, target.rows, target.cols, pred.channels, pred.rows, pred.cols
        )));
    }
    Ok(target
        .data
        .iter()
        .zip(&pred.data)
        .filter(|(&y, _)| y != 0.0)
        .map(|(&y, &h)| -y * h.max(LOG_EPSILON).ln())
        .sum())
}

/// Shannon entropy of one channel in nats, with `0 ln 0 = 0`.
pub fn channel_entropy(channel: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut entropy = 0.0;
    for (i, &p) in channel.iter().enumerate() {
        if !(p >= 0.0) {
            return Err(Error::Domain(format!("cell {i} has probability {p}")));
        }
        total += p;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Domain(format!("channel sums to {total}")));
    }
    Ok(entropy.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    beta: f64,
}

impl DecodeParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::validation("beta", format!("{beta} outside [0, 1]")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub id: KeyPointId,
    pub u: f64,
    pub v: f64,
    /// Channel entropy, nats.
    pub entropy: f64,
}

/// Decoded key-points of one frame, at most one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub frame_id: String,
    pub rows: usize,
    pub cols: usize,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; NUM_KEYPOINTS];
        for d in &self.detections {
            if std::mem::replace(&mut seen[canonical_channel_index(d.id)], true) {
                return Err(Error::validation("detections", format!("duplicate channel {}", d.id)));
            }
            if !(d.u.is_finite() && d.v.is_finite() && d.entropy.is_finite()) {
                return Err(Error::validation("detections", format!("{}: non-finite value", d.id)));
            }
        }
        Ok(())
    }

    pub fn detection(&self, id: KeyPointId) -> Option<&Detection> {
        self.detections.iter().find(|d| d.id == id)
    }

    /// Treats every annotated point as a detection with zero entropy.
    pub fn from_annotation(ann: &FrameAnnotation) -> Self {
        Self {
            frame_id: ann.frame_id.clone(),
            rows: ann.rows,
            cols: ann.cols,
            detections: ann
                .points
                .iter()
                .map(|p| Detection { id: p.id, u: p.u, v: p.v, entropy: 0.0 })
                .collect(),
        }
    }
}

/// What decoding needs from a channel: its entropy and argmax cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSummary {
    pub entropy: f64,
    /// Row-major index of the maximum, smallest index on ties.
    pub argmax: usize,
}

/// Entropy and argmax for every channel, independent of `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSummary {
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<ChannelSummary>,
}

pub fn summarize(volume: &HeatmapVolume) -> Result<VolumeSummary> {
    if !volume.is_canonical() {
        return Err(Error::Shape(format!(
            "decoding needs {NUM_KEYPOINTS} channels, volume has {}",
            volume.channels
        )));
    }
    let channels = volume
        .data
        .par_chunks_exact(volume.cells())
        .map(|channel| {
            let entropy = channel_entropy(channel)?;
            let mut argmax = 0;
            for (i, &p) in channel.iter().enumerate() {
                if p > channel[argmax] {
                    argmax = i;
                }
            }
            Ok(ChannelSummary { entropy, argmax })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VolumeSummary { rows: volume.rows, cols: volume.cols, channels })
}

impl VolumeSummary {
    /// Applies the entropy gate `H < beta * ln(rows * cols)`.
    pub fn gate(&self, frame_id: &str, params: DecodeParams) -> DetectionSet {
        let threshold = params.beta * ((self.rows * self.cols) as f64).ln();
        let detections = self
            .channels
            .iter()
            .zip(KeyPointId::all())
            .filter(|(s, _)| s.entropy < threshold)
            .map(|(s, id)| Detection {
                id,
                u: (s.argmax % self.cols) as f64,
                v: (s.argmax / self.cols) as f64,
                entropy: s.entropy,
            })
            .collect();
        DetectionSet { frame_id: frame_id.to_string(), rows: self.rows, cols: self.cols, detections }
    }
}

pub fn decode(frame_id: &str, volume: &HeatmapVolume, params: DecodeParams) -> Result<DetectionSet> {
    Ok(summarize(volume)?.gate(frame_id, params))
}

// Volume file: "PKHV", u32 version, u32 rows, u32 cols, u32 channels, then
// f32 payload, all little-endian.

const MAGIC: &[u8; 4] = b"PKHV";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_volume(volume: &HeatmapVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.data.len());
    out.extend_from_slice(MAGIC);
    for field in [VERSION, volume.rows as u32, volume.cols as u32, volume.channels as u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for &x in &volume.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<HeatmapVolume> {
    let format = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < HEADER_LEN {
        return Err(format(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format(0, "bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = field(0);
    if version != VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let (rows, cols, channels) = (field(1) as usize, field(2) as usize, field(3) as usize);
    if rows == 0 || cols == 0 || channels == 0 {
        return Err(format(8, format!("zero dimension {channels}x{rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| format(8, "dimensions overflow".into()))?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(format(bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    HeatmapVolume::new(rows, cols, channels, data)
}

pub fn write_volume(volume: &HeatmapVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<HeatmapVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}
