//! The base pool model: 96 canonical key-points and their base-frame geometry.
//!
//! Base frame convention: origin at the bottom-left pool corner, `x` along the
//! pool length towards the right wall, `y` across the lanes towards the top
//! wall. All model coordinates are in meters.
//!
//! Pools with a bulkhead (12, 16 and 20 lanes) are modeled as two sub-pools of
//! `length_m` each, side by side along `x` and split by the bulkhead; the lane
//! indices then count the lanes of one sub-pool (`lanes / 2`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 96;

/// Number of indices for lane-indexed classes (`0..=12`).
pub const LANE_INDEX_COUNT: u8 = 13;
/// Number of indices for length-indexed classes (`0..=8`).
pub const LENGTH_INDEX_COUNT: u8 = 9;

/// Spacing of the top/bottom wall key-points along the pool length.
pub const WALL_MARK_SPACING_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPointClass {
    WallLeft,
    WallRight,
    FloatingLeft,
    FloatingRight,
    BulkheadLeft,
    BulkheadRight,
    WallTop,
    WallBottom,
}

impl KeyPointClass {
    /// All classes in canonical channel order.
    pub const ALL: [KeyPointClass; 8] = [
        KeyPointClass::WallLeft,
        KeyPointClass::WallRight,
        KeyPointClass::FloatingLeft,
        KeyPointClass::FloatingRight,
        KeyPointClass::BulkheadLeft,
        KeyPointClass::BulkheadRight,
        KeyPointClass::WallTop,
        KeyPointClass::WallBottom,
    ];

    pub fn is_lane_indexed(self) -> bool {
        !matches!(self, KeyPointClass::WallTop | KeyPointClass::WallBottom)
    }

    pub fn is_floating(self) -> bool {
        matches!(self, KeyPointClass::FloatingLeft | KeyPointClass::FloatingRight)
    }

    pub fn index_count(self) -> u8 {
        if self.is_lane_indexed() {
            LANE_INDEX_COUNT
        } else {
            LENGTH_INDEX_COUNT
        }
    }

    fn channel_offset(self) -> usize {
        let position = Self::ALL.iter().position(|&c| c == self).unwrap();
        if position < 6 {
            position * LANE_INDEX_COUNT as usize
        } else {
            6 * LANE_INDEX_COUNT as usize + (position - 6) * LENGTH_INDEX_COUNT as usize
        }
    }

    /// Lowercase snake-case name, as used in labels and JSON.
    pub fn name(self) -> &'static str {
        match self {
            KeyPointClass::WallLeft => "wall_left",
            KeyPointClass::WallRight => "wall_right",
            KeyPointClass::FloatingLeft => "floating_left",
            KeyPointClass::FloatingRight => "floating_right",
            KeyPointClass::BulkheadLeft => "bulkhead_left",
            KeyPointClass::BulkheadRight => "bulkhead_right",
            KeyPointClass::WallTop => "wall_top",
            KeyPointClass::WallBottom => "wall_bottom",
        }
    }
}

impl fmt::Display for KeyPointClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KeyPointClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Label(s.to_string()))
    }
}

/// One of the 96 canonical key-point identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyPointId {
    class: KeyPointClass,
    index: u8,
}

impl KeyPointId {
    pub fn new(class: KeyPointClass, index: u8) -> Result<Self> {
        if index >= class.index_count() {
            return Err(Error::validation(
                "index",
                format!("{class} index {index} outside 0..{}", class.index_count()),
            ));
        }
        Ok(Self { class, index })
    }

    pub fn class(self) -> KeyPointClass {
        self.class
    }

    pub fn index(self) -> u8 {
        self.index
    }

    /// All 96 ids in canonical channel order.
    pub fn all() -> impl Iterator<Item = KeyPointId> {
        KeyPointClass::ALL
            .into_iter()
            .flat_map(|class| (0..class.index_count()).map(move |index| KeyPointId { class, index }))
    }

    pub fn from_channel(channel: usize) -> Option<KeyPointId> {
        KeyPointId::all().nth(channel)
    }

    /// `<class>_<index>`, e.g. `wall_left_0`.
    pub fn label(self) -> String {
        format!("{}_{}", self.class.name(), self.index)
    }

    pub fn parse_label(label: &str) -> Result<Self> {
        let (class, index) = label.rsplit_once('_').ok_or_else(|| Error::Label(label.to_string()))?;
        let class: KeyPointClass = class.parse().map_err(|_| Error::Label(label.to_string()))?;
        let index: u8 = index.parse().map_err(|_| Error::Label(label.to_string()))?;
        KeyPointId::new(class, index).map_err(|_| Error::Label(label.to_string()))
    }
}

impl fmt::Display for KeyPointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.class, self.index)
    }
}

/// Position of `id` in the 96-channel output volume.
pub fn canonical_channel_index(id: KeyPointId) -> usize {
    id.class.channel_offset() + id.index as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub lanes: u32,
    pub length_m: u32,
    pub bumpers: bool,
    pub bulkhead: bool,
    #[serde(default = "default_lane_width")]
    pub lane_width_m: f64,
    #[serde(default = "default_bumper_width")]
    pub bumper_width_m: f64,
    /// Bulkhead position along the base frame; mid-span when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bulkhead_x_m: Option<f64>,
}

fn default_lane_width() -> f64 {
    2.5
}

fn default_bumper_width() -> f64 {
    0.25
}

impl PoolConfig {
    pub fn new(lanes: u32, length_m: u32, bumpers: bool, bulkhead: bool) -> Self {
        Self {
            lanes,
            length_m,
            bumpers,
            bulkhead,
            lane_width_m: default_lane_width(),
            bumper_width_m: default_bumper_width(),
            bulkhead_x_m: None,
        }
    }

    /// The nine pool types (lanes x length) the model covers.
    pub fn standard_types() -> Vec<(u32, u32)> {
        vec![(6, 25), (6, 50), (8, 25), (8, 50), (10, 25), (10, 50), (12, 25), (16, 25), (20, 25)]
    }

    /// Every valid combination of pool type and bumper flag; the bulkhead flag
    /// is implied by the lane count.
    pub fn all_standard() -> Vec<PoolConfig> {
        Self::standard_types()
            .into_iter()
            .flat_map(|(n, m)| [true, false].map(|bumpers| PoolConfig::new(n, m, bumpers, n > 10)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if ![6, 8, 10, 12, 16, 20].contains(&self.lanes) {
            return Err(Error::Config(format!("lanes must be one of 6, 8, 10, 12, 16, 20 (got {})", self.lanes)));
        }
        if ![25, 50].contains(&self.length_m) {
            return Err(Error::Config(format!("length must be 25 or 50 m (got {})", self.length_m)));
        }
        if self.lanes > 10 && self.length_m != 25 {
            return Err(Error::Config(format!(
                "more than 10 lanes requires a 25 m pool (got {}x{})",
                self.lanes, self.length_m
            )));
        }
        if self.bulkhead && self.lanes <= 10 {
            return Err(Error::Config(format!("a bulkhead requires 12, 16 or 20 lanes (got {})", self.lanes)));
        }
        if !self.bulkhead && self.lanes > 10 {
            return Err(Error::Config(format!("{} lanes implies a bulkhead", self.lanes)));
        }
        if !(self.lane_width_m > 0.0 && self.lane_width_m.is_finite()) {
            return Err(Error::Config("lane width must be positive".into()));
        }
        if !(self.bumper_width_m >= 0.0 && self.bumper_width_m < self.lane_width_m) {
            return Err(Error::Config("bumper width must be in [0, lane width)".into()));
        }
        if let Some(x) = self.bulkhead_x_m {
            if !self.bulkhead {
                return Err(Error::Config("bulkhead position given without a bulkhead".into()));
            }
            if !(x > 0.0 && x < self.span_m()) {
                return Err(Error::Config(format!("bulkhead position {x} m outside the pool")));
            }
        }
        Ok(())
    }

    /// Lanes between the bottom and top walls of one (sub-)pool.
    pub fn lanes_per_section(&self) -> u32 {
        if self.bulkhead {
            self.lanes / 2
        } else {
            self.lanes
        }
    }

    /// Extent of the base frame along `x`.
    pub fn span_m(&self) -> f64 {
        let sections = if self.bulkhead { 2.0 } else { 1.0 };
        sections * self.length_m as f64
    }

    fn bumper_offset_m(&self) -> f64 {
        if self.bumpers {
            self.bumper_width_m
        } else {
            0.0
        }
    }

    /// Extent of the base frame along `y`.
    pub fn width_m(&self) -> f64 {
        self.lanes_per_section() as f64 * self.lane_width_m + 2.0 * self.bumper_offset_m()
    }

    pub fn bulkhead_position_m(&self) -> Option<f64> {
        self.bulkhead.then(|| self.bulkhead_x_m.unwrap_or(self.span_m() / 2.0))
    }

    /// Whether lane-index `index` names a wall corner or an installed rope.
    fn lane_index_exists(&self, index: u8) -> bool {
        let lanes = self.lanes_per_section() as u8;
        match index {
            0 | 12 => true,
            1 => self.bumpers,
            i if i <= lanes => true,
            i if i == lanes + 1 => self.bumpers,
            _ => false,
        }
    }

    /// Base-frame ordinate of lane-index `index` (bottom-aligned).
    fn lane_ordinate_m(&self, index: u8) -> f64 {
        match index {
            0 => 0.0,
            12 => self.width_m(),
            1 => self.bumper_width_m,
            i => self.bumper_offset_m() + (i - 1) as f64 * self.lane_width_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseLocation {
    FixedPoint { x_m: f64, y_m: f64 },
    /// Floating key-points are only pinned in `y`.
    HorizontalLine { y_m: f64 },
}

impl BaseLocation {
    pub fn y_m(&self) -> f64 {
        match *self {
            BaseLocation::FixedPoint { y_m, .. } | BaseLocation::HorizontalLine { y_m } => y_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelEntry {
    pub id: KeyPointId,
    /// `None` for key-points that do not exist in this configuration.
    pub location: Option<BaseLocation>,
}

impl ModelEntry {
    pub fn exists(&self) -> bool {
        self.location.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasePoolModel {
    config: PoolConfig,
    entries: Vec<ModelEntry>,
}

pub fn build_base_model(config: PoolConfig) -> Result<BasePoolModel> {
    config.validate()?;
    let entries = KeyPointId::all()
        .map(|id| ModelEntry { id, location: locate(&config, id) })
        .collect();
    Ok(BasePoolModel { config, entries })
}

fn locate(config: &PoolConfig, id: KeyPointId) -> Option<BaseLocation> {
    use KeyPointClass::*;

    let index = id.index();
    if id.class().is_lane_indexed() {
        if !config.lane_index_exists(index) {
            return None;
        }
        let y_m = config.lane_ordinate_m(index);
        let x_m = match id.class() {
            WallLeft => 0.0,
            WallRight => config.span_m(),
            BulkheadLeft | BulkheadRight => config.bulkhead_position_m()?,
            FloatingLeft | FloatingRight => return Some(BaseLocation::HorizontalLine { y_m }),
            WallTop | WallBottom => unreachable!(),
        };
        Some(BaseLocation::FixedPoint { x_m, y_m })
    } else {
        if config.bulkhead && index == 4 {
            return None;
        }
        let x_m = WALL_MARK_SPACING_M * (index as f64 + 1.0);
        if x_m >= config.span_m() {
            return None;
        }
        let y_m = if id.class() == WallTop { config.width_m() } else { 0.0 };
        Some(BaseLocation::FixedPoint { x_m, y_m })
    }
}

impl BasePoolModel {
    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    /// All 96 entries in canonical channel order.
    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn entry(&self, id: KeyPointId) -> &ModelEntry {
        &self.entries[canonical_channel_index(id)]
    }

    pub fn location(&self, id: KeyPointId) -> Option<BaseLocation> {
        self.entry(id).location
    }

    pub fn existing(&self) -> impl Iterator<Item = &ModelEntry> {
        self.entries.iter().filter(|e| e.exists())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasePixel {
    Point { x: f64, y: f64 },
    Line { y: f64 },
}

/// Existing key-points of `model` scaled to base-image pixels.
pub fn base_pixel_coordinates(model: &BasePoolModel, scale_px_per_m: f64) -> Result<Vec<(KeyPointId, BasePixel)>> {
    if !(scale_px_per_m > 0.0 && scale_px_per_m.is_finite()) {
        return Err(Error::validation("scale_px_per_m", "must be positive"));
    }
    Ok(model
        .existing()
        .map(|e| {
            let px = match e.location.unwrap() {
                BaseLocation::FixedPoint { x_m, y_m } => BasePixel::Point {
                    x: x_m * scale_px_per_m,
                    y: y_m * scale_px_per_m,
                },
                BaseLocation::HorizontalLine { y_m } => BasePixel::Line { y: y_m * scale_px_per_m },
            };
            (e.id, px)
        })
        .collect())
}

// JSON document: {config, entries:[{class, index, exists, kind, x_m?, y_m?}]}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LocationKind {
    FixedPoint,
    HorizontalLine,
}

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    class: KeyPointClass,
    index: u8,
    exists: bool,
    kind: LocationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_m: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    config: PoolConfig,
    entries: Vec<EntryDoc>,
}

impl BasePoolModel {
    pub fn to_json(&self) -> String {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let kind = if e.id.class().is_floating() {
                    LocationKind::HorizontalLine
                } else {
                    LocationKind::FixedPoint
                };
                let (x_m, y_m) = match e.location {
                    Some(BaseLocation::FixedPoint { x_m, y_m }) => (Some(x_m), Some(y_m)),
                    Some(BaseLocation::HorizontalLine { y_m }) => (None, Some(y_m)),
                    None => (None, None),
                };
                EntryDoc { class: e.id.class(), index: e.id.index(), exists: e.exists(), kind, x_m, y_m }
            })
            .collect();
        let doc = ModelDoc { config: self.config.clone(), entries };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    /// Parses a model document. The entries must agree with the geometry the
    /// embedded configuration produces.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::validation("model", e.to_string()))?;
        let model = build_base_model(doc.config)?;
        if doc.entries.len() != NUM_KEYPOINTS {
            return Err(Error::validation("entries", format!("expected 96 entries, found {}", doc.entries.len())));
        }
        for e in &doc.entries {
            let id = KeyPointId::new(e.class, e.index)?;
            let expected = model.location(id);
            let found = match (e.exists, &e.kind, e.x_m, e.y_m) {
                (false, _, _, _) => None,
                (true, LocationKind::FixedPoint, Some(x_m), Some(y_m)) => Some(BaseLocation::FixedPoint { x_m, y_m }),
                (true, LocationKind::HorizontalLine, None, Some(y_m)) => Some(BaseLocation::HorizontalLine { y_m }),
                _ => return Err(Error::validation("entries", format!("{id}: inconsistent kind/coordinates"))),
            };
            let agrees = match (expected, found) {
                (None, None) => true,
                (Some(BaseLocation::FixedPoint { x_m: a, y_m: b }), Some(BaseLocation::FixedPoint { x_m: c, y_m: d })) => {
                    (a - c).abs() < 1e-9 && (b - d).abs() < 1e-9
                }
                (Some(BaseLocation::HorizontalLine { y_m: a }), Some(BaseLocation::HorizontalLine { y_m: b })) => {
                    (a - b).abs() < 1e-9
                }
                _ => false,
            };
            if !agrees {
                return Err(Error::validation("entries", format!("{id} disagrees with the configuration")));
            }
        }
        Ok(model)
    }
}
