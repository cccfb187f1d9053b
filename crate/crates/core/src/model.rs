//! Fingerprints, the reference fingerprint map (RFM) and its partition into
//! square subregions.
//!
//! A "non-measurable" feature is never stored as a sentinel value: it is
//! simply absent from the fingerprint's observation map, so key-set
//! operations stay exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RSS at or below this level is treated as non-measurable.
pub const RSS_FLOOR_DBM: f64 = -100.0;

/// Default subregion edge length in metres.
pub const DEFAULT_CELL_SIZE: f64 = 2.0;

const EDGE_SNAP: f64 = 1e-9;

/// Opaque identifier of one observable (e.g. an access point on one band).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureId(String);

impl FeatureId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::BadFeatureId(id));
        }
        Ok(FeatureId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for FeatureId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        FeatureId::new(value)
    }
}

impl From<FeatureId> for String {
    fn from(value: FeatureId) -> Self {
        value.0
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangle, `min` inclusive and `max` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
        )
    }
}

/// One fingerprint: the RSS observed per feature at one place and time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    observations: BTreeMap<FeatureId, f64>,
    timestamp: Option<f64>,
}

impl Fingerprint {
    /// Builds a fingerprint, rejecting values outside `(-100, 0]` dBm.
    pub fn new(observations: BTreeMap<FeatureId, f64>) -> Result<Self> {
        for (feature, &value) in &observations {
            check_stored_rss(feature.as_str(), value)?;
        }
        Ok(Fingerprint {
            observations,
            timestamp: None,
        })
    }

    /// Ingest rule: values outside `[-100, 0]` are rejected and the floor
    /// value itself is mapped to absence.
    pub fn from_raw<I, K>(observations: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, f64)>,
        K: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (key, value) in observations {
            let key = key.into();
            if !value.is_finite() || !(RSS_FLOOR_DBM..=0.0).contains(&value) {
                return Err(Error::BadRss {
                    feature: key,
                    value,
                });
            }
            if value <= RSS_FLOOR_DBM {
                continue;
            }
            map.insert(FeatureId::new(key)?, value);
        }
        Ok(Fingerprint {
            observations: map,
            timestamp: None,
        })
    }

    pub fn with_timestamp(mut self, timestamp: Option<f64>) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    pub fn get(&self, feature: &FeatureId) -> Option<f64> {
        self.observations.get(feature).copied()
    }

    pub fn contains(&self, feature: &FeatureId) -> bool {
        self.observations.contains_key(feature)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observations in ascending feature-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&FeatureId, f64)> + '_ {
        self.observations.iter().map(|(k, &v)| (k, v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &FeatureId> + '_ {
        self.observations.keys()
    }

    pub fn key_set(&self) -> BTreeSet<FeatureId> {
        self.observations.keys().cloned().collect()
    }

    pub fn observations(&self) -> &BTreeMap<FeatureId, f64> {
        &self.observations
    }

    /// Keeps only the listed features.
    pub fn restricted_to(&self, features: &BTreeSet<FeatureId>) -> Fingerprint {
        Fingerprint {
            observations: self
                .observations
                .iter()
                .filter(|(k, _)| features.contains(*k))
                .map(|(k, &v)| (k.clone(), v))
                .collect(),
            timestamp: self.timestamp,
        }
    }
}

fn check_stored_rss(feature: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value <= RSS_FLOOR_DBM || value > 0.0 {
        return Err(Error::BadRss {
            feature: feature.to_owned(),
            value,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub location: Point,
    pub fingerprint: Fingerprint,
}

impl LabeledSample {
    pub fn new(location: Point, fingerprint: Fingerprint) -> Self {
        LabeledSample {
            location,
            fingerprint,
        }
    }
}

/// Bounding rectangle of the region of interest and its cell grid.
///
/// Cells are numbered row-major starting at the origin corner:
/// `index = row * cols + col`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiGeometry {
    pub origin: Point,
    pub width: f64,
    pub height: f64,
    pub cell_size: f64,
}

impl RoiGeometry {
    pub fn new(origin: Point, width: f64, height: f64, cell_size: f64) -> Result<Self> {
        let roi = RoiGeometry {
            origin,
            width,
            height,
            cell_size,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.width) || !ok(self.height) {
            return Err(Error::BadRoi(format!(
                "width and height must be positive, got {} x {}",
                self.width, self.height
            )));
        }
        if !ok(self.cell_size) {
            return Err(Error::BadRoi(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.origin.x.is_finite() || !self.origin.y.is_finite() {
            return Err(Error::BadRoi("origin must be finite".into()));
        }
        Ok(())
    }

    /// Smallest grid-aligned rectangle holding every point, with the origin
    /// snapped down to a multiple of `cell_size`.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point>, cell_size: f64) -> Result<Self> {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        if !min.x.is_finite() {
            return Err(Error::EmptyRfm);
        }
        let origin = Point::new(
            (min.x / cell_size).floor() * cell_size,
            (min.y / cell_size).floor() * cell_size,
        );
        let span = |lo: f64, hi: f64| (snap((hi - lo) / cell_size).ceil()).max(1.0) * cell_size;
        RoiGeometry::new(
            origin,
            span(origin.x, max.x),
            span(origin.y, max.y),
            cell_size,
        )
    }

    pub fn with_cell_size(&self, cell_size: f64) -> Result<Self> {
        RoiGeometry::new(self.origin, self.width, self.height, cell_size)
    }

    pub fn cols(&self) -> usize {
        snap(self.width / self.cell_size).ceil() as usize
    }

    pub fn rows(&self) -> usize {
        snap(self.height / self.cell_size).ceil() as usize
    }

    pub fn cell_count(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            min: self.origin,
            max: Point::new(self.origin.x + self.width, self.origin.y + self.height),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.bounds().contains(p)
    }

    /// Cell holding `p`. Points on a shared edge go to the lower index.
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let col = axis_slot((p.x - self.origin.x) / self.cell_size, self.cols());
        let row = axis_slot((p.y - self.origin.y) / self.cell_size, self.rows());
        Some(row * self.cols() + col)
    }

    pub fn cell_bounds(&self, cell: usize) -> Rect {
        let cols = self.cols();
        let (row, col) = (cell / cols, cell % cols);
        let min = Point::new(
            self.origin.x + col as f64 * self.cell_size,
            self.origin.y + row as f64 * self.cell_size,
        );
        Rect {
            min,
            max: Point::new(min.x + self.cell_size, min.y + self.cell_size),
        }
    }
}

fn snap(t: f64) -> f64 {
    let r = t.round();
    if (t - r).abs() < EDGE_SNAP {
        r
    } else {
        t
    }
}

fn axis_slot(t: f64, n: usize) -> usize {
    let slot = snap(t).ceil() as i64 - 1;
    slot.clamp(0, n as i64 - 1) as usize
}

/// The reference fingerprint map.
#[derive(Clone, Debug, PartialEq)]
pub struct Rfm {
    samples: Vec<LabeledSample>,
    roi: RoiGeometry,
    feature_universe: BTreeSet<FeatureId>,
}

impl Rfm {
    pub fn new(samples: Vec<LabeledSample>, roi: RoiGeometry) -> Result<Self> {
        roi.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptyRfm);
        }
        if let Some(s) = samples.iter().find(|s| !roi.contains(&s.location)) {
            return Err(Error::OutsideRoi {
                x: s.location.x,
                y: s.location.y,
            });
        }
        let feature_universe = samples
            .iter()
            .flat_map(|s| s.fingerprint.keys().cloned())
            .collect();
        Ok(Rfm {
            samples,
            roi,
            feature_universe,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn roi(&self) -> &RoiGeometry {
        &self.roi
    }

    pub fn feature_universe(&self) -> &BTreeSet<FeatureId> {
        &self.feature_universe
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subregion {
    pub cell_index: usize,
    pub bounds: Rect,
    pub sample_indices: Vec<usize>,
    pub observable_features: BTreeSet<FeatureId>,
}

impl Subregion {
    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Partition of the RoI into cells with the samples each one holds.
#[derive(Clone, Debug, PartialEq)]
pub struct SubregionIndex {
    roi: RoiGeometry,
    cells: Vec<Subregion>,
    assignment: Vec<usize>,
}

impl SubregionIndex {
    pub fn roi(&self) -> &RoiGeometry {
        &self.roi
    }

    pub fn cells(&self) -> &[Subregion] {
        &self.cells
    }

    pub fn cell(&self, cell: usize) -> Result<&Subregion> {
        self.cells.get(cell).ok_or(Error::BadCell {
            cell,
            cells: self.cells.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell index of each sample, in sample order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn non_empty_cells(&self) -> impl Iterator<Item = &Subregion> + '_ {
        self.cells.iter().filter(|c| !c.is_empty())
    }

    pub fn non_empty_count(&self) -> usize {
        self.non_empty_cells().count()
    }

    pub fn cell_of(&self, p: &Point) -> Result<usize> {
        self.roi
            .cell_of(p)
            .ok_or(Error::OutsideRoi { x: p.x, y: p.y })
    }

    /// Observable feature set of one cell (union of its samples' keys).
    pub fn observable_features(&self, cell: usize) -> Result<&BTreeSet<FeatureId>> {
        self.cell(cell).map(|c| &c.observable_features)
    }

    /// Observable feature sets of all cells, by cell index.
    pub fn cell_keys(&self) -> Vec<&BTreeSet<FeatureId>> {
        self.cells.iter().map(|c| &c.observable_features).collect()
    }
}

/// Splits the RFM's RoI into square cells of `cell_size` and assigns each
/// sample to the cell containing it. Empty cells are kept.
pub fn partition(rfm: &Rfm, cell_size: f64) -> Result<SubregionIndex> {
    if rfm.is_empty() {
        return Err(Error::EmptyRfm);
    }
    let roi = rfm.roi().with_cell_size(cell_size)?;
    let mut cells: Vec<Subregion> = (0..roi.cell_count())
        .map(|i| Subregion {
            cell_index: i,
            bounds: roi.cell_bounds(i),
            sample_indices: Vec::new(),
            observable_features: BTreeSet::new(),
        })
        .collect();
    let mut assignment = Vec::with_capacity(rfm.len());
    for (i, sample) in rfm.samples().iter().enumerate() {
        let cell = roi.cell_of(&sample.location).ok_or(Error::OutsideRoi {
            x: sample.location.x,
            y: sample.location.y,
        })?;
        let c = &mut cells[cell];
        c.sample_indices.push(i);
        c.observable_features
            .extend(sample.fingerprint.keys().cloned());
        assignment.push(cell);
    }
    Ok(SubregionIndex {
        roi,
        cells,
        assignment,
    })
}
