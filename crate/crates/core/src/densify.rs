//! Kernel-smoothing interpolation of the raw RFM onto a regular lattice
//! inside every non-empty subregion.
//!
//! Each grid value is a Nadaraya–Watson estimate: a kernel-weighted mean of
//! the raw samples that observe the feature within `3 * length_scale` of the
//! grid point. Samples that do not observe a feature contribute nothing to
//! its estimate. Results are rounded to whole dBm and anything that rounds to
//! the floor is dropped as non-measurable.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    partition, FeatureId, Fingerprint, LabeledSample, Point, Rfm, RoiGeometry, SubregionIndex,
    RSS_FLOOR_DBM,
};

pub const DEFAULT_SPACING: f64 = 0.2;
pub const DEFAULT_LENGTH_SCALE: f64 = 1.0;
/// Support radius in units of the length scale.
pub const SUPPORT_RADIUS: f64 = 3.0;

/// Matérn kernel family by smoothness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matern {
    OneHalf,
    ThreeHalves,
    #[default]
    FiveHalves,
}

impl Matern {
    pub fn weight(self, distance: f64, length_scale: f64) -> f64 {
        let r = distance / length_scale;
        match self {
            Matern::OneHalf => (-r).exp(),
            Matern::ThreeHalves => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            Matern::FiveHalves => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    pub spacing: f64,
    pub length_scale: f64,
    #[serde(default)]
    pub kernel: Matern,
}

impl Default for DensifyParams {
    fn default() -> Self {
        DensifyParams {
            spacing: DEFAULT_SPACING,
            length_scale: DEFAULT_LENGTH_SCALE,
            kernel: Matern::FiveHalves,
        }
    }
}

impl DensifyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub cell: usize,
    pub location: Point,
    pub fingerprint: Fingerprint,
}

/// The densified map. Points are ordered by cell, then row-major inside the
/// cell lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedRfm {
    grid_spacing: f64,
    roi: RoiGeometry,
    points: Vec<GridPoint>,
    alpha: usize,
}

impl GriddedRfm {
    pub fn grid_spacing(&self) -> f64 {
        self.grid_spacing
    }

    /// Cell-tiled RoI (the raw RoI extended to whole cells).
    pub fn roi(&self) -> &RoiGeometry {
        &self.roi
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    /// Grid points per non-empty subregion.
    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn points_in_cell(&self, cell: usize) -> impl Iterator<Item = &GridPoint> + '_ {
        self.points.iter().filter(move |p| p.cell == cell)
    }

    pub fn to_samples(&self) -> Vec<LabeledSample> {
        self.points
            .iter()
            .map(|p| LabeledSample::new(p.location, p.fingerprint.clone()))
            .collect()
    }

    pub fn to_rfm(&self) -> Result<Rfm> {
        Rfm::new(self.to_samples(), self.roi)
    }

    /// Partition of the gridded map; cell numbering matches the raw partition.
    pub fn partition(&self) -> Result<SubregionIndex> {
        partition(&self.to_rfm()?, self.roi.cell_size)
    }
}

/// Lattice points per cell axis.
pub fn points_per_axis(cell_size: f64, spacing: f64) -> usize {
    let t = cell_size / spacing;
    let r = t.round();
    let n = if (t - r).abs() < 1e-9 { r } else { t.floor() };
    (n as usize).max(1)
}

/// Lattice locations inside one cell, row-major, offset half a pitch from
/// the cell edges.
pub fn cell_lattice(roi: &RoiGeometry, cell: usize, spacing: f64) -> Vec<Point> {
    let n = points_per_axis(roi.cell_size, spacing);
    let b = roi.cell_bounds(cell);
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            out.push(Point::new(
                b.min.x + (col as f64 + 0.5) * spacing,
                b.min.y + (row as f64 + 0.5) * spacing,
            ));
        }
    }
    out
}

struct SampleBuckets<'a> {
    origin: Point,
    size: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<&'a LabeledSample>>,
}

impl<'a> SampleBuckets<'a> {
    fn new(samples: &'a [LabeledSample], roi: &RoiGeometry, size: f64) -> Self {
        let cols = ((roi.width / size).ceil() as usize).max(1);
        let rows = ((roi.height / size).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut b = SampleBuckets {
            origin: roi.origin,
            size,
            cols,
            rows,
            buckets: Vec::new(),
        };
        for s in samples {
            let (c, r) = b.slot(&s.location);
            buckets[r * cols + c].push(s);
        }
        b.buckets = buckets;
        b
    }

    fn slot(&self, p: &Point) -> (usize, usize) {
        let c = ((p.x - self.origin.x) / self.size).floor() as i64;
        let r = ((p.y - self.origin.y) / self.size).floor() as i64;
        (
            c.clamp(0, self.cols as i64 - 1) as usize,
            r.clamp(0, self.rows as i64 - 1) as usize,
        )
    }

    fn near(&self, p: &Point) -> impl Iterator<Item = &'a LabeledSample> + '_ {
        let (c, r) = self.slot(p);
        let c0 = c.saturating_sub(1);
        let r0 = r.saturating_sub(1);
        let c1 = (c + 1).min(self.cols - 1);
        let r1 = (r + 1).min(self.rows - 1);
        (r0..=r1).flat_map(move |row| {
            (c0..=c1).flat_map(move |col| self.buckets[row * self.cols + col].iter().copied())
        })
    }
}

/// Densifies the raw map onto the lattice of every non-empty cell of
/// `index`.
pub fn densify(rfm: &Rfm, index: &SubregionIndex, params: &DensifyParams) -> Result<GriddedRfm> {
    params.validate()?;
    if rfm.is_empty() {
        return Err(Error::EmptyRfm);
    }
    let cell_roi = index.roi();
    let roi = RoiGeometry::new(
        cell_roi.origin,
        cell_roi.cols() as f64 * cell_roi.cell_size,
        cell_roi.rows() as f64 * cell_roi.cell_size,
        cell_roi.cell_size,
    )?;
    let alpha = points_per_axis(roi.cell_size, params.spacing).pow(2);
    let sites: Vec<(usize, Point)> = index
        .non_empty_cells()
        .flat_map(|c| {
            cell_lattice(&roi, c.cell_index, params.spacing)
                .into_iter()
                .map(move |p| (c.cell_index, p))
        })
        .collect();
    if sites.is_empty() {
        return Err(Error::EmptyRfm);
    }

    let features: Vec<&FeatureId> = rfm.feature_universe().iter().collect();
    let feature_pos: BTreeMap<&FeatureId, usize> =
        features.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let radius = SUPPORT_RADIUS * params.length_scale;
    let buckets = SampleBuckets::new(rfm.samples(), rfm.roi(), radius);

    let points = sites
        .par_iter()
        .map(|&(cell, location)| {
            let mut acc = vec![(0.0f64, 0.0f64); features.len()];
            let mut touched = Vec::new();
            for s in buckets.near(&location) {
                let d = location.distance(&s.location);
                if d > radius {
                    continue;
                }
                let w = params.kernel.weight(d, params.length_scale);
                for (f, v) in s.fingerprint.iter() {
                    let i = feature_pos[f];
                    if acc[i].1 == 0.0 {
                        touched.push(i);
                    }
                    acc[i].0 += w * v;
                    acc[i].1 += w;
                }
            }
            touched.sort_unstable();
            let mut obs = BTreeMap::new();
            for i in touched {
                let (num, den) = acc[i];
                // round() is half-away-from-zero
                let value = (num / den).round().min(0.0);
                if value > RSS_FLOOR_DBM {
                    obs.insert(features[i].clone(), value);
                }
            }
            let fingerprint = Fingerprint::new(obs).expect("interpolated values are in range");
            GridPoint {
                cell,
                location,
                fingerprint,
            }
        })
        .collect();

    Ok(GriddedRfm {
        grid_spacing: params.spacing,
        roi,
        points,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::partition;

    fn sample(x: f64, y: f64, obs: &[(&str, f64)]) -> LabeledSample {
        LabeledSample::new(
            Point::new(x, y),
            Fingerprint::from_raw(obs.iter().map(|&(k, v)| (k, v))).unwrap(),
        )
    }

    fn run(samples: Vec<LabeledSample>, w: f64, h: f64) -> GriddedRfm {
        let roi = RoiGeometry::new(Point::default(), w, h, 2.0).unwrap();
        let rfm = Rfm::new(samples, roi).unwrap();
        let idx = partition(&rfm, 2.0).unwrap();
        densify(&rfm, &idx, &DensifyParams::default()).unwrap()
    }

    fn value(p: &GridPoint, f: &str) -> Option<f64> {
        p.fingerprint.get(&FeatureId::new(f).unwrap())
    }

    #[test]
    fn matern_weights() {
        assert_eq!(Matern::FiveHalves.weight(0.0, 1.0), 1.0);
        // (1 + s + s^2/3) e^-s with s = sqrt(5)
        let s = 5f64.sqrt();
        let expect = (1.0 + s + 5.0 / 3.0) * (-s).exp();
        assert!((Matern::FiveHalves.weight(1.0, 1.0) - expect).abs() < 1e-15);
        assert!(Matern::ThreeHalves.weight(2.0, 1.0) < Matern::ThreeHalves.weight(1.0, 1.0));
    }

    #[test]
    fn single_sample_spreads_its_value() {
        let g = run(vec![sample(1.0, 1.0, &[("a", -60.0)])], 2.0, 2.0);
        assert_eq!(g.points().len(), 100);
        assert_eq!(g.alpha(), 100);
        for p in g.points() {
            assert_eq!(value(p, "a"), Some(-60.0));
        }
    }

    #[test]
    fn symmetric_pair_averages() {
        // grid point (0.9, 0.9) is equidistant from both samples
        let g = run(
            vec![sample(0.4, 0.9, &[("a", -50.0)]), sample(1.4, 0.9, &[("a", -70.0)])],
            2.0,
            2.0,
        );
        let p = g
            .points()
            .iter()
            .find(|p| (p.location.x - 0.9).abs() < 1e-9 && (p.location.y - 0.9).abs() < 1e-9)
            .unwrap();
        assert_eq!(value(p, "a"), Some(-60.0));
    }

    #[test]
    fn density_is_25_points_per_square_metre() {
        let g = run(vec![sample(1.0, 1.0, &[("a", -60.0)])], 2.0, 2.0);
        assert_eq!(g.alpha() as f64 / 4.0, 25.0);
    }

    #[test]
    fn feature_absent_beyond_support_radius() {
        // 8 m wide, sample in cell 0 and another far away in cell 3
        let g = run(
            vec![sample(0.5, 1.0, &[("a", -60.0)]), sample(7.5, 1.0, &[("b", -60.0)])],
            8.0,
            2.0,
        );
        for p in g.points_in_cell(0) {
            assert!(value(p, "b").is_none());
        }
        for p in g.points_in_cell(3) {
            assert!(value(p, "a").is_none());
        }
        // empty cells 1 and 2 get no lattice
        assert_eq!(g.points_in_cell(1).count(), 0);
        assert_eq!(g.points().len(), 200);
    }

    #[test]
    fn values_rounding_to_floor_are_dropped() {
        let g = run(vec![sample(1.0, 1.0, &[("a", -99.6)])], 2.0, 2.0);
        assert!(g.points().iter().all(|p| p.fingerprint.is_empty()));
    }

    #[test]
    fn non_integer_ratio_floors_lattice() {
        assert_eq!(points_per_axis(2.0, 0.2), 10);
        assert_eq!(points_per_axis(2.0, 0.3), 6);
        assert_eq!(points_per_axis(0.6, 0.2), 3);
    }

    #[test]
    fn rejects_bad_params() {
        let roi = RoiGeometry::new(Point::default(), 2.0, 2.0, 2.0).unwrap();
        let rfm = Rfm::new(vec![sample(1.0, 1.0, &[("a", -60.0)])], roi).unwrap();
        let idx = partition(&rfm, 2.0).unwrap();
        let bad = DensifyParams {
            spacing: 0.0,
            ..Default::default()
        };
        assert!(densify(&rfm, &idx, &bad).is_err());
    }
}
