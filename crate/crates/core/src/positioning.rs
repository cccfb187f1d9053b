//! Estimator primitives shared by offline feature selection and online
//! positioning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodParams;
use crate::model::Point;

/// RSS imputed for a missing feature in kNN distances.
pub const KNN_MISSING_DBM: f64 = -100.0;
pub const DEFAULT_K: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Knn,
    Map,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Knn => "knn",
            Method::Map => "map",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(Method::Knn),
            "map" => Ok(Method::Map),
            other => Err(Error::InvalidParameter(format!(
                "unknown positioning method {other:?} (expected knn or map)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositioningConfig {
    pub method: Method,
    pub k: usize,
    pub likelihood: LikelihoodParams,
}

impl Default for PositioningConfig {
    fn default() -> Self {
        PositioningConfig {
            method: Method::Knn,
            k: DEFAULT_K,
            likelihood: LikelihoodParams::default(),
        }
    }
}

impl PositioningConfig {
    pub fn with_method(method: Method) -> Self {
        PositioningConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        self.likelihood.validate()
    }
}

/// A reference location with its squared feature-space distance. `key`
/// orders equal distances (lower wins).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub sq_dist: f64,
    pub key: usize,
    pub location: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub location: Point,
    /// `(key, weight)` of each contributing reference point.
    pub weights: Vec<(usize, f64)>,
}

fn by_distance(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.sq_dist.total_cmp(&b.sq_dist).then(a.key.cmp(&b.key))
}

/// Inverse-distance weighted mean of the `k` nearest candidates. When some
/// candidates sit at distance zero, returns the plain centroid of all of
/// them instead. Reorders `candidates`.
pub fn weighted_knn(candidates: &mut [Neighbor], k: usize) -> Option<KnnResult> {
    if candidates.is_empty() || k == 0 {
        return None;
    }
    let zeros: Vec<&Neighbor> = candidates.iter().filter(|n| n.sq_dist == 0.0).collect();
    if !zeros.is_empty() {
        let mut zeros = zeros;
        zeros.sort_by_key(|n| n.key);
        let w = 1.0 / zeros.len() as f64;
        let mut loc = Point::default();
        for n in &zeros {
            loc.x += n.location.x;
            loc.y += n.location.y;
        }
        loc.x *= w;
        loc.y *= w;
        return Some(KnnResult {
            location: loc,
            weights: zeros.iter().map(|n| (n.key, w)).collect(),
        });
    }
    let k = k.min(candidates.len());
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, by_distance);
    }
    let nearest = &mut candidates[..k];
    nearest.sort_by(by_distance);
    let inv: Vec<f64> = nearest.iter().map(|n| 1.0 / n.sq_dist.sqrt()).collect();
    let total: f64 = inv.iter().sum();
    let mut loc = Point::default();
    let mut weights = Vec::with_capacity(k);
    for (n, w) in nearest.iter().zip(&inv) {
        let w = w / total;
        loc.x += w * n.location.x;
        loc.y += w * n.location.y;
        weights.push((n.key, w));
    }
    Some(KnnResult {
        location: loc,
        weights,
    })
}

/// Coordinate-wise median; the mean of the middle pair for even counts.
pub fn coordinate_median<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Point> {
    let (mut xs, mut ys): (Vec<f64>, Vec<f64>) = points.into_iter().map(|p| (p.x, p.y)).unzip();
    if xs.is_empty() {
        return None;
    }
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    Some(Point::new(median(&mut xs), median(&mut ys)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nb(sq_dist: f64, key: usize, x: f64, y: f64) -> Neighbor {
        Neighbor {
            sq_dist,
            key,
            location: Point::new(x, y),
        }
    }

    #[test]
    fn hand_weights_one_and_three() {
        let mut c = vec![nb(9.0, 1, 4.0, 0.0), nb(1.0, 0, 0.0, 0.0), nb(100.0, 2, 50.0, 50.0)];
        let r = weighted_knn(&mut c, 2).unwrap();
        assert_eq!(r.location, Point::new(1.0, 0.0));
        assert_eq!(r.weights, vec![(0, 0.75), (1, 0.25)]);
    }

    #[test]
    fn zero_distance_centroid() {
        let mut c = vec![nb(0.0, 3, 2.0, 2.0), nb(4.0, 0, 9.0, 9.0), nb(0.0, 7, 4.0, 2.0)];
        let r = weighted_knn(&mut c, 1).unwrap();
        assert_eq!(r.location, Point::new(3.0, 2.0));
    }

    #[test]
    fn equal_distances_break_on_key() {
        let mut c = vec![nb(1.0, 5, 5.0, 0.0), nb(1.0, 2, 2.0, 0.0), nb(1.0, 9, 9.0, 0.0)];
        let r = weighted_knn(&mut c, 1).unwrap();
        assert_eq!(r.location, Point::new(2.0, 0.0));
    }

    #[test]
    fn median_even_and_odd() {
        let p = [Point::new(0.0, 0.0), Point::new(2.0, 0.0)];
        assert_eq!(coordinate_median(p.iter()), Some(Point::new(1.0, 0.0)));
        let p = [Point::new(0.0, 5.0), Point::new(9.0, 1.0), Point::new(1.0, 0.0)];
        assert_eq!(coordinate_median(p.iter()), Some(Point::new(1.0, 1.0)));
        assert_eq!(coordinate_median([].iter()), None);
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex_and_estimate_is_contained(
            pts in proptest::collection::vec((0.1f64..100.0, -10.0f64..10.0, -10.0f64..10.0), 1..30),
            k in 1usize..8,
        ) {
            let mut c: Vec<_> = pts.iter().enumerate().map(|(i, &(d, x, y))| nb(d, i, x, y)).collect();
            let r = weighted_knn(&mut c, k).unwrap();
            let total: f64 = r.weights.iter().map(|w| w.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(r.weights.iter().all(|w| w.1 >= 0.0));
            // inside the bounding box of the neighbours used
            let used: Vec<Point> = r.weights.iter().map(|(key, _)| Point::new(pts[*key].1, pts[*key].2)).collect();
            let (minx, maxx) = used.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.x), a.1.max(p.x)));
            let (miny, maxy) = used.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.y), a.1.max(p.y)));
            prop_assert!(r.location.x >= minx - 1e-9 && r.location.x <= maxx + 1e-9);
            prop_assert!(r.location.y >= miny - 1e-9 && r.location.y <= maxy + 1e-9);
        }
    }
}
