//! Online positioning against a precomputed bundle.
//!
//! A query is answered in three steps: rank the subregions by MJI and keep
//! the top `m`, collect the user's features that are relevant in those
//! subregions (the top `h` by subregion frequency), then run kNN or MAP over
//! the grid points of the kept subregions using only those features.
//!
//! Grid points are identified by their global index in the bundle (cells in
//! index order, points in stored order). That index breaks every tie, so the
//! result does not depend on the order in which subregions were ranked.

use std::collections::BTreeSet;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::bundle::PrecomputedBundle;
use crate::error::{Error, Result};
use crate::likelihood::{level, LikelihoodTable, MAX_LEVEL, MIN_LEVEL};
use crate::model::{FeatureId, Fingerprint, Point};
use crate::positioning::{weighted_knn, Method, Neighbor, DEFAULT_K, KNN_MISSING_DBM};
use crate::select::SelectionProfile;
use crate::subregion::{top_m, MjiFormula, MjiScore};

const NO_SLOT: u32 = u32::MAX;
const MISSING: i8 = i8::MIN;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocateConfig {
    /// Candidate subregions kept after MJI ranking.
    pub m: usize,
    /// Candidate features kept; `None` keeps all of them.
    pub h: Option<usize>,
    pub method: Method,
    pub k: usize,
    pub formula: MjiFormula,
}

impl LocateConfig {
    pub fn new(method: Method, m: usize, h: Option<usize>) -> Self {
        LocateConfig {
            m,
            h,
            method,
            k: DEFAULT_K,
            formula: MjiFormula::Coverage,
        }
    }

    pub fn validate(&self, cells: usize) -> Result<()> {
        if self.m == 0 || self.m > cells {
            return Err(Error::BadM { m: self.m, cells });
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.h == Some(0) {
            return Err(Error::InvalidParameter("h must be positive or -1".into()));
        }
        Ok(())
    }
}

/// Top-`h` features shared by the fingerprint and the candidate subregions'
/// relevant sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateFeatureSet {
    /// Descending subregion count, ties lexicographic.
    pub features: Vec<FeatureId>,
    pub h: Option<usize>,
}

/// Ranks `counted` entries by descending count, ties ascending key, and
/// truncates to `h`.
fn rank_by_count<T: Ord + Clone>(mut counted: Vec<(T, usize)>, h: Option<usize>) -> Result<Vec<T>> {
    if counted.is_empty() {
        return Err(Error::NoCommonFeatures);
    }
    counted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(h) = h {
        counted.truncate(h);
    }
    Ok(counted.into_iter().map(|c| c.0).collect())
}

pub fn candidate_features(
    fp: &Fingerprint,
    cells: &[usize],
    profile: &SelectionProfile,
    h: Option<usize>,
) -> Result<CandidateFeatureSet> {
    if cells.is_empty() {
        return Err(Error::InvalidParameter("no candidate subregions".into()));
    }
    let sets: Vec<BTreeSet<&FeatureId>> = cells
        .iter()
        .filter_map(|c| profile.get(*c))
        .map(|s| s.features.iter().collect())
        .collect();
    let counted: Vec<(FeatureId, usize)> = fp
        .keys()
        .map(|f| (f.clone(), sets.iter().filter(|s| s.contains(f)).count()))
        .filter(|c| c.1 > 0)
        .collect();
    Ok(CandidateFeatureSet {
        features: rank_by_count(counted, h)?,
        h,
    })
}

/// Outcome of one online query.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub location: Point,
    /// No common features; the location is the top subregion's centre.
    pub fallback: bool,
    pub cells: Vec<usize>,
    /// Candidate feature indices, in rank order.
    pub features: Vec<u32>,
    pub points_scored: usize,
}

struct CellColumns {
    /// Column slot per feature index, `NO_SLOT` when the feature has no
    /// stored value in the cell.
    slot: Vec<u32>,
    /// `columns[slot][point]`, `MISSING` where absent.
    columns: Vec<Vec<i8>>,
    locations: Vec<Point>,
    ln_prior: Vec<f64>,
}

/// A bundle prepared for queries: per-cell dense value columns and the
/// likelihood table. Immutable and shareable across threads.
pub struct Locator {
    bundle: PrecomputedBundle,
    table: LikelihoodTable,
    cells: Vec<CellColumns>,
    /// Features with a stored value at some grid point.
    stored: Vec<bool>,
}

impl Locator {
    pub fn new(bundle: PrecomputedBundle) -> Result<Self> {
        let table = LikelihoodTable::new(*bundle.likelihood())?;
        let nf = bundle.features().len();
        let mut stored = vec![false; nf];
        for p in bundle.cells().iter().flat_map(|c| &c.points) {
            for &(f, _) in &p.values {
                stored[f as usize] = true;
            }
        }
        let cells = bundle
            .cells()
            .iter()
            .map(|c| {
                let mut slot = vec![NO_SLOT; nf];
                let mut columns: Vec<Vec<i8>> = Vec::new();
                for (j, p) in c.points.iter().enumerate() {
                    for &(f, v) in &p.values {
                        let s = &mut slot[f as usize];
                        if *s == NO_SLOT {
                            *s = columns.len() as u32;
                            columns.push(vec![MISSING; c.points.len()]);
                        }
                        columns[*s as usize][j] = v;
                    }
                }
                CellColumns {
                    slot,
                    columns,
                    locations: c.points.iter().map(|p| p.location).collect(),
                    ln_prior: c.points.iter().map(|p| p.prior.ln()).collect(),
                }
            })
            .collect();
        Ok(Locator {
            bundle,
            table,
            cells,
            stored,
        })
    }

    pub fn bundle(&self) -> &PrecomputedBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> PrecomputedBundle {
        self.bundle
    }

    /// MJI ranking over the bundle's subregion key sets. `user` holds the
    /// known features of a fingerprint with `user_len` features in total.
    pub fn rank_cells(&self, user: &[(u32, f64)], user_len: usize, m: usize, formula: MjiFormula) -> Result<Vec<usize>> {
        let scores = self
            .bundle
            .cells()
            .iter()
            .map(|c| {
                let common = sorted_intersection(user.iter().map(|u| u.0), c.keys.iter().copied());
                MjiScore {
                    cell_index: c.cell_index,
                    score: formula.score(common, user_len, c.keys.len()),
                }
            })
            .collect();
        Ok(top_m(scores, m)?.into_iter().map(|s| s.cell_index).collect())
    }

    /// Index form of [`candidate_features`] against the bundle's selections.
    pub fn candidates(&self, user: &[(u32, f64)], cells: &[usize], h: Option<usize>) -> Result<Vec<u32>> {
        let records = self.bundle.cells();
        let counted: Vec<(u32, usize)> = user
            .iter()
            .map(|&(f, _)| {
                let n = cells
                    .iter()
                    .filter(|&&c| records[c].selected.contains(&f))
                    .count();
                (f, n)
            })
            .filter(|c| c.1 > 0)
            .collect();
        rank_by_count(counted, h)
    }

    fn point_count(&self, cells: &[usize]) -> usize {
        cells.iter().map(|&c| self.cells[c].locations.len()).sum()
    }

    /// Adds each feature's per-point contribution into `acc`, features in
    /// ascending index order.
    fn accumulate(&self, cells: &[usize], user: &[(u32, f64)], features: &[u32], acc: &mut [f64], method: Method) {
        let mut order: Vec<(u32, f64)> = features
            .iter()
            .map(|f| {
                let i = user.binary_search_by_key(f, |u| u.0).expect("candidate is observed");
                user[i]
            })
            .collect();
        order.sort_by_key(|u| u.0);
        let map_rows: Vec<Vec<f64>> = match method {
            Method::Map => order.iter().map(|&(_, v)| self.ln_lik_by_mean(v)).collect(),
            Method::Knn => Vec::new(),
        };
        let mut base = 0;
        for &c in cells {
            let cc = &self.cells[c];
            let n = cc.locations.len();
            let out = &mut acc[base..base + n];
            for (fi, &(f, v)) in order.iter().enumerate() {
                let column = match cc.slot[f as usize] {
                    NO_SLOT => None,
                    s => Some(&cc.columns[s as usize]),
                };
                match method {
                    Method::Knn => match column {
                        Some(col) => {
                            for (o, &g) in out.iter_mut().zip(col) {
                                let g = if g == MISSING { KNN_MISSING_DBM } else { g as f64 };
                                *o += (v - g) * (v - g);
                            }
                        }
                        None => {
                            let d = (v - KNN_MISSING_DBM) * (v - KNN_MISSING_DBM);
                            out.iter_mut().for_each(|o| *o += d);
                        }
                    },
                    Method::Map => {
                        let row = &map_rows[fi];
                        let miss = self.table.ln_p_miss();
                        match column {
                            Some(col) => {
                                for (o, &g) in out.iter_mut().zip(col) {
                                    *o += if g == MISSING {
                                        miss
                                    } else {
                                        row[(g as i32 - MIN_LEVEL) as usize]
                                    };
                                }
                            }
                            None => out.iter_mut().for_each(|o| *o += miss),
                        }
                    }
                }
            }
            base += n;
        }
    }

    /// `ln p(v | mean)` for every mean level.
    fn ln_lik_by_mean(&self, v: f64) -> Vec<f64> {
        let obs = level(v);
        (MIN_LEVEL..=MAX_LEVEL)
            .map(|mean| self.table.ln_lik_levels(mean, obs))
            .collect()
    }

    fn knn_indexed(&self, user: &[(u32, f64)], features: &[u32], cells: &[usize], k: usize) -> Result<Point> {
        let n = self.point_count(cells);
        if n < k {
            return Err(Error::InsufficientCandidates {
                needed: k,
                available: n,
            });
        }
        let mut acc = vec![0.0; n];
        self.accumulate(cells, user, features, &mut acc, Method::Knn);
        let mut neighbors = Vec::with_capacity(n);
        let mut base = 0;
        for &c in cells {
            let offset = self.bundle.point_offset(c);
            for (j, loc) in self.cells[c].locations.iter().enumerate() {
                neighbors.push(Neighbor {
                    sq_dist: acc[base + j],
                    key: offset + j,
                    location: *loc,
                });
            }
            base += self.cells[c].locations.len();
        }
        Ok(weighted_knn(&mut neighbors, k).expect("non-empty").location)
    }

    fn map_indexed(&self, user: &[(u32, f64)], features: &[u32], cells: &[usize]) -> Result<Point> {
        let n = self.point_count(cells);
        if n == 0 {
            return Err(Error::InsufficientCandidates { needed: 1, available: 0 });
        }
        let mut acc = vec![0.0; n];
        let mut base = 0;
        for &c in cells {
            let p = &self.cells[c].ln_prior;
            acc[base..base + p.len()].copy_from_slice(p);
            base += p.len();
        }
        self.accumulate(cells, user, features, &mut acc, Method::Map);
        let mut best: Option<(f64, usize, Point)> = None;
        let mut base = 0;
        for &c in cells {
            let offset = self.bundle.point_offset(c);
            for (j, loc) in self.cells[c].locations.iter().enumerate() {
                let s = acc[base + j];
                let key = offset + j;
                if best.is_none_or(|(bs, bk, _)| s > bs || (s == bs && key < bk)) {
                    best = Some((s, key, *loc));
                }
            }
            base += self.cells[c].locations.len();
        }
        match best {
            Some((s, _, loc)) if s > f64::NEG_INFINITY => Ok(loc),
            _ => Err(Error::DegeneratePosterior),
        }
    }

    fn resolve(&self, candidates: &CandidateFeatureSet) -> Vec<u32> {
        candidates
            .features
            .iter()
            .filter_map(|f| self.bundle.feature_index(f))
            .collect()
    }

    /// Weighted kNN over the grid points of `cells` using the candidate
    /// features.
    pub fn knn_estimate(
        &self,
        fp: &Fingerprint,
        candidates: &CandidateFeatureSet,
        cells: &[usize],
        k: usize,
    ) -> Result<Point> {
        self.check_cells(cells)?;
        let user = self.bundle.encode(fp);
        let features = self.known_candidates(&user, candidates);
        self.knn_indexed(&user, &features, cells, k)
    }

    /// Maximum a posteriori grid point of `cells` using the candidate
    /// features.
    pub fn map_estimate(&self, fp: &Fingerprint, candidates: &CandidateFeatureSet, cells: &[usize]) -> Result<Point> {
        self.check_cells(cells)?;
        let user = self.bundle.encode(fp);
        let features = self.known_candidates(&user, candidates);
        self.map_indexed(&user, &features, cells)
    }

    fn known_candidates(&self, user: &[(u32, f64)], candidates: &CandidateFeatureSet) -> Vec<u32> {
        self.resolve(candidates)
            .into_iter()
            .filter(|f| user.binary_search_by_key(f, |u| u.0).is_ok())
            .collect()
    }

    fn check_cells(&self, cells: &[usize]) -> Result<()> {
        let n = self.cells.len();
        match cells.iter().find(|&&c| c >= n) {
            Some(&cell) => Err(Error::BadCell { cell, cells: n }),
            None => Ok(()),
        }
    }

    /// Full online query: MJI ranking, candidate features, estimation.
    pub fn online_position(&self, fp: &Fingerprint, config: &LocateConfig) -> Result<Estimate> {
        config.validate(self.cells.len())?;
        let user = self.bundle.encode(fp);
        let cells = self.rank_cells(&user, fp.len(), config.m, config.formula)?;
        let features = match self.candidates(&user, &cells, config.h) {
            Ok(f) => f,
            Err(Error::NoCommonFeatures) => {
                debug!("no common features; falling back to the centre of cell {}", cells[0]);
                return Ok(Estimate {
                    location: self.bundle.cells()[cells[0]].bounds.center(),
                    fallback: true,
                    cells,
                    features: Vec::new(),
                    points_scored: 0,
                });
            }
            Err(e) => return Err(e),
        };
        let location = match config.method {
            Method::Knn => self.knn_indexed(&user, &features, &cells, config.k)?,
            Method::Map => self.map_indexed(&user, &features, &cells)?,
        };
        Ok(Estimate {
            location,
            fallback: false,
            points_scored: self.point_count(&cells),
            cells,
            features,
        })
    }

    fn stored_features(&self, fp: &Fingerprint) -> Vec<(u32, f64)> {
        let mut user = self.bundle.encode(fp);
        user.retain(|u| self.stored[u.0 as usize]);
        user
    }

    /// Weighted kNN over every grid point with every user feature that has
    /// stored values, without subregion or feature selection.
    pub fn baseline_knn(&self, fp: &Fingerprint, k: usize) -> Result<Point> {
        let user = self.stored_features(fp);
        let mut neighbors = Vec::with_capacity(self.bundle.point_count());
        for c in self.bundle.cells() {
            let offset = self.bundle.point_offset(c.cell_index);
            for (j, p) in c.points.iter().enumerate() {
                let mut d = 0.0;
                for &(f, v) in &user {
                    let g = p.value(f).map_or(KNN_MISSING_DBM, f64::from);
                    d += (v - g) * (v - g);
                }
                neighbors.push(Neighbor {
                    sq_dist: d,
                    key: offset + j,
                    location: p.location,
                });
            }
        }
        if neighbors.len() < k {
            return Err(Error::InsufficientCandidates {
                needed: k,
                available: neighbors.len(),
            });
        }
        Ok(weighted_knn(&mut neighbors, k).expect("non-empty").location)
    }

    /// MAP over every grid point with every user feature that has stored
    /// values.
    pub fn baseline_map(&self, fp: &Fingerprint) -> Result<Point> {
        let user = self.stored_features(fp);
        let mut best: Option<(f64, Point)> = None;
        for c in self.bundle.cells() {
            for p in &c.points {
                let mut s = p.prior.ln();
                for &(f, v) in &user {
                    s += self.table.ln_lik(p.value(f).map(f64::from), Some(v));
                }
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, p.location));
                }
            }
        }
        match best {
            Some((s, loc)) if s > f64::NEG_INFINITY => Ok(loc),
            _ => Err(Error::DegeneratePosterior),
        }
    }

    pub fn baseline(&self, fp: &Fingerprint, method: Method, k: usize) -> Result<Point> {
        match method {
            Method::Knn => self.baseline_knn(fp, k),
            Method::Map => self.baseline_map(fp),
        }
    }
}

fn sorted_intersection(a: impl Iterator<Item = u32>, b: impl Iterator<Item = u32>) -> usize {
    let mut a = a.peekable();
    let mut b = b.peekable();
    let mut n = 0;
    while let (Some(&x), Some(&y)) = (a.peek(), b.peek()) {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => {
                a.next();
            }
            std::cmp::Ordering::Greater => {
                b.next();
            }
            std::cmp::Ordering::Equal => {
                n += 1;
                a.next();
                b.next();
            }
        }
    }
    n
}
