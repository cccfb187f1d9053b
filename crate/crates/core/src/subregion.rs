//! Candidate-subregion selection by modified Jaccard index (MJI).
//!
//! The default score is the fraction of a subregion's observable features
//! that the user also measured, `|U ∩ G| / |G|`. Extra user features do not
//! lower it, while a query that sees only a few of a subregion's features
//! scores low. Plain Jaccard is kept for comparison runs.

use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureId, LabeledSample, Point, SubregionIndex};

/// Flatness window used by [`choose_m`].
pub const CHOOSE_M_LOOKAHEAD: usize = 5;
pub const DEFAULT_FLATNESS_TOL: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MjiFormula {
    /// `|U ∩ G| / |G|`
    #[default]
    Coverage,
    /// `|U ∩ G| / |U ∪ G|`
    Jaccard,
}

impl MjiFormula {
    /// Score from set sizes. `user` and `cell` are the two cardinalities.
    pub fn score(self, intersection: usize, user: usize, cell: usize) -> f64 {
        match self {
            MjiFormula::Coverage => {
                if cell == 0 {
                    0.0
                } else {
                    intersection as f64 / cell as f64
                }
            }
            MjiFormula::Jaccard => {
                let union = user + cell - intersection;
                if union == 0 {
                    0.0
                } else {
                    intersection as f64 / union as f64
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MjiScore {
    pub cell_index: usize,
    pub score: f64,
}

pub fn mji(user_keys: &BTreeSet<FeatureId>, cell_keys: &BTreeSet<FeatureId>) -> f64 {
    mji_with(MjiFormula::Coverage, user_keys, cell_keys)
}

pub fn mji_with(
    formula: MjiFormula,
    user_keys: &BTreeSet<FeatureId>,
    cell_keys: &BTreeSet<FeatureId>,
) -> f64 {
    let common = user_keys.intersection(cell_keys).count();
    formula.score(common, user_keys.len(), cell_keys.len())
}

/// Orders scores by descending value, ties by ascending cell index, and
/// keeps the first `m`.
pub fn top_m(mut scores: Vec<MjiScore>, m: usize) -> Result<Vec<MjiScore>> {
    if m == 0 || m > scores.len() {
        return Err(Error::BadM {
            m,
            cells: scores.len(),
        });
    }
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.cell_index.cmp(&b.cell_index))
    });
    scores.truncate(m);
    Ok(scores)
}

pub fn score_cells(
    formula: MjiFormula,
    user_keys: &BTreeSet<FeatureId>,
    cell_keys: &[&BTreeSet<FeatureId>],
) -> Vec<MjiScore> {
    cell_keys
        .iter()
        .enumerate()
        .map(|(i, keys)| MjiScore {
            cell_index: i,
            score: mji_with(formula, user_keys, keys),
        })
        .collect()
}

/// The `m` cells with the highest MJI for `user_keys`.
pub fn rank_subregions(
    user_keys: &BTreeSet<FeatureId>,
    index: &SubregionIndex,
    m: usize,
) -> Result<Vec<usize>> {
    rank_subregions_with(MjiFormula::Coverage, user_keys, index, m)
}

pub fn rank_subregions_with(
    formula: MjiFormula,
    user_keys: &BTreeSet<FeatureId>,
    index: &SubregionIndex,
    m: usize,
) -> Result<Vec<usize>> {
    let scores = score_cells(formula, user_keys, &index.cell_keys());
    Ok(top_m(scores, m)?.into_iter().map(|s| s.cell_index).collect())
}

/// 1 when the cell holding `true_location` is among `selected`.
pub fn selection_indicator(
    true_location: &Point,
    selected: &[usize],
    index: &SubregionIndex,
) -> Result<u8> {
    let cell = index.cell_of(true_location)?;
    Ok(selected.contains(&cell) as u8)
}

/// Validation samples that count towards the loss: those whose true cell
/// holds reference data. Others are skipped with a warning.
fn usable_validation<'a>(
    validation: &'a [LabeledSample],
    index: &SubregionIndex,
) -> Result<Vec<(&'a LabeledSample, usize)>> {
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut out = Vec::with_capacity(validation.len());
    let mut skipped = 0;
    for s in validation {
        let cell = index.cell_of(&s.location)?;
        if index.cells()[cell].is_empty() {
            skipped += 1;
        } else {
            out.push((s, cell));
        }
    }
    if skipped > 0 {
        warn!("{skipped} validation samples lie in empty cells and are excluded from the loss");
    }
    if out.is_empty() {
        return Err(Error::EmptyValidation);
    }
    Ok(out)
}

/// Rank position (0-based) of each usable validation sample's true cell.
fn true_cell_ranks(
    formula: MjiFormula,
    validation: &[LabeledSample],
    index: &SubregionIndex,
) -> Result<Vec<usize>> {
    let usable = usable_validation(validation, index)?;
    let cell_keys = index.cell_keys();
    let n = index.len();
    Ok(usable
        .iter()
        .map(|(s, cell)| {
            let ranked = top_m(
                score_cells(formula, &s.fingerprint.key_set(), &cell_keys),
                n,
            )
            .expect("m = cell count is in range");
            ranked
                .iter()
                .position(|r| r.cell_index == *cell)
                .expect("every cell is ranked")
        })
        .collect())
}

/// Fraction of validation samples whose true cell is not among the top `m`.
pub fn selection_loss(validation: &[LabeledSample], index: &SubregionIndex, m: usize) -> Result<f64> {
    selection_loss_with(MjiFormula::Coverage, validation, index, m)
}

pub fn selection_loss_with(
    formula: MjiFormula,
    validation: &[LabeledSample],
    index: &SubregionIndex,
    m: usize,
) -> Result<f64> {
    if m == 0 || m > index.len() {
        return Err(Error::BadM {
            m,
            cells: index.len(),
        });
    }
    let ranks = true_cell_ranks(formula, validation, index)?;
    let hits = ranks.iter().filter(|&&r| r < m).count();
    Ok(1.0 - hits as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn max_m(&self) -> usize {
        self.points.iter().map(|p| p.0).max().unwrap_or(0)
    }

    pub fn loss_at(&self, m: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == m).map(|p| p.1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "m,loss")?;
        for (m, loss) in &self.points {
            writeln!(w, "{m},{loss}")?;
        }
        Ok(())
    }
}

/// Selection loss for m = 1..=m_max, computed from a single ranking per
/// validation sample.
pub fn loss_curve(
    formula: MjiFormula,
    validation: &[LabeledSample],
    index: &SubregionIndex,
    m_max: usize,
) -> Result<LossCurve> {
    if m_max == 0 || m_max > index.len() {
        return Err(Error::BadM {
            m: m_max,
            cells: index.len(),
        });
    }
    let ranks = true_cell_ranks(formula, validation, index)?;
    let mut hits_at = vec![0usize; m_max + 1];
    for r in ranks.iter().filter(|&&r| r < m_max) {
        hits_at[r + 1] += 1;
    }
    let total = ranks.len() as f64;
    let mut hits = 0;
    let points = (1..=m_max)
        .map(|m| {
            hits += hits_at[m];
            (m, 1.0 - hits as f64 / total)
        })
        .collect();
    Ok(LossCurve { points })
}

/// Smallest m from which the loss drops by at most `flatness_tol` over the
/// next [`CHOOSE_M_LOOKAHEAD`] steps; the largest m when none qualifies.
pub fn choose_m(curve: &LossCurve, flatness_tol: f64) -> usize {
    let max_m = curve.max_m();
    let mut pts = curve.points.clone();
    pts.sort_by_key(|p| p.0);
    for &(m, loss) in &pts {
        let ahead = (m + CHOOSE_M_LOOKAHEAD).min(max_m);
        let later = curve.loss_at(ahead).unwrap_or(loss);
        if loss - later <= flatness_tol {
            return m;
        }
    }
    max_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{partition, Fingerprint, Rfm, RoiGeometry};
    use proptest::prelude::*;

    fn keys(s: &[&str]) -> BTreeSet<FeatureId> {
        s.iter().map(|k| FeatureId::new(*k).unwrap()).collect()
    }

    #[test]
    fn mji_examples() {
        assert_eq!(mji(&keys(&["a", "b", "c"]), &keys(&["a", "b", "c"])), 1.0);
        assert_eq!(mji(&keys(&["a", "b", "c", "d"]), &keys(&["a", "b", "c"])), 1.0);
        assert_eq!(mji(&keys(&["a"]), &keys(&["a", "b", "c", "d", "e"])), 0.2);
        assert_eq!(mji(&keys(&["a"]), &keys(&[])), 0.0);
        assert_eq!(mji(&keys(&[]), &keys(&["a"])), 0.0);
    }

    #[test]
    fn plain_jaccard_penalizes_superset() {
        let j = mji_with(
            MjiFormula::Jaccard,
            &keys(&["a", "b", "c", "d"]),
            &keys(&["a", "b", "c"]),
        );
        assert_eq!(j, 0.75);
    }

    #[test]
    fn top_m_tie_break() {
        let s = vec![
            MjiScore { cell_index: 0, score: 0.1 },
            MjiScore { cell_index: 1, score: 0.9 },
            MjiScore { cell_index: 2, score: 0.9 },
        ];
        let t: Vec<_> = top_m(s.clone(), 2).unwrap().iter().map(|s| s.cell_index).collect();
        assert_eq!(t, [1, 2]);
        assert_eq!(top_m(s.clone(), 0).unwrap_err().code(), "bad-m");
        assert_eq!(top_m(s, 4).unwrap_err().code(), "bad-m");
    }

    fn toy_index() -> SubregionIndex {
        // 3 x 1 cells of 2 m: cell 0 sees {a,b}, cell 1 {b,c}, cell 2 {d}
        let roi = RoiGeometry::new(Point::default(), 6.0, 2.0, 2.0).unwrap();
        let s = |x: f64, obs: &[&str]| {
            LabeledSample::new(
                Point::new(x, 1.0),
                Fingerprint::from_raw(obs.iter().map(|k| (*k, -50.0))).unwrap(),
            )
        };
        let rfm = Rfm::new(vec![s(1.0, &["a", "b"]), s(3.0, &["b", "c"]), s(5.0, &["d"])], roi).unwrap();
        partition(&rfm, 2.0).unwrap()
    }

    #[test]
    fn unique_maximum_ranks_first() {
        let idx = toy_index();
        assert_eq!(rank_subregions(&keys(&["d"]), &idx, 1).unwrap(), [2]);
        let all = rank_subregions(&keys(&["b", "c"]), &idx, 3).unwrap();
        assert_eq!(all, [1, 0, 2]);
    }

    #[test]
    fn indicator_and_loss() {
        let idx = toy_index();
        let p = Point::new(3.0 + 0.5, 1.0);
        assert_eq!(selection_indicator(&p, &[1, 2], &idx).unwrap(), 1);
        assert_eq!(selection_indicator(&p, &[2], &idx).unwrap(), 0);
        assert_eq!(selection_indicator(&p, &[0, 1, 2], &idx).unwrap(), 1);
        assert_eq!(
            selection_indicator(&Point::new(7.0, 1.0), &[0], &idx)
                .unwrap_err()
                .code(),
            "outside-roi"
        );
        assert_eq!(selection_loss(&[], &idx, 1).unwrap_err().code(), "empty-validation");
    }

    #[test]
    fn disjoint_validation_follows_index_order() {
        // every validation fingerprint sees only "z": all MJI are 0, so the
        // ranking is 0, 1, 2 and a sample in cell c is hit iff c < m
        let idx = toy_index();
        let v = |x: f64| {
            LabeledSample::new(Point::new(x, 1.0), Fingerprint::from_raw([("z", -50.0)]).unwrap())
        };
        let val = vec![v(1.0), v(3.0), v(5.0), v(5.5)];
        assert_eq!(selection_loss(&val, &idx, 1).unwrap(), 0.75);
        assert_eq!(selection_loss(&val, &idx, 2).unwrap(), 0.5);
        assert_eq!(selection_loss(&val, &idx, 3).unwrap(), 0.0);
        let curve = loss_curve(MjiFormula::Coverage, &val, &idx, 3).unwrap();
        assert_eq!(curve.points, vec![(1, 0.75), (2, 0.5), (3, 0.0)]);
    }

    fn curve(f: impl Fn(usize) -> f64, n: usize) -> LossCurve {
        LossCurve {
            points: (1..=n).map(|m| (m, f(m))).collect(),
        }
    }

    #[test]
    fn choose_m_examples() {
        assert_eq!(choose_m(&curve(|_| 0.3, 20), 0.01), 1);
        let c = curve(|m| (0.5 - 0.1 * m as f64).max(0.0), 20);
        assert_eq!(choose_m(&c, 0.01), 5);
        // a steadily falling curve never flattens
        let c = curve(|m| 1.0 - m as f64 / 10.0, 10);
        assert_eq!(choose_m(&c, 0.01), 10);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        curve(|m| 1.0 / m as f64, 2).write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "m,loss\n1,1\n2,0.5\n");
    }

    proptest! {
        #[test]
        fn mji_bounds(u in proptest::collection::btree_set(0u8..20, 0..12),
                      g in proptest::collection::btree_set(0u8..20, 0..12)) {
            let to = |s: &BTreeSet<u8>| s.iter().map(|i| FeatureId::new(format!("f{i}")).unwrap()).collect::<BTreeSet<_>>();
            let (u, g) = (to(&u), to(&g));
            for f in [MjiFormula::Coverage, MjiFormula::Jaccard] {
                let v = mji_with(f, &u, &g);
                prop_assert!((0.0..=1.0).contains(&v));
                if u.is_disjoint(&g) { prop_assert_eq!(v, 0.0); }
                if !g.is_empty() { prop_assert_eq!(mji_with(f, &g, &g), 1.0); }
            }
            if !g.is_empty() {
                prop_assert_eq!(mji(&u, &g) == 1.0, g.is_subset(&u));
            }
        }
    }
}
