//! Mean squared positioning error of a feature subset over a validation set,
//! with positions estimated from a set of reference points.

use crate::error::{Error, Result};
use crate::likelihood::{level, LikelihoodTable};
use crate::model::{FeatureId, LabeledSample, Point};
use crate::positioning::{coordinate_median, weighted_knn, Method, Neighbor, PositioningConfig, KNN_MISSING_DBM};
use crate::select::search::SubsetLoss;

const MISSING: i32 = i32::MIN;

/// Loss over subsets of a fixed candidate list.
///
/// Per-feature contributions are additive over (validation, reference)
/// pairs: squared RSS differences for kNN, log-likelihoods for MAP. The sum
/// for the most recent base subset is cached so greedy steps cost one column
/// each.
pub struct PositioningLoss {
    method: Method,
    k: usize,
    table: Option<LikelihoodTable>,
    ref_locs: Vec<Point>,
    val_locs: Vec<Point>,
    /// `[feature][reference]`, dBm level or MISSING
    ref_vals: Vec<Vec<i32>>,
    /// `[feature][validation]`
    val_vals: Vec<Vec<i32>>,
    median: Point,
    cache_base: Option<Vec<usize>>,
    cache: Vec<f64>,
    scratch: Vec<f64>,
    neighbors: Vec<Neighbor>,
}

impl PositioningLoss {
    pub fn new(
        candidates: &[FeatureId],
        config: &PositioningConfig,
        validation: &[LabeledSample],
        reference: &[LabeledSample],
    ) -> Result<Self> {
        config.validate()?;
        if validation.is_empty() {
            return Err(Error::EmptyValidation);
        }
        let median = coordinate_median(reference.iter().map(|s| &s.location)).ok_or(Error::EmptyRfm)?;
        let column = |samples: &[LabeledSample], f: &FeatureId| -> Vec<i32> {
            samples
                .iter()
                .map(|s| s.fingerprint.get(f).map_or(MISSING, level))
                .collect()
        };
        let table = match config.method {
            Method::Map => Some(LikelihoodTable::new(config.likelihood)?),
            Method::Knn => None,
        };
        let pairs = validation.len() * reference.len();
        Ok(PositioningLoss {
            method: config.method,
            k: config.k,
            table,
            ref_locs: reference.iter().map(|s| s.location).collect(),
            val_locs: validation.iter().map(|s| s.location).collect(),
            ref_vals: candidates.iter().map(|f| column(reference, f)).collect(),
            val_vals: candidates.iter().map(|f| column(validation, f)).collect(),
            median,
            cache_base: None,
            cache: vec![0.0; pairs],
            scratch: vec![0.0; pairs],
            neighbors: Vec::with_capacity(reference.len()),
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.ref_vals.len()
    }

    /// Loss of the constant median estimate.
    pub fn initial_loss(&self) -> f64 {
        self.val_locs
            .iter()
            .map(|l| l.distance_sq(&self.median))
            .sum::<f64>()
            / self.val_locs.len() as f64
    }

    fn contribution(&self, feature: usize, v: usize, r: usize) -> f64 {
        let a = self.val_vals[feature][v];
        let b = self.ref_vals[feature][r];
        match self.method {
            Method::Knn => {
                let a = if a == MISSING { KNN_MISSING_DBM } else { a as f64 };
                let b = if b == MISSING { KNN_MISSING_DBM } else { b as f64 };
                (a - b) * (a - b)
            }
            Method::Map => {
                let t = self.table.as_ref().expect("MAP loss has a table");
                if a == MISSING || b == MISSING {
                    t.ln_p_miss()
                } else {
                    t.ln_lik_levels(b, a)
                }
            }
        }
    }

    fn accumulate(&self, out: &mut [f64], feature: usize, sign: f64) {
        let nr = self.ref_locs.len();
        for v in 0..self.val_locs.len() {
            let row = &mut out[v * nr..(v + 1) * nr];
            for (r, cell) in row.iter_mut().enumerate() {
                *cell += sign * self.contribution(feature, v, r);
            }
        }
    }

    fn sums_for(&self, subset: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|c| *c = 0.0);
        for &f in subset {
            self.accumulate(out, f, 1.0);
        }
    }

    fn ensure_base(&mut self, base: &[usize]) {
        if self.cache_base.as_deref() == Some(base) {
            return;
        }
        let mut cache = std::mem::take(&mut self.cache);
        self.sums_for(base, &mut cache);
        self.cache = cache;
        self.cache_base = Some(base.to_vec());
    }

    fn mse_from_sums(&mut self, sums: &[f64], empty: bool) -> f64 {
        if empty {
            return self.initial_loss();
        }
        let nr = self.ref_locs.len();
        let mut total = 0.0;
        for (v, truth) in self.val_locs.iter().enumerate() {
            let row = &sums[v * nr..(v + 1) * nr];
            let est = match self.method {
                Method::Knn => {
                    self.neighbors.clear();
                    self.neighbors
                        .extend(row.iter().zip(&self.ref_locs).enumerate().map(|(r, (&d, &loc))| Neighbor {
                            sq_dist: d,
                            key: r,
                            location: loc,
                        }));
                    weighted_knn(&mut self.neighbors, self.k)
                        .map(|k| k.location)
                        .unwrap_or(self.median)
                }
                Method::Map => {
                    let mut best: Option<(usize, f64)> = None;
                    for (r, &s) in row.iter().enumerate() {
                        if best.is_none_or(|(_, b)| s > b) {
                            best = Some((r, s));
                        }
                    }
                    match best {
                        Some((r, s)) if s > f64::NEG_INFINITY => self.ref_locs[r],
                        _ => self.median,
                    }
                }
            };
            total += est.distance_sq(truth);
        }
        total / self.val_locs.len() as f64
    }
}

impl SubsetLoss for PositioningLoss {
    fn loss(&mut self, subset: &[usize]) -> f64 {
        let mut scratch = std::mem::take(&mut self.scratch);
        self.sums_for(subset, &mut scratch);
        let l = self.mse_from_sums(&scratch, subset.is_empty());
        self.scratch = scratch;
        l
    }

    fn loss_with_added(&mut self, base: &[usize], extra: usize) -> f64 {
        self.ensure_base(base);
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.copy_from_slice(&self.cache);
        self.accumulate(&mut scratch, extra, 1.0);
        let l = self.mse_from_sums(&scratch, false);
        self.scratch = scratch;
        l
    }

    fn loss_with_removed(&mut self, base: &[usize], removed: usize) -> f64 {
        let rest: Vec<usize> = base.iter().copied().filter(|&i| i != removed).collect();
        if self.method == Method::Map {
            // log-likelihood sums do not subtract exactly
            return self.loss(&rest);
        }
        self.ensure_base(base);
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.copy_from_slice(&self.cache);
        self.accumulate(&mut scratch, removed, -1.0);
        let l = self.mse_from_sums(&scratch, rest.is_empty());
        self.scratch = scratch;
        l
    }
}

/// MSE of positions estimated from `reference` using only `features`.
/// The empty set uses the coordinate-wise median of the reference
/// locations as a constant estimate.
pub fn fs_loss(
    features: &[FeatureId],
    config: &PositioningConfig,
    validation: &[LabeledSample],
    reference: &[LabeledSample],
) -> Result<f64> {
    let mut loss = PositioningLoss::new(features, config, validation, reference)?;
    let all: Vec<usize> = (0..features.len()).collect();
    Ok(loss.loss(&all))
}
