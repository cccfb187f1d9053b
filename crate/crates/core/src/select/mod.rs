//! Offline selection of relevant features per subregion.
//!
//! Three searches minimize the positioning MSE of a cell's validation
//! points: forward greedy, backward greedy and adaptive forward-backward
//! greedy (FoBa). The loss is evaluated with the same estimator that will be
//! used online.

mod loss;
mod search;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{fs_loss, PositioningLoss};
pub use search::{
    backward_search, foba_search, foba_step_bound, forward_search, FobaIteration, SearchOutcome,
    SubsetLoss,
};

use crate::densify::GriddedRfm;
use crate::error::{Error, Result};
use crate::model::{FeatureId, LabeledSample, SubregionIndex};
use crate::positioning::PositioningConfig;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_NU: f64 = 0.5;
pub const DEFAULT_K_MAX: usize = 30;
pub const DEFAULT_PHI: f64 = 0.05;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    /// No selection: every observable feature of the cell.
    All,
    Forward,
    Backward,
    #[default]
    Foba,
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorKind::All => "all",
            SelectorKind::Forward => "forward",
            SelectorKind::Backward => "backward",
            SelectorKind::Foba => "foba",
        })
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" | "none" => Ok(SelectorKind::All),
            "forward" => Ok(SelectorKind::Forward),
            "backward" => Ok(SelectorKind::Backward),
            "foba" => Ok(SelectorKind::Foba),
            other => Err(Error::InvalidParameter(format!(
                "unknown selector {other:?} (expected foba, forward, backward or all)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    /// Minimum loss reduction for a forward step (m²).
    pub epsilon: f64,
    /// Backward tolerance relative to the forward gain.
    pub nu: f64,
    /// Forward feature cap.
    pub k_max: usize,
    /// Backward feature floor.
    pub k_min: usize,
    /// Maximum loss increase of a backward removal (m²).
    pub phi: f64,
    pub positioning: PositioningConfig,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            kind: SelectorKind::Foba,
            epsilon: DEFAULT_EPSILON,
            nu: DEFAULT_NU,
            k_max: DEFAULT_K_MAX,
            k_min: 1,
            phi: DEFAULT_PHI,
            positioning: PositioningConfig::default(),
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return bad(format!("nu must lie in (0, 1), got {}", self.nu));
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        if self.phi.is_nan() || self.phi <= 0.0 {
            return bad(format!("phi must be positive, got {}", self.phi));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        self.positioning.validate()
    }
}

/// Selected features of one cell, in selection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubset {
    pub cell_index: usize,
    pub features: Vec<FeatureId>,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

/// Everything one cell's selection needs.
#[derive(Clone, Debug, PartialEq)]
pub struct CellData {
    pub cell_index: usize,
    /// Observable features of the cell, ascending.
    pub candidates: Vec<FeatureId>,
    pub reference: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
}

impl CellData {
    fn loss(&self, config: &SelectorConfig) -> Result<PositioningLoss> {
        PositioningLoss::new(
            &self.candidates,
            &config.positioning,
            &self.validation,
            &self.reference,
        )
    }

    fn subset(&self, outcome: SearchOutcome) -> FeatureSubset {
        FeatureSubset {
            cell_index: self.cell_index,
            features: outcome
                .selected
                .iter()
                .map(|&i| self.candidates[i].clone())
                .collect(),
            final_loss: outcome.loss,
            initial_loss: outcome.initial_loss,
            iterations: outcome.iterations,
        }
    }
}

/// Splits every non-empty cell's grid points into reference and validation
/// parts with a seeded shuffle.
pub fn split_cells(gridded: &GriddedRfm, fraction: f64, seed: u64) -> Result<Vec<CellData>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_cell: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
    for p in gridded.points() {
        by_cell
            .entry(p.cell)
            .or_default()
            .push(LabeledSample::new(p.location, p.fingerprint.clone()));
    }
    Ok(by_cell
        .into_iter()
        .map(|(cell, mut pts)| {
            let candidates: BTreeSet<FeatureId> = pts
                .iter()
                .flat_map(|s| s.fingerprint.keys().cloned())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            pts.shuffle(&mut rng);
            let n = pts.len();
            let (reference, validation) = if n < 2 {
                (pts.clone(), pts)
            } else {
                let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
                let val = pts.split_off(n - n_val);
                (pts, val)
            };
            CellData {
                cell_index: cell,
                candidates: candidates.into_iter().collect(),
                reference,
                validation,
            }
        })
        .collect())
}

pub fn forward_greedy(cell: &CellData, config: &SelectorConfig) -> Result<FeatureSubset> {
    let mut loss = cell.loss(config)?;
    let n = loss.candidate_count();
    Ok(cell.subset(forward_search(n, &mut loss, config.epsilon, config.k_max)))
}

pub fn backward_greedy(cell: &CellData, config: &SelectorConfig) -> Result<FeatureSubset> {
    let mut loss = cell.loss(config)?;
    let n = loss.candidate_count();
    Ok(cell.subset(backward_search(n, &mut loss, config.phi, config.k_min)))
}

pub fn foba(cell: &CellData, config: &SelectorConfig) -> Result<FeatureSubset> {
    let mut loss = cell.loss(config)?;
    let n = loss.candidate_count();
    Ok(cell.subset(foba_search(n, &mut loss, config.epsilon, config.nu)))
}

/// Keeps every candidate; the loss is still evaluated for reporting.
pub fn all_features(cell: &CellData, config: &SelectorConfig) -> Result<FeatureSubset> {
    let mut loss = cell.loss(config)?;
    let all: Vec<usize> = (0..loss.candidate_count()).collect();
    let outcome = SearchOutcome {
        loss: loss.loss(&all),
        initial_loss: loss.initial_loss(),
        selected: all,
        iterations: 0,
        trace: Vec::new(),
    };
    Ok(cell.subset(outcome))
}

pub fn select_cell(cell: &CellData, config: &SelectorConfig) -> Result<FeatureSubset> {
    match config.kind {
        SelectorKind::All => all_features(cell, config),
        SelectorKind::Forward => forward_greedy(cell, config),
        SelectorKind::Backward => backward_greedy(cell, config),
        SelectorKind::Foba => foba(cell, config),
    }
}

/// Relevant features of every non-empty cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionProfile {
    pub config: SelectorConfig,
    pub cells: BTreeMap<usize, FeatureSubset>,
}

impl SelectionProfile {
    pub fn get(&self, cell: usize) -> Option<&FeatureSubset> {
        self.cells.get(&cell)
    }

    /// Checks that every non-empty cell of `index` has an entry.
    pub fn covers(&self, index: &SubregionIndex) -> bool {
        index
            .non_empty_cells()
            .all(|c| self.cells.contains_key(&c.cell_index))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("profile serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Runs the configured selector on every cell, in parallel.
pub fn build_profile(cells: &[CellData], config: &SelectorConfig) -> Result<SelectionProfile> {
    config.validate()?;
    if cells.is_empty() {
        return Err(Error::EmptyRfm);
    }
    let subsets = cells
        .par_iter()
        .map(|c| select_cell(c, config).map_err(|e| Error::in_cell(c.cell_index, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionProfile {
        config: *config,
        cells: subsets.into_iter().map(|s| (s.cell_index, s)).collect(),
    })
}
