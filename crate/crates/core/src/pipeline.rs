//! The offline stage end to end: densify, partition, choose m, select
//! features per subregion and assemble the bundle.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, BundlePoint, CellRecord, PrecomputedBundle};
use crate::densify::{densify, DensifyParams, GriddedRfm};
use crate::error::{Error, Result};
use crate::likelihood::level;
use crate::model::{partition, FeatureId, LabeledSample, Rfm, SubregionIndex, DEFAULT_CELL_SIZE};
use crate::select::{build_profile, split_cells, SelectionProfile, SelectorConfig};
use crate::subregion::{choose_m, loss_curve, LossCurve, MjiFormula, DEFAULT_FLATNESS_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeConfig {
    pub cell_size: f64,
    pub densify: DensifyParams,
    pub selector: SelectorConfig,
    pub choose_m: bool,
    pub flatness_tol: f64,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        PrecomputeConfig {
            cell_size: DEFAULT_CELL_SIZE,
            densify: DensifyParams::default(),
            selector: SelectorConfig::default(),
            choose_m: true,
            flatness_tol: DEFAULT_FLATNESS_TOL,
        }
    }
}

impl PrecomputeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("cell size must be positive, got {}", self.cell_size)));
        }
        if self.flatness_tol.is_nan() || self.flatness_tol <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "flatness tolerance must be positive, got {}",
                self.flatness_tol
            )));
        }
        self.densify.validate()?;
        self.selector.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeSummary {
    pub cells: usize,
    pub non_empty_cells: usize,
    pub alpha: usize,
    pub features: usize,
    pub selected_counts: BTreeMap<usize, usize>,
    pub chosen_m: Option<usize>,
    pub loss_curve: Option<LossCurve>,
}

pub struct Precomputed {
    pub bundle: PrecomputedBundle,
    pub gridded: GriddedRfm,
    /// Partition of the raw map; its key sets drive MJI ranking.
    pub index: SubregionIndex,
    pub profile: SelectionProfile,
    pub summary: PrecomputeSummary,
}

/// Partitions `rfm` and densifies it onto the lattice of every non-empty
/// cell. Returns the gridded map and the raw partition.
pub fn densify_rfm(rfm: &Rfm, cell_size: f64, params: &DensifyParams) -> Result<(GriddedRfm, SubregionIndex)> {
    let index = partition(rfm, cell_size)?;
    let gridded = densify(rfm, &index, params)?;
    Ok((gridded, index))
}

/// Runs the offline stage. `validation` feeds the subregion loss curve used
/// to choose m; the raw map's samples are used when it is `None`.
///
/// Subregion key sets come from the raw samples in each cell. Densification
/// spreads every feature up to the kernel support radius, which inflates the
/// key sets of interior cells and biases MJI towards the RoI border.
pub fn precompute(rfm: &Rfm, config: &PrecomputeConfig, validation: Option<&[LabeledSample]>) -> Result<Precomputed> {
    config.validate()?;
    let (gridded, index) = densify_rfm(rfm, config.cell_size, &config.densify)?;
    info!(
        "densified {} samples onto {} grid points ({} per cell)",
        rfm.len(),
        gridded.points().len(),
        gridded.alpha()
    );
    let (curve, chosen_m) = if config.choose_m {
        let val = validation.unwrap_or(rfm.samples());
        let curve = loss_curve(MjiFormula::Coverage, val, &index, index.len())?;
        let m = choose_m(&curve, config.flatness_tol);
        info!("chose m = {m} of {} cells", index.len());
        (Some(curve), Some(m))
    } else {
        (None, None)
    };
    let cells = split_cells(&gridded, config.selector.validation_fraction, config.selector.seed)?;
    let profile = build_profile(&cells, &config.selector)?;
    let bundle = assemble_bundle(&gridded, &index, &profile, config, chosen_m)?;
    let summary = PrecomputeSummary {
        cells: index.len(),
        non_empty_cells: index.non_empty_count(),
        alpha: gridded.alpha(),
        features: bundle.features().len(),
        selected_counts: profile.cells.iter().map(|(c, s)| (*c, s.features.len())).collect(),
        chosen_m,
        loss_curve: curve,
    };
    Ok(Precomputed {
        bundle,
        gridded,
        index,
        profile,
        summary,
    })
}

/// Packs the gridded map and profile into a bundle. Subregion key sets come
/// from `index`; grid points keep values for every feature selected in at
/// least one subregion.
pub fn assemble_bundle(
    gridded: &GriddedRfm,
    index: &SubregionIndex,
    profile: &SelectionProfile,
    config: &PrecomputeConfig,
    chosen_m: Option<usize>,
) -> Result<PrecomputedBundle> {
    if !profile.covers(index) {
        return Err(Error::InvalidParameter("selection profile misses a non-empty subregion".into()));
    }
    let features: Vec<FeatureId> = index
        .cells()
        .iter()
        .flat_map(|c| c.observable_features.iter())
        .chain(gridded.points().iter().flat_map(|p| p.fingerprint.keys()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |f: &FeatureId| features.binary_search(f).expect("feature in universe") as u32;
    let kept: BTreeSet<u32> = profile
        .cells
        .values()
        .flat_map(|s| s.features.iter().map(pos))
        .collect();
    let prior = 1.0 / gridded.points().len() as f64;
    let mut points: Vec<Vec<BundlePoint>> = vec![Vec::new(); index.len()];
    for p in gridded.points() {
        let values = p
            .fingerprint
            .iter()
            .map(|(f, v)| (pos(f), v))
            .filter(|(f, _)| kept.contains(f))
            .map(|(f, v)| (f, level(v) as i8))
            .collect();
        points[p.cell].push(BundlePoint {
            location: p.location,
            prior,
            values,
        });
    }
    let cells = index
        .cells()
        .iter()
        .zip(points)
        .map(|(c, pts)| {
            let subset = profile.get(c.cell_index);
            CellRecord {
                cell_index: c.cell_index,
                bounds: c.bounds,
                keys: c.observable_features.iter().map(pos).collect(),
                selected: subset.map_or_else(Vec::new, |s| s.features.iter().map(pos).collect()),
                final_loss: subset.map(|s| s.final_loss),
                points: pts,
            }
        })
        .collect();
    PrecomputedBundle::new(
        *index.roi(),
        features,
        cells,
        config.selector.positioning.likelihood,
        BundleMeta {
            selector: Some(config.selector),
            seed: config.selector.seed,
            chosen_m,
            alpha: gridded.alpha(),
            grid_spacing: gridded.grid_spacing(),
        },
    )
}
