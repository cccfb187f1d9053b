//! Fingerprint positioning with subregion and feature selection.
//!
//! The offline stage densifies a reference fingerprint map, partitions the
//! region into square subregions and selects the relevant features of each
//! one. The online stage ranks subregions by modified Jaccard index, fuses
//! their relevant features and estimates a position with weighted kNN or MAP
//! over a small part of the grid.

pub mod bundle;
pub mod densify;
pub mod error;
pub mod eval;
pub mod io;
pub mod likelihood;
pub mod locate;
pub mod model;
pub mod pipeline;
pub mod positioning;
pub mod select;
pub mod subregion;
pub mod synth;

pub use bundle::{load_bundle, save_bundle, PrecomputedBundle};
pub use error::{Error, Result};
pub use locate::{LocateConfig, Locator};
pub use model::{FeatureId, Fingerprint, LabeledSample, Point, Rfm, RoiGeometry};
pub use positioning::Method;
