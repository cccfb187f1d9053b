//! Everything the online stage needs, and its on-disk form.
//!
//! A bundle is a directory:
//!
//! ```text
//! <bundle>/manifest.json      format version, RoI, feature list, model
//!                             parameters, one {file, sha256} entry per cell
//! <bundle>/cells/00000.json   one record per cell (empty cells included)
//! ```
//!
//! Cell records refer to features by their position in the manifest's
//! feature list. Writes go to a temporary sibling directory that is renamed
//! into place, so a reader sees either the old bundle or the new one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::likelihood::{LikelihoodParams, MAX_LEVEL, MIN_LEVEL};
use crate::model::{FeatureId, Fingerprint, Point, Rect, RoiGeometry};
use crate::select::SelectorConfig;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const CELLS_DIR: &str = "cells";

/// A gridded reference location with its stored values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundlePoint {
    pub location: Point,
    pub prior: f64,
    /// `(feature index, dBm)`, ascending by feature index.
    pub values: Vec<(u32, i8)>,
}

impl BundlePoint {
    pub fn value(&self, feature: u32) -> Option<i8> {
        self.values
            .binary_search_by_key(&feature, |v| v.0)
            .ok()
            .map(|i| self.values[i].1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_index: usize,
    pub bounds: Rect,
    /// Observable feature keys, ascending.
    pub keys: Vec<u32>,
    /// Relevant features in selection order.
    pub selected: Vec<u32>,
    pub final_loss: Option<f64>,
    pub points: Vec<BundlePoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub selector: Option<SelectorConfig>,
    pub seed: u64,
    pub chosen_m: Option<usize>,
    pub alpha: usize,
    pub grid_spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedBundle {
    roi: RoiGeometry,
    features: Vec<FeatureId>,
    cells: Vec<CellRecord>,
    likelihood: LikelihoodParams,
    meta: BundleMeta,
    offsets: Vec<usize>,
}

impl PrecomputedBundle {
    pub fn new(
        roi: RoiGeometry,
        features: Vec<FeatureId>,
        cells: Vec<CellRecord>,
        likelihood: LikelihoodParams,
        meta: BundleMeta,
    ) -> Result<Self> {
        let corrupt = |m: String| Err(Error::CorruptBundle(m));
        roi.validate()?;
        likelihood.validate()?;
        if features.windows(2).any(|w| w[0] >= w[1]) {
            return corrupt("feature list is not strictly ascending".into());
        }
        if cells.len() != roi.cell_count() {
            return corrupt(format!(
                "{} cell records for a {}-cell grid",
                cells.len(),
                roi.cell_count()
            ));
        }
        let nf = features.len() as u32;
        let mut offsets = Vec::with_capacity(cells.len());
        let mut total = 0;
        for (i, c) in cells.iter().enumerate() {
            if c.cell_index != i {
                return corrupt(format!("cell record {i} carries index {}", c.cell_index));
            }
            if c.keys.windows(2).any(|w| w[0] >= w[1]) || c.keys.iter().any(|&k| k >= nf) {
                return corrupt(format!("cell {i}: bad key list"));
            }
            if c.selected.iter().any(|&k| k >= nf) {
                return corrupt(format!("cell {i}: selected feature out of range"));
            }
            for p in &c.points {
                if p.values.windows(2).any(|w| w[0].0 >= w[1].0)
                    || p.values.iter().any(|&(k, v)| {
                        k >= nf || (v as i32) < MIN_LEVEL || (v as i32) > MAX_LEVEL
                    })
                {
                    return corrupt(format!("cell {i}: bad grid point values"));
                }
            }
            offsets.push(total);
            total += c.points.len();
        }
        Ok(PrecomputedBundle {
            roi,
            features,
            cells,
            likelihood,
            meta,
            offsets,
        })
    }

    pub fn roi(&self) -> &RoiGeometry {
        &self.roi
    }

    pub fn features(&self) -> &[FeatureId] {
        &self.features
    }

    pub fn cells(&self) -> &[CellRecord] {
        &self.cells
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn likelihood(&self) -> &LikelihoodParams {
        &self.likelihood
    }

    pub fn meta(&self) -> &BundleMeta {
        &self.meta
    }

    /// Global index of the first grid point of `cell`.
    pub fn point_offset(&self, cell: usize) -> usize {
        self.offsets[cell]
    }

    pub fn point_count(&self) -> usize {
        self.cells.iter().map(|c| c.points.len()).sum()
    }

    pub fn feature_index(&self, feature: &FeatureId) -> Option<u32> {
        self.features.binary_search(feature).ok().map(|i| i as u32)
    }

    /// The fingerprint's features known to the bundle, as
    /// `(feature index, dBm)` ascending; unknown features are dropped.
    pub fn encode(&self, fp: &Fingerprint) -> Vec<(u32, f64)> {
        fp.iter()
            .filter_map(|(f, v)| self.feature_index(f).map(|i| (i, v)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_bundle(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_bundle(path)
    }
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    cell_index: usize,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    roi: RoiGeometry,
    features: Vec<FeatureId>,
    likelihood: LikelihoodParams,
    meta: BundleMeta,
    cells: Vec<CellEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into());
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

fn write_tree(bundle: &PrecomputedBundle, dir: &Path) -> Result<()> {
    let cells_dir = dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let mut entries = Vec::with_capacity(bundle.cells.len());
    for c in &bundle.cells {
        let file = format!("{CELLS_DIR}/{:05}.json", c.cell_index);
        let bytes = serde_json::to_vec(c).expect("cell record serializes");
        write_file(&dir.join(&file), &bytes)?;
        entries.push(CellEntry {
            cell_index: c.cell_index,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        roi: bundle.roi,
        features: bundle.features.clone(),
        likelihood: bundle.likelihood,
        meta: bundle.meta.clone(),
        cells: entries,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), &bytes)
}

/// Writes the bundle directory atomically (temporary sibling + rename).
pub fn save_bundle(bundle: &PrecomputedBundle, path: &Path) -> Result<()> {
    let tmp = sibling(path, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    if let Err(e) = write_tree(bundle, &tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        let old = sibling(path, "old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<PrecomputedBundle> {
    let manifest_path = path.join(MANIFEST);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptBundle(format!("manifest: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptBundle("manifest has no format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::CorruptBundle(format!("manifest: {e}")))?;
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for entry in &manifest.cells {
        let file = path.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let record: CellRecord = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptBundle(format!("{}: {e}", entry.file)))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::ChecksumMismatch(file));
        }
        cells.push(record);
    }
    PrecomputedBundle::new(
        manifest.roi,
        manifest.features,
        cells,
        manifest.likelihood,
        manifest.meta,
    )
}

/// SHA-256 of the manifest, which pins every cell file through its own
/// checksum.
pub fn bundle_checksum(path: &Path) -> Result<String> {
    let manifest_path = path.join(MANIFEST);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roi(cols: usize) -> RoiGeometry {
        RoiGeometry::new(Point::default(), 2.0 * cols as f64, 2.0, 2.0).unwrap()
    }

    fn empty_cell(roi: &RoiGeometry, i: usize) -> CellRecord {
        CellRecord {
            cell_index: i,
            bounds: roi.cell_bounds(i),
            keys: vec![],
            selected: vec![],
            final_loss: None,
            points: vec![],
        }
    }

    fn empty_bundle() -> PrecomputedBundle {
        let r = roi(1);
        PrecomputedBundle::new(
            r,
            vec![],
            vec![empty_cell(&r, 0)],
            LikelihoodParams::default(),
            BundleMeta::default(),
        )
        .unwrap()
    }

    fn small_bundle() -> PrecomputedBundle {
        let r = roi(1);
        let cell = CellRecord {
            cell_index: 0,
            bounds: r.cell_bounds(0),
            keys: vec![0, 1],
            selected: vec![1, 0],
            final_loss: Some(0.25),
            points: vec![
                BundlePoint {
                    location: Point::new(0.1, 0.1),
                    prior: 0.5,
                    values: vec![(0, -40), (1, -71)],
                },
                BundlePoint {
                    location: Point::new(0.3, 0.1),
                    prior: 0.5,
                    values: vec![(1, -72)],
                },
            ],
        };
        PrecomputedBundle::new(
            r,
            vec![FeatureId::new("ap:1").unwrap(), FeatureId::new("ap:2").unwrap()],
            vec![cell],
            LikelihoodParams::default(),
            BundleMeta {
                seed: 7,
                alpha: 2,
                grid_spacing: 0.2,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        let b = empty_bundle();
        save_bundle(&b, &p).unwrap();
        assert_eq!(load_bundle(&p).unwrap(), b);
    }

    #[test]
    fn small_roundtrip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&empty_bundle(), &p).unwrap();
        let b = small_bundle();
        save_bundle(&b, &p).unwrap();
        assert_eq!(load_bundle(&p).unwrap(), b);
        // no temporary siblings left behind
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn truncated_cell_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&small_bundle(), &p).unwrap();
        let f = p.join("cells/00000.json");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
        assert_eq!(load_bundle(&p).unwrap_err().code(), "corrupt-bundle");
    }

    #[test]
    fn edited_cell_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&small_bundle(), &p).unwrap();
        let f = p.join("cells/00000.json");
        let text = fs::read_to_string(&f).unwrap().replace("-71", "-70");
        fs::write(&f, text).unwrap();
        assert_eq!(load_bundle(&p).unwrap_err().code(), "checksum-mismatch");
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&small_bundle(), &p).unwrap();
        let m = p.join(MANIFEST);
        let text = fs::read_to_string(&m)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&m, text).unwrap();
        assert_eq!(load_bundle(&p).unwrap_err().code(), "version-mismatch");
    }

    #[test]
    fn rejects_inconsistent_records() {
        let b = small_bundle();
        let mut cells = b.cells().to_vec();
        cells[0].selected.push(5);
        let err = PrecomputedBundle::new(*b.roi(), b.features().to_vec(), cells, *b.likelihood(), b.meta().clone());
        assert_eq!(err.unwrap_err().code(), "corrupt-bundle");
    }

    #[test]
    fn lookups() {
        let b = small_bundle();
        assert_eq!(b.feature_index(&FeatureId::new("ap:2").unwrap()), Some(1));
        assert_eq!(b.cells()[0].points[1].value(0), None);
        assert_eq!(b.cells()[0].points[1].value(1), Some(-72));
        let fp = Fingerprint::from_raw([("ap:2", -60.0), ("zz", -50.0)]).unwrap();
        assert_eq!(b.encode(&fp), vec![(1, -60.0)]);
    }

    fn arb_bundle() -> impl Strategy<Value = PrecomputedBundle> {
        (1usize..4, 0usize..6).prop_flat_map(|(cols, nf)| {
            let r = roi(cols);
            let cell = move |i: usize| {
                (
                    proptest::collection::btree_set(0..nf.max(1) as u32, 0..=nf),
                    proptest::collection::vec(
                        (0.0f64..2.0, 0.0f64..2.0, proptest::collection::btree_map(0..nf.max(1) as u32, -99i8..=0, 0..=nf)),
                        0..4,
                    ),
                    proptest::option::of(0.0f64..10.0),
                )
                    .prop_map(move |(keys, pts, loss)| {
                        let keys: Vec<u32> = if nf == 0 { vec![] } else { keys.into_iter().collect() };
                        CellRecord {
                            cell_index: i,
                            bounds: r.cell_bounds(i),
                            selected: keys.iter().rev().copied().collect(),
                            keys,
                            final_loss: loss,
                            points: pts
                                .into_iter()
                                .map(|(x, y, v)| BundlePoint {
                                    location: Point::new(x, y),
                                    prior: 1.0,
                                    values: if nf == 0 { vec![] } else { v.into_iter().collect() },
                                })
                                .collect(),
                        }
                    })
            };
            let cells: Vec<_> = (0..cols).map(cell).collect();
            (cells, 0.5f64..8.0, any::<u64>()).prop_map(move |(cells, sigma, seed)| {
                PrecomputedBundle::new(
                    r,
                    (0..nf).map(|i| FeatureId::new(format!("f{i:02}")).unwrap()).collect(),
                    cells,
                    LikelihoodParams { sigma, p_miss: 1e-3 },
                    BundleMeta {
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_arbitrary(b in arb_bundle()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("b");
            save_bundle(&b, &p).unwrap();
            prop_assert_eq!(load_bundle(&p).unwrap(), b);
        }
    }
}
