//! Pipeline configuration file. Every field is optional; command-line flags
//! win over file values and built-in defaults fill the rest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rfsel::densify::DensifyParams;
use rfsel::likelihood::LikelihoodParams;
use rfsel::model::{Point, RoiGeometry, DEFAULT_CELL_SIZE};
use rfsel::pipeline::PrecomputeConfig;
use rfsel::positioning::{Method, PositioningConfig, DEFAULT_K};
use rfsel::select::{SelectorConfig, SelectorKind};
use rfsel::subregion::DEFAULT_FLATNESS_TOL;
use rfsel::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub roi: Option<RoiSection>,
    pub densify: DensifySection,
    pub segmentation: SegmentationSection,
    pub selector: SelectorSection,
    pub locate: LocateSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub rfm: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub tests: Option<PathBuf>,
    pub validation: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSection {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySection {
    pub spacing: Option<f64>,
    pub length_scale: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub cell_size: Option<f64>,
    pub choose_m: Option<bool>,
    pub flatness_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub method: Option<SelectorKind>,
    pub positioner: Option<Method>,
    pub epsilon: Option<f64>,
    pub nu: Option<f64>,
    pub k_max: Option<usize>,
    pub k_min: Option<usize>,
    pub phi: Option<f64>,
    pub validation_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocateSection {
    pub method: Option<Method>,
    pub m: Option<usize>,
    /// Negative means all relevant features.
    pub h: Option<i64>,
    pub k: Option<usize>,
    pub sigma: Option<f64>,
    pub p_miss: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every numeric field against the owning module before any work
    /// starts.
    pub fn validate(&self) -> Result<()> {
        self.precompute()?.validate()?;
        self.positioning()?.validate()?;
        if let Some(r) = self.roi {
            self.roi_geometry(r)?;
        }
        if self.locate.m == Some(0) {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn cell_size(&self) -> f64 {
        self.segmentation.cell_size.unwrap_or(DEFAULT_CELL_SIZE)
    }

    pub fn roi_geometry(&self, r: RoiSection) -> Result<RoiGeometry> {
        RoiGeometry::new(Point::new(r.x, r.y), r.width, r.height, self.cell_size())
    }

    pub fn densify_params(&self) -> DensifyParams {
        let d = DensifyParams::default();
        DensifyParams {
            spacing: self.densify.spacing.unwrap_or(d.spacing),
            length_scale: self.densify.length_scale.unwrap_or(d.length_scale),
            ..d
        }
    }

    pub fn likelihood(&self) -> LikelihoodParams {
        let d = LikelihoodParams::default();
        LikelihoodParams {
            sigma: self.locate.sigma.unwrap_or(d.sigma),
            p_miss: self.locate.p_miss.unwrap_or(d.p_miss),
        }
    }

    /// Positioning used at the online stage.
    pub fn positioning(&self) -> Result<PositioningConfig> {
        let c = PositioningConfig {
            method: self.locate.method.unwrap_or(Method::Knn),
            k: self.locate.k.unwrap_or(DEFAULT_K),
            likelihood: self.likelihood(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn selector(&self) -> SelectorConfig {
        let d = SelectorConfig::default();
        let s = &self.selector;
        SelectorConfig {
            kind: s.method.unwrap_or(d.kind),
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            nu: s.nu.unwrap_or(d.nu),
            k_max: s.k_max.unwrap_or(d.k_max),
            k_min: s.k_min.unwrap_or(d.k_min),
            phi: s.phi.unwrap_or(d.phi),
            positioning: PositioningConfig {
                method: s.positioner.or(self.locate.method).unwrap_or(d.positioning.method),
                k: self.locate.k.unwrap_or(d.positioning.k),
                likelihood: self.likelihood(),
            },
            validation_fraction: s.validation_fraction.unwrap_or(d.validation_fraction),
            seed: self.seed(),
        }
    }

    pub fn precompute(&self) -> Result<PrecomputeConfig> {
        let c = PrecomputeConfig {
            cell_size: self.cell_size(),
            densify: self.densify_params(),
            selector: self.selector(),
            choose_m: self.segmentation.choose_m.unwrap_or(true),
            flatness_tol: self.segmentation.flatness_tol.unwrap_or(DEFAULT_FLATNESS_TOL),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn h(&self) -> Option<usize> {
        self.locate.h.and_then(|h| usize::try_from(h).ok())
    }
}

/// Parses `x,y,width,height`.
pub fn parse_roi(s: &str) -> std::result::Result<RoiSection, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(RoiSection { x, y, width, height }),
        _ => Err("expected x,y,width,height".into()),
    }
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_area(s: &str) -> std::result::Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let h = h.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.selector().kind, SelectorKind::Foba);
        assert_eq!(c.cell_size(), 2.0);
        assert_eq!(c.h(), None);
    }

    #[test]
    fn sections_parse() {
        let c: PipelineConfig = toml::from_str(
            r#"
            seed = 9
            [paths]
            rfm = "rfm.jsonl"
            [roi]
            x = 0.0
            y = 0.0
            width = 20.0
            height = 10.0
            [selector]
            method = "forward"
            positioner = "map"
            epsilon = 0.02
            [locate]
            m = 11
            h = -1
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        let s = c.selector();
        assert_eq!(s.kind, SelectorKind::Forward);
        assert_eq!(s.positioning.method, Method::Map);
        assert_eq!(s.seed, 9);
        assert_eq!(c.roi_geometry(c.roi.unwrap()).unwrap().cell_count(), 50);
        assert_eq!(c.h(), None);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let bad: PipelineConfig = toml::from_str("[selector]\nnu = 1.5").unwrap();
        assert_eq!(bad.validate().unwrap_err().code(), "invalid-parameter");
        assert!(toml::from_str::<PipelineConfig>("[selector]\nfoo = 1").is_err());
    }

    #[test]
    fn parses_roi_and_area() {
        assert_eq!(parse_roi("0,0,20,10").unwrap().width, 20.0);
        assert!(parse_roi("0,0,20").is_err());
        assert_eq!(parse_area("20x10").unwrap(), (20.0, 10.0));
        assert!(parse_area("20").is_err());
    }
}
