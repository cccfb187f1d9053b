//! Python bindings. Samples cross the boundary as `(x, y, {feature: rss})`
//! tuples and queries as plain `{feature: rss}` dicts.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rfsel::eval::{run_benchmark, BenchConfig};
use rfsel::model::{FeatureId, Fingerprint, LabeledSample, Point, Rfm, RoiGeometry};
use rfsel::pipeline::{precompute, PrecomputeConfig};
use rfsel::select::SelectorKind;
use rfsel::synth::{generate, WorldConfig};
use rfsel::{Error, LocateConfig, Locator, Method};

type Sample = (f64, f64, HashMap<String, f64>);

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.code());
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn fingerprint(obs: HashMap<String, f64>) -> PyResult<Fingerprint> {
    Fingerprint::from_raw(obs).map_err(py_err)
}

fn samples(raw: Vec<Sample>) -> PyResult<Vec<LabeledSample>> {
    raw.into_iter()
        .map(|(x, y, obs)| Ok(LabeledSample::new(Point::new(x, y), fingerprint(obs)?)))
        .collect()
}

fn to_py(s: &LabeledSample) -> Sample {
    let obs = s.fingerprint.iter().map(|(k, v)| (k.as_str().to_owned(), v)).collect();
    (s.location.x, s.location.y, obs)
}

fn keys(ids: Vec<String>) -> PyResult<BTreeSet<FeatureId>> {
    ids.into_iter().map(|s| FeatureId::new(s).map_err(py_err)).collect()
}

/// Modified Jaccard index |U ∩ G| / |G|.
#[pyfunction]
fn mji(user: Vec<String>, cell: Vec<String>) -> PyResult<f64> {
    Ok(rfsel::subregion::mji(&keys(user)?, &keys(cell)?))
}

#[pyfunction]
fn circular_error(errors: Vec<f64>, p: f64) -> PyResult<f64> {
    rfsel::eval::circular_error(&errors, p).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (errors, threshold = 10.0))]
fn large_error_ratio(errors: Vec<f64>, threshold: f64) -> PyResult<f64> {
    rfsel::eval::large_error_ratio(&errors, threshold).map_err(py_err)
}

/// Synthetic world; returns `(reference, tests)` as sample lists.
#[pyfunction]
#[pyo3(signature = (seed = 7, width = 20.0, height = 10.0, emitters = 40, density = 4.0, noise = 3.0, tests = 300))]
fn synth(
    seed: u64,
    width: f64,
    height: f64,
    emitters: usize,
    density: f64,
    noise: f64,
    tests: usize,
) -> PyResult<(Vec<Sample>, Vec<Sample>)> {
    let config = WorldConfig {
        roi: RoiGeometry::new(Point::default(), width, height, 2.0).map_err(py_err)?,
        n_emitters: emitters,
        sample_density: density,
        noise_sigma: noise,
        test_count: tests,
        ..WorldConfig::standard(seed)
    };
    let world = generate(&config).map_err(py_err)?;
    Ok((
        world.rfm.samples().iter().map(to_py).collect(),
        world.tests.iter().map(to_py).collect(),
    ))
}

fn parse_method(s: &str) -> PyResult<Method> {
    s.parse().map_err(py_err)
}

/// A precomputed bundle ready for online positioning.
#[pyclass(module = "rfsel")]
struct Bundle {
    locator: Locator,
}

#[pymethods]
impl Bundle {
    #[staticmethod]
    #[pyo3(signature = (reference, selector = "foba", positioner = "knn", epsilon = None, cell_size = 2.0, roi = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn precompute(
        reference: Vec<Sample>,
        selector: &str,
        positioner: &str,
        epsilon: Option<f64>,
        cell_size: f64,
        roi: Option<(f64, f64, f64, f64)>,
        seed: u64,
    ) -> PyResult<Self> {
        let samples = samples(reference)?;
        let roi = match roi {
            Some((x, y, w, h)) => RoiGeometry::new(Point::new(x, y), w, h, cell_size),
            None => RoiGeometry::enclosing(samples.iter().map(|s| &s.location), cell_size),
        }
        .map_err(py_err)?;
        let rfm = Rfm::new(samples, roi).map_err(py_err)?;
        let mut config = PrecomputeConfig {
            cell_size,
            ..PrecomputeConfig::default()
        };
        config.selector.kind = selector.parse::<SelectorKind>().map_err(py_err)?;
        config.selector.positioning.method = parse_method(positioner)?;
        config.selector.seed = seed;
        if let Some(e) = epsilon {
            config.selector.epsilon = e;
        }
        let pre = precompute(&rfm, &config, None).map_err(py_err)?;
        Ok(Bundle {
            locator: Locator::new(pre.bundle).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bundle = rfsel::load_bundle(&path).map_err(py_err)?;
        Ok(Bundle {
            locator: Locator::new(bundle).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        rfsel::save_bundle(self.locator.bundle(), &path).map_err(py_err)
    }

    #[getter]
    fn cell_count(&self) -> usize {
        self.locator.bundle().cell_count()
    }

    #[getter]
    fn chosen_m(&self) -> Option<usize> {
        self.locator.bundle().meta().chosen_m
    }

    /// Returns `(x, y, fallback)`.
    #[pyo3(signature = (obs, m = None, h = None, method = "knn", k = 5))]
    fn locate(&self, obs: HashMap<String, f64>, m: Option<usize>, h: Option<usize>, method: &str, k: usize) -> PyResult<(f64, f64, bool)> {
        let m = m.or(self.chosen_m()).unwrap_or(self.cell_count());
        let config = LocateConfig {
            k,
            ..LocateConfig::new(parse_method(method)?, m, h)
        };
        let e = self.locator.online_position(&fingerprint(obs)?, &config).map_err(py_err)?;
        Ok((e.location.x, e.location.y, e.fallback))
    }

    /// Full search over every grid point with every feature.
    #[pyo3(signature = (obs, method = "knn", k = 5))]
    fn baseline(&self, obs: HashMap<String, f64>, method: &str, k: usize) -> PyResult<(f64, f64)> {
        let p = self
            .locator
            .baseline(&fingerprint(obs)?, parse_method(method)?, k)
            .map_err(py_err)?;
        Ok((p.x, p.y))
    }
}

/// Benchmarks one setting; `full = True` times the full-search baseline.
#[pyfunction]
#[pyo3(signature = (bundle, tests, method = "knn", m = None, h = None, full = false))]
fn evaluate(
    bundle: &Bundle,
    tests: Vec<Sample>,
    method: &str,
    m: Option<usize>,
    h: Option<usize>,
    full: bool,
) -> PyResult<HashMap<String, f64>> {
    let tests = samples(tests)?;
    let method = parse_method(method)?;
    let cells = bundle.cell_count();
    let config = if full {
        BenchConfig::full(method, cells)
    } else {
        BenchConfig::online(method, m.or(bundle.chosen_m()).unwrap_or(cells), h)
    };
    let r = run_benchmark(&bundle.locator, &tests, &[config]).map_err(py_err)?.remove(0);
    Ok(HashMap::from([
        ("m".to_string(), r.m as f64),
        ("mean_time_s".to_string(), r.mean_time_s),
        ("ce50".to_string(), r.ce50),
        ("ce75".to_string(), r.ce75),
        ("ce90".to_string(), r.ce90),
        ("large_error_ratio".to_string(), r.large_error_ratio),
        ("fallback_ratio".to_string(), r.fallback_ratio),
    ]))
}

#[pymodule]
#[pyo3(name = "rfsel")]
fn rfsel_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mji, m)?)?;
    m.add_function(wrap_pyfunction!(circular_error, m)?)?;
    m.add_function(wrap_pyfunction!(large_error_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Bundle>()?;
    Ok(())
}
