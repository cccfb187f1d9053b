//! Accuracy metrics and the timing benchmark.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locate::{LocateConfig, Locator};
use crate::model::LabeledSample;
use crate::positioning::{Method, DEFAULT_K};

pub const LARGE_ERROR_THRESHOLD_M: f64 = 10.0;
pub const WARMUP_QUERIES: usize = 5;
pub const CSV_HEADER: &str =
    "method,selector,m,h,mean_time_s,ce50_m,ce75_m,ce90_m,large_error_pct,fallback_pct";

/// Nearest-rank percentile: the smallest error such that at least `p`
/// percent of errors are no larger.
pub fn circular_error(errors: &[f64], p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyErrors);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidParameter(format!("percentile must lie in (0, 100], got {p}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Fraction of errors strictly above `threshold`.
pub fn large_error_ratio(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyErrors);
    }
    Ok(errors.iter().filter(|&&e| e > threshold).count() as f64 / errors.len() as f64)
}

/// One benchmark configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub method: Method,
    pub m: usize,
    pub h: Option<usize>,
    pub k: usize,
    /// Search every grid point with every feature, skipping both selection
    /// stages.
    pub full_search: bool,
}

impl BenchConfig {
    pub fn online(method: Method, m: usize, h: Option<usize>) -> Self {
        BenchConfig {
            method,
            m,
            h,
            k: DEFAULT_K,
            full_search: false,
        }
    }

    pub fn full(method: Method, cells: usize) -> Self {
        BenchConfig {
            method,
            m: cells,
            h: None,
            k: DEFAULT_K,
            full_search: true,
        }
    }

    fn locate_config(&self) -> LocateConfig {
        LocateConfig {
            k: self.k,
            ..LocateConfig::new(self.method, self.m, self.h)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub selector: String,
    pub m: usize,
    pub h: Option<usize>,
    pub mean_time_s: f64,
    pub ce50: f64,
    pub ce75: f64,
    pub ce90: f64,
    pub large_error_ratio: f64,
    pub fallback_ratio: f64,
    pub errors: Vec<f64>,
}

impl EvalReport {
    pub fn from_errors(
        method: Method,
        selector: impl Into<String>,
        m: usize,
        h: Option<usize>,
        mean_time_s: f64,
        errors: Vec<f64>,
        fallbacks: usize,
    ) -> Result<Self> {
        Ok(EvalReport {
            method,
            selector: selector.into(),
            m,
            h,
            mean_time_s,
            ce50: circular_error(&errors, 50.0)?,
            ce75: circular_error(&errors, 75.0)?,
            ce90: circular_error(&errors, 90.0)?,
            large_error_ratio: large_error_ratio(&errors, LARGE_ERROR_THRESHOLD_M)?,
            fallback_ratio: fallbacks as f64 / errors.len() as f64,
            errors,
        })
    }

    fn h_signed(&self) -> i64 {
        self.h.map_or(-1, |h| h as i64)
    }
}

/// Times and scores every configuration over `tests`. Queries run
/// sequentially; only the positioning call is timed.
pub fn run_benchmark(locator: &Locator, tests: &[LabeledSample], configs: &[BenchConfig]) -> Result<Vec<EvalReport>> {
    if tests.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let selector = locator
        .bundle()
        .meta()
        .selector
        .map_or_else(|| "none".to_string(), |s| s.kind.to_string());
    let mut reports = Vec::with_capacity(configs.len());
    for cfg in configs {
        let locate = cfg.locate_config();
        let run = |s: &LabeledSample| -> Result<(crate::model::Point, bool)> {
            if cfg.full_search {
                Ok((locator.baseline(&s.fingerprint, cfg.method, cfg.k)?, false))
            } else {
                let e = locator.online_position(&s.fingerprint, &locate)?;
                Ok((e.location, e.fallback))
            }
        };
        for s in tests.iter().cycle().take(WARMUP_QUERIES) {
            run(s)?;
        }
        let mut errors = Vec::with_capacity(tests.len());
        let mut fallbacks = 0;
        let mut total = 0.0;
        for s in tests {
            let start = Instant::now();
            let (loc, fallback) = run(s)?;
            total += start.elapsed().as_secs_f64();
            errors.push(loc.distance(&s.location));
            fallbacks += fallback as usize;
        }
        let label = if cfg.full_search { "none".to_string() } else { selector.clone() };
        reports.push(EvalReport::from_errors(
            cfg.method,
            label,
            cfg.m,
            cfg.h,
            total / tests.len() as f64,
            errors,
            fallbacks,
        )?);
    }
    reports.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(b.m.cmp(&a.m))
            .then(a.h_signed().cmp(&b.h_signed()))
    });
    Ok(reports)
}

pub fn write_report_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER.split(','))?;
    for r in reports {
        out.write_record([
            r.method.to_string(),
            r.selector.clone(),
            r.m.to_string(),
            r.h_signed().to_string(),
            format!("{:.6e}", r.mean_time_s),
            format!("{:.3}", r.ce50),
            format!("{:.3}", r.ce75),
            format!("{:.3}", r.ce90),
            format!("{:.2}", 100.0 * r.large_error_ratio),
            format!("{:.2}", 100.0 * r.fallback_ratio),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
