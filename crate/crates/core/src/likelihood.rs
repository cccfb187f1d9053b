//! Per-feature RSS likelihood for MAP positioning: a Gaussian around the
//! gridded value, discretized to whole dBm and truncated to the measurable
//! range `[-99, 0]`. Features missing on either side get a fixed floor
//! probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_LEVEL: i32 = -99;
pub const MAX_LEVEL: i32 = 0;
const LEVELS: usize = (MAX_LEVEL - MIN_LEVEL + 1) as usize;

pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_P_MISS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams {
    pub sigma: f64,
    pub p_miss: f64,
}

impl Default for LikelihoodParams {
    fn default() -> Self {
        LikelihoodParams {
            sigma: DEFAULT_SIGMA,
            p_miss: DEFAULT_P_MISS,
        }
    }
}

impl LikelihoodParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return Err(Error::InvalidParameter(format!(
                "p_miss must be in [0, 1), got {}",
                self.p_miss
            )));
        }
        Ok(())
    }
}

/// Upper Gaussian tail `P(Z > z)`.
fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// `ln(Φ(b) - Φ(a))` for `a < b`, accurate in both tails.
fn ln_gauss_mass(a: f64, b: f64) -> f64 {
    let mass = if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    };
    if mass > 0.0 {
        return mass.ln();
    }
    // Deep tail: Mills-ratio asymptote at the edge nearer the mean.
    let (near, far) = if a >= 0.0 { (a, b) } else { (-b, -a) };
    let ln_tail = -0.5 * near * near - (near * (2.0 * std::f64::consts::PI).sqrt()).ln();
    ln_tail + (-(-(far * far - near * near) / 2.0).exp()).ln_1p()
}

/// Quantizes an RSS reading to the table's integer levels.
pub fn level(v: f64) -> i32 {
    (v.round() as i32).clamp(MIN_LEVEL, MAX_LEVEL)
}

/// Log-likelihood lookup table over all (mean, observed) level pairs.
#[derive(Clone, Debug)]
pub struct LikelihoodTable {
    params: LikelihoodParams,
    table: Vec<f64>,
    ln_p_miss: f64,
}

impl LikelihoodTable {
    pub fn new(params: LikelihoodParams) -> Result<Self> {
        params.validate()?;
        let s = params.sigma;
        let mut table = vec![0.0; LEVELS * LEVELS];
        for mi in 0..LEVELS {
            let mu = (MIN_LEVEL + mi as i32) as f64;
            let ln_norm = ln_gauss_mass(
                (MIN_LEVEL as f64 - 0.5 - mu) / s,
                (MAX_LEVEL as f64 + 0.5 - mu) / s,
            );
            for vi in 0..LEVELS {
                let v = (MIN_LEVEL + vi as i32) as f64;
                table[mi * LEVELS + vi] =
                    ln_gauss_mass((v - 0.5 - mu) / s, (v + 0.5 - mu) / s) - ln_norm;
            }
        }
        Ok(LikelihoodTable {
            params,
            table,
            ln_p_miss: params.p_miss.ln(),
        })
    }

    pub fn params(&self) -> &LikelihoodParams {
        &self.params
    }

    /// `ln p(observed | mean)`; either side `None` means non-measurable.
    pub fn ln_lik(&self, mean: Option<f64>, observed: Option<f64>) -> f64 {
        match (mean, observed) {
            (Some(m), Some(v)) => self.ln_lik_levels(level(m), level(v)),
            _ => self.ln_p_miss,
        }
    }

    pub fn ln_lik_levels(&self, mean: i32, observed: i32) -> f64 {
        let mi = (mean - MIN_LEVEL) as usize;
        let vi = (observed - MIN_LEVEL) as usize;
        self.table[mi * LEVELS + vi]
    }

    pub fn ln_p_miss(&self) -> f64 {
        self.ln_p_miss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_normalized() {
        let t = LikelihoodTable::new(LikelihoodParams::default()).unwrap();
        for mu in [MIN_LEVEL, -60, -3, MAX_LEVEL] {
            let total: f64 = (MIN_LEVEL..=MAX_LEVEL)
                .map(|v| t.ln_lik_levels(mu, v).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "mu {mu}: {total}");
        }
    }

    #[test]
    fn peak_at_mean_and_symmetric_inside() {
        let t = LikelihoodTable::new(LikelihoodParams::default()).unwrap();
        let at = t.ln_lik_levels(-50, -50);
        assert!(at > t.ln_lik_levels(-50, -49));
        assert!((t.ln_lik_levels(-50, -46) - t.ln_lik_levels(-50, -54)).abs() < 1e-12);
    }

    #[test]
    fn deep_tail_is_finite_and_decreasing() {
        let t = LikelihoodTable::new(LikelihoodParams {
            sigma: 0.5,
            p_miss: 1e-4,
        })
        .unwrap();
        let a = t.ln_lik_levels(0, -60);
        let b = t.ln_lik_levels(0, -99);
        assert!(a.is_finite() && b.is_finite());
        assert!(b < a);
    }

    #[test]
    fn missing_uses_floor() {
        let t = LikelihoodTable::new(LikelihoodParams::default()).unwrap();
        assert_eq!(t.ln_lik(None, Some(-50.0)), 1e-4f64.ln());
        assert_eq!(t.ln_lik(Some(-50.0), None), 1e-4f64.ln());
        let zero = LikelihoodTable::new(LikelihoodParams {
            sigma: 4.0,
            p_miss: 0.0,
        })
        .unwrap();
        assert_eq!(zero.ln_lik(None, None), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(LikelihoodTable::new(LikelihoodParams { sigma: 0.0, p_miss: 0.1 }).is_err());
        assert!(LikelihoodTable::new(LikelihoodParams { sigma: 1.0, p_miss: 1.0 }).is_err());
    }
}
