//! Deterministic synthetic radio worlds with log-distance path loss and
//! attenuating walls.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureId, Fingerprint, LabeledSample, Point, Rfm, RoiGeometry, RSS_FLOOR_DBM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
    /// Loss per crossing, dB.
    pub attenuation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub roi: RoiGeometry,
    pub n_emitters: usize,
    /// RSS at 1 m, dBm.
    pub tx_power: f64,
    pub path_loss_exponent: f64,
    pub noise_sigma: f64,
    pub visibility_floor: f64,
    /// Reference samples per m².
    pub sample_density: f64,
    pub test_count: usize,
    /// Emitters may be placed this far outside the RoI.
    pub emitter_margin: f64,
    pub walls: Vec<Wall>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            roi: RoiGeometry {
                origin: Point::default(),
                width: 20.0,
                height: 10.0,
                cell_size: 2.0,
            },
            n_emitters: 40,
            tx_power: -40.0,
            path_loss_exponent: 2.5,
            noise_sigma: 3.0,
            visibility_floor: RSS_FLOOR_DBM,
            sample_density: 4.0,
            test_count: 300,
            emitter_margin: 0.0,
            walls: Vec::new(),
        }
    }
}

impl WorldConfig {
    /// The 20 × 10 m benchmark world: 40 emitters around and inside an
    /// office floor split by internal walls.
    pub fn standard(seed: u64) -> Self {
        let wall = |ax, ay, bx, by| Wall {
            a: Point::new(ax, ay),
            b: Point::new(bx, by),
            attenuation: 12.0,
        };
        WorldConfig {
            seed,
            path_loss_exponent: 3.5,
            emitter_margin: 5.0,
            walls: vec![
                wall(4.0, 0.0, 4.0, 7.0),
                wall(8.0, 3.0, 8.0, 10.0),
                wall(12.0, 0.0, 12.0, 7.0),
                wall(16.0, 3.0, 16.0, 10.0),
                wall(0.0, 5.0, 20.0, 5.0),
            ],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_emitters == 0 {
            return bad("at least one emitter is required".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(-40.0..=0.0).contains(&self.tx_power) {
            return bad(format!("tx power must lie in [-40, 0] dBm, got {}", self.tx_power));
        }
        if !(self.path_loss_exponent > 0.0 && self.path_loss_exponent.is_finite()) {
            return bad(format!("path loss exponent must be positive, got {}", self.path_loss_exponent));
        }
        if !(self.sample_density > 0.0 && self.sample_density.is_finite()) {
            return bad(format!("sample density must be positive, got {}", self.sample_density));
        }
        if !(self.emitter_margin >= 0.0 && self.emitter_margin.is_finite()) {
            return bad(format!("emitter margin must be non-negative, got {}", self.emitter_margin));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub id: FeatureId,
    pub location: Point,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub emitters: Vec<Emitter>,
    pub rfm: Rfm,
    pub tests: Vec<LabeledSample>,
}

fn cross(o: &Point, a: &Point, b: &Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Proper or touching intersection of segments `pq` and `ab`.
fn segments_cross(p: &Point, q: &Point, a: &Point, b: &Point) -> bool {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let d3 = cross(p, q, a);
    let d4 = cross(p, q, b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |o: &Point, s: &Point, e: &Point, d: f64| {
        d == 0.0 && o.x.min(e.x) <= s.x && s.x <= o.x.max(e.x) && o.y.min(e.y) <= s.y && s.y <= o.y.max(e.y)
    };
    on(a, p, b, d1) || on(a, q, b, d2) || on(p, a, q, d3) || on(p, b, q, d4)
}

/// Noise-free RSS at `x` from an emitter at `e`.
pub fn mean_rss(config: &WorldConfig, e: &Point, x: &Point) -> f64 {
    let d = x.distance(e).max(1.0);
    let walls: f64 = config
        .walls
        .iter()
        .filter(|w| segments_cross(e, x, &w.a, &w.b))
        .map(|w| w.attenuation)
        .sum();
    config.tx_power - 10.0 * config.path_loss_exponent * d.log10() - walls
}

fn emitter_id(rng: &mut ChaCha8Rng, i: usize) -> FeatureId {
    let b: [u8; 3] = rng.random();
    FeatureId::new(format!(
        "02:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
        b[0],
        b[1],
        b[2],
        (i >> 8) & 0xff,
        i & 0xff
    ))
    .expect("non-empty id")
}

fn observe(config: &WorldConfig, emitters: &[Emitter], x: &Point, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Fingerprint {
    let mut obs = BTreeMap::new();
    for e in emitters {
        let mut v = mean_rss(config, &e.location, x);
        if config.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        let v = v.min(0.0);
        if v > config.visibility_floor && v > RSS_FLOOR_DBM {
            obs.insert(e.id.clone(), v);
        }
    }
    Fingerprint::new(obs).expect("values lie in (-100, 0]")
}

/// Generates emitters, a jittered-lattice reference map and an independent
/// uniform test set.
pub fn generate(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let roi = config.roi;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let m = config.emitter_margin;
    let emitters: Vec<Emitter> = (0..config.n_emitters)
        .map(|i| {
            let id = emitter_id(&mut rng, i);
            let x = roi.origin.x - m + rng.random::<f64>() * (roi.width + 2.0 * m);
            let y = roi.origin.y - m + rng.random::<f64>() * (roi.height + 2.0 * m);
            Emitter {
                id,
                location: Point::new(x, y),
            }
        })
        .collect();

    let pitch = 1.0 / config.sample_density.sqrt();
    let nx = ((roi.width / pitch).round() as usize).max(1);
    let ny = ((roi.height / pitch).round() as usize).max(1);
    let (px, py) = (roi.width / nx as f64, roi.height / ny as f64);
    let mut samples = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let jx: f64 = rng.random_range(-0.25..0.25);
            let jy: f64 = rng.random_range(-0.25..0.25);
            let loc = Point::new(
                roi.origin.x + (i as f64 + 0.5 + jx) * px,
                roi.origin.y + (j as f64 + 0.5 + jy) * py,
            );
            let fp = observe(config, &emitters, &loc, &noise, &mut rng);
            samples.push(LabeledSample::new(loc, fp));
        }
    }

    let mut test_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7E57_7E57_7E57_7E57);
    let tests = (0..config.test_count)
        .map(|_| {
            let loc = Point::new(
                roi.origin.x + test_rng.random::<f64>() * roi.width,
                roi.origin.y + test_rng.random::<f64>() * roi.height,
            );
            let fp = observe(config, &emitters, &loc, &noise, &mut test_rng);
            LabeledSample::new(loc, fp)
        })
        .collect();

    Ok(World {
        config: config.clone(),
        emitters,
        rfm: Rfm::new(samples, roi)?,
        tests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> WorldConfig {
        WorldConfig {
            noise_sigma: 0.0,
            n_emitters: 1,
            ..Default::default()
        }
    }

    #[test]
    fn rss_at_emitter_is_tx_power() {
        let c = quiet();
        let e = Point::new(3.0, 3.0);
        assert_eq!(mean_rss(&c, &e, &e), c.tx_power);
    }

    #[test]
    fn ten_metres_at_exponent_two() {
        let c = WorldConfig {
            path_loss_exponent: 2.0,
            ..quiet()
        };
        let v = mean_rss(&c, &Point::new(0.0, 0.0), &Point::new(10.0, 0.0));
        assert!((v - (c.tx_power - 20.0)).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_distance() {
        let c = quiet();
        let e = Point::new(0.0, 0.0);
        let mut last = f64::INFINITY;
        for i in 1..50 {
            let v = mean_rss(&c, &e, &Point::new(1.0 + 0.5 * i as f64, 0.0));
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn walls_attenuate_crossings_only() {
        let c = WorldConfig {
            walls: vec![Wall {
                a: Point::new(5.0, -1.0),
                b: Point::new(5.0, 1.0),
                attenuation: 12.0,
            }],
            ..quiet()
        };
        let e = Point::new(0.0, 0.0);
        let open = mean_rss(&quiet(), &e, &Point::new(8.0, 0.0));
        assert_eq!(mean_rss(&c, &e, &Point::new(8.0, 0.0)), open - 12.0);
        let side = mean_rss(&quiet(), &e, &Point::new(8.0, 5.0));
        assert_eq!(mean_rss(&c, &e, &Point::new(8.0, 5.0)), side);
    }

    #[test]
    fn deterministic_and_sized() {
        let c = WorldConfig::standard(7);
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.rfm.samples(), b.rfm.samples());
        assert_eq!(a.tests, b.tests);
        assert_eq!(a.rfm.len(), 800);
        assert_eq!(a.tests.len(), 300);
        assert!(a.rfm.samples().iter().all(|s| s.fingerprint.iter().all(|(_, v)| v > -100.0 && v <= 0.0)));
        assert_ne!(generate(&WorldConfig::standard(8)).unwrap().rfm.samples(), a.rfm.samples());
    }

    #[test]
    fn rejects_zero_area() {
        let mut c = WorldConfig::default();
        c.roi.width = 0.0;
        assert_eq!(generate(&c).unwrap_err().code(), "bad-roi");
    }
}
