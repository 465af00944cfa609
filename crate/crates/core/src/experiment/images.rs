//! Synthetic test images and noise models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{seeded_rng, RealGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Shapes,
    Ramp,
    Constant,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(SynthKind::Shapes),
            "ramp" => Ok(SynthKind::Ramp),
            "constant" => Ok(SynthKind::Constant),
            other => Err(Error::InvalidParameter(format!("unknown synthetic image '{other}'"))),
        }
    }
}

/// Piecewise-constant rectangles and a disc, a linear ramp, or constant 0.5.
pub fn synth_image(kind: SynthKind, rows: usize, cols: usize, seed: u64) -> RealGrid {
    match kind {
        SynthKind::Constant => RealGrid::filled(rows, cols, 0.5),
        SynthKind::Ramp => {
            let denom = (rows + cols).saturating_sub(2).max(1) as f64;
            RealGrid::from_fn(rows, cols, |i, j| (i + j) as f64 / denom)
        }
        SynthKind::Shapes => {
            let mut rng = seeded_rng(seed ^ 0x5348_4150_4553);
            let (h, w) = (rows as f64, cols as f64);
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-0.04..0.04);
            let r1 = (
                (0.12 + jitter(&mut rng)) * h,
                (0.55 + jitter(&mut rng)) * h,
                (0.10 + jitter(&mut rng)) * w,
                (0.45 + jitter(&mut rng)) * w,
            );
            let r2 = (
                (0.50 + jitter(&mut rng)) * h,
                (0.88 + jitter(&mut rng)) * h,
                (0.35 + jitter(&mut rng)) * w,
                (0.90 + jitter(&mut rng)) * w,
            );
            let (ci, cj) = ((0.32 + jitter(&mut rng)) * h, (0.70 + jitter(&mut rng)) * w);
            let radius = (0.17 + 0.5 * jitter(&mut rng)) * h.min(w);
            RealGrid::from_fn(rows, cols, |i, j| {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let inside = |r: (f64, f64, f64, f64)| y >= r.0 && y < r.1 && x >= r.2 && x < r.3;
                if (y - ci).powi(2) + (x - cj).powi(2) <= radius * radius {
                    1.0
                } else if inside(r2) {
                    0.35
                } else if inside(r1) {
                    0.75
                } else {
                    0.1
                }
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "level")]
pub enum NoiseSpec {
    None,
    SaltPepper(f64),
    Gaussian(f64),
}

impl std::str::FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(NoiseSpec::None);
        }
        let (kind, level) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidParameter(format!("noise '{s}' is not kind:level")))?;
        let level: f64 = level
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("noise level '{level}' is not a number")))?;
        match kind {
            "saltpepper" => Ok(NoiseSpec::SaltPepper(level)),
            "gaussian" => Ok(NoiseSpec::Gaussian(level)),
            other => Err(Error::InvalidParameter(format!("unknown noise kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseSpec::None => write!(f, "none"),
            NoiseSpec::SaltPepper(p) => write!(f, "saltpepper:{p}"),
            NoiseSpec::Gaussian(s) => write!(f, "gaussian:{s}"),
        }
    }
}

/// Salt-and-pepper sets exactly `round(p·count)` distinct pixels to 0 or 1;
/// Gaussian adds `N(0, s²)` draws without clipping.
pub fn add_noise(u: &RealGrid, noise: NoiseSpec, seed: u64) -> Result<RealGrid> {
    let mut rng = seeded_rng(seed ^ 0x004e_4f49_5345);
    let mut out = u.clone();
    match noise {
        NoiseSpec::None => {}
        NoiseSpec::SaltPepper(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("salt-and-pepper fraction {p} outside [0, 1]")));
            }
            let count = (p * u.len() as f64).round() as usize;
            let picks = rand::seq::index::sample(&mut rng, u.len(), count);
            let data = out.data_mut();
            for k in picks.iter() {
                data[k] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
        NoiseSpec::Gaussian(s) => {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("gaussian noise level {s} must be nonnegative")));
            }
            if s > 0.0 {
                for v in out.data_mut() {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    *v += s * z;
                }
            }
        }
    }
    Ok(out)
}
