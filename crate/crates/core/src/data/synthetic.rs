use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Moons,
    Spirals,
    Gaussians,
}

impl SyntheticKind {
    pub fn classes(self) -> usize {
        match self {
            SyntheticKind::Moons | SyntheticKind::Spirals => 2,
            SyntheticKind::Gaussians => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Moons => "moons",
            SyntheticKind::Spirals => "spirals",
            SyntheticKind::Gaussians => "gaussians",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(SyntheticKind::Moons),
            "spirals" => Ok(SyntheticKind::Spirals),
            "gaussians" => Ok(SyntheticKind::Gaussians),
            other => Err(Error::Config(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Noise-free point of class `class` at curve parameter `u` in `[0, 1)`,
/// in generator coordinates (roughly the square `[-1, 1]^2`).
fn clean_point(kind: SyntheticKind, class: usize, u: f64) -> (f64, f64) {
    match kind {
        SyntheticKind::Moons => {
            let th = u * PI;
            let (x, y) = if class == 0 {
                (th.cos(), th.sin())
            } else {
                (1.0 - th.cos(), 0.5 - th.sin())
            };
            // centre the pair of moons on the origin, fit inside [-1, 1]
            ((x - 0.5) / 1.5, (y - 0.25) / 1.5)
        }
        SyntheticKind::Spirals => {
            let r = 0.15 + 0.85 * u;
            let th = u * 3.0 * PI + class as f64 * PI;
            (r * th.cos(), r * th.sin())
        }
        SyntheticKind::Gaussians => {
            let cx = if class % 2 == 0 { -0.5 } else { 0.5 };
            let cy = if class < 2 { -0.5 } else { 0.5 };
            (cx, cy)
        }
    }
}

/// `n` labelled 2-D points stored as `(n, 1, 1, 2)` images in `[0, 1]`.
/// Classes are balanced (the first classes take the remainder) and samples
/// are interleaved by class. Gaussian noise of std `noise` is added in
/// generator coordinates, which span `[-1, 1]`; the result is mapped to the
/// unit square and clamped.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || !(noise >= 0.0) {
        return Err(Error::Contract(format!(
            "synthetic data needs n >= 2 and noise >= 0 (got n={n}, noise={noise})"
        )));
    }
    let k = kind.classes();
    let mut rng = rng::stream(seed, kind.name(), 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let u: f64 = rng.gen();
        let (x, y) = clean_point(kind, class, u);
        let (nx, ny) = if noise > 0.0 {
            (noise * normal.sample(&mut rng), noise * normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(((x + nx + 1.0) / 2.0).clamp(0.0, 1.0));
        data.push(((y + ny + 1.0) / 2.0).clamp(0.0, 1.0));
        labels.push(class);
    }
    let images = Tensor::new(&[n, 1, 1, 2], data)?;
    Dataset::new(kind.name(), Split::Train, images, labels, k)
}
