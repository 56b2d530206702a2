//! Procedural infrared/visible scene pairs with a controllable category mix.
//!
//! Three categories stand in for the scene types of a street-dominated
//! driving corpus: `street` (rectilinear structure, lamps, warm pedestrians),
//! `cloud` (smooth low-frequency sky) and `bush` (dense foliage texture with
//! sparse warm speckle). Each pair shares one layout RNG stream, so the two
//! modalities are correlated, but each carries structures the other lacks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MIN_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneCategory {
    Street,
    Cloud,
    Bush,
}

impl SceneCategory {
    pub const ALL: [SceneCategory; 3] = [SceneCategory::Street, SceneCategory::Cloud, SceneCategory::Bush];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneCategory::Street => "street",
            SceneCategory::Cloud => "cloud",
            SceneCategory::Bush => "bush",
        }
    }
}

impl fmt::Display for SceneCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "street" => Ok(SceneCategory::Street),
            "cloud" => Ok(SceneCategory::Cloud),
            "bush" => Ok(SceneCategory::Bush),
            other => Err(Error::InvalidConfig(format!("unknown scene category `{other}`"))),
        }
    }
}

/// Category probabilities of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<SceneCategory, f64>", into = "BTreeMap<SceneCategory, f64>")]
pub struct BiasProfile {
    probabilities: BTreeMap<SceneCategory, f64>,
}

impl BiasProfile {
    pub fn new(probabilities: BTreeMap<SceneCategory, f64>) -> Result<Self> {
        if let Some((c, p)) = probabilities.iter().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidProfile(format!("probability of {c} is {p}")));
        }
        let sum: f64 = probabilities.values().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProfile(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(BiasProfile { probabilities })
    }

    pub fn from_weights(street: f64, cloud: f64, bush: f64) -> Result<Self> {
        Self::new(BTreeMap::from([
            (SceneCategory::Street, street),
            (SceneCategory::Cloud, cloud),
            (SceneCategory::Bush, bush),
        ]))
    }

    /// Street-dominated default mix.
    pub fn street_biased() -> Self {
        Self::from_weights(0.8, 0.1, 0.1).expect("static profile")
    }

    pub fn probability(&self, c: SceneCategory) -> f64 {
        self.probabilities.get(&c).copied().unwrap_or(0.0)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneCategory {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = SceneCategory::Street;
        for (&c, &p) in &self.probabilities {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = c;
            if u < acc {
                return c;
            }
        }
        last
    }
}

impl TryFrom<BTreeMap<SceneCategory, f64>> for BiasProfile {
    type Error = Error;

    fn try_from(map: BTreeMap<SceneCategory, f64>) -> Result<Self> {
        BiasProfile::new(map)
    }
}

impl From<BiasProfile> for BTreeMap<SceneCategory, f64> {
    fn from(p: BiasProfile) -> Self {
        p.probabilities
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub ir: Image,
    pub vis: Image,
    pub category: SceneCategory,
    pub id: String,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_pair(category: SceneCategory, size: usize, seed: u64) -> Result<ImagePair> {
    if size < MIN_SIZE {
        return Err(Error::Dimension(format!(
            "scene size {size} is below the minimum of {MIN_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, category as u64 + 1));
    let (ir, vis) = match category {
        SceneCategory::Street => street(size, &mut rng),
        SceneCategory::Cloud => cloud(size, &mut rng),
        SceneCategory::Bush => bush(size, &mut rng),
    };
    Ok(ImagePair {
        ir: ir.map(|v| v.clamp(0.0, 1.0)),
        vis: vis.map(|v| v.clamp(0.0, 1.0)),
        category,
        id: format!("{category}-{seed:016x}"),
    })
}

/// `n` pairs with categories drawn i.i.d. from `profile`. Item `i` is
/// generated from sub-seed `mix_seed(seed, i)`; ids are zero-padded indices.
pub fn generate_dataset(profile: &BiasProfile, n: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    let mut draw = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let categories: Vec<SceneCategory> = (0..n).map(|_| profile.sample(&mut draw)).collect();
    categories
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut pair = generate_pair(c, size, mix_seed(seed, i as u64))?;
            pair.id = format!("{i:05}");
            Ok(pair)
        })
        .collect()
}

/// `per_category` pairs of every category, in category-major order.
pub fn generate_balanced(per_category: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let mut out = Vec::with_capacity(per_category * 3);
    for c in SceneCategory::ALL {
        for _ in 0..per_category {
            let i = out.len();
            let mut pair = generate_pair(c, size, mix_seed(seed, i as u64))?;
            pair.id = format!("{i:05}");
            out.push(pair);
        }
    }
    Ok(out)
}

/// Bilinearly interpolated random lattice with `cells` cells per side.
fn value_noise<R: Rng + ?Sized>(size: usize, cells: usize, rng: &mut R) -> Image {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let scale = cells as f64 / size as f64;
    Image::from_fn(size, size, |y, x| {
        let fy = y as f64 * scale;
        let fx = x as f64 * scale;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let at = |a: usize, b: usize| lattice[a.min(cells) * n + b.min(cells)];
        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
        let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn ellipse(y: usize, x: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
    (-d * d).exp()
}

fn street<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Image, Image) {
    let s = size as f64;
    let horizon = rng.random_range(0.45..0.65) * s;
    let buildings: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..6))
        .map(|_| {
            let w = rng.random_range(0.1..0.25) * s;
            let left = rng.random_range(0.0..s - w);
            let top = rng.random_range(0.1..0.4) * s;
            let shade = rng.random_range(0.55..0.95);
            (left, w, top, shade)
        })
        .collect();
    let lamps: Vec<(f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(0.15..0.45) * s, rng.random_range(0.1..0.9) * s))
        .collect();
    let people: Vec<(f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (horizon + rng.random_range(0.05..0.25) * s, rng.random_range(0.1..0.9) * s))
        .collect();

    let building_at = |y: usize, x: usize| -> Option<f64> {
        let (yf, xf) = (y as f64, x as f64);
        buildings
            .iter()
            .rev()
            .find(|(l, w, t, _)| xf >= *l && xf < l + w && yf >= *t && yf < horizon)
            .map(|b| b.3)
    };
    let vis = Image::from_fn(size, size, |y, x| {
        let mut v = if (y as f64) < horizon { 0.15 } else { 0.3 };
        if let Some(shade) = building_at(y, x) {
            // windows: a regular grid of dark cells
            let win = (y % 4 < 2) && (x % 4 < 2);
            v = if win { shade * 0.35 } else { shade };
        }
        if (y as f64 - horizon).abs() < 1.0 {
            v = 0.85;
        }
        for &(ly, lx) in &lamps {
            v += 0.9 * ellipse(y, x, ly, lx, 1.2, 1.2);
        }
        for &(py, px) in &people {
            v -= 0.05 * ellipse(y, x, py, px, 0.09 * s, 0.035 * s);
        }
        v
    });
    let ir = Image::from_fn(size, size, |y, x| {
        let mut v = 0.2 + 0.05 * (y as f64 / s);
        if building_at(y, x).is_some() {
            v += 0.08;
        }
        for &(py, px) in &people {
            v += 0.75 * ellipse(y, x, py, px, 0.09 * s, 0.035 * s);
        }
        v
    });
    (ir, vis)
}

fn cloud<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Image, Image) {
    let s = size as f64;
    let coarse = value_noise(size, 2, rng);
    let fine = value_noise(size, 4, rng);
    let base = rng.random_range(0.45..0.6);
    let vis = Image::from_fn(size, size, |y, x| {
        base + 0.35 * (coarse.get(y, x) - 0.5) + 0.15 * (fine.get(y, x) - 0.5)
    });
    let tilt = rng.random_range(-0.15..0.15);
    let warm = rng.random_range(0.5..0.65);
    let (hy, hx) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
    let ir = Image::from_fn(size, size, |y, x| {
        warm + tilt * (x as f64 / s - 0.5) + 0.04 * (coarse.get(y, x) - 0.5)
            + 0.25 * ellipse(y, x, hy, hx, 0.12 * s, 0.12 * s)
    });
    (ir, vis)
}

fn bush<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Image, Image) {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.9..1.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (theta.cos() * freq, theta.sin() * freq, phase, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let shade = value_noise(size, 2, rng);
    let vis = Image::from_fn(size, size, |y, x| {
        let t: f64 = waves
            .iter()
            .map(|(ky, kx, ph, a)| a * (ky * y as f64 + kx * x as f64 + ph).sin())
            .sum::<f64>()
            / norm;
        0.35 + 0.15 * shade.get(y, x) + 0.25 * t
    });
    let speckle: Vec<(f64, f64, f64)> = (0..(size * size / 40).max(4))
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.2..0.4)))
        .collect();
    let (hy, hx) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let ir = Image::from_fn(size, size, |y, x| {
        let mut v = 0.3 + 0.05 * shade.get(y, x);
        for &(sy, sx, a) in &speckle {
            v += a * ellipse(y, x, sy, sx, 0.7, 0.7);
        }
        v + 0.5 * ellipse(y, x, hy, hx, 0.08 * s, 0.05 * s)
    });
    (ir, vis)
}
