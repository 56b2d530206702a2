//! Scene descriptors for dictionary construction.
//!
//! [`SceneFeatureExtractor`] is the swap point for a pretrained backbone. The
//! bundled [`FrozenConvExtractor`] is a fixed random two-layer convolution
//! stack followed by global average pooling of the rectified responses,
//! concatenated with an 8-bin intensity histogram and the mean Sobel
//! gradient magnitude.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{conv2d_raw, Tensor};
use crate::error::{Error, Result};
use crate::image::{sobel, Image};

pub const EXTRACTOR_SEED: u64 = 0xC0FFEE;
pub const HISTOGRAM_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Infrared,
    Visible,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Infrared => "infrared",
            Modality::Visible => "visible",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infrared" | "ir" => Ok(Modality::Infrared),
            "visible" | "vis" => Ok(Modality::Visible),
            other => Err(Error::InvalidConfig(format!("unknown modality `{other}`"))),
        }
    }
}

pub trait SceneFeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Per-modality feature vectors of a training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatureSet {
    pub modality: Modality,
    pub features: Vec<Vec<f64>>,
}

impl SceneFeatureSet {
    pub fn extract<E: SceneFeatureExtractor + ?Sized>(
        extractor: &E,
        modality: Modality,
        images: &[&Image],
    ) -> Result<Self> {
        let features = images
            .iter()
            .map(|img| extractor.extract(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneFeatureSet { modality, features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FrozenConvExtractor {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FrozenConvExtractor {
    pub const HIDDEN: usize = 4;
    pub const CHANNELS: usize = 8;

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let bound1 = (6.0 / (9.0 + 9.0 * Self::HIDDEN as f64)).sqrt() * 4.0;
        let bound2 = (6.0 / (9.0 * (Self::HIDDEN + Self::CHANNELS) as f64)).sqrt() * 2.0;
        FrozenConvExtractor {
            w1: Tensor::uniform(&[Self::HIDDEN, 1, 3, 3], bound1, &mut rng),
            b1: Tensor::uniform(&[Self::HIDDEN], 0.1, &mut rng),
            w2: Tensor::uniform(&[Self::CHANNELS, Self::HIDDEN, 3, 3], bound2, &mut rng),
            b2: Tensor::uniform(&[Self::CHANNELS], 0.1, &mut rng),
        }
    }
}

impl Default for FrozenConvExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl SceneFeatureExtractor for FrozenConvExtractor {
    fn dim(&self) -> usize {
        Self::CHANNELS + HISTOGRAM_BINS + 1
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w) = image.dims();
        if h == 0 || w == 0 {
            return Err(Error::Dimension("cannot describe an empty image".into()));
        }
        let centered: Vec<f64> = image.pixels().iter().map(|p| p - 0.5).collect();
        let mut a1 = conv2d_raw(&centered, self.w1.data(), self.b1.data(), 1, h, w, Self::HIDDEN, 3);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let a2 = conv2d_raw(&a1, self.w2.data(), self.b2.data(), Self::HIDDEN, h, w, Self::CHANNELS, 3);
        let plane = (h * w) as f64;
        let mut out: Vec<f64> = a2
            .chunks(h * w)
            .map(|c| c.iter().map(|v| v.tanh().abs()).sum::<f64>() / plane)
            .collect();

        let mut hist = [0.0; HISTOGRAM_BINS];
        for &p in image.pixels() {
            let bin = ((p.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            hist[bin] += 1.0;
        }
        out.extend(hist.iter().map(|c| c / plane));

        let (gx, gy) = sobel(image);
        let grad = gx
            .pixels()
            .iter()
            .zip(gy.pixels())
            .map(|(a, b)| (a * a + b * b).sqrt())
            .sum::<f64>()
            / plane;
        out.push(grad);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_pair, SceneCategory};

    #[test]
    fn deterministic_and_sized() {
        let ex = FrozenConvExtractor::new();
        let img = generate_pair(SceneCategory::Street, 24, 5).unwrap().vis;
        let a = ex.extract(&img).unwrap();
        let b = FrozenConvExtractor::new().extract(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), ex.dim());
        assert_eq!(ex.dim(), 17);
    }

    #[test]
    fn constant_image() {
        let f = FrozenConvExtractor::new().extract(&Image::filled(16, 16, 0.3)).unwrap();
        let hist = &f[FrozenConvExtractor::CHANNELS..FrozenConvExtractor::CHANNELS + HISTOGRAM_BINS];
        assert_eq!(hist.iter().filter(|&&m| m == 1.0).count(), 1);
        assert_eq!(hist.iter().sum::<f64>(), 1.0);
        assert_eq!(*f.last().unwrap(), 0.0);
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                if same && j <= i {
                    continue;
                }
                total += dist(x, y);
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn street_and_cloud_separate() {
        let ex = FrozenConvExtractor::new();
        let feats = |c| -> Vec<Vec<f64>> {
            (0..50)
                .map(|s| ex.extract(&generate_pair(c, 32, 1000 + s).unwrap().vis).unwrap())
                .collect()
        };
        let street = feats(SceneCategory::Street);
        let cloud = feats(SceneCategory::Cloud);
        let between = mean_pairwise(&street, &cloud, false);
        let within = (mean_pairwise(&street, &street, true) + mean_pairwise(&cloud, &cloud, true)) / 2.0;
        assert!(between > within, "between={between} within={within}");
    }

    #[test]
    fn modality_parse() {
        assert_eq!("visible".parse::<Modality>().unwrap(), Modality::Visible);
        assert_eq!("ir".parse::<Modality>().unwrap(), Modality::Infrared);
        assert!("radar".parse::<Modality>().is_err());
    }
}
