use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{FrozenConvExtractor, Modality, SceneFeatureExtractor, SceneFeatureSet};
use super::kmeans::{kmeanspp_seed, lloyd, ClusterAssignment};
use super::pca::{pca_fit, PcaModel};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_SIZE: usize = 25;
pub const DEFAULT_DIM: usize = 16;

/// Scene cluster centers of one modality, in PCA-reduced coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderDictionary {
    pub modality: Modality,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub pca: PcaModel,
    /// `n` rows of length `d`; row `i` is the mean of cluster `i`.
    pub centers: Vec<Vec<f64>>,
}

/// A dictionary together with the intermediate products used to build it.
#[derive(Debug, Clone)]
pub struct DictionaryBuild {
    pub dictionary: ConfounderDictionary,
    pub features: SceneFeatureSet,
    pub reduced: Vec<Vec<f64>>,
    pub assignment: ClusterAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictionaryParams {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        DictionaryParams {
            n: DEFAULT_SIZE,
            d: DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl ConfounderDictionary {
    /// Centers as an `[n, d]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.d], self.centers.concat()).expect("dictionary shape invariant")
    }

    /// Same dictionary with every row replaced by `rows`; used to probe the
    /// fusion module with hand-made entries.
    pub fn with_centers(modality: Modality, centers: Vec<Vec<f64>>) -> Result<Self> {
        let n = centers.len();
        let d = centers.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || centers.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("dictionary rows must be non-empty and equal length".into()));
        }
        Ok(ConfounderDictionary {
            modality,
            n,
            d,
            seed: 0,
            pca: PcaModel {
                mean: vec![0.0; d],
                components: (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
                eigenvalues: vec![0.0; d],
            },
            centers,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n != self.centers.len() || self.centers.iter().any(|r| r.len() != self.d) {
            return Err(Error::Format {
                what: "dictionary",
                detail: format!("centers do not form a {}x{} matrix", self.n, self.d),
            });
        }
        if self.pca.output_dim() != self.d {
            return Err(Error::Format {
                what: "dictionary",
                detail: format!("PCA keeps {} axes but d = {}", self.pca.output_dim(), self.d),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dict: ConfounderDictionary = serde_json::from_str(text)?;
        dict.validate()?;
        Ok(dict)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Builds a dictionary with the bundled frozen extractor.
pub fn build_dictionary(images: &[&Image], modality: Modality, params: DictionaryParams) -> Result<ConfounderDictionary> {
    Ok(build_dictionary_with(&FrozenConvExtractor::new(), images, modality, params)?.dictionary)
}

/// Feature extraction → PCA to `d` → K-Means++ seeding → Lloyd; rows are
/// the cluster means of the reduced features.
pub fn build_dictionary_with<E: SceneFeatureExtractor + ?Sized>(
    extractor: &E,
    images: &[&Image],
    modality: Modality,
    params: DictionaryParams,
) -> Result<DictionaryBuild> {
    if images.len() < params.n || params.n == 0 {
        return Err(Error::Count {
            requested: params.n,
            available: images.len(),
        });
    }
    let features = SceneFeatureSet::extract(extractor, modality, images)?;
    build_from_features(features, params)
}

pub fn build_from_features(features: SceneFeatureSet, params: DictionaryParams) -> Result<DictionaryBuild> {
    if features.len() < params.n || params.n == 0 {
        return Err(Error::Count {
            requested: params.n,
            available: features.len(),
        });
    }
    let pca = pca_fit(&features.features, params.d)?;
    let reduced = features
        .features
        .iter()
        .map(|f| pca.transform(f))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = kmeanspp_seed(&reduced, params.n, &mut rng)?;
    let (centers, assignment) = lloyd(&reduced, init);
    let dictionary = ConfounderDictionary {
        modality: features.modality,
        n: params.n,
        d: params.d,
        seed: params.seed,
        pca,
        centers,
    };
    Ok(DictionaryBuild {
        dictionary,
        features,
        reduced,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_balanced, generate_pair, SceneCategory};

    fn corpus(n: usize, seed: u64) -> Vec<Image> {
        (0..n)
            .map(|i| generate_pair(SceneCategory::ALL[i % 3], 24, seed + i as u64).unwrap().vis)
            .collect()
    }

    fn max_member_gap(build: &DictionaryBuild) -> f64 {
        let d = &build.dictionary;
        let mut worst: f64 = 0.0;
        for (k, center) in d.centers.iter().enumerate() {
            let members: Vec<&Vec<f64>> = build
                .reduced
                .iter()
                .zip(&build.assignment.labels)
                .filter(|(_, &l)| l == k)
                .map(|(r, _)| r)
                .collect();
            assert!(!members.is_empty());
            for j in 0..d.d {
                let mean = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                worst = worst.max((center[j] - mean).abs());
            }
        }
        worst
    }

    #[test]
    fn centers_are_cluster_means() {
        let imgs = corpus(40, 0);
        let refs: Vec<&Image> = imgs.iter().collect();
        let b = build_dictionary_with(
            &FrozenConvExtractor::new(),
            &refs,
            Modality::Visible,
            DictionaryParams { n: 6, d: 8, seed: 3 },
        )
        .unwrap();
        assert!(max_member_gap(&b) < 1e-9);
        assert_eq!(b.assignment.counts.iter().sum::<usize>(), 40);
        assert_eq!(b.dictionary.centers.len(), 6);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let imgs = corpus(12, 1);
        let refs: Vec<&Image> = imgs.iter().collect();
        let b = build_dictionary_with(
            &FrozenConvExtractor::new(),
            &refs,
            Modality::Infrared,
            DictionaryParams { n: 1, d: 4, seed: 0 },
        )
        .unwrap();
        for j in 0..4 {
            let mean = b.reduced.iter().map(|r| r[j]).sum::<f64>() / 12.0;
            assert!((b.dictionary.centers[0][j] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let imgs = corpus(30, 2);
        let refs: Vec<&Image> = imgs.iter().collect();
        let p = DictionaryParams { n: 5, d: 6, seed: 42 };
        let a = build_dictionary(&refs, Modality::Visible, p).unwrap();
        let b = build_dictionary(&refs, Modality::Visible, p).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = ConfounderDictionary::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let bits = |d: &ConfounderDictionary| -> Vec<u64> {
            d.centers.iter().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&a));
    }

    #[test]
    fn corpus_smaller_than_n_rejected() {
        let imgs = corpus(4, 3);
        let refs: Vec<&Image> = imgs.iter().collect();
        let err = build_dictionary(&refs, Modality::Visible, DictionaryParams { n: 5, d: 2, seed: 0 });
        assert!(matches!(err, Err(Error::Count { requested: 5, available: 4 })));
    }

    #[test]
    fn unknown_fields_rejected() {
        let imgs = corpus(10, 4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let d = build_dictionary(&refs, Modality::Visible, DictionaryParams { n: 2, d: 3, seed: 0 }).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ConfounderDictionary::from_json(&v.to_string()).is_err());
        assert!(d.to_json().unwrap().contains("\"N\": 2"));
    }

    #[test]
    fn clusters_follow_scene_categories() {
        let pairs = generate_balanced(20, 32, 77).unwrap();
        let refs: Vec<&Image> = pairs.iter().map(|p| &p.vis).collect();
        let b = build_dictionary_with(
            &FrozenConvExtractor::new(),
            &refs,
            Modality::Visible,
            DictionaryParams { n: 3, d: DEFAULT_DIM, seed: 5 },
        )
        .unwrap();
        for center in &b.dictionary.centers {
            // the 10 nearest training features of each center
            let mut by_dist: Vec<(f64, SceneCategory)> = b
                .reduced
                .iter()
                .zip(&pairs)
                .map(|(r, p)| {
                    let d: f64 = r.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, p.category)
                })
                .collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
            let top: Vec<SceneCategory> = by_dist.iter().take(10).map(|x| x.1).collect();
            let best = SceneCategory::ALL
                .iter()
                .map(|c| top.iter().filter(|t| *t == c).count())
                .max()
                .unwrap();
            assert!(best >= 8, "{top:?}");
        }
    }
}
