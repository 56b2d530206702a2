use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal axes of a feature set, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` rows of length `d_m`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing, non-negative variances along each component.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `components · (x − mean)`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "PCA expects {}-dimensional input, got {}",
                self.mean.len(),
                x.len()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|axis| {
                axis.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((a, xi), m)| a * (xi - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + componentsᵀ · y`.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.components.len() {
            return Err(Error::Dimension(format!(
                "PCA reconstruct expects {} coordinates, got {}",
                self.components.len(),
                y.len()
            )));
        }
        let mut out = self.mean.clone();
        for (axis, &c) in self.components.iter().zip(y) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += c * a;
            }
        }
        Ok(out)
    }
}

/// Fits `d` principal axes by eigendecomposition of the sample covariance.
///
/// Each axis is oriented so that its largest-magnitude coordinate is
/// positive (first such coordinate on ties).
pub fn pca_fit(features: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Dimension(format!("PCA needs at least 2 samples, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    if d == 0 || d > dim || d > n {
        return Err(Error::Dimension(format!(
            "cannot keep {d} components of {dim}-dimensional data with {n} samples"
        )));
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; dim * dim];
    for f in features {
        for i in 0..dim {
            let ci = f[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += ci * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / (n - 1) as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        let mut axis: Vec<f64> = (0..dim).map(|r| vectors[r * dim + k]).collect();
        let pivot = axis
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best });
        if axis[pivot] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        eigenvalues.push(values[k].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix.
///
/// Returns eigenvalues and a row-major matrix whose columns are the
/// corresponding unit eigenvectors.
pub(crate) fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}
