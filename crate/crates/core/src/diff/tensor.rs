use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Plain matrix product of `[m, k]` and `[k, n]` row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Same-size zero-padded cross-correlation.
///
/// `input` is `[c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_raw(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for (o, &b) in bias.iter().enumerate().take(c_out) {
        out[o * plane..(o + 1) * plane].fill(b);
    }
    for o in 0..c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let wv = kernel[((o * c_in + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &in_plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut out_plane[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            dst[x] += wv * src[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + dx` is inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Gradients of [`conv2d_raw`] with respect to input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_raw(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_k = vec![0.0; kernel.len()];
    for o in 0..c_out {
        let go = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let kidx = ((o * c_in + c) * k + ky) * k + kx;
                    let wv = kernel[kidx];
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = sy as usize * w;
                        let src = &in_plane[row..row + w];
                        let g = &go[y * w..(y + 1) * w];
                        let gi = &mut grad_in[c * plane + row..c * plane + row + w];
                        for (x, &gx) in (x0..x1).zip(&g[x0..x1]) {
                            let sx = (x as isize + dx) as usize;
                            acc += gx * src[sx];
                            gi[sx] += gx * wv;
                        }
                    }
                    grad_k[kidx] += acc;
                }
            }
        }
    }
    (grad_in, grad_k)
}
