//! Fusion quality measures: mutual information, SSIM, the Xydeas–Petrović
//! edge preservation score and pixel-domain VIF, plus the per-image report.

use std::f64::consts::FRAC_PI_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusionnet::FusionModel;
use crate::image::{filter_same, filter_valid, gaussian_taps, sobel, Image};
use crate::scenegen::ImagePair;

pub const MI_BINS: usize = 256;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

pub const VIF_SCALES: usize = 4;
pub const VIF_MIN_SIDE: usize = 8;
/// Visual noise variance of the 8-bit formulation rescaled to unit range.
pub const VIF_NOISE_VAR: f64 = 2.0 / (255.0 * 255.0);
const VIF_EPS: f64 = 1e-10 / (255.0 * 255.0);

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    Ok(())
}

/// Shannon entropy in bits of the `bins`-level histogram.
pub fn entropy(a: &Image, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let mut hist = vec![0.0; bins];
    for &v in a.pixels() {
        hist[bin(v, bins)] += 1.0;
    }
    let n = a.pixels().len() as f64;
    Ok(-hist.iter().filter(|&&c| c > 0.0).map(|c| c / n * (c / n).log2()).sum::<f64>())
}

/// Histogram mutual information in bits.
pub fn mutual_information(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    a.ensure_same_dims(b)?;
    check_bins(bins)?;
    let n = a.pixels().len() as f64;
    let mut joint = vec![0.0; bins * bins];
    let (mut pa, mut pb) = (vec![0.0; bins], vec![0.0; bins]);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (i, j) = (bin(x, bins), bin(y, bins));
        joint[i * bins + j] += 1.0;
        pa[i] += 1.0;
        pb[j] += 1.0;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0.0 {
                // c·n / (ca·cb) is symmetric in the two arguments
                mi += c / n * (c * n / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Mean SSIM over all fully covered 11×11 Gaussian windows, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs both sides >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let f = |img: &Image| filter_valid(img, &taps).expect("size checked above");
    let (mu_a, mu_b) = (f(a), f(b));
    let e_aa = f(&a.zip_map(a, |x, y| x * y)?);
    let e_bb = f(&b.zip_map(b, |x, y| x * y)?);
    let e_ab = f(&a.zip_map(b, |x, y| x * y)?);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.pixels().len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.pixels()[i], mu_b.pixels()[i]);
        let va = e_aa.pixels()[i] - ma * ma;
        let vb = e_bb.pixels()[i] - mb * mb;
        let cov = e_ab.pixels()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

struct EdgeField {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edge_field(img: &Image) -> EdgeField {
    let (gx, gy) = sobel(img);
    let strength = gx.pixels().iter().zip(gy.pixels()).map(|(x, y)| x.hypot(*y)).collect();
    let angle = gx
        .pixels()
        .iter()
        .zip(gy.pixels())
        .map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeField { strength, angle }
}

/// Per-pixel edge preservation `Q^{SF}` of source `s` in the fused image.
fn preservation(s: &EdgeField, f: &EdgeField, i: usize) -> f64 {
    let (gs, gf) = (s.strength[i], f.strength[i]);
    let g = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
    let a = 1.0 - (s.angle[i] - f.angle[i]).abs() / FRAC_PI_2;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Source-strength weighted Sobel edge preservation. Sources without any edge
/// strength score 0.
pub fn qabf(ir: &Image, vis: &Image, fused: &Image) -> Result<f64> {
    ir.ensure_same_dims(vis)?;
    ir.ensure_same_dims(fused)?;
    let (a, b, f) = (edge_field(ir), edge_field(vis), edge_field(fused));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..a.strength.len() {
        let (wa, wb) = (a.strength[i], b.strength[i]);
        num += preservation(&a, &f, i) * wa + preservation(&b, &f, i) * wb;
        den += wa + wb;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

fn decimate(img: &Image) -> Image {
    let (h, w) = img.dims();
    Image::from_fn(h.div_ceil(2), w.div_ceil(2), |y, x| img.get(2 * y, 2 * x))
}

/// Pixel-domain VIF of `dist` against `reference` over four scales. Filtering
/// keeps the image size so any side of at least 8 is accepted. A reference
/// with no local variance at any scale carries no information and scores 0.
pub fn vif(reference: &Image, dist: &Image) -> Result<f64> {
    reference.ensure_same_dims(dist)?;
    let (h, w) = reference.dims();
    if h.min(w) < VIF_MIN_SIDE {
        return Err(Error::Dimension(format!(
            "VIF needs both sides >= {VIF_MIN_SIDE}, got {h}x{w}"
        )));
    }
    let (mut r, mut d) = (reference.clone(), dist.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES - scale + 1)) + 1;
        let taps = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            r = decimate(&filter_same(&r, &taps));
            d = decimate(&filter_same(&d, &taps));
        }
        let f = |img: &Image| filter_same(img, &taps);
        let (mu1, mu2) = (f(&r), f(&d));
        let e11 = f(&r.zip_map(&r, |x, y| x * y)?);
        let e22 = f(&d.zip_map(&d, |x, y| x * y)?);
        let e12 = f(&r.zip_map(&d, |x, y| x * y)?);
        for i in 0..r.pixels().len() {
            let (m1, m2) = (mu1.pixels()[i], mu2.pixels()[i]);
            let mut s1 = (e11.pixels()[i] - m1 * m1).max(0.0);
            let s2 = (e22.pixels()[i] - m2 * m2).max(0.0);
            let s12 = e12.pixels()[i] - m1 * m2;

            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(VIF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Fusion scores of one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub image_id: String,
    /// `MI(Y, ir) + MI(Y, vis)`.
    pub mi: f64,
    /// `(VIF(ir, Y) + VIF(vis, Y)) / 2`.
    pub vif: f64,
    pub qabf: f64,
    /// `(SSIM(Y, ir) + SSIM(Y, vis)) / 2`.
    pub ssim: f64,
}

pub fn score_fusion(id: &str, ir: &Image, vis: &Image, fused: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        image_id: id.to_string(),
        mi: mutual_information(fused, ir, MI_BINS)? + mutual_information(fused, vis, MI_BINS)?,
        vif: (vif(ir, fused)? + vif(vis, fused)?) / 2.0,
        qabf: qabf(ir, vis, fused)?,
        ssim: (ssim(fused, ir)? + ssim(fused, vis)?) / 2.0,
    })
}

/// Per-image rows in dataset order and, when non-empty, the column means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<MetricReport>,
    pub mean: Option<MetricReport>,
}

impl EvaluationReport {
    pub fn from_rows(rows: Vec<MetricReport>) -> Self {
        let mean = mean_row("MEAN", rows.iter());
        EvaluationReport { rows, mean }
    }

    /// `image_id,MI,VIF,Qabf,SSIM` with six decimals and a trailing `MEAN` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format {
            what: "report",
            detail: e.to_string(),
        };
        w.write_record(["image_id", "MI", "VIF", "Qabf", "SSIM"]).map_err(csv_err)?;
        for r in self.rows.iter().chain(&self.mean) {
            let f = |v: f64| format!("{v:.6}");
            w.write_record([r.image_id.clone(), f(r.mi), f(r.vif), f(r.qabf), f(r.ssim)])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Arithmetic mean of each metric column; `None` for no rows.
pub fn mean_row<'a>(id: &str, rows: impl Iterator<Item = &'a MetricReport>) -> Option<MetricReport> {
    let mut acc = MetricReport {
        image_id: id.to_string(),
        mi: 0.0,
        vif: 0.0,
        qabf: 0.0,
        ssim: 0.0,
    };
    let mut n = 0usize;
    for r in rows {
        acc.mi += r.mi;
        acc.vif += r.vif;
        acc.qabf += r.qabf;
        acc.ssim += r.ssim;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let k = n as f64;
    acc.mi /= k;
    acc.vif /= k;
    acc.qabf /= k;
    acc.ssim /= k;
    Some(acc)
}

/// Fuses every pair and scores it.
pub fn evaluate(model: &FusionModel, data: &[ImagePair]) -> Result<EvaluationReport> {
    let rows = data
        .iter()
        .map(|p| {
            let y = model.fuse(&p.ir, &p.vis)?;
            score_fusion(&p.id, &p.ir, &p.vis, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |y, x| ((y + x) % 2) as f64)
    }

    #[test]
    fn mi_of_self_is_entropy() {
        let a = noise(20, 20, 1);
        let e = entropy(&a, 32).unwrap();
        assert!((mutual_information(&a, &a, 32).unwrap() - e).abs() < 1e-12);
        // two equally likely levels carry one bit
        assert!((entropy(&checker(8), MI_BINS).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mi_of_independent_noise_is_small() {
        let mi = mutual_information(&noise(64, 64, 10), &noise(64, 64, 11), 16).unwrap();
        assert!(mi < 0.05, "{mi}");
    }

    #[test]
    fn mi_of_constant_is_zero() {
        assert_eq!(mutual_information(&Image::filled(9, 9, 0.4), &noise(9, 9, 0), 256).unwrap(), 0.0);
    }

    #[test]
    fn ssim_cases() {
        let a = noise(16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let c = checker(16);
        assert!(ssim(&c, &c.map(|v| 1.0 - v)).unwrap() < 0.0);
        assert!(ssim(&noise(10, 16, 0), &noise(10, 16, 1)).is_err());
    }

    #[test]
    fn qabf_cases() {
        let step = Image::from_fn(16, 16, |_, x| if x < 8 { 0.1 } else { 0.9 });
        let flat = Image::filled(16, 16, 0.5);
        assert!(qabf(&step, &flat, &step).unwrap() > 0.9);
        assert_eq!(qabf(&flat, &flat, &flat).unwrap(), 0.0);
        let (a, b, f) = (noise(12, 12, 1), noise(12, 12, 2), noise(12, 12, 3));
        assert_eq!(qabf(&a, &b, &f).unwrap(), qabf(&b, &a, &f).unwrap());
    }

    #[test]
    fn vif_cases() {
        let a = noise(32, 32, 5).zip_map(&checker(32), |n, c| 0.3 * n + 0.6 * c).unwrap();
        assert!((vif(&a, &a).unwrap() - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let noise: Vec<f64> = (0..32 * 32).map(|_| rng.sample(normal)).collect();
        let noisy = Image::new(32, 32, a.pixels().iter().zip(&noise).map(|(v, n)| v + n).collect()).unwrap();
        assert!(vif(&a, &noisy).unwrap() < vif(&a, &a).unwrap());

        let b3 = crate::image::box_blur(&a, 3);
        let b7 = crate::image::box_blur(&a, 7);
        assert!(vif(&a, &b7).unwrap() <= vif(&a, &b3).unwrap());
        assert!(vif(&a.crop(0, 0, 7, 7).unwrap(), &a.crop(0, 0, 7, 7).unwrap()).is_err());
        assert!((vif(&a.crop(0, 0, 8, 8).unwrap(), &a.crop(0, 0, 8, 8).unwrap()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn report_csv_and_means() {
        let rows = vec![
            MetricReport {
                image_id: "a".into(),
                mi: 1.0,
                vif: 0.5,
                qabf: 0.25,
                ssim: 0.125,
            },
            MetricReport {
                image_id: "b".into(),
                mi: 2.0,
                vif: 0.25,
                qabf: 0.5,
                ssim: -0.125,
            },
        ];
        let r = EvaluationReport::from_rows(rows);
        assert_eq!(
            r.to_csv().unwrap(),
            "image_id,MI,VIF,Qabf,SSIM\na,1.000000,0.500000,0.250000,0.125000\n\
             b,2.000000,0.250000,0.500000,-0.125000\nMEAN,1.500000,0.375000,0.375000,0.000000\n"
        );
        let empty = EvaluationReport::from_rows(vec![]);
        assert!(empty.mean.is_none());
        assert_eq!(empty.to_csv().unwrap(), "image_id,MI,VIF,Qabf,SSIM\n");
    }
}
