//! Fusion loss, paired augmentation and the Adam training loop.
//!
//! Every epoch draws its shuffle order and augmentation from its own stream
//! `mix_seed(seed, epoch)`, so stopping after any epoch, checkpointing the
//! parameter store and resuming reproduces an uninterrupted run bit for bit.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusionnet::FusionModel;
use crate::image::{gaussian_taps, sobel_kernel, Image};
use crate::scenegen::{mix_seed, ImagePair};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Intensity weight.
    pub alpha: f64,
    /// Gradient weight.
    pub beta: f64,
    /// Structural weight.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 6,
            epochs: 30,
            crop: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.crop == 0 {
            return Err(Error::InvalidConfig("crop must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Individual loss terms, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub intensity: f64,
    pub gradient: f64,
    pub structural: f64,
}

/// Graph handles of the three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub intensity: Var,
    pub gradient: Var,
    pub structural: Var,
    pub total: Var,
}

/// Sobel responses `[2, h, w]` (x then y) under zero padding.
fn sobel_var(g: &mut Graph, img: Var) -> Result<Var> {
    let k = g.constant(sobel_kernel());
    let b = g.constant(Tensor::zeros(&[2]));
    g.conv2d(img, k, b)
}

/// Per direction, the source gradient with the larger magnitude (ties go to
/// infrared).
fn dominant_gradient(ir: &Tensor, vis: &Tensor) -> Tensor {
    let data = ir
        .data()
        .iter()
        .zip(vis.data())
        .map(|(&a, &b)| if b.abs() > a.abs() { b } else { a })
        .collect();
    Tensor::new(ir.shape().to_vec(), data).expect("same shape as the sources")
}

/// Gaussian filtering with zero padding, renormalized by the window mass
/// that falls inside the image so borders are not darkened.
struct GaussianBlur {
    kernel: Var,
    bias: Var,
    inv_mass: Var,
}

impl GaussianBlur {
    fn new(g: &mut Graph, h: usize, w: usize) -> Result<Self> {
        let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let k2: Vec<f64> = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect();
        let kt = Tensor::new(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], k2)?;
        let mass = crate::diff::conv2d_raw(&vec![1.0; h * w], kt.data(), &[0.0], 1, h, w, 1, SSIM_WINDOW);
        let inv = Tensor::new(vec![1, h, w], mass.iter().map(|m| 1.0 / m).collect())?;
        Ok(GaussianBlur {
            kernel: g.constant(kt),
            bias: g.constant(Tensor::zeros(&[1])),
            inv_mass: g.constant(inv),
        })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.conv2d(x, self.kernel, self.bias)?;
        g.mul(y, self.inv_mass)
    }
}

/// Mean local SSIM between two `[1, h, w]` maps, differentiable in both.
fn ssim_var(g: &mut Graph, blur: &GaussianBlur, a: Var, b: Var) -> Result<Var> {
    let mu_a = blur.apply(g, a)?;
    let mu_b = blur.apply(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur.apply(g, aa)?;
    let e_bb = blur.apply(g, bb)?;
    let e_ab = blur.apply(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, SSIM_C2);
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Records the fusion loss for a fused map `y` of shape `[1, h, w]`.
///
/// `α·mean|y − max(ir, vis)| + β·mean|∇y − ∇s| + γ·(1 − (SSIM(y, ir) + SSIM(y, vis))/2)`
/// where `∇s` picks, per pixel and Sobel direction, the source gradient of
/// larger magnitude.
pub fn fusion_loss_var(g: &mut Graph, y: Var, ir: &Image, vis: &Image, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    ir.ensure_same_dims(vis)?;
    let (h, w) = ir.dims();
    if g.shape(y) != [1, h, w] {
        return Err(Error::shape("fusion_loss", g.shape(y), &[1, h, w]));
    }
    let target = ir.zip_map(vis, f64::max)?;
    let target = g.constant(target.to_tensor());
    let diff = g.sub(y, target)?;
    let diff = g.abs(diff);
    let intensity = g.mean(diff);

    let irv = g.constant(ir.to_tensor());
    let visv = g.constant(vis.to_tensor());
    let gi = sobel_var(g, irv)?;
    let gv = sobel_var(g, visv)?;
    let dominant = dominant_gradient(g.value(gi), g.value(gv));
    let dominant = g.constant(dominant);
    let gy = sobel_var(g, y)?;
    let gdiff = g.sub(gy, dominant)?;
    let gdiff = g.abs(gdiff);
    let gradient = g.mean(gdiff);

    let blur = GaussianBlur::new(g, h, w)?;
    let s_ir = ssim_var(g, &blur, y, irv)?;
    let s_vis = ssim_var(g, &blur, y, visv)?;
    let s = g.add(s_ir, s_vis)?;
    let s = g.scale(s, -0.5);
    let structural = g.add_scalar(s, 1.0);

    let a = g.scale(intensity, cfg.alpha);
    let b = g.scale(gradient, cfg.beta);
    let c = g.scale(structural, cfg.gamma);
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(LossVars {
        intensity,
        gradient,
        structural,
        total,
    })
}

/// Unweighted loss terms for a fused image.
pub fn loss_terms(y: &Image, ir: &Image, vis: &Image, cfg: &LossConfig) -> Result<LossTerms> {
    y.ensure_same_dims(ir)?;
    let mut g = Graph::new();
    let yv = g.constant(y.to_tensor());
    let l = fusion_loss_var(&mut g, yv, ir, vis, cfg)?;
    Ok(LossTerms {
        intensity: g.value(l.intensity).item(),
        gradient: g.value(l.gradient).item(),
        structural: g.value(l.structural).item(),
    })
}

pub fn fusion_loss(y: &Image, ir: &Image, vis: &Image, cfg: &LossConfig) -> Result<f64> {
    let t = loss_terms(y, ir, vis, cfg)?;
    Ok(cfg.alpha * t.intensity + cfg.beta * t.gradient + cfg.gamma * t.structural)
}

/// One crop window and one flip decision, applied to both modalities.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, crop: usize, rng: &mut R) -> Result<ImagePair> {
    pair.ir.ensure_same_dims(&pair.vis)?;
    let (h, w) = pair.ir.dims();
    if crop == 0 || crop > h.min(w) {
        return Err(Error::InvalidConfig(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let flip = rng.random_bool(0.5);
    let apply = |img: &Image| -> Result<Image> {
        let c = img.crop(top, left, crop, crop)?;
        Ok(if flip { c.flip_horizontal() } else { c })
    };
    Ok(ImagePair {
        ir: apply(&pair.ir)?,
        vis: apply(&pair.vis)?,
        category: pair.category,
        id: pair.id.clone(),
    })
}

/// Per-epoch mean training loss, indexed from epoch 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{l:.9}\n", e + 1));
        }
        out
    }
}

/// Trains for `tcfg.epochs` epochs from scratch.
pub fn train(model: &mut FusionModel, data: &[ImagePair], tcfg: &TrainConfig, lcfg: &LossConfig) -> Result<TrainHistory> {
    train_epochs(model, data, tcfg, lcfg, 0..tcfg.epochs)
}

/// Runs the given epochs; `start..end` continues a run that stopped after
/// epoch `start`.
pub fn train_epochs(
    model: &mut FusionModel,
    data: &[ImagePair],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    epochs: Range<usize>,
) -> Result<TrainHistory> {
    tcfg.validate()?;
    lcfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for p in data {
        p.ir.ensure_same_dims(&p.vis)?;
        let (h, w) = p.ir.dims();
        if tcfg.crop > h.min(w) {
            return Err(Error::InvalidConfig(format!(
                "crop {} exceeds image {} of size {h}x{w}",
                tcfg.crop, p.id
            )));
        }
    }
    let adam = tcfg.adam();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            model.params.zero_grad();
            let share = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = augment(&data[i], tcfg.crop, &mut rng)?;
                let mut g = Graph::new();
                let y = model.forward(&mut g, &p.ir, &p.vis, true)?;
                let l = fusion_loss_var(&mut g, y, &p.ir, &p.vis, lcfg)?;
                total += g.value(l.total).item();
                let scaled = g.scale(l.total, share);
                g.backward(scaled)?;
                g.accumulate_into(&mut model.params);
            }
            model.params.adam_step(&adam);
        }
        model.params.zero_grad();
        let mean = total / data.len() as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        history.epoch_loss.push(mean);
    }
    Ok(history)
}
