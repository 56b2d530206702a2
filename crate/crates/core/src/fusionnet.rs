//! End-to-end fusion network: two per-modality convolution stems and a merge
//! convolution produce the joint feature map, the back-door module adjusts
//! it, and a convolution with a shifted tanh reconstructs the fused image.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baffm::{self, content_projection_var, deconfounded_fuse_var, BaffmParams, BaffmVars};
use crate::confounder::{content_hash, ConfounderDictionary, Modality};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ENC_IR_W: &str = "enc.ir.w";
pub const ENC_IR_B: &str = "enc.ir.b";
pub const ENC_VIS_W: &str = "enc.vis.w";
pub const ENC_VIS_B: &str = "enc.vis.b";
pub const ENC_MERGE_W: &str = "enc.merge.w";
pub const ENC_MERGE_B: &str = "enc.merge.b";
pub const REC_W: &str = "rec.w";
pub const REC_B: &str = "rec.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub channels: usize,
    pub fused_channels: usize,
    pub kernel: usize,
    pub attention_dim: usize,
    /// `false` builds the plain `W_h · X` model without the back-door term.
    pub adjust: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 8,
            channels: 16,
            fused_channels: 16,
            kernel: 3,
            attention_dim: 16,
            adjust: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(self.kernel));
        }
        if [self.stem_channels, self.channels, self.fused_channels, self.attention_dim].contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub z_vis: ConfounderDictionary,
    pub z_ir: ConfounderDictionary,
}

/// Graph handles for one forward pass.
struct Weights {
    ir_w: Var,
    ir_b: Var,
    vis_w: Var,
    vis_b: Var,
    merge_w: Var,
    merge_b: Var,
    baffm: BaffmVars,
    rec_w: Var,
    rec_b: Var,
}

impl FusionModel {
    pub fn new(config: ModelConfig, z_vis: ConfounderDictionary, z_ir: ConfounderDictionary, seed: u64) -> Result<Self> {
        config.validate()?;
        if z_vis.d != z_ir.d {
            return Err(Error::Dimension(format!(
                "dictionaries disagree on dimension: visible {} vs infrared {}",
                z_vis.d, z_ir.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let conv_bound = |c_in: usize| (3.0 / (c_in * k * k) as f64).sqrt();
        let (cs, c) = (config.stem_channels, config.channels);
        let mut params = ParamStore::new();
        params.insert(ENC_IR_W, Tensor::uniform(&[cs, 1, k, k], conv_bound(1) * 2.0, &mut rng))?;
        params.insert(ENC_IR_B, Tensor::zeros(&[cs]))?;
        params.insert(ENC_VIS_W, Tensor::uniform(&[cs, 1, k, k], conv_bound(1) * 2.0, &mut rng))?;
        params.insert(ENC_VIS_B, Tensor::zeros(&[cs]))?;
        params.insert(ENC_MERGE_W, Tensor::uniform(&[c, 2 * cs, k, k], conv_bound(2 * cs), &mut rng))?;
        params.insert(ENC_MERGE_B, Tensor::zeros(&[c]))?;
        BaffmParams::init(c, config.fused_channels, z_vis.d, config.attention_dim, &mut rng).register(&mut params)?;
        params.insert(REC_W, Tensor::uniform(&[1, config.fused_channels, k, k], conv_bound(config.fused_channels), &mut rng))?;
        params.insert(REC_B, Tensor::zeros(&[1]))?;
        let mut model = FusionModel {
            config,
            params,
            z_vis,
            z_ir,
        };
        if !config.adjust {
            baffm::disable_adjustment(&mut model.params)?;
        }
        Ok(model)
    }

    /// Copy of this model with both confounder projections zeroed and frozen.
    pub fn without_adjustment(&self) -> Result<Self> {
        let mut m = self.clone();
        m.config.adjust = false;
        baffm::disable_adjustment(&mut m.params)?;
        Ok(m)
    }

    fn weights(&self, g: &mut Graph, trainable: bool) -> Result<Weights> {
        let mut get = |name: &str| -> Result<Var> {
            if trainable {
                g.param(&self.params, name)
            } else {
                let t = self
                    .params
                    .get(name)
                    .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
                Ok(g.constant(t.clone()))
            }
        };
        let (ir_w, ir_b) = (get(ENC_IR_W)?, get(ENC_IR_B)?);
        let (vis_w, vis_b) = (get(ENC_VIS_W)?, get(ENC_VIS_B)?);
        let (merge_w, merge_b) = (get(ENC_MERGE_W)?, get(ENC_MERGE_B)?);
        let (rec_w, rec_b) = (get(REC_W)?, get(REC_B)?);
        let baffm = if trainable {
            BaffmVars::from_store(g, &self.params)?
        } else {
            BaffmVars::constants(g, &BaffmParams::from_store(&self.params)?)
        };
        Ok(Weights {
            ir_w,
            ir_b,
            vis_w,
            vis_b,
            merge_w,
            merge_b,
            baffm,
            rec_w,
            rec_b,
        })
    }

    fn encode_var(&self, g: &mut Graph, w: &Weights, ir: &Image, vis: &Image) -> Result<Var> {
        ir.ensure_same_dims(vis)?;
        let irv = g.constant(ir.to_tensor());
        let visv = g.constant(vis.to_tensor());
        let si = g.conv2d(irv, w.ir_w, w.ir_b)?;
        let si = g.tanh(si);
        let sv = g.conv2d(visv, w.vis_w, w.vis_b)?;
        let sv = g.tanh(sv);
        let joint = g.concat(si, sv)?;
        g.conv2d(joint, w.merge_w, w.merge_b)
    }

    fn adjust_var(&self, g: &mut Graph, w: &Weights, x: Var) -> Result<Var> {
        if self.config.adjust {
            let zv = g.constant(self.z_vis.to_tensor());
            let zi = g.constant(self.z_ir.to_tensor());
            deconfounded_fuse_var(g, x, zv, zi, &w.baffm)
        } else {
            content_projection_var(g, x, w.baffm.w_h)
        }
    }

    fn reconstruct_var(g: &mut Graph, w: &Weights, f: Var) -> Result<Var> {
        let pre = g.conv2d(f, w.rec_w, w.rec_b)?;
        Ok(reconstruct_activation(g, pre))
    }

    /// Records the full forward pass and returns the `[1, h, w]` fused map.
    /// With `trainable`, unfrozen parameters enter as gradient leaves bound
    /// to the store.
    pub fn forward(&self, g: &mut Graph, ir: &Image, vis: &Image, trainable: bool) -> Result<Var> {
        let w = self.weights(g, trainable)?;
        let x = self.encode_var(g, &w, ir, vis)?;
        let f = self.adjust_var(g, &w, x)?;
        Self::reconstruct_var(g, &w, f)
    }

    /// Joint feature map `[channels, h, w]`.
    pub fn encode(&self, ir: &Image, vis: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.weights(&mut g, false)?;
        let x = self.encode_var(&mut g, &w, ir, vis)?;
        Ok(g.value(x).clone())
    }

    /// Back-door adjusted features for a joint feature map.
    pub fn adjust(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.weights(&mut g, false)?;
        let xv = g.constant(x.clone());
        let f = self.adjust_var(&mut g, &w, xv)?;
        Ok(g.value(f).clone())
    }

    /// `(tanh(conv(f)) + 1) / 2`.
    pub fn reconstruct(&self, f: &Tensor) -> Result<Image> {
        let mut g = Graph::new();
        let w = self.weights(&mut g, false)?;
        let fv = g.constant(f.clone());
        let y = Self::reconstruct_var(&mut g, &w, fv)?;
        Image::from_tensor(g.value(y))
    }

    pub fn fuse(&self, ir: &Image, vis: &Image) -> Result<Image> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, ir, vis, false)?;
        Image::from_tensor(g.value(y))
    }
}

/// `(tanh(t) + 1) / 2`, mapping any pre-activation into `(0, 1)`.
pub fn reconstruct_activation(g: &mut Graph, pre: Var) -> Var {
    let t = g.tanh(pre);
    let t = g.add_scalar(t, 1.0);
    g.scale(t, 0.5)
}

/// Location and content hash of a dictionary file pinned by a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl DictionaryRef {
    pub fn for_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Ok(DictionaryRef {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        })
    }

    /// Reads the dictionary, resolving relative paths against `base`, and
    /// checks its hash.
    pub fn load(&self, base: &Path) -> Result<ConfounderDictionary> {
        let path = if self.path.is_relative() { base.join(&self.path) } else { self.path.clone() };
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        let hash = content_hash(&bytes);
        if hash != self.sha256 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} has hash {hash}, checkpoint pins {}", path.display(), self.sha256),
            });
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            what: "dictionary",
            detail: format!("{} is not UTF-8", path.display()),
        })?;
        ConfounderDictionary::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryRefs {
    pub visible: DictionaryRef,
    pub infrared: DictionaryRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    config: ModelConfig,
    dictionaries: DictionaryRefs,
    params: serde_json::Value,
}

/// Writes `model` with references to its dictionary files.
pub fn save_checkpoint(path: &Path, model: &FusionModel, refs: &DictionaryRefs) -> Result<()> {
    let doc = CheckpointFile {
        config: model.config,
        dictionaries: refs.clone(),
        params: serde_json::from_str(&model.params.to_json()?)?,
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Reads a checkpoint and the dictionaries it pins. Relative dictionary paths
/// resolve against the checkpoint's directory.
pub fn load_checkpoint(path: &Path) -> Result<(FusionModel, DictionaryRefs)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let doc: CheckpointFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let z_vis = doc.dictionaries.visible.load(base)?;
    let z_ir = doc.dictionaries.infrared.load(base)?;
    if z_vis.modality != Modality::Visible || z_ir.modality != Modality::Infrared {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "dictionary modalities are swapped".into(),
        });
    }
    let params = ParamStore::from_json(&doc.params.to_string())?;
    doc.config.validate()?;
    Ok((
        FusionModel {
            config: doc.config,
            params,
            z_vis,
            z_ir,
        },
        doc.dictionaries,
    ))
}
