use std::fs;
use std::path::{Path, PathBuf};

use causalfuse::confounder::{build_dictionary, DictionaryParams};
use causalfuse::corpus::{atomic_write, read_modality, read_pairs, write_split};
use causalfuse::fusionnet::{load_checkpoint, save_checkpoint, DictionaryRef, DictionaryRefs};
use causalfuse::metrics::{evaluate, MetricReport};
use causalfuse::scenegen::{generate_balanced, generate_dataset};
use causalfuse::training::train;
use causalfuse::{BiasProfile, ConfounderDictionary, FusionModel, Image, ImagePair, Modality};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Generates one split and returns the number of pairs written.
pub fn gen_data(cfg: &RunConfig, root: &Path) -> Result<usize> {
    let d = &cfg.data;
    let mut pairs = match d.per_category {
        Some(k) => generate_balanced(k, d.size, d.seed)?,
        None => {
            let profile = BiasProfile::from_weights(d.street, d.cloud, d.bush)?;
            generate_dataset(&profile, d.n, d.size, d.seed)?
        }
    };
    for (i, p) in pairs.iter_mut().enumerate() {
        p.id = format!("{}_{i:05}", d.split);
    }
    write_split(root, &d.split, &pairs)?;
    log::info!("wrote {} pairs to {}/{}", pairs.len(), root.display(), d.split);
    Ok(pairs.len())
}

fn dictionary_params(cfg: &RunConfig) -> DictionaryParams {
    DictionaryParams {
        n: cfg.dictionary.n,
        d: cfg.dictionary.d,
        seed: cfg.dictionary.seed,
    }
}

fn dictionary_from_corpus(cfg: &RunConfig, modality: Modality, n: usize) -> Result<ConfounderDictionary> {
    let images = read_modality(&cfg.data.corpus, Some(&cfg.data.split), modality)?;
    let refs: Vec<&Image> = images.iter().map(|(_, img)| img).collect();
    let params = DictionaryParams { n, ..dictionary_params(cfg) };
    Ok(build_dictionary(&refs, modality, params)?)
}

pub fn build_dict(cfg: &RunConfig, modality: Modality, out: &Path) -> Result<ConfounderDictionary> {
    let dict = dictionary_from_corpus(cfg, modality, cfg.dictionary.n)?;
    atomic_write(out, dict.to_json()?.as_bytes())?;
    log::info!("wrote {modality} dictionary N={} d={} to {}", dict.n, dict.d, out.display());
    Ok(dict)
}

fn load_training_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    Ok(read_pairs(&cfg.data.corpus, Some(&cfg.data.split))?)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

/// Trains into `run_dir`: config snapshot, per-epoch loss log and checkpoint.
/// The directory is assembled under a hidden name and renamed at the end.
pub fn train_run(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    for p in [&cfg.dictionary.visible, &cfg.dictionary.infrared] {
        if !p.is_file() {
            return Err(CliError::MissingDictionary(p.clone()));
        }
    }
    let refs = DictionaryRefs {
        visible: DictionaryRef::for_file(&absolute(&cfg.dictionary.visible)?)?,
        infrared: DictionaryRef::for_file(&absolute(&cfg.dictionary.infrared)?)?,
    };
    let z_vis = refs.visible.load(Path::new("."))?;
    let z_ir = refs.infrared.load(Path::new("."))?;
    if z_vis.modality != Modality::Visible || z_ir.modality != Modality::Infrared {
        return Err(CliError::Config("dictionary modalities do not match their slots".into()));
    }
    let data = load_training_pairs(cfg)?;
    let tcfg = cfg.train.train_config();
    let mut model = FusionModel::new(cfg.model, z_vis, z_ir, tcfg.seed)?;
    let history = train(&mut model, &data, &tcfg, &cfg.train.loss)?;

    let stage = staging_path(run_dir);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| CliError::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| CliError::io(&stage, e))?;
    fs::write(stage.join(CONFIG_SNAPSHOT), cfg.to_toml()?).map_err(|e| CliError::io(&stage, e))?;
    fs::write(stage.join(LOSS_LOG), history.to_csv()).map_err(|e| CliError::io(&stage, e))?;
    save_checkpoint(&stage.join(CHECKPOINT), &model, &refs)?;
    if run_dir.exists() {
        fs::remove_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    }
    fs::rename(&stage, run_dir).map_err(|e| CliError::io(run_dir, e))?;
    log::info!("run written to {}", run_dir.display());
    Ok(())
}

fn staging_path(target: &Path) -> PathBuf {
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    target.with_file_name(format!(".{name}.partial"))
}

fn load_model(checkpoint: &Path, no_baffm: bool) -> Result<FusionModel> {
    let (model, _) = load_checkpoint(checkpoint)?;
    Ok(if no_baffm { model.without_adjustment()? } else { model })
}

pub fn fuse(checkpoint: &Path, ir: &Path, vis: &Path, out: &Path, no_baffm: bool) -> Result<()> {
    let ir = Image::load_pgm(ir)?;
    let vis = Image::load_pgm(vis)?;
    ir.ensure_same_dims(&vis)?;
    let model = load_model(checkpoint, no_baffm)?;
    let y = model.fuse(&ir, &vis)?;
    let mut bytes = Vec::new();
    y.write_pgm(&mut bytes)?;
    atomic_write(out, &bytes)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, no_baffm: bool) -> Result<usize> {
    let model = load_model(checkpoint, no_baffm)?;
    let data = read_pairs(&cfg.data.corpus, Some(&cfg.eval.split))?;
    let report = evaluate(&model, &data)?;
    atomic_write(out, report.to_csv()?.as_bytes())?;
    if let Some(m) = &report.mean {
        log::info!(
            "{} images: MI {:.4} VIF {:.4} Qabf {:.4} SSIM {:.4}",
            report.rows.len(),
            m.mi,
            m.vif,
            m.qabf,
            m.ssim
        );
    }
    Ok(report.rows.len())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    DictSize(usize),
    NoBaffm,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::DictSize(n) => format!("N={n}"),
            Variant::NoBaffm => "no-baffm".into(),
        }
    }
}

/// Trains and evaluates every variant on the same corpus and seeds; returns
/// the table as CSV with columns `variant,MI,VIF,Qabf,SSIM`.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<String> {
    let data = load_training_pairs(cfg)?;
    let held = read_pairs(&cfg.data.corpus, Some(&cfg.eval.split))?;
    let tcfg = cfg.train.train_config();
    let mut table = String::from("variant,MI,VIF,Qabf,SSIM\n");
    for v in variants {
        let (n, adjust) = match v {
            Variant::DictSize(n) => (*n, cfg.model.adjust),
            Variant::NoBaffm => (cfg.dictionary.n, false),
        };
        log::info!("variant {}", v.label());
        let z_vis = dictionary_from_corpus(cfg, Modality::Visible, n)?;
        let z_ir = dictionary_from_corpus(cfg, Modality::Infrared, n)?;
        let model_cfg = causalfuse::ModelConfig { adjust, ..cfg.model };
        let mut model = FusionModel::new(model_cfg, z_vis, z_ir, tcfg.seed)?;
        train(&mut model, &data, &tcfg, &cfg.train.loss)?;
        let report = evaluate(&model, &held)?;
        let m: MetricReport = report
            .mean
            .ok_or_else(|| CliError::Config(format!("split `{}` has no pairs to evaluate", cfg.eval.split)))?;
        table.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            v.label(),
            m.mi,
            m.vif,
            m.qabf,
            m.ssim
        ));
    }
    Ok(table)
}
