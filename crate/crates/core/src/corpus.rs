//! On-disk corpus: `<root>/<split>/<category>/<id>_ir.pgm` and `_vis.pgm`
//! plus `<root>/manifest.csv` with columns `id,category,split`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confounder::Modality;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::{ImagePair, SceneCategory};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub category: SceneCategory,
    pub split: String,
}

fn suffix(m: Modality) -> &'static str {
    match m {
        Modality::Infrared => "ir",
        Modality::Visible => "vis",
    }
}

pub fn image_path(root: &Path, row: &ManifestRow, modality: Modality) -> PathBuf {
    root.join(&row.split)
        .join(row.category.as_str())
        .join(format!("{}_{}.pgm", row.id, suffix(modality)))
}

fn check_name(kind: &str, s: &str) -> Result<()> {
    let ok = !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok {
        return Err(Error::InvalidConfig(format!(
            "{kind} `{s}` must be non-empty ASCII letters, digits, `_` or `-`"
        )));
    }
    Ok(())
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.partial"));
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let row: ManifestRow = rec.map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn manifest_text(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
    }
    if rows.is_empty() {
        w.write_record(["id", "category", "split"]).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
    }
    w.into_inner().map_err(|e| Error::Format {
        what: "manifest",
        detail: e.to_string(),
    })
}

/// Replaces `split` under `root` with `pairs`. The split is staged in a
/// hidden directory and swapped in once complete; manifest rows of other
/// splits are kept, and all rows are sorted by split then id.
pub fn write_split(root: &Path, split: &str, pairs: &[ImagePair]) -> Result<()> {
    check_name("split", split)?;
    let mut ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!("duplicate image id `{}`", w[0])));
    }
    fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
    let stage = root.join(format!(".{split}.partial"));
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::file(&stage, e))?;
    }
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(pairs.len());
    for p in pairs {
        check_name("image id", &p.id)?;
        let row = ManifestRow {
            id: p.id.clone(),
            category: p.category,
            split: split.to_string(),
        };
        let dir = stage.join(p.category.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        for (m, img) in [(Modality::Infrared, &p.ir), (Modality::Visible, &p.vis)] {
            let path = dir.join(format!("{}_{}.pgm", p.id, suffix(m)));
            img.save_pgm(&path)?;
        }
        rows.push(row);
    }

    let mut all: Vec<ManifestRow> = if root.join(MANIFEST).exists() {
        read_manifest(root)?.into_iter().filter(|r| r.split != split).collect()
    } else {
        Vec::new()
    };
    all.extend(rows);
    all.sort_by(|a, b| (&a.split, &a.id).cmp(&(&b.split, &b.id)));

    let target = root.join(split);
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| Error::file(&target, e))?;
    }
    if pairs.is_empty() {
        fs::create_dir_all(&stage).map_err(|e| Error::file(&stage, e))?;
    }
    fs::rename(&stage, &target).map_err(|e| Error::file(&target, e))?;
    atomic_write(&root.join(MANIFEST), &manifest_text(&all)?)
}

fn rows_for(root: &Path, split: Option<&str>) -> Result<Vec<ManifestRow>> {
    Ok(read_manifest(root)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect())
}

/// All pairs of `split` (or of every split) in manifest order.
pub fn read_pairs(root: &Path, split: Option<&str>) -> Result<Vec<ImagePair>> {
    rows_for(root, split)?
        .into_iter()
        .map(|r| {
            let ir = Image::load_pgm(&image_path(root, &r, Modality::Infrared))?;
            let vis = Image::load_pgm(&image_path(root, &r, Modality::Visible))?;
            ir.ensure_same_dims(&vis)?;
            Ok(ImagePair {
                ir,
                vis,
                category: r.category,
                id: r.id,
            })
        })
        .collect()
}

/// Images of one modality only; files of the other modality are never opened.
pub fn read_modality(root: &Path, split: Option<&str>, modality: Modality) -> Result<Vec<(ManifestRow, Image)>> {
    rows_for(root, split)?
        .into_iter()
        .map(|r| {
            let img = Image::load_pgm(&image_path(root, &r, modality))?;
            Ok((r, img))
        })
        .collect()
}
