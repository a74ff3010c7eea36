//! Plain-text dataset catalogs and NIfTI-backed volume access.
//!
//! A catalog file declares the class and institution sets and lists one
//! image per line: volume path, label path, institution id. Labels are a
//! single integer-coded volume (0 = background, k = k-th catalog class).

use std::path::{Path, PathBuf};

use protoseg3d_core::dataset::{DataSource, ImageInfo};
use protoseg3d_core::error::{Error as CoreError, Result as CoreResult};
use protoseg3d_core::volume::{LabelMap, Volume};
use thiserror::Error;

use crate::nifti;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CatalogError>;

#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub id: String,
    pub volume_path: PathBuf,
    pub label_path: PathBuf,
    pub institution: String,
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    pub classes: Vec<String>,
    pub institutions: Vec<String>,
    pub entries: Vec<CatalogEntry>,
}

fn stem_of(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().to_string());
    let mut s = name.unwrap_or_default();
    for suffix in [".nii.gz", ".nii"] {
        if let Some(stripped) = s.strip_suffix(suffix) {
            s = stripped.to_string();
            break;
        }
    }
    s
}

impl Catalog {
    /// Parse a catalog index file. Relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let err = |msg: String| CatalogError::Parse {
            path: path.display().to_string(),
            msg,
        };
        let mut catalog = Catalog::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "classes" => {
                    catalog.classes = fields[1..].iter().map(|s| s.to_string()).collect()
                }
                "institutions" => {
                    catalog.institutions = fields[1..].iter().map(|s| s.to_string()).collect()
                }
                "item" => {
                    if fields.len() != 4 {
                        return Err(err(format!(
                            "line {}: item needs volume, label and institution",
                            ln + 1
                        )));
                    }
                    let volume_path = base.join(fields[1]);
                    let entry = CatalogEntry {
                        id: stem_of(&volume_path),
                        volume_path,
                        label_path: base.join(fields[2]),
                        institution: fields[3].to_string(),
                    };
                    if !catalog.institutions.contains(&entry.institution) {
                        return Err(err(format!(
                            "line {}: institution '{}' is not declared",
                            ln + 1,
                            entry.institution
                        )));
                    }
                    if catalog.entries.iter().any(|e| e.id == entry.id) {
                        return Err(err(format!(
                            "line {}: duplicate image id '{}'",
                            ln + 1,
                            entry.id
                        )));
                    }
                    catalog.entries.push(entry);
                }
                other => return Err(err(format!("line {}: unknown record '{other}'", ln + 1))),
            }
        }
        if catalog.classes.is_empty() {
            return Err(err("no classes declared".into()));
        }
        if catalog.institutions.is_empty() {
            return Err(err("no institutions declared".into()));
        }
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("classes");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        out.push_str("institutions");
        for u in &self.institutions {
            out.push('\t');
            out.push_str(u);
        }
        out.push('\n');
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .to_string()
            };
            out.push_str(&format!(
                "item\t{}\t{}\t{}\n",
                rel(&e.volume_path),
                rel(&e.label_path),
                e.institution
            ));
        }
        std::fs::write(path, out).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Load one image/label pair, validating shapes and binarizing masks.
pub fn load_volume(
    entry: &CatalogEntry,
    classes: &[String],
) -> CoreResult<(Volume, LabelMap)> {
    let img = nifti::load(&entry.volume_path)
        .map_err(|e| CoreError::DataSource(e.to_string()))?;
    let lab = nifti::load(&entry.label_path)
        .map_err(|e| CoreError::DataSource(e.to_string()))?;
    if img.shape != lab.shape {
        return Err(CoreError::ShapeMismatch(format!(
            "{}: image {:?} vs labels {:?}",
            entry.id, img.shape, lab.shape
        )));
    }
    let volume = Volume::new(
        img.data,
        img.shape,
        img.spacing,
        entry.id.clone(),
        entry.institution.clone(),
    )?;
    let mut labels = LabelMap::new(lab.shape);
    for (k, class) in classes.iter().enumerate() {
        let code = (k + 1) as i64;
        let mask: Vec<u8> = lab
            .data
            .iter()
            .map(|&v| ((v as f64).round() as i64 == code) as u8)
            .collect();
        labels.insert(class.clone(), mask)?;
    }
    labels.validate_against(&volume, classes)?;
    Ok((volume, labels))
}

/// Persist a predicted binary mask next to the query's geometry; a
/// load-back reproduces it bit-exactly.
pub fn save_prediction(
    mask: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
    path: &Path,
) -> CoreResult<()> {
    if mask.len() != shape[0] * shape[1] * shape[2] {
        return Err(CoreError::ShapeMismatch(format!(
            "prediction has {} voxels but shape {:?}",
            mask.len(),
            shape
        )));
    }
    nifti::save_u8(path, shape, spacing, mask).map_err(|e| CoreError::DataSource(e.to_string()))
}

/// Catalog-backed [`DataSource`] reading NIfTI files on demand.
pub struct NiftiSource {
    catalog: Catalog,
    images: Vec<ImageInfo>,
}

impl NiftiSource {
    pub fn new(catalog: Catalog) -> Self {
        let images = catalog
            .entries
            .iter()
            .map(|e| ImageInfo {
                id: e.id.clone(),
                institution: e.institution.clone(),
            })
            .collect();
        Self { catalog, images }
    }

    pub fn open(catalog_path: &Path) -> Result<Self> {
        Ok(Self::new(Catalog::load(catalog_path)?))
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

impl DataSource for NiftiSource {
    fn classes(&self) -> &[String] {
        &self.catalog.classes
    }

    fn institutions(&self) -> &[String] {
        &self.catalog.institutions
    }

    fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    fn load(&self, id: &str) -> CoreResult<(Volume, LabelMap)> {
        let entry = self
            .catalog
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CoreError::DataSource(format!("unknown image id '{id}'")))?;
        load_volume(entry, &self.catalog.classes)
    }
}
