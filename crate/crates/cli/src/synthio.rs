//! Write a generated synthetic dataset to disk as NIfTI volumes plus an
//! integer-coded label volume per image, indexed by a catalog file.

use std::path::Path;

use protoseg3d_core::dataset::DataSource;
use protoseg3d_core::synth::{generate, SynthSpec};

use crate::catalog::{Catalog, CatalogEntry, Result};
use crate::nifti;

/// Generate `spec` and materialize it under `out_dir`. Returns the path of
/// the written catalog file.
pub fn write_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<std::path::PathBuf> {
    let data = generate(spec).map_err(|e| crate::catalog::CatalogError::Parse {
        path: out_dir.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::create_dir_all(out_dir).map_err(|source| crate::catalog::CatalogError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let classes: Vec<String> = data.classes().to_vec();
    let mut catalog = Catalog {
        classes: classes.clone(),
        institutions: data.institutions().to_vec(),
        entries: Vec::new(),
    };
    for info in data.images() {
        let (volume, labels) = data
            .load(&info.id)
            .map_err(|e| crate::catalog::CatalogError::Parse {
                path: info.id.clone(),
                msg: e.to_string(),
            })?;
        let vol_path = out_dir.join(format!("{}_img.nii.gz", info.id));
        let lab_path = out_dir.join(format!("{}_lab.nii.gz", info.id));
        nifti::save_f32(&vol_path, volume.shape, volume.spacing, &volume.data)?;
        let n = volume.voxels();
        let mut coded = vec![0u8; n];
        for (k, class) in classes.iter().enumerate() {
            if let Some(mask) = labels.mask(class) {
                for (c, &m) in coded.iter_mut().zip(mask) {
                    if m != 0 {
                        *c = (k + 1) as u8;
                    }
                }
            }
        }
        nifti::save_u8(&lab_path, volume.shape, volume.spacing, &coded)?;
        catalog.entries.push(CatalogEntry {
            id: format!("{}_img", info.id),
            volume_path: vol_path,
            label_path: lab_path,
            institution: info.institution.clone(),
        });
    }
    let catalog_path = out_dir.join("catalog.txt");
    catalog.save(&catalog_path)?;
    Ok(catalog_path)
}
