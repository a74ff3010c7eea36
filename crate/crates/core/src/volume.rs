//! Dense volumes and per-class binary label maps.
//!
//! Axis convention throughout the crate: shapes are `(W, H, D)` and voxel
//! data is stored x-fastest, i.e. `data[(z * H + y) * W + x]`, matching the
//! `[.., D, H, W]` tensor layout used by the network ops.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A 3D scalar image with spacing metadata and provenance.
#[derive(Clone, Debug)]
pub struct Volume {
    /// Intensities, x-fastest.
    pub data: Vec<f32>,
    /// (W, H, D) in voxels.
    pub shape: [usize; 3],
    /// (sx, sy, sz) in mm.
    pub spacing: [f64; 3],
    pub id: String,
    pub institution: String,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 3],
        spacing: [f64; 3],
        id: impl Into<String>,
        institution: impl Into<String>,
    ) -> Result<Self> {
        let v = Self {
            data,
            shape,
            spacing,
            id: id.into(),
            institution: institution.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[0] + x
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "{}: degenerate shape {:?}",
                self.id, self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "{}: non-positive spacing {:?}",
                self.id, self.spacing
            )));
        }
        if self.data.len() != self.voxels() {
            return Err(Error::InvalidVolume(format!(
                "{}: data length {} does not match shape {:?}",
                self.id,
                self.data.len(),
                self.shape
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "{}: non-finite voxel intensities",
                self.id
            )));
        }
        Ok(())
    }
}

/// Binary masks per class, all congruent with one volume.
#[derive(Clone, Debug, Default)]
pub struct LabelMap {
    /// (W, H, D); must equal the owning volume's shape.
    pub shape: [usize; 3],
    /// class name -> {0,1} mask, x-fastest. Ordered for determinism.
    pub masks: BTreeMap<String, Vec<u8>>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3]) -> Self {
        Self {
            shape,
            masks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: impl Into<String>, mask: Vec<u8>) -> Result<()> {
        let n = self.shape[0] * self.shape[1] * self.shape[2];
        if mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} does not match label shape {:?}",
                mask.len(),
                self.shape
            )));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume(
                "label mask values must be 0 or 1".into(),
            ));
        }
        self.masks.insert(class.into(), mask);
        Ok(())
    }

    pub fn mask(&self, class: &str) -> Option<&[u8]> {
        self.masks.get(class).map(|m| m.as_slice())
    }

    /// Check congruence with a volume and presence of every catalog class.
    pub fn validate_against(&self, volume: &Volume, classes: &[String]) -> Result<()> {
        if self.shape != volume.shape {
            return Err(Error::ShapeMismatch(format!(
                "{}: label shape {:?} vs image shape {:?}",
                volume.id, self.shape, volume.shape
            )));
        }
        for c in classes {
            if !self.masks.contains_key(c) {
                return Err(Error::InvalidVolume(format!(
                    "{}: missing mask for class '{c}'",
                    volume.id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_nan_and_bad_spacing() {
        assert!(Volume::new(vec![f32::NAN; 8], [2, 2, 2], [1.0, 1.0, 1.0], "a", "i").is_err());
        assert!(Volume::new(vec![0.0; 8], [2, 2, 2], [0.0, 1.0, 1.0], "a", "i").is_err());
        assert!(Volume::new(vec![0.0; 8], [2, 2, 2], [1.0, 1.0, 1.0], "a", "i").is_ok());
    }

    #[test]
    fn label_map_rejects_shape_mismatch_and_nonbinary() {
        let mut lm = LabelMap::new([2, 2, 2]);
        assert!(lm.insert("c", vec![0; 7]).is_err());
        assert!(lm.insert("c", vec![2; 8]).is_err());
        assert!(lm.insert("c", vec![1; 8]).is_ok());
    }
}
