//! Run configuration. Defaults mirror the full-scale setup; the synthetic
//! benchmark overrides grid, windows and network widths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target voxel grid for the network.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    /// (W, H, D) in voxels.
    pub shape: [usize; 3],
    /// (sx, sy, sz) in mm.
    pub spacing: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            shape: [256, 256, 48],
            spacing: [0.75, 0.75, 2.5],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    /// Max absolute rotation per axis, degrees.
    pub rotate_deg: [f64; 3],
    /// Max absolute translation per axis, voxels.
    pub translate_vox: [f64; 3],
    /// Uniform scale range (lo, hi).
    pub scale: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: [10.0, 10.0, 10.0],
            translate_vox: [16.0, 16.0, 4.0],
            scale: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotate_deg: [0.0; 3],
            translate_vox: [0.0; 3],
            scale: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct WindowConfig {
    /// Window size fractions (alpha_w, alpha_h, alpha_d).
    pub alphas: [f64; 3],
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            alphas: [0.125, 0.125, 1.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Encoder channel widths per level; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Output feature channels (Cf).
    pub features: usize,
    /// Negative slope of the leaky ReLU nonlinearity.
    pub leaky_slope: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            features: 32,
            leaky_slope: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AlignConfig {
    /// Strided-conv channel widths of the alignment regressor.
    pub channels: Vec<usize>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConditioningConfig {
    /// Hidden width between the two conditioning convolutions.
    pub hidden: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

/// Which of the two mechanisms are wired in.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Local prototypical network only.
    #[serde(rename = "3d")]
    Plain,
    /// + support mask conditioning.
    #[serde(rename = "3d_con")]
    Con,
    /// + spatial registration.
    #[serde(rename = "3d_align")]
    Align,
    /// Both mechanisms.
    #[serde(rename = "3d_con_align")]
    ConAlign,
}

impl Variant {
    pub fn use_conditioning(self) -> bool {
        matches!(self, Variant::Con | Variant::ConAlign)
    }

    pub fn use_registration(self) -> bool {
        matches!(self, Variant::Align | Variant::ConAlign)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "3d",
            Variant::Con => "3d_con",
            Variant::Align => "3d_align",
            Variant::ConAlign => "3d_con_align",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Variant::Plain),
            "3d_con" => Ok(Variant::Con),
            "3d_align" => Ok(Variant::Align),
            "3d_con_align" => Ok(Variant::ConAlign),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant '{other}' (expected 3d, 3d_con, 3d_align or 3d_con_align)"
            ))),
        }
    }
}

/// Normalization convention of the soft Dice losses: `Mean` averages the
/// per-class terms (minimum 0); `Sum` subtracts their plain sum from 1.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    #[default]
    Mean,
    #[serde(rename = "as_written")]
    Sum,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Validate (and maybe snapshot) every this many iterations.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-4,
            val_every: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitConfig {
    /// Validation images drawn per institution (capped at pool - 1).
    pub val_per_institution: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_per_institution: 2,
        }
    }
}

/// Complete run configuration; serializable as the run's config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub variant: VariantField,
    pub grid: GridConfig,
    pub augment: AugmentConfig,
    pub windows: WindowConfig,
    pub backbone: BackboneConfig,
    pub align: AlignConfig,
    pub conditioning: ConditioningConfig,
    pub loss_convention: LossConvention,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

/// Newtype so the variant serializes as its CLI-facing name.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(transparent)]
pub struct VariantField(pub Variant);

impl Default for VariantField {
    fn default() -> Self {
        Self(Variant::ConAlign)
    }
}

impl RunConfig {
    pub fn variant(&self) -> Variant {
        self.variant.0
    }

    /// Desk-scale profile for the synthetic multi-institution benchmark:
    /// 48x48x24 grid, quarter-size in-plane windows, a compact backbone and
    /// a learning rate suited to the 2000-iteration budget on CPU.
    pub fn synthetic_benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.grid = GridConfig {
            shape: [48, 48, 24],
            spacing: [1.0, 1.0, 1.0],
        };
        cfg.windows.alphas = [0.25, 0.25, 1.0];
        cfg.backbone.channels = vec![6, 12, 24];
        cfg.backbone.features = 8;
        cfg.align.channels = vec![8, 16, 32];
        cfg.conditioning.hidden = 8;
        cfg.augment = AugmentConfig {
            rotate_deg: [5.0, 5.0, 5.0],
            translate_vox: [8.0, 8.0, 2.0],
            scale: [0.95, 1.05],
        };
        cfg.train = TrainConfig {
            iterations: 2000,
            learning_rate: 1e-3,
            val_every: 200,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("grid shape must be positive".into()));
        }
        if self.grid.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("grid spacing must be positive".into()));
        }
        if self.backbone.channels.is_empty() {
            return Err(Error::InvalidConfig(
                "backbone needs at least one level".into(),
            ));
        }
        let f = self.backbone.downsample_factor();
        for (axis, &d) in self.grid.shape.iter().enumerate() {
            if d % f != 0 {
                return Err(Error::InvalidConfig(format!(
                    "grid axis {axis} ({d}) not divisible by encoder downsampling factor {f}"
                )));
            }
        }
        if self.augment.scale[0] > self.augment.scale[1] || self.augment.scale[0] <= 0.0 {
            return Err(Error::InvalidConfig("bad augment scale range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips_variant_names() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.variant().name(), "3d_con_align");
        for name in ["3d", "3d_con", "3d_align", "3d_con_align"] {
            assert_eq!(Variant::parse(name).unwrap().name(), name);
        }
        assert!(Variant::parse("2d").is_err());
    }

    #[test]
    fn non_divisible_grid_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.grid.shape = [250, 256, 48];
        assert!(cfg.validate().is_err());
    }
}
