//! Architectural constants a decoder must agree on before it can replay a
//! stream: channel plan, search constants, interpolation penalty, grid depth.
//!
//! The config rides inside the weight file as a reserved rank-1 f32
//! pseudo-parameter, so one artifact carries everything a decoder needs and
//! the model hash covers structure and weights alike.

use crate::autodiff::{Param, ParamStore};
use crate::error::{Error, Result};
use ndarray::Array2;

/// Reserved parameter name holding the serialized config.
pub const CONFIG_PARAM: &str = "config.v1";

/// Channel plan and codec constants. `radius` is measured in lattice steps
/// of the scale being matched (a fixed voxel radius would stop finding
/// neighbors once the lattice spacing exceeds it); `alpha` is the
/// interpolation penalty denominator floor; `k` the ball-search cap.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Coordinate grid is `[0, 2^bit_depth)^3` at stride 1.
    pub bit_depth: u8,
    /// Stem conv output channels at full resolution.
    pub stem_ch: usize,
    /// First downsample output channels (half resolution).
    pub mid_ch: usize,
    /// Latent width at quarter and eighth resolution (y2/y3).
    pub feat_ch: usize,
    /// Entropy-coded flow embedding width.
    pub flow_latent_ch: usize,
    /// Entropy-coded residual latent width.
    pub res_latent_ch: usize,
    /// Hidden width of the coordinate-refinement coder.
    pub occ_hidden_ch: usize,
    /// Latent width of the coordinate-refinement coder.
    pub occ_latent_ch: usize,
    /// Ball-search radius in lattice steps.
    pub radius: f64,
    /// Neighbor cap per ball query.
    pub k: usize,
    /// Interpolation attenuation threshold.
    pub alpha: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            bit_depth: 10,
            stem_ch: 16,
            mid_ch: 32,
            feat_ch: 64,
            flow_latent_ch: 8,
            res_latent_ch: 8,
            occ_hidden_ch: 16,
            occ_latent_ch: 8,
            radius: 3.0,
            k: 16,
            alpha: 3.0,
        }
    }
}

impl CodecConfig {
    /// Reduced-width plan for fast experiments and tests. Same topology,
    /// roughly a tenth of the default's weights.
    pub fn tiny(bit_depth: u8) -> Self {
        CodecConfig {
            bit_depth,
            stem_ch: 8,
            mid_ch: 12,
            feat_ch: 16,
            flow_latent_ch: 4,
            res_latent_ch: 4,
            occ_hidden_ch: 8,
            occ_latent_ch: 4,
            radius: 3.0,
            k: 8,
            alpha: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=16).contains(&self.bit_depth) {
            return Err(Error::Config(format!(
                "bit depth {} outside 4..=16",
                self.bit_depth
            )));
        }
        // Inception blocks split channels in half.
        for (name, ch) in [
            ("stem_ch", self.stem_ch),
            ("mid_ch", self.mid_ch),
            ("feat_ch", self.feat_ch),
            ("occ_hidden_ch", self.occ_hidden_ch),
        ] {
            if ch < 2 || ch % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name} = {ch} must be even and at least 2"
                )));
            }
        }
        for (name, ch) in [
            ("flow_latent_ch", self.flow_latent_ch),
            ("res_latent_ch", self.res_latent_ch),
            ("occ_latent_ch", self.occ_latent_ch),
        ] {
            if ch == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("neighbor cap k must be positive".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("radius {} must be positive", self.radius)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    fn fields(&self) -> [f64; 11] {
        [
            self.bit_depth as f64,
            self.stem_ch as f64,
            self.mid_ch as f64,
            self.feat_ch as f64,
            self.flow_latent_ch as f64,
            self.res_latent_ch as f64,
            self.occ_hidden_ch as f64,
            self.occ_latent_ch as f64,
            self.radius,
            self.k as f64,
            self.alpha,
        ]
    }

    /// Writes the config into `store` under [`CONFIG_PARAM`]. All fields fit
    /// f32 exactly (small integers plus user-chosen reals stored at weight
    /// precision, the same rounding the weights themselves get).
    pub fn register(&self, store: &mut ParamStore) {
        let f = self.fields();
        let row = Array2::from_shape_fn((1, f.len()), |(_, j)| f[j] as f32 as f64);
        store.insert(CONFIG_PARAM, Param::new(vec![f.len()], row));
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let p = store
            .get(CONFIG_PARAM)
            .ok_or_else(|| Error::Format(format!("weight file lacks {CONFIG_PARAM}")))?;
        let v = &p.value;
        if v.len() != 11 {
            return Err(Error::Format(format!(
                "{CONFIG_PARAM} holds {} values, expected 11",
                v.len()
            )));
        }
        let f: Vec<f64> = v.iter().copied().collect();
        let as_usize = |x: f64, name: &str| -> Result<usize> {
            if x.fract() != 0.0 || x < 0.0 || x > u32::MAX as f64 {
                return Err(Error::Format(format!("{name} = {x} is not a valid count")));
            }
            Ok(x as usize)
        };
        let cfg = CodecConfig {
            bit_depth: as_usize(f[0], "bit_depth")? as u8,
            stem_ch: as_usize(f[1], "stem_ch")?,
            mid_ch: as_usize(f[2], "mid_ch")?,
            feat_ch: as_usize(f[3], "feat_ch")?,
            flow_latent_ch: as_usize(f[4], "flow_latent_ch")?,
            res_latent_ch: as_usize(f[5], "res_latent_ch")?,
            occ_hidden_ch: as_usize(f[6], "occ_hidden_ch")?,
            occ_latent_ch: as_usize(f[7], "occ_latent_ch")?,
            radius: f[8],
            k: as_usize(f[9], "k")?,
            alpha: f[10],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
