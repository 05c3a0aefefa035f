//! Training recipe file. One TOML document describes the model plan, the
//! optimization schedule, the data source, and where the weights land.
//! Unknown keys are rejected everywhere so a typo cannot silently fall back
//! to a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use hbmx_core::pipeline::CodecConfig;
use hbmx_core::synth::{SynthKind, SynthSpec};
use hbmx_core::train::TrainConfig;
use hbmx_core::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub out: OutSection,
}

/// Mirrors [`CodecConfig`] field by field; every knob is optional and
/// defaults to the stock plan.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub bit_depth: u8,
    pub stem_ch: usize,
    pub mid_ch: usize,
    pub feat_ch: usize,
    pub flow_latent_ch: usize,
    pub res_latent_ch: usize,
    pub occ_hidden_ch: usize,
    pub occ_latent_ch: usize,
    pub radius: f64,
    pub k: usize,
    pub alpha: f64,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        ModelSection {
            bit_depth: c.bit_depth,
            stem_ch: c.stem_ch,
            mid_ch: c.mid_ch,
            feat_ch: c.feat_ch,
            flow_latent_ch: c.flow_latent_ch,
            res_latent_ch: c.res_latent_ch,
            occ_hidden_ch: c.occ_hidden_ch,
            occ_latent_ch: c.occ_latent_ch,
            radius: c.radius,
            k: c.k,
            alpha: c.alpha,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            bit_depth: self.bit_depth,
            stem_ch: self.stem_ch,
            mid_ch: self.mid_ch,
            feat_ch: self.feat_ch,
            flow_latent_ch: self.flow_latent_ch,
            res_latent_ch: self.res_latent_ch,
            occ_hidden_ch: self.occ_hidden_ch,
            occ_latent_ch: self.occ_latent_ch,
            radius: self.radius,
            k: self.k,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub two_stage: bool,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    4
}
fn d_true() -> bool {
    true
}
fn d_base_lr() -> f64 {
    1e-3
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.lambda);
        cfg.epochs = self.epochs;
        cfg.batch = self.batch;
        cfg.seed = self.seed;
        cfg.two_stage = self.two_stage;
        cfg.base_lr = self.base_lr;
        cfg.checkpoint_dir = self.checkpoint_dir.clone();
        cfg
    }
}

/// Exactly one of `kind` (a generated sequence) or `dir` (a directory of
/// PLY frames) must be given.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: Option<String>,
    pub dir: Option<PathBuf>,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_frames() -> usize {
    10
}
fn d_points() -> usize {
    2000
}

impl DataSection {
    /// Loads or generates the training frames. Generated data inherits the
    /// model's grid depth so the two sections cannot disagree.
    pub fn frames(&self, bit_depth: u8) -> Result<Vec<hbmx_core::sparse::CoordSet>> {
        match (&self.kind, &self.dir) {
            (Some(kind), None) => {
                let spec = SynthSpec {
                    kind: kind.parse::<SynthKind>()?,
                    frames: self.frames,
                    points: self.points,
                    bit_depth,
                    seed: self.seed,
                };
                spec.generate()
            }
            (None, Some(dir)) => crate::commands::read_frame_dir(dir),
            (Some(_), Some(_)) => Err(Error::Config(
                "data: give either kind or dir, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "data: one of kind or dir is required".into(),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    pub weights: PathBuf,
}

pub fn load_recipe(path: &Path) -> Result<Recipe> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
