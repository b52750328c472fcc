//! Declarative run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdpn_core::data::{SplitFractions, SyntheticSpec};
use cdpn_core::losses::{LossWeights, DEFAULT_EDGE_THRESHOLD, VGG19_DEFAULT_TAP};
use cdpn_core::model::DpNetConfig;
use cdpn_core::training::TrainingSchedule;
use serde::{Deserialize, Serialize};

pub const ENV_VGG19_WEIGHTS: &str = "CDPN_VGG19_WEIGHTS";
pub const ENV_HED_WEIGHTS: &str = "CDPN_HED_WEIGHTS";
pub const ENV_DEVICE: &str = "CDPN_DEVICE";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Everything a run needs. Missing keys take the defaults below; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every file the run writes.
    pub output_dir: PathBuf,
    /// Compute device. Only `"cpu"` is available.
    pub device: String,
    /// Worker threads; 0 picks one per core, 1 gives bit-reproducible runs.
    pub threads: usize,
    pub model: ModelSection,
    pub loss: LossSection,
    pub training: TrainingSchedule,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            device: "cpu".into(),
            threads: 0,
            model: ModelSection::default(),
            loss: LossSection::default(),
            training: TrainingSchedule::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Number of 2× networks; magnification is `2^stages`.
    pub stages: usize,
    pub residual_blocks: usize,
    pub feature_channels: usize,
    pub head_kernel: usize,
    pub trunk_kernel: usize,
    pub tail_kernel: usize,
    /// 1 for grayscale, 3 for RGB.
    pub image_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DpNetConfig::default();
        Self {
            stages: 2,
            residual_blocks: d.residual_blocks,
            feature_channels: d.feature_channels,
            head_kernel: d.head_kernel,
            trunk_kernel: d.trunk_kernel,
            tail_kernel: d.tail_kernel,
            image_channels: d.image_channels,
        }
    }
}

impl ModelSection {
    pub fn net_config(&self) -> DpNetConfig {
        DpNetConfig {
            residual_blocks: self.residual_blocks,
            feature_channels: self.feature_channels,
            head_kernel: self.head_kernel,
            trunk_kernel: self.trunk_kernel,
            tail_kernel: self.tail_kernel,
            image_channels: self.image_channels,
            upsample_factor: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Pretrained VGG19 read from a safetensors file.
    Vgg19,
    /// Fixed random convolution stack.
    RandomConv,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    /// Pretrained HED side output 1 read from a safetensors file.
    Hed,
    /// Sobel gradient magnitude through a sigmoid.
    Sobel,
    /// Fixed random two-layer network.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_pixel: f64,
    pub lambda_perceptual: f64,
    pub lambda_edge: f64,
    pub extractor: ExtractorKind,
    /// Overridden by `CDPN_VGG19_WEIGHTS`.
    pub vgg19_weights: PathBuf,
    pub vgg19_layer: String,
    pub random_conv_widths: Vec<usize>,
    pub random_conv_seed: u64,
    pub edge_network: EdgeKind,
    /// Overridden by `CDPN_HED_WEIGHTS`.
    pub hed_weights: PathBuf,
    pub edge_threshold: f64,
    pub sobel_gain: f64,
    pub sobel_bias: f64,
    pub tiny_edge_seed: u64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_pixel: w.lambda_pixel,
            lambda_perceptual: w.lambda_perceptual,
            lambda_edge: w.lambda_edge,
            extractor: ExtractorKind::Vgg19,
            vgg19_weights: PathBuf::from("weights/vgg19.safetensors"),
            vgg19_layer: VGG19_DEFAULT_TAP.into(),
            random_conv_widths: vec![8, 8],
            random_conv_seed: 7,
            edge_network: EdgeKind::Hed,
            hed_weights: PathBuf::from("weights/hed.safetensors"),
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            sobel_gain: 4.0,
            sobel_bias: 1.0,
            tiny_edge_seed: 11,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.lambda_pixel, self.lambda_perceptual, self.lambda_edge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing manifest to train on. When absent, `gen-data` writes a
    /// synthetic corpus to `<output_dir>/data`.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub split: SplitFractions,
    /// Random crops taken from each image larger than `patch_size`.
    pub patches_per_image: usize,
    /// Crop size for images larger than this; 0 uses the manifest's value.
    pub patch_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticSpec::default(),
            split: SplitFractions::default(),
            patches_per_image: 1,
            patch_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tesseract: PathBuf,
    pub ocr_language: String,
    pub ocr_psm: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tesseract: PathBuf::from("tesseract"),
            ocr_language: "eng".into(),
            ocr_psm: 6,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("malformed config")?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.apply_env();
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(p) = std::env::var(ENV_VGG19_WEIGHTS) {
            self.loss.vgg19_weights = p.into();
        }
        if let Ok(p) = std::env::var(ENV_HED_WEIGHTS) {
            self.loss.hed_weights = p.into();
        }
        if let Ok(d) = std::env::var(ENV_DEVICE) {
            self.device = d;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching the output directory.
    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            bail!("device `{}` is not available; this build runs on `cpu` only", self.device);
        }
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        if self.model.stages == 0 {
            bail!("model.stages must be at least 1");
        }
        self.model.net_config().validate()?;
        self.loss.weights().validate()?;
        if !(0.0..=1.0).contains(&self.loss.edge_threshold) {
            bail!("loss.edge_threshold = {} must lie in [0, 1]", self.loss.edge_threshold);
        }
        if self.loss.extractor == ExtractorKind::RandomConv && self.loss.random_conv_widths.is_empty() {
            bail!("loss.random_conv_widths must list at least one layer width");
        }
        self.training.validate()?;
        self.data.split.validate()?;
        if self.data.patches_per_image == 0 {
            bail!("data.patches_per_image must be at least 1");
        }
        let unit = 1usize << self.model.stages;
        let canvas = self.data.synthetic.canvas;
        if self.data.manifest.is_none() && canvas % unit != 0 {
            bail!("data.synthetic.canvas = {canvas} is not divisible by 2^stages = {unit}");
        }
        if self.data.patch_size % unit != 0 {
            bail!("data.patch_size = {} is not divisible by 2^stages = {unit}", self.data.patch_size);
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data.manifest.clone().unwrap_or_else(|| self.data_dir().join("manifest.jsonl"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn parallel_checkpoint(&self) -> PathBuf {
        self.output_dir.join("parallel.ckpt")
    }

    pub fn cascade_checkpoint(&self) -> PathBuf {
        self.output_dir.join("cascade.ckpt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    /// Creates the output directory and records the resolved config in it.
    pub fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("cannot create output directory {}", self.output_dir.display()))?;
        let path = self.output_dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
