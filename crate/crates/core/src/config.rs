//! Run configuration (TOML).
//!
//! Every section and key is optional; unknown keys are rejected. Defaults
//! reproduce the synthetic keypoint experiment:
//!
//! ```toml
//! [model]
//! # preset = "light"          # light | base | large; omitted = two-stage mini
//! # stages = [...]            # explicit stage list, overrides the preset
//! stem_kernel = 7
//! init_seed = 0
//!
//! [ctm]
//! method = "dpcknn"           # dpcknn | topk | strided
//! cluster_fraction = 0.25
//! k = 5
//!
//! [head]
//! kind = "mta"                # mta | deconv | classification
//! # agg_channels, out_channels, num_classes: default to the preset's
//! # values (128, 17, 1000) or the mini model's (32, 2, 2)
//!
//! [data]
//! seed = 0
//! count = 500
//! test_count = 100
//! # resolution: square side in pixels; 224 for presets, 64 otherwise
//! pck_threshold = 0.1
//!
//! [train]
//! steps = 500
//! learning_rate = 0.002
//! weight_decay = 0.05
//! batch_size = 20
//! warmup_steps = 25
//! min_lr_fraction = 0.01
//!
//! [output]
//! dir = "runs/default"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctm::DEFAULT_CLUSTER_FRACTION;
use crate::dpc_knn::DEFAULT_K;
use crate::error::{Error, Result};
use crate::harness::train::TrainConfig;
use crate::model::{HeadKind, MergeKind, ModelConfig, Preset, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageConfig>>,
    pub stem_kernel: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: None, stages: None, stem_kernel: 7, init_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtmSection {
    pub method: MergeKind,
    pub cluster_fraction: f64,
    pub k: usize,
}

impl Default for CtmSection {
    fn default() -> Self {
        Self { method: MergeKind::Dpcknn, cluster_fraction: DEFAULT_CLUSTER_FRACTION, k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub kind: HeadKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agg_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self { kind: HeadKind::Mta, agg_channels: None, out_channels: None, num_classes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub count: usize,
    pub test_count: usize,
    /// Square image side in pixels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    pub pck_threshold: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { seed: 0, count: 500, test_count: 100, resolution: None, pck_threshold: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub ctm: CtmSection,
    pub head: HeadSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file; a missing file is [`Error::Missing`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("config {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Seeds both data generation and parameter initialization.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.init_seed = seed;
    }

    fn base_model(&self) -> ModelConfig {
        match self.model.preset {
            Some(p) => ModelConfig::preset(p),
            None => ModelConfig::mini(),
        }
    }

    /// Image side used for data and the model input.
    pub fn resolution(&self) -> usize {
        self.data.resolution.unwrap_or(self.base_model().input_height)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = self.base_model();
        let side = self.resolution();
        let cfg = ModelConfig {
            stages: self.model.stages.clone().unwrap_or(base.stages),
            merge: self.ctm.method,
            cluster_fraction: self.ctm.cluster_fraction,
            k: self.ctm.k,
            head: self.head.kind,
            input_height: side,
            input_width: side,
            stem_kernel: self.model.stem_kernel,
            agg_channels: self.head.agg_channels.unwrap_or(base.agg_channels),
            out_channels: self.head.out_channels.unwrap_or(base.out_channels),
            num_classes: self.head.num_classes.unwrap_or(base.num_classes),
            preset: if self.model.stages.is_some() { None } else { base.preset },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        if self.data.pck_threshold.is_nan() || self.data.pck_threshold <= 0.0 {
            return Err(Error::InvalidConfig("pck threshold must be positive".into()));
        }
        Ok(())
    }
}
