//! Run configuration: one TOML document covering data, backbone, both
//! training stages and evaluation, plus the built-in desk preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayout, INIT_STD};
use crate::codec::{CodecConfig, LAMBDA_LADDER};
use crate::data::{ingest_directory, synthetic_dataset, DomainDataset, SplitFractions, SyntheticKind};
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::metrics::BdVariant;
use crate::model::{AdaptationMeta, GateInput};
use crate::policy::PolicyKind;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated images; `domains` name the generator of each label.
    Synthetic { per_domain: usize, height: usize, width: usize },
    /// `root/<domain>/*.png`.
    Directory { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Domain names in label order; the first is the source domain.
    pub domains: Vec<String>,
    #[serde(default)]
    pub fractions: SplitFractions,
}

impl DataConfig {
    /// Builds the labeled dataset with splits keyed by `seed`.
    pub fn build(&self, seed: u64) -> Result<DomainDataset> {
        let source = self.domains.first().ok_or_else(|| Error::Config("data.domains is empty".into()))?;
        match &self.source {
            DataSource::Synthetic { per_domain, height, width } => {
                let kinds = self.domains.iter().map(|d| d.parse()).collect::<Result<Vec<SyntheticKind>>>()?;
                synthetic_dataset(&kinds, *per_domain, *height, *width, seed, self.fractions)
            }
            DataSource::Directory { root } => {
                if !root.exists() {
                    return Err(Error::Config(format!("dataset path {} does not exist", root.display())));
                }
                let order = if self.domains.len() > 1 { Some(&self.domains[..]) } else { None };
                ingest_directory(root, source, order, seed, self.fractions)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    /// Indices into the lambda ladder, one checkpoint each.
    pub qualities: Vec<u8>,
    /// When set, only the lowest quality is pretrained from scratch; each
    /// higher one starts from the next lower checkpoint and runs this many
    /// epochs instead of `pretrain.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start_epochs: Option<usize>,
}

impl BackboneConfig {
    pub fn codec(&self, quality: u8) -> Result<CodecConfig> {
        CodecConfig::for_quality(quality, self.latent_channels, self.hidden_channels)
    }

    /// Order in which qualities are pretrained, each paired with the
    /// quality it warm-starts from.
    pub fn pretrain_order(&self) -> Vec<(u8, Option<u8>)> {
        let Some(_) = self.warm_start_epochs else {
            return self.qualities.iter().map(|&q| (q, None)).collect();
        };
        let mut q = self.qualities.clone();
        q.sort_unstable();
        let prev = std::iter::once(None).chain(q.iter().map(|&p| Some(p)));
        q.iter().copied().zip(prev).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub layout: AdapterLayout,
    pub gate_conv_channels: usize,
    pub gate_pool_kernel: usize,
    pub gate_adaptive_out: usize,
    pub gate_input: GateInput,
    /// Policy used during adapter training.
    pub policy: PolicyKind,
    /// Standard deviation of the Gaussian adapter initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    INIT_STD
}

impl AdapterConfig {
    pub fn meta(&self, domains: &[String]) -> Result<AdaptationMeta> {
        if domains.len() < 2 {
            return Err(Error::Config("adaptation needs a source and at least one target domain".into()));
        }
        let k = domains.len() - 1;
        let gate = GateConfig {
            conv_channels: self.gate_conv_channels,
            pool_kernel: self.gate_pool_kernel,
            adaptive_out: self.gate_adaptive_out,
            k,
        };
        gate.validate()?;
        Ok(AdaptationMeta {
            k,
            layout: self.layout,
            gate,
            gate_input: self.gate_input,
            policy: self.policy,
            domains: domains.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub variant: BdVariant,
    pub policies: Vec<PolicyKind>,
    /// Emit an SVG of the RD curves next to the report.
    pub plot: bool,
    /// Cap on test images per domain; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Seeds model initialization and dataset splits.
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub adapter: AdapterConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Tiny backbone, 128x128 synthetic images in three domains and short
    /// schedules; the whole pipeline runs in minutes on one CPU core.
    pub fn desk() -> Self {
        RunConfig {
            name: "desk".into(),
            seed: 7,
            data: DataConfig {
                source: DataSource::Synthetic { per_domain: 200, height: 128, width: 128 },
                domains: SyntheticKind::ALL.iter().map(|k| k.domain_name().to_string()).collect(),
                fractions: SplitFractions::default(),
            },
            backbone: BackboneConfig {
                latent_channels: 32,
                hidden_channels: 32,
                qualities: vec![0, 1, 2, 3],
                warm_start_epochs: Some(60),
            },
            pretrain: TrainConfig { lr: 1e-3, epochs: 250, seed: 7, ..TrainConfig::default() },
            adapt: TrainConfig { lr: 1e-3, adapter_lr: Some(1e-4), epochs: 20, seed: 7, ..TrainConfig::default() },
            adapter: AdapterConfig {
                layout: AdapterLayout::BlockAndLastTwo,
                gate_conv_channels: 16,
                gate_pool_kernel: 2,
                gate_adaptive_out: 2,
                gate_input: GateInput::Unquantized,
                policy: PolicyKind::Proposed,
                init_std: 1e-3,
            },
            eval: EvalConfig { variant: BdVariant::Cubic, policies: PolicyKind::ALL.to_vec(), plot: true, max_images: None },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads a file, or a built-in preset when `spec` names one and no such
    /// file exists.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if let Some(c) = Self::preset(spec) {
                return Ok(c);
            }
            return Err(Error::Config(format!("config {spec} is neither a file nor a preset (desk)")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Replaces every seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if self.backbone.qualities.is_empty() {
            return Err(Error::Config("backbone.qualities is empty".into()));
        }
        let mut q = self.backbone.qualities.clone();
        q.sort_unstable();
        q.dedup();
        if q.len() != self.backbone.qualities.len() {
            return Err(Error::Config("backbone.qualities has duplicates".into()));
        }
        if let Some(&bad) = q.iter().find(|&&q| q as usize >= LAMBDA_LADDER.len()) {
            return Err(Error::Config(format!("quality {bad} outside 0..{}", LAMBDA_LADDER.len())));
        }
        self.backbone.codec(q[0])?;
        if self.backbone.warm_start_epochs == Some(0) {
            return Err(Error::Config("backbone.warm_start_epochs must be positive".into()));
        }
        if self.data.domains.is_empty() {
            return Err(Error::Config("data.domains is empty".into()));
        }
        if let DataSource::Synthetic { per_domain, .. } = self.data.source {
            if per_domain == 0 {
                return Err(Error::Config("data.source.per_domain must be positive".into()));
            }
        }
        if self.data.domains.len() > 1 {
            self.adapter.meta(&self.data.domains)?;
        }
        if !(self.adapter.init_std >= 0.0 && self.adapter.init_std.is_finite()) {
            return Err(Error::Config(format!("adapter.init_std must be >= 0, got {}", self.adapter.init_std)));
        }
        if self.eval.policies.is_empty() {
            return Err(Error::Config("eval.policies is empty".into()));
        }
        Ok(())
    }
}
