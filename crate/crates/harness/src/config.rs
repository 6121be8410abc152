//! Run configuration, loadable from TOML.

use std::path::Path;

use num_rational::Ratio;
use semlink::analysis::LayerId;
use semlink::codec::parse_ratio;
use semlink::{ArchSpec, ChannelConfig, CodecConfig, PilotConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Narrow codec for 8x8 or 16x16 images.
    Toy,
    /// Full-width codec for 32x32 images.
    Paper,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training images used (CIFAR: the first `train_images` of the batches).
    pub train_images: usize,
    pub val_images: usize,
    /// Side length of toy images (8 or 16).
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookConfig {
    /// Layers whose average cosine similarity is traced per epoch.
    pub similarity_layers: Vec<LayerId>,
    /// Validation images used as the fixed probe batch.
    pub probe_size: usize,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for HookConfig {
    fn default() -> Self {
        Self {
            similarity_layers: vec![LayerId::Stage(0), LayerId::Stage(1), LayerId::Stage(2)],
            probe_size: 16,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture code such as `C-C-V-V-C-C`.
    pub arch: String,
    pub gdn: bool,
    pub preset: Preset,
    /// Bandwidth ratio as `n/d`.
    pub ratio: String,
    pub channel: ChannelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    #[serde(default)]
    pub hooks: HookConfig,
    #[serde(default)]
    pub pilots: PilotConfig,
}

impl TrainConfig {
    /// Full-size setup: CIFAR, 600 epochs, Adam at 1e-4, batch 64.
    pub fn paper(arch: ArchSpec, ratio: &str, snr_db: f64) -> Self {
        Self {
            arch: arch.to_string(),
            gdn: arch.use_gdn,
            preset: Preset::Paper,
            ratio: ratio.into(),
            channel: ChannelConfig::awgn(snr_db),
            epochs: 600,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            precision: Precision::F32,
            data: DataConfig {
                source: DataSource::Cifar,
                train_images: 50_000,
                val_images: 10_000,
                image_size: 32,
            },
            hooks: HookConfig::default(),
            pilots: PilotConfig::default(),
        }
    }

    /// Desk-scale setup on 200 synthetic 8x8 images for 50 epochs.
    pub fn toy(arch: ArchSpec, ratio: &str, snr_db: f64) -> Self {
        Self {
            preset: Preset::Toy,
            epochs: 50,
            batch_size: 8,
            lr: 2e-3,
            precision: Precision::F64,
            data: DataConfig {
                source: DataSource::Toy,
                train_images: 200,
                val_images: 64,
                image_size: 8,
            },
            hooks: HookConfig {
                probe_size: 16,
                ..HookConfig::default()
            },
            ..Self::paper(arch, ratio, snr_db)
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        Ok(ArchSpec::parse(&self.arch, self.gdn)?)
    }

    pub fn ratio(&self) -> Result<Ratio<usize>> {
        Ok(parse_ratio(&self.ratio)?)
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        let arch = self.arch_spec()?;
        let ratio = self.ratio()?;
        let mut cfg = match self.preset {
            Preset::Toy => CodecConfig::toy(arch, ratio),
            Preset::Paper => CodecConfig::paper(arch, ratio),
        };
        cfg.image = (self.data.image_size, self.data.image_size);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.data.train_images == 0 {
            return Err(Error::Config("no training images".into()));
        }
        self.channel.validate()?;
        self.codec_config()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).at(path)
    }
}
