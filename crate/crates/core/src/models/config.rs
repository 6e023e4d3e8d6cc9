use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SE_REDUCTION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    DenseNet,
    ResNet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

/// One cell of the ablation lattice.
///
/// For DenseNet `block_config` is layers per dense block and `init_features`
/// the stem width. For ResNet18 `block_config` is residual blocks per stage
/// and `init_features` the first stage width, doubled at every later stage;
/// `growth_rate` is unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub use_se: bool,
    pub use_spp: bool,
    pub in_channels: usize,
    pub block_config: Vec<usize>,
    pub growth_rate: usize,
    pub init_features: usize,
    pub spp_bins: Vec<usize>,
    pub se_reduction: usize,
    pub scale_preset: Preset,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn preset(backbone: Backbone, preset: Preset) -> Self {
        let (block_config, growth_rate, init_features, input_size) = match (backbone, preset) {
            (Backbone::DenseNet, Preset::Desk) => (vec![2, 2, 2], 8, 16, 64),
            (Backbone::DenseNet, Preset::Paper) => (vec![6, 12, 24, 16], 32, 64, 224),
            (Backbone::ResNet18, Preset::Desk) => (vec![2, 2, 2, 2], 0, 8, 64),
            (Backbone::ResNet18, Preset::Paper) => (vec![2, 2, 2, 2], 0, 64, 224),
        };
        ModelConfig {
            backbone,
            use_se: true,
            use_spp: true,
            in_channels: 2,
            block_config,
            growth_rate,
            init_features,
            spp_bins: vec![1, 2, 4],
            se_reduction: SE_REDUCTION,
            scale_preset: preset,
            input_size,
        }
    }

    pub fn desk(backbone: Backbone) -> Self {
        Self::preset(backbone, Preset::Desk)
    }

    pub fn paper(backbone: Backbone) -> Self {
        Self::preset(backbone, Preset::Paper)
    }

    pub fn with_toggles(mut self, use_se: bool, use_spp: bool) -> Self {
        self.use_se = use_se;
        self.use_spp = use_spp;
        self
    }

    /// Total spatial downsampling between input and the final feature map.
    pub fn downsample(&self) -> usize {
        let stem = match self.scale_preset {
            Preset::Desk => 1,
            Preset::Paper => 4,
        };
        stem << self.block_config.len().saturating_sub(1)
    }

    /// Smallest square input the network accepts.
    pub fn min_input(&self) -> usize {
        let last = if self.use_spp {
            self.spp_bins.iter().copied().max().unwrap_or(1)
        } else {
            1
        };
        self.downsample() * last
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.in_channels) {
            return bad(format!("in_channels must be 1 or 2, got {}", self.in_channels));
        }
        if self.block_config.is_empty() || self.block_config.contains(&0) {
            return bad(format!("invalid block_config {:?}", self.block_config));
        }
        if self.init_features == 0 || self.se_reduction == 0 {
            return bad("init_features and se_reduction must be positive".into());
        }
        if self.backbone == Backbone::DenseNet && self.growth_rate == 0 {
            return bad("growth_rate must be positive".into());
        }
        if self.use_spp && (self.spp_bins.is_empty() || self.spp_bins.contains(&0)) {
            return bad(format!("invalid spp_bins {:?}", self.spp_bins));
        }
        if self.input_size < self.min_input() {
            return bad(format!(
                "input_size {} below the architecture minimum {}",
                self.input_size,
                self.min_input()
            ));
        }
        if self.backbone == Backbone::DenseNet && !self.input_size.is_multiple_of(self.downsample()) {
            return bad(format!(
                "input_size {} must be a multiple of {}",
                self.input_size,
                self.downsample()
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let base = match self.backbone {
            Backbone::DenseNet => "DenseNet",
            Backbone::ResNet18 => "ResNet18",
        };
        let mut s = base.to_string();
        if self.use_se {
            s.push_str(" + SE Block");
        }
        if self.use_spp {
            s.push_str(" + SPPLayer");
        }
        s
    }
}
