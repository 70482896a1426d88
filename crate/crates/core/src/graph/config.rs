use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 5x5 stride-4 conv followed by two 3x3 convs.
    Eresnet,
    /// 7x7 stride-2 conv followed by 3x3 stride-2 max pooling.
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub width_multiplier: f64,
    pub stem: StemKind,
    pub stage_blocks: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Keep one channel width across all stages instead of doubling per stage.
    pub channel_preserving: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::eresnet(1.0)
    }
}

impl BackboneConfig {
    pub fn eresnet(width_multiplier: f64) -> Self {
        BackboneConfig {
            width_multiplier,
            stem: StemKind::Eresnet,
            stage_blocks: vec![2, 3, 3, 3, 2, 1],
            stage_strides: vec![1, 2, 2, 2, 2, 2],
            channel_preserving: true,
        }
    }

    /// ResNet18 layout (stem, four stages of two blocks, doubling widths).
    /// With `width_multiplier` 1 the first stage has 16 channels, i.e. the
    /// 0.25x ResNet18.
    pub fn resnet18(width_multiplier: f64) -> Self {
        BackboneConfig {
            width_multiplier,
            stem: StemKind::Resnet,
            stage_blocks: vec![2, 2, 2, 2],
            stage_strides: vec![1, 2, 2, 2],
            channel_preserving: false,
        }
    }

    /// `round(16 · width_multiplier)`, at least 1.
    pub fn base_channels(&self) -> usize {
        ((16.0 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        if self.channel_preserving {
            self.base_channels()
        } else {
            self.base_channels() << stage
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        let stages = self.stage_blocks.len();
        if stages == 0 || stages > LEVELS {
            return Err(Error::Config(format!("expected 1..={LEVELS} stages, got {stages}")));
        }
        if self.stage_strides.len() != stages {
            return Err(Error::Config(format!(
                "{} stage strides for {stages} stages",
                self.stage_strides.len()
            )));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.stage_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Config("stage strides must be 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    None,
    Sepfpn,
    Fpn,
}

/// Lowest level of the upper SepFPN group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeparationPosition {
    P3,
    P4,
    P5,
}

impl SeparationPosition {
    pub fn level(self) -> usize {
        match self {
            SeparationPosition::P3 => 3,
            SeparationPosition::P4 => 4,
            SeparationPosition::P5 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    pub kind: NeckKind,
    pub separation_position: SeparationPosition,
    pub fusion_epsilon: f32,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            kind: NeckKind::Sepfpn,
            separation_position: SeparationPosition::P5,
            fusion_epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub enabled: bool,
    /// Background logits predicted on D1 before the max-out reduction.
    pub maxout_background: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            enabled: true,
            maxout_background: 3,
        }
    }
}

/// Full model description, read from JSON by the CLI. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub ccpm: bool,
    pub heads: HeadConfig,
    /// Nominal `[height, width]` used by static analysis.
    pub input_size: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::eresfd(1.0)
    }
}

impl ModelConfig {
    pub fn eresfd(width_multiplier: f64) -> Self {
        ModelConfig {
            backbone: BackboneConfig::eresnet(width_multiplier),
            neck: NeckConfig::default(),
            ccpm: true,
            heads: HeadConfig::default(),
            input_size: [640, 640],
        }
    }

    /// Backbone-only ResNet18 baseline.
    pub fn resnet18(width_multiplier: f64) -> Self {
        ModelConfig {
            backbone: BackboneConfig::resnet18(width_multiplier),
            neck: NeckConfig {
                kind: NeckKind::None,
                ..NeckConfig::default()
            },
            ccpm: false,
            heads: HeadConfig {
                enabled: false,
                ..HeadConfig::default()
            },
            input_size: [480, 640],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// True when the graph ends in detection heads.
    pub fn is_detector(&self) -> bool {
        self.heads.enabled
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let stages = self.backbone.stage_blocks.len();
        let needs_levels = self.neck.kind != NeckKind::None || self.ccpm || self.heads.enabled;
        if needs_levels && stages != LEVELS {
            return Err(Error::Config(format!(
                "neck, ccpm and heads need {LEVELS} backbone stages, got {stages}"
            )));
        }
        if self.neck.kind != NeckKind::None && !self.backbone.channel_preserving {
            return Err(Error::Config("fpn necks need channel_preserving backbones".into()));
        }
        if !(self.neck.fusion_epsilon >= 0.0) {
            return Err(Error::Config("fusion_epsilon must be non-negative".into()));
        }
        if self.heads.enabled && self.heads.maxout_background == 0 {
            return Err(Error::Config("maxout_background must be at least 1".into()));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config("input_size must be positive".into()));
        }
        Ok(())
    }
}
