//! Model hyperparameters and their flat key-value file form.

use crate::anchors::{AnchorLayout, DEFAULT_RATIOS};
use crate::kvfile::parse_kv;
use crate::tensor::InterpMode;

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension `c`: both the input snippet-feature width and the
    /// preserved lateral axis of every feature map.
    pub feature_dim: usize,
    /// Input window length `T` in snippets.
    pub base_length: usize,
    /// Kernels of the two transform branches; their sum is the pyramid width.
    pub k1: usize,
    pub k2: usize,
    /// Number of cascaded pyramid modules.
    pub num_thm: usize,
    /// Pyramid depth `P`; detection levels run at `t/2 .. t/2^P`.
    pub pyramid_levels: usize,
    /// Channel width inside each pyramid module.
    pub thm_channels: usize,
    /// Anchors per cell; must equal the ratio count.
    pub head_anchors: usize,
    /// Action classes (background excluded).
    pub num_classes: usize,
    pub interp_mode: InterpMode,
    pub anchor_ratios: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            base_length: 128,
            k1: 64,
            k2: 64,
            num_thm: 6,
            pyramid_levels: 3,
            thm_channels: 128,
            head_anchors: 7,
            num_classes: 3,
            interp_mode: InterpMode::Nearest,
            anchor_ratios: DEFAULT_RATIOS.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.feature_dim == 0 || self.num_classes == 0 {
            return fail("feature_dim and num_classes must be positive".into());
        }
        if self.num_thm < 1 || self.pyramid_levels < 1 {
            return fail("num_thm and pyramid_levels must be at least 1".into());
        }
        if self.k1 + self.k2 != self.thm_channels {
            return fail(format!(
                "k1 + k2 must equal thm_channels: {} + {} != {}",
                self.k1, self.k2, self.thm_channels
            ));
        }
        if self.thm_channels % 2 != 0 {
            return fail(format!(
                "thm_channels must be even for the inter-module split, got {}",
                self.thm_channels
            ));
        }
        let granularity = 1usize << (self.pyramid_levels + 2);
        if self.base_length == 0 || self.base_length % granularity != 0 {
            return fail(format!(
                "base_length {} must be divisible by 2^(P+2) = {}",
                self.base_length, granularity
            ));
        }
        if self.anchor_ratios.is_empty() || self.head_anchors != self.anchor_ratios.len() {
            return fail(format!(
                "head_anchors ({}) must equal the number of anchor ratios ({})",
                self.head_anchors,
                self.anchor_ratios.len()
            ));
        }
        if self.anchor_ratios.iter().any(|&r| r <= 0.0) {
            return fail("anchor ratios must be positive".into());
        }
        Ok(())
    }

    /// Temporal length after the two stride-2 base convolutions.
    pub fn base_temporal(&self) -> usize {
        self.base_length / 4
    }

    /// Cell counts of the detection levels: `t/2, t/4, ..., t/2^P`.
    pub fn level_lengths(&self) -> Vec<usize> {
        (1..=self.pyramid_levels)
            .map(|j| self.base_temporal() >> j)
            .collect()
    }

    /// Channel width after the per-level fusion module.
    pub fn fused_channels(&self) -> usize {
        2 * self.thm_channels
    }

    /// The single source of anchor geometry for matching and decoding.
    pub fn anchor_layout(&self) -> AnchorLayout {
        AnchorLayout::new(
            self.level_lengths(),
            self.anchor_ratios.clone(),
            self.base_length,
        )
        .expect("validated config produces a valid layout")
    }

    pub fn num_anchors(&self) -> usize {
        self.head_anchors * self.level_lengths().iter().sum::<usize>()
    }

    pub fn to_config_string(&self) -> String {
        let ratios: Vec<String> = self.anchor_ratios.iter().map(|r| r.to_string()).collect();
        format!(
            "feature_dim {}\nbase_length {}\nk1 {}\nk2 {}\nnum_thm {}\npyramid_levels {}\n\
             thm_channels {}\nhead_anchors {}\nnum_classes {}\ninterp_mode {}\nanchor_ratios {}\n",
            self.feature_dim,
            self.base_length,
            self.k1,
            self.k2,
            self.num_thm,
            self.pyramid_levels,
            self.thm_channels,
            self.head_anchors,
            self.num_classes,
            self.interp_mode,
            ratios.join(",")
        )
    }

    /// Parse a key-value config; unknown keys are errors, missing keys keep
    /// their defaults.
    pub fn from_config_str(text: &str) -> Result<Self, ModelError> {
        let mut config = ModelConfig::default();
        let pairs =
            parse_kv(text).map_err(|(line, msg)| ModelError::Config(format!("line {}: {}", line, msg)))?;
        for (key, value, line) in pairs {
            let bad = |what: &str| {
                ModelError::Config(format!("line {}: bad {} value {:?}", line, what, value))
            };
            match key.as_str() {
                "feature_dim" => config.feature_dim = value.parse().map_err(|_| bad("feature_dim"))?,
                "base_length" => config.base_length = value.parse().map_err(|_| bad("base_length"))?,
                "k1" => config.k1 = value.parse().map_err(|_| bad("k1"))?,
                "k2" => config.k2 = value.parse().map_err(|_| bad("k2"))?,
                "num_thm" => config.num_thm = value.parse().map_err(|_| bad("num_thm"))?,
                "pyramid_levels" => {
                    config.pyramid_levels = value.parse().map_err(|_| bad("pyramid_levels"))?
                }
                "thm_channels" => {
                    config.thm_channels = value.parse().map_err(|_| bad("thm_channels"))?
                }
                "head_anchors" => {
                    config.head_anchors = value.parse().map_err(|_| bad("head_anchors"))?
                }
                "num_classes" => config.num_classes = value.parse().map_err(|_| bad("num_classes"))?,
                "interp_mode" => {
                    config.interp_mode = value.parse().map_err(|_| bad("interp_mode"))?
                }
                "anchor_ratios" => {
                    let ratios: Result<Vec<f64>, _> =
                        value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    config.anchor_ratios = ratios.map_err(|_| bad("anchor_ratios"))?;
                }
                other => {
                    return Err(ModelError::Config(format!(
                        "line {}: unknown key {:?}",
                        line, other
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}
