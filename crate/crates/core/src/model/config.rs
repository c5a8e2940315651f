use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_CONFIG_VERSION: u32 = 1;

/// How the transformer output is reduced to one token per feature-grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Learnable feature map tokens appended to the sequence.
    Fmt,
    /// Tokens of the current (last) frame.
    Slice,
    /// Mean over time of spatially matching tokens.
    Avg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fmt, Variant::Slice, Variant::Avg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fmt => "fmt",
            Variant::Slice => "slice",
            Variant::Avg => "avg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmt" => Ok(Variant::Fmt),
            "slice" => Ok(Variant::Slice),
            "avg" => Ok(Variant::Avg),
            other => Err(Error::Config(format!("unknown variant `{other}` (valid: fmt, slice, avg)"))),
        }
    }
}

/// Every architectural hyperparameter of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    /// Sequence length T (frames per forward pass, oldest first).
    pub frames: usize,
    /// Input image `[H, W]`.
    pub image_size: [usize; 2],
    pub channels: usize,
    /// Output channels of each stride-2 extractor stage.
    pub extractor_channels: Vec<usize>,
    /// Token width d.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    /// Number of feature map tokens; must equal the feature-grid cell count.
    pub fmt_tokens: usize,
    /// Heatmap `[h, w]`.
    pub heatmap_size: [usize; 2],
    /// Channel width of the deconvolution stack.
    pub heatmap_channels: usize,
    /// Joint count J.
    pub joints: usize,
    /// Output channels of the two stride-2 lifting convolutions.
    pub lifting_channels: [usize; 2],
    pub lifting_hidden: usize,
    /// Millimetres per unit of the lifting head's raw output.
    pub pose_scale_mm: f64,
    /// Reserved; must be zero.
    pub dropout: f64,
    pub upper_body: Vec<usize>,
    pub lower_body: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schema_version: MODEL_CONFIG_VERSION,
            frames: 4,
            image_size: [32, 32],
            channels: 1,
            extractor_channels: vec![8, 16, 32],
            d_model: 32,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            variant: Variant::Fmt,
            fmt_tokens: 16,
            heatmap_size: [16, 16],
            heatmap_channels: 16,
            joints: 16,
            lifting_channels: [16, 32],
            lifting_hidden: 128,
            pose_scale_mm: 300.0,
            dropout: 0.0,
            upper_body: (0..10).collect(),
            lower_body: (10..16).collect(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the gradient-oracle suite:
    /// T=2, 16×16 images, 2×2 grid, d=8, one layer, three joints.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            image_size: [16, 16],
            channels: 1,
            extractor_channels: vec![2, 3, 4],
            d_model: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 16,
            fmt_tokens: 4,
            heatmap_size: [4, 4],
            heatmap_channels: 3,
            joints: 3,
            lifting_channels: [3, 4],
            lifting_hidden: 6,
            pose_scale_mm: 1.0,
            upper_body: vec![0, 1],
            lower_body: vec![2],
            ..Self::default()
        }
    }

    /// Single-frame slice configuration with otherwise identical settings.
    pub fn single_frame(&self) -> Self {
        Self {
            frames: 1,
            variant: Variant::Slice,
            ..self.clone()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self {
            frames,
            ..self.clone()
        }
    }

    pub fn feature_grid(&self) -> [usize; 2] {
        let f = 1 << self.extractor_channels.len();
        [self.image_size[0] / f, self.image_size[1] / f]
    }

    pub fn grid_cells(&self) -> usize {
        let [h, w] = self.feature_grid();
        h * w
    }

    /// Number of stride-2 deconvolutions from the grid to the heatmap.
    pub fn upsampling_stages(&self) -> Result<usize> {
        let [gh, gw] = self.feature_grid();
        let [hh, hw] = self.heatmap_size;
        let mut stages = 0;
        let (mut h, mut w) = (gh, gw);
        while h < hh && w < hw {
            h *= 2;
            w *= 2;
            stages += 1;
        }
        if h != hh || w != hw {
            return Err(Error::Config(format!(
                "heatmap {hh}x{hw} is not reachable from feature grid {gh}x{gw} by stride-2 deconvolutions"
            )));
        }
        Ok(stages)
    }

    /// Tokens entering the transformer.
    pub fn sequence_len(&self) -> usize {
        let frame_tokens = self.frames * self.grid_cells();
        match self.variant {
            Variant::Fmt => frame_tokens + self.fmt_tokens,
            Variant::Slice | Variant::Avg => frame_tokens,
        }
    }

    pub fn lifting_flat_features(&self) -> usize {
        let down = |n: usize| (n - 1) / 2 + 1;
        let [h, w] = self.heatmap_size;
        self.lifting_channels[1] * down(down(h)) * down(down(w))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema_version != MODEL_CONFIG_VERSION {
            return fail(format!(
                "model config schema version {} (expected {MODEL_CONFIG_VERSION})",
                self.schema_version
            ));
        }
        if self.frames == 0 {
            return fail("frames must be at least 1".into());
        }
        if self.joints < 2 {
            return fail("at least two joints are required".into());
        }
        if self.channels == 0 || self.extractor_channels.is_empty() || self.extractor_channels.contains(&0) {
            return fail("channel counts must be positive and at least one extractor stage is required".into());
        }
        let f = 1 << self.extractor_channels.len();
        if self.image_size.iter().any(|&s| s == 0 || s % f != 0) {
            return fail(format!(
                "image {:?} is not divisible by the extractor stride {f}",
                self.image_size
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.ffn_hidden < self.d_model {
            return fail("ffn_hidden must be at least d_model".into());
        }
        if self.fmt_tokens != self.grid_cells() {
            return fail(format!(
                "variant {} needs fmt_tokens == grid cells ({}), got {}",
                self.variant,
                self.grid_cells(),
                self.fmt_tokens
            ));
        }
        self.upsampling_stages()?;
        if self.heatmap_channels == 0 || self.lifting_channels.contains(&0) || self.lifting_hidden == 0 {
            return fail("head widths must be positive".into());
        }
        if !(self.pose_scale_mm.is_finite() && self.pose_scale_mm > 0.0) {
            return fail("pose_scale_mm must be positive".into());
        }
        if self.dropout != 0.0 {
            return fail("dropout is reserved and must be 0".into());
        }
        for (name, set) in [("upper_body", &self.upper_body), ("lower_body", &self.lower_body)] {
            if set.is_empty() || set.iter().any(|&j| j >= self.joints) {
                return fail(format!("{name} must be a nonempty set of joint indices < {}", self.joints));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_grid(), [4, 4]);
        assert_eq!(c.upsampling_stages().unwrap(), 2);
        assert_eq!(c.sequence_len(), 80);
        assert_eq!(c.single_frame().sequence_len(), 16);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn sequence_length_arithmetic() {
        let c = ModelConfig {
            frames: 3,
            ..ModelConfig::default()
        };
        assert_eq!(c.sequence_len(), 3 * 16 + 16);
        assert_eq!(c.with_variant(Variant::Slice).sequence_len(), 48);
        assert_eq!(c.with_variant(Variant::Avg).sequence_len(), 48);
    }

    #[test]
    fn one_deconv_stage_from_8x8_to_16x16() {
        let c = ModelConfig {
            image_size: [64, 64],
            fmt_tokens: 64,
            ..ModelConfig::default()
        };
        assert_eq!(c.feature_grid(), [8, 8]);
        assert_eq!(c.upsampling_stages().unwrap(), 1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let base = ModelConfig::default();
        let bad = [
            ModelConfig { fmt_tokens: 15, ..base.clone() },
            ModelConfig { heatmap_size: [12, 12], ..base.clone() },
            ModelConfig { frames: 0, ..base.clone() },
            ModelConfig { joints: 1, upper_body: vec![0], lower_body: vec![0], ..base.clone() },
            ModelConfig { heads: 5, ..base.clone() },
            ModelConfig { dropout: 0.1, ..base.clone() },
            ModelConfig { schema_version: 2, ..base.clone() },
            ModelConfig { lower_body: vec![16], ..base.clone() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_round_trip_and_variant_parsing() {
        let c = ModelConfig::default();
        assert_eq!(ModelConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let partial = ModelConfig::from_json(r#"{"frames": 2}"#).unwrap();
        assert_eq!(partial, c.with_frames(2));
        assert!(ModelConfig::from_json(r#"{"frame": 2}"#).is_err());
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("mean".parse::<Variant>().is_err());
    }
}
