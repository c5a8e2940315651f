//! The pose network: per-frame CNN features, spatio-temporal transformer,
//! heatmap reconstruction and 3D lifting.

mod config;
mod tokens;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Variant, MODEL_CONFIG_VERSION};
pub use tokens::{FeatureMapTokens, TokenLayout, TokenSequence, TokenSlot};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Checkpoint, Conv2d, Deconv2d, Embedding, EncoderLayer, Linear, ParameterRegistry, ResidualBlock};

/// Stride-2 stages of `conv3x3 + relu + residual block`, then a 1×1
/// projection to the token width. Applied to every frame with the same
/// weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub stages: Vec<(Conv2d, ResidualBlock)>,
    pub projection: Conv2d,
}

impl FeatureExtractor {
    fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut width = config.channels;
        for (i, &out) in config.extractor_channels.iter().enumerate() {
            let down = Conv2d::new(reg, rng, &format!("extractor.stage{i}.down"), width, out, 3, 2, 1)?;
            let res = ResidualBlock::new(reg, rng, &format!("extractor.stage{i}.res"), out)?;
            stages.push((down, res));
            width = out;
        }
        let projection = Conv2d::new(reg, rng, "extractor.projection", width, config.d_model, 1, 1, 0)?;
        Ok(Self { stages, projection })
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let mut x = x;
        for (down, res) in &self.stages {
            x = down.forward(tape, p, x)?;
            x = tape.relu(x)?;
            x = res.forward(tape, p, x)?;
        }
        self.projection.forward(tape, p, x)
    }
}

/// Deconvolution stack from `[cells, d]` tokens to `[h, w, J]` heatmaps.
#[derive(Clone, Debug)]
pub struct HeatmapHead {
    pub upsample: Vec<Deconv2d>,
    pub output: Conv2d,
}

impl HeatmapHead {
    fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let mut upsample = Vec::new();
        let mut width = config.d_model;
        for i in 0..config.upsampling_stages()? {
            upsample.push(Deconv2d::new(reg, rng, &format!("heatmap.up{i}"), width, config.heatmap_channels, 4, 2, 1)?);
            width = config.heatmap_channels;
        }
        let output = Conv2d::new(reg, rng, "heatmap.output", width, config.joints, 1, 1, 0)?;
        Ok(Self { upsample, output })
    }
}

/// Two stride-2 convolutions and two linear layers from heatmaps to a pose.
#[derive(Clone, Debug)]
pub struct PoseLifter {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub hidden: Linear,
    pub output: Linear,
}

impl PoseLifter {
    fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let [c1, c2] = config.lifting_channels;
        Ok(Self {
            conv1: Conv2d::new(reg, rng, "lift.conv1", config.joints, c1, 3, 2, 1)?,
            conv2: Conv2d::new(reg, rng, "lift.conv2", c1, c2, 3, 2, 1)?,
            hidden: Linear::new(reg, rng, "lift.hidden", config.lifting_flat_features(), config.lifting_hidden)?,
            output: Linear::new(reg, rng, "lift.output", config.lifting_hidden, config.joints * 3)?,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[h, w, J]`, unnormalized.
    pub heatmaps: Var,
    /// `[J, 3]` in millimetres, camera frame.
    pub pose: Var,
}

/// Detached result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub heatmaps: Tensor,
    pub pose: Tensor,
}

#[derive(Clone, Debug)]
pub struct EgoStan {
    config: ModelConfig,
    registry: ParameterRegistry,
    extractor: FeatureExtractor,
    spatial: Embedding,
    temporal: Embedding,
    fmt: Option<FeatureMapTokens>,
    encoder: Vec<EncoderLayer>,
    heatmap: HeatmapHead,
    lifter: PoseLifter,
}

impl EgoStan {
    /// Builds and initializes a model. Feature map tokens draw from their
    /// own random stream, so variants sharing a seed share every other
    /// weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fmt_rng = ChaCha8Rng::seed_from_u64(seed);
        fmt_rng.set_stream(1);
        let mut reg = ParameterRegistry::new();
        let d = config.d_model;
        let extractor = FeatureExtractor::new(&mut reg, &mut rng, &config)?;
        let spatial = Embedding::new(&mut reg, &mut rng, "spatial_embedding", config.grid_cells(), d)?;
        let temporal = Embedding::new(&mut reg, &mut rng, "temporal_embedding", config.frames, d)?;
        let fmt = match config.variant {
            Variant::Fmt => Some(FeatureMapTokens::new(&mut reg, &mut fmt_rng, config.fmt_tokens, d)?),
            Variant::Slice | Variant::Avg => None,
        };
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut reg, &mut rng, &format!("encoder{i}"), d, config.heads, config.ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        let heatmap = HeatmapHead::new(&mut reg, &mut rng, &config)?;
        let lifter = PoseLifter::new(&mut reg, &mut rng, &config)?;
        Ok(Self {
            config,
            registry: reg,
            extractor,
            spatial,
            temporal,
            fmt,
            encoder,
            heatmap,
            lifter,
        })
    }

    /// Single-frame slice model with the same architecture otherwise.
    pub fn baseline(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config.single_frame(), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    pub fn param_count(&self) -> usize {
        self.registry.param_count()
    }

    pub fn feature_map_tokens(&self) -> Option<&FeatureMapTokens> {
        self.fmt.as_ref()
    }

    /// `[T, C, H, W]` frames to `[T, d, h_f, w_f]` features.
    pub fn extract_features(&self, tape: &mut Tape, p: &BoundParams, frames: Var) -> Result<Var> {
        let c = &self.config;
        let expected = vec![c.frames, c.channels, c.image_size[0], c.image_size[1]];
        if tape.shape(frames) != expected.as_slice() {
            return Err(Error::Shape {
                context: "input frames [T, C, H, W]".into(),
                expected,
                found: tape.shape(frames).to_vec(),
            });
        }
        self.extractor.forward(tape, p, frames)
    }

    pub fn tokenize_sequence(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<TokenSequence> {
        tokens::embed_frames(tape, p, features, &self.spatial, &self.temporal, self.fmt.as_ref())
    }

    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, seq: TokenSequence) -> Result<TokenSequence> {
        let mut x = seq.tokens;
        for layer in &self.encoder {
            x = layer.forward(tape, p, x)?;
        }
        Ok(TokenSequence { tokens: x, layout: seq.layout })
    }

    pub fn select_output_tokens(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        seq.select(tape, self.config.variant)
    }

    /// `[cells, d]` tokens to raw `[h, w, J]` heatmaps.
    pub fn reconstruct_heatmaps(&self, tape: &mut Tape, p: &BoundParams, selected: Var) -> Result<Var> {
        let [gh, gw] = self.config.feature_grid();
        let d = self.config.d_model;
        let expected = vec![gh * gw, d];
        if tape.shape(selected) != expected.as_slice() {
            return Err(Error::Shape {
                context: "selected tokens [cells, d]".into(),
                expected,
                found: tape.shape(selected).to_vec(),
            });
        }
        let x = tape.reshape(selected, &[gh, gw, d])?;
        let x = tape.permute(x, &[2, 0, 1])?;
        let mut x = tape.reshape(x, &[1, d, gh, gw])?;
        for up in &self.heatmap.upsample {
            x = up.forward(tape, p, x)?;
            x = tape.relu(x)?;
        }
        let x = self.heatmap.output.forward(tape, p, x)?;
        let [h, w] = self.config.heatmap_size;
        let x = tape.reshape(x, &[self.config.joints, h, w])?;
        Ok(tape.permute(x, &[1, 2, 0])?)
    }

    /// `[h, w, J]` heatmaps to a `[J, 3]` pose in millimetres.
    pub fn lift_to_3d(&self, tape: &mut Tape, p: &BoundParams, heatmaps: Var) -> Result<Var> {
        let [h, w] = self.config.heatmap_size;
        let j = self.config.joints;
        let x = tape.permute(heatmaps, &[2, 0, 1])?;
        let x = tape.reshape(x, &[1, j, h, w])?;
        let x = self.lifter.conv1.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let x = self.lifter.conv2.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let x = tape.reshape(x, &[1, self.config.lifting_flat_features()])?;
        let x = self.lifter.hidden.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let x = self.lifter.output.forward(tape, p, x)?;
        let x = tape.scale(x, self.config.pose_scale_mm)?;
        Ok(tape.reshape(x, &[j, 3])?)
    }

    pub fn forward_on(&self, tape: &mut Tape, p: &BoundParams, frames: Var) -> Result<ForwardVars> {
        let features = self.extract_features(tape, p, frames)?;
        let seq = self.tokenize_sequence(tape, p, features)?;
        let seq = self.encode(tape, p, seq)?;
        let selected = self.select_output_tokens(tape, &seq)?;
        let heatmaps = self.reconstruct_heatmaps(tape, p, selected)?;
        let pose = self.lift_to_3d(tape, p, heatmaps)?;
        Ok(ForwardVars { heatmaps, pose })
    }

    /// Inference on `[T, C, H, W]` frames, oldest first.
    pub fn forward(&self, frames: &Tensor) -> Result<PoseEstimate> {
        let mut tape = Tape::new();
        let p = self.registry.bind_frozen(&mut tape);
        let x = tape.constant(frames);
        let out = self.forward_on(&mut tape, &p, x)?;
        Ok(PoseEstimate {
            heatmaps: tape.tensor(out.heatmaps),
            pose: tape.tensor(out.pose),
        })
    }

    /// Inference on a single `[C, H, W]` frame; only valid for a
    /// single-frame slice model.
    pub fn baseline_forward(&self, frame: &Tensor) -> Result<PoseEstimate> {
        if self.config.frames != 1 || self.config.variant != Variant::Slice {
            return Err(Error::Config(format!(
                "baseline inference needs a T=1 slice model, this one is T={} {}",
                self.config.frames, self.config.variant
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(frame.shape());
        self.forward(&frame.reshaped(&shape)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_registry(&self.registry, serde_json::to_string(&self.config)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_json(&ckpt.meta)?;
        let mut model = Self::new(config, 0)?;
        ckpt.apply_to(&mut model.registry)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests;
