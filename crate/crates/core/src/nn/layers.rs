use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::registry::{BoundParams, ParamId, ParameterRegistry};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation for embedding tables and learnable token blocks.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Declarative description of a layer and its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear { in_features: usize, out_features: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Deconv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    LayerNorm { width: usize },
    Mha { d: usize, heads: usize },
    EncoderLayer { d: usize, heads: usize, ffn_hidden: usize },
    ResidualBlock { channels: usize, kernel: usize },
    Embedding { rows: usize, width: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerSpec::Mha { d, heads } | LayerSpec::EncoderLayer { d, heads, .. } if heads == 0 || d % heads != 0 => {
                fail(format!("model width {d} is not divisible by {heads} heads"))
            }
            LayerSpec::EncoderLayer { d, ffn_hidden, .. } if ffn_hidden < d => {
                fail(format!("feed-forward width {ffn_hidden} is smaller than model width {d}"))
            }
            LayerSpec::Conv { stride: 0, .. } | LayerSpec::Deconv { stride: 0, .. } => fail("stride must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Number of scalar parameters the layer registers.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_features, out_features } => in_features * out_features + out_features,
            LayerSpec::Conv { in_channels, out_channels, kernel, .. }
            | LayerSpec::Deconv { in_channels, out_channels, kernel, .. } => {
                in_channels * out_channels * kernel * kernel + out_channels
            }
            LayerSpec::LayerNorm { width } => 2 * width,
            LayerSpec::Mha { d, .. } => 4 * (d * d + d),
            LayerSpec::EncoderLayer { d, heads, ffn_hidden } => {
                2 * 2 * d
                    + LayerSpec::Mha { d, heads }.param_count()
                    + (d * ffn_hidden + ffn_hidden)
                    + (ffn_hidden * d + d)
            }
            LayerSpec::ResidualBlock { channels, kernel } => 2 * (channels * channels * kernel * kernel + channels),
            LayerSpec::Embedding { rows, width } => rows * width,
        }
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Adds a bias of shape `[channels]` along `axis` of `x`.
fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut view = vec![1; shape.len()];
    view[axis] = shape[axis];
    let b = tape.reshape(bias, &view)?;
    let b = tape.broadcast(b, &shape)?;
    Ok(tape.add(x, b)?)
}

/// Affine map over the last axis of a rank-2 input `[S, in] -> [S, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = reg.register(format!("{name}.weight"), he_uniform(&[in_features, out_features], in_features, rng))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Linear { in_features: self.in_features, out_features: self.out_features }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        add_channel_bias(tape, y, p.var(self.bias), 1)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: LayerSpec,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        reg: &mut ParameterRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let spec = LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad };
        spec.validate()?;
        let fan_in = in_channels * kernel * kernel;
        let weight = reg.register(format!("{name}.weight"), he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, spec, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), self.stride, self.pad)?;
        add_channel_bias(tape, y, p.var(self.bias), 1)
    }
}

/// Transposed convolution (learnable upsampling).
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: LayerSpec,
    stride: usize,
    pad: usize,
}

impl Deconv2d {
    pub fn new(
        reg: &mut ParameterRegistry,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let spec = LayerSpec::Deconv { in_channels, out_channels, kernel, stride, pad };
        spec.validate()?;
        // each output pixel sees about in_channels·(kernel/stride)² taps
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let weight = reg.register(format!("{name}.weight"), he_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, spec, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.deconv2d(x, p.var(self.weight), self.stride, self.pad)?;
        add_channel_bias(tape, y, p.var(self.bias), 1)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(reg: &mut ParameterRegistry, name: &str, width: usize) -> Result<Self> {
        let gamma = reg.register(format!("{name}.gamma"), Tensor::ones(&[width]))?;
        let beta = reg.register(format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta, width })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let last = shape.len() - 1;
        let y = tape.layer_norm(x, last)?;
        let mut view = vec![1; shape.len()];
        view[last] = self.width;
        let g = tape.reshape(p.var(self.gamma), &view)?;
        let g = tape.broadcast(g, &shape)?;
        let y = tape.mul(y, g)?;
        add_channel_bias(tape, y, p.var(self.beta), last)
    }
}

/// Multi-head scaled dot-product self-attention over `[S, d]` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        LayerSpec::Mha { d, heads }.validate()?;
        Ok(Self {
            query: Linear::new(reg, rng, &format!("{name}.query"), d, d)?,
            key: Linear::new(reg, rng, &format!("{name}.key"), d, d)?,
            value: Linear::new(reg, rng, &format!("{name}.value"), d, d)?,
            output: Linear::new(reg, rng, &format!("{name}.output"), d, d)?,
            d,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }

    /// Returns the output and the attention weights `[heads, S, S]`.
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::Shape { context: "attention input".into(), expected: vec![0, self.d], found: shape });
        }
        let s = shape[0];
        let dh = self.d / self.heads;
        let split = |tape: &mut Tape, v: Var, perm: &[usize]| -> Result<Var> {
            let v = tape.reshape(v, &[s, self.heads, dh])?;
            Ok(tape.permute(v, perm)?)
        };
        let q = self.query.forward(tape, p, x)?;
        let q = split(tape, q, &[1, 0, 2])?; // [h, S, dh]
        let k = self.key.forward(tape, p, x)?;
        let k = split(tape, k, &[1, 2, 0])?; // [h, dh, S]
        let v = self.value.forward(tape, p, x)?;
        let v = split(tape, v, &[1, 0, 2])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?; // [h, S, dh]
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[s, self.d])?;
        Ok((self.output.forward(tape, p, ctx)?, weights))
    }
}

/// Pre-norm transformer encoder layer:
/// `h = x + MHA(LN(x))`, `out = h + FFN(LN(h))` with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub spec: LayerSpec,
}

impl EncoderLayer {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        let spec = LayerSpec::EncoderLayer { d, heads, ffn_hidden };
        spec.validate()?;
        Ok(Self {
            norm1: LayerNorm::new(reg, &format!("{name}.norm1"), d)?,
            attention: MultiHeadAttention::new(reg, rng, &format!("{name}.attn"), d, heads)?,
            norm2: LayerNorm::new(reg, &format!("{name}.norm2"), d)?,
            ffn_in: Linear::new(reg, rng, &format!("{name}.ffn_in"), d, ffn_hidden)?,
            ffn_out: Linear::new(reg, rng, &format!("{name}.ffn_out"), ffn_hidden, d)?,
            spec,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let n = self.norm1.forward(tape, p, x)?;
        let a = self.attention.forward(tape, p, n)?;
        let h = tape.add(x, a)?;
        let n = self.norm2.forward(tape, p, h)?;
        let f = self.ffn_in.forward(tape, p, n)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, p, f)?;
        Ok(tape.add(h, f)?)
    }
}

/// Two same-width 3×3 convolutions with an identity skip:
/// `relu(x + conv2(relu(conv1(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(reg, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1)?,
            conv2: Conv2d::new(reg, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1)?,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        Ok(tape.relu(y)?)
    }
}

/// Learned table of `rows` vectors of width `width`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng, name: &str, rows: usize, width: usize) -> Result<Self> {
        let table = reg.register(name.to_string(), gaussian(&[rows, width], EMBEDDING_INIT_STD, rng))?;
        Ok(Self { table, rows, width })
    }

    /// Rows `start..end` as `[end - start, width]`.
    pub fn rows(&self, tape: &mut Tape, p: &BoundParams, start: usize, end: usize) -> Result<Var> {
        Ok(tape.slice(p.var(self.table), 0, start, end)?)
    }

    pub fn all(&self, p: &BoundParams) -> Var {
        p.var(self.table)
    }
}
