//! Central-difference checks of every tape primitive, every layer, the loss
//! terms and the full tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_many, Primitive, Tape, Tensor, Var, CATALOG};
use crate::error::{Error, Result};
use crate::losses::{heatmap_loss_on, pose_loss_on, total_loss_on, LossWeights};
use crate::model::{EgoStan, ModelConfig, Variant};
use crate::nn::{
    gaussian, BoundParams, Conv2d, Deconv2d, Embedding, EncoderLayer, LayerNorm, Linear, MultiHeadAttention,
    ParameterRegistry, ResidualBlock,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const PRIMITIVE_POINTS: u64 = 5;
pub const LAYER_SETTINGS: u64 = 3;

pub const LAYERS: [&str; 8] =
    ["linear", "conv2d", "deconv2d", "layer_norm", "attention", "encoder_layer", "residual_block", "embedding"];

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub step: f64,
    pub seed: u64,
    /// Primitive whose backward rule is corrupted in every check.
    pub fault: Option<&'static str>,
    pub model: ModelConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, seed: 0, fault: None, model: ModelConfig::tiny() }
    }
}

impl SuiteOptions {
    /// Resolves a user-supplied primitive name to its catalog entry.
    pub fn with_fault(mut self, name: &str) -> Result<Self> {
        let found = CATALOG.iter().find(|&&p| p == name).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown primitive `{name}` (catalog: {})", CATALOG.join(", ")))
        })?;
        self.fault = Some(found);
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    /// `group/name#setting`, e.g. `primitive/softmax#3`.
    pub path: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !(c.max_rel_error <= tolerance)).collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }

    pub fn extend(&mut self, other: SuiteReport) {
        self.checks.extend(other.checks);
    }
}

fn setting_seed(base: u64, group: &str, name: &str, k: u64) -> u64 {
    // FNV-1a over the path keeps seeds stable when checks are added
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in group.bytes().chain([b'/']).chain(name.bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k
}

/// Contracts `y` with a fixed pseudo-random tensor so every output
/// coordinate contributes to the scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = gaussian(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.constant(&r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum_all(prod)?)
}

fn run_check<F>(path: String, points: &[Tensor], opts: &SuiteOptions, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let fault = opts.fault;
    let report = grad_check_many::<_, Error>(
        |tape, vars| {
            if let Some(p) = fault {
                tape.inject_fault(p);
            }
            f(tape, vars)
        },
        points,
        opts.step,
    )?;
    Ok(CheckOutcome {
        path,
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        worst_input: report.worst_input,
        worst_index: report.worst_index,
        analytic: report.analytic,
        numeric: report.numeric,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Magnitudes in `[lo, hi)` with random signs; keeps inputs off kinks and
/// poles.
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Primitive and inputs exercising `name` at a random point.
fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Primitive, Vec<Tensor>)> {
    let n = |shape: &[usize], rng: &mut ChaCha8Rng| gaussian(shape, 1.0, rng);
    Ok(match name {
        "matmul" => (Primitive::Matmul, vec![n(&[2, 3, 4], rng), n(&[2, 4, 2], rng)]),
        "conv2d" => (Primitive::Conv2d { stride: 2, pad: 1 }, vec![n(&[1, 2, 5, 5], rng), n(&[3, 2, 3, 3], rng)]),
        "deconv2d" => (Primitive::Deconv2d { stride: 2, pad: 1 }, vec![n(&[1, 3, 3, 3], rng), n(&[3, 2, 4, 4], rng)]),
        "add" => (Primitive::Add, vec![n(&[3, 4], rng), n(&[3, 4], rng)]),
        "mul" => (Primitive::Mul, vec![n(&[3, 4], rng), n(&[3, 4], rng)]),
        "relu" => (Primitive::Relu, vec![signed(&[3, 4], 0.05, 2.0, rng)]),
        "gelu" => (Primitive::Gelu, vec![n(&[3, 4], rng)]),
        "softmax" => (Primitive::Softmax { axis: 1 }, vec![n(&[3, 5], rng)]),
        "layer_norm" => (Primitive::LayerNorm { axis: 1, eps: crate::autodiff::LAYER_NORM_EPS }, vec![n(&[3, 5], rng)]),
        "reshape" => (Primitive::Reshape { shape: vec![4, 3] }, vec![n(&[2, 6], rng)]),
        "permute" => (Primitive::Permute { perm: vec![2, 0, 1] }, vec![n(&[2, 3, 4], rng)]),
        "concat" => (Primitive::Concat { axis: 1 }, vec![n(&[2, 3], rng), n(&[2, 2], rng), n(&[2, 1], rng)]),
        "slice" => (Primitive::Slice { axis: 1, start: 1, end: 4 }, vec![n(&[3, 5], rng)]),
        "reduce_mean" => (Primitive::ReduceMean { axis: 0 }, vec![n(&[3, 4], rng)]),
        "reduce_sum" => (Primitive::ReduceSum { axis: 1 }, vec![n(&[3, 4], rng)]),
        "sqrt" => (Primitive::Sqrt, vec![uniform(&[3, 4], 0.5, 2.0, rng)]),
        "div" => (Primitive::Div, vec![n(&[3, 4], rng), signed(&[3, 4], 0.5, 1.5, rng)]),
        "neg" => (Primitive::Neg, vec![n(&[3, 4], rng)]),
        "broadcast" => (Primitive::Broadcast { shape: vec![3, 4] }, vec![n(&[3, 1], rng)]),
        other => return Err(Error::InvalidArgument(format!("no gradient case for primitive `{other}`"))),
    })
}

/// Every catalog primitive at [`PRIMITIVE_POINTS`] seeded points.
pub fn check_primitives(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for name in CATALOG {
        for k in 0..PRIMITIVE_POINTS {
            let seed = setting_seed(opts.seed, "primitive", name, k);
            let (prim, points) = primitive_case(name, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let check = run_check(format!("primitive/{name}#{k}"), &points, opts, |tape, vars| {
                let y = tape.apply(prim.clone(), vars)?;
                project(tape, y, seed ^ 1)
            })?;
            report.checks.push(check);
        }
    }
    Ok(report)
}

type LayerFn = Box<dyn Fn(&mut Tape, &BoundParams, Var) -> Result<Var>>;

/// Builds layer `name` into `reg` and returns its forward pass and the
/// shape of its input.
fn layer_case(name: &str, reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng) -> Result<(LayerFn, Vec<usize>)> {
    Ok(match name {
        "linear" => {
            let l = Linear::new(reg, rng, "linear", 4, 3)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![5, 4])
        }
        "conv2d" => {
            let l = Conv2d::new(reg, rng, "conv", 2, 3, 3, 2, 1)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![1, 2, 5, 5])
        }
        "deconv2d" => {
            let l = Deconv2d::new(reg, rng, "deconv", 3, 2, 4, 2, 1)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![1, 3, 3, 3])
        }
        "layer_norm" => {
            let l = LayerNorm::new(reg, "norm", 6)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![4, 6])
        }
        "attention" => {
            let l = MultiHeadAttention::new(reg, rng, "attn", 6, 2)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![4, 6])
        }
        "encoder_layer" => {
            let l = EncoderLayer::new(reg, rng, "enc", 6, 2, 12)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![4, 6])
        }
        "residual_block" => {
            let l = ResidualBlock::new(reg, rng, "res", 2)?;
            (Box::new(move |t, p, x| l.forward(t, p, x)), vec![1, 2, 4, 4])
        }
        "embedding" => {
            let l = Embedding::new(reg, rng, "embed", 5, 3)?;
            // rows added to an input so the slice is checked against both
            (
                Box::new(move |t, p, x| {
                    let rows = l.rows(t, p, 1, 4)?;
                    Ok(t.add(rows, x)?)
                }),
                vec![3, 3],
            )
        }
        other => return Err(Error::InvalidArgument(format!("unknown layer `{other}`"))),
    })
}

/// Registry values plus Gaussian noise. Zero-initialized biases put units
/// with dead inputs exactly on a ReLU kink, where central differences are
/// meaningless.
fn jittered(reg: &ParameterRegistry, std: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    reg.tensors()
        .iter()
        .map(|t| {
            let jitter = gaussian(t.shape(), std, rng);
            Tensor::from_fn(t.shape(), |i| t.values()[i] + jitter.values()[i])
        })
        .collect()
}

/// Every layer type at [`LAYER_SETTINGS`] seeded parameter settings.
pub fn check_layers(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for name in LAYERS {
        for k in 0..LAYER_SETTINGS {
            let seed = setting_seed(opts.seed, "layer", name, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut reg = ParameterRegistry::new();
            let (forward, input_shape) = layer_case(name, &mut reg, &mut rng)?;
            let mut points = vec![gaussian(&input_shape, 1.0, &mut rng)];
            points.extend(jittered(&reg, 0.3, &mut rng));
            let check = run_check(format!("layer/{name}#{k}"), &points, opts, |tape, vars| {
                let p = BoundParams::from_vars(vars[1..].to_vec());
                let y = forward(tape, &p, vars[0])?;
                project(tape, y, seed ^ 1)
            })?;
            report.checks.push(check);
        }
    }
    Ok(report)
}

/// Heatmap and pose loss terms on random predictions.
pub fn check_losses(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let weights = LossWeights::default();
    for k in 0..LAYER_SETTINGS {
        let seed = setting_seed(opts.seed, "loss", "total", k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hm_target = uniform(&[3, 3, 4], 0.0, 1.0, &mut rng);
        let pose_target = gaussian(&[4, 3], 1.0, &mut rng);
        let points = [uniform(&[3, 3, 4], 0.0, 1.0, &mut rng), gaussian(&[4, 3], 1.0, &mut rng)];
        let check = run_check(format!("loss/total#{k}"), &points, opts, |tape, vars| {
            let l2d = heatmap_loss_on(tape, vars[0], &hm_target)?;
            let pose = pose_loss_on(tape, vars[1], &pose_target)?;
            total_loss_on(tape, l2d, &pose, weights)
        })?;
        report.checks.push(check);
    }
    Ok(report)
}

/// Training objective of the full model with respect to the input frames
/// and every parameter, once per output-selection variant, at jittered
/// parameters.
pub fn check_model(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let weights = LossWeights::default();
    for variant in Variant::ALL {
        let config = opts.model.with_variant(variant);
        let seed = setting_seed(opts.seed, "model", &variant.to_string(), 0);
        let model = EgoStan::new(config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let [h, w] = config.image_size;
        let [hh, hw] = config.heatmap_size;
        let frames = uniform(&[config.frames, config.channels, h, w], 0.0, 1.0, &mut rng);
        let hm_target = uniform(&[hh, hw, config.joints], 0.0, 1.0, &mut rng);
        let pose_target = gaussian(&[config.joints, 3], config.pose_scale_mm, &mut rng);
        let mut points = vec![frames];
        points.extend(jittered(model.registry(), 0.1, &mut rng));
        let check = run_check(format!("model/{variant}"), &points, opts, |tape, vars| {
            let p = BoundParams::from_vars(vars[1..].to_vec());
            let out = model.forward_on(tape, &p, vars[0])?;
            let l2d = heatmap_loss_on(tape, out.heatmaps, &hm_target)?;
            let pose = pose_loss_on(tape, out.pose, &pose_target)?;
            total_loss_on(tape, l2d, &pose, weights)
        })?;
        report.checks.push(check);
    }
    Ok(report)
}

/// Primitives, layers, losses and the model, in that order.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = check_primitives(opts)?;
    report.extend(check_layers(opts)?);
    report.extend(check_losses(opts)?);
    report.extend(check_model(opts)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_catalog_primitive_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in CATALOG {
            let (prim, _) = primitive_case(name, &mut rng).unwrap();
            assert_eq!(prim.name(), name);
        }
        assert!(primitive_case("conv3d", &mut rng).is_err());
    }

    #[test]
    fn seeds_differ_per_path_and_setting() {
        let a = setting_seed(0, "primitive", "add", 0);
        assert_ne!(a, setting_seed(0, "primitive", "add", 1));
        assert_ne!(a, setting_seed(0, "primitive", "mul", 0));
        assert_ne!(a, setting_seed(1, "primitive", "add", 0));
    }

    #[test]
    fn primitives_and_layers_pass() {
        let opts = SuiteOptions::default();
        let mut report = check_primitives(&opts).unwrap();
        report.extend(check_layers(&opts).unwrap());
        report.extend(check_losses(&opts).unwrap());
        assert_eq!(report.checks.len(), 19 * 5 + 8 * 3 + 3);
        let worst = report.worst().unwrap();
        assert!(report.passed(DEFAULT_TOLERANCE), "{worst:?}");
    }

    #[test]
    fn injected_fault_is_reported_on_its_primitive() {
        let opts = SuiteOptions::default().with_fault("gelu").unwrap();
        let report = check_primitives(&opts).unwrap();
        let failing: Vec<_> = report.failures(DEFAULT_TOLERANCE).iter().map(|c| c.path.clone()).collect();
        assert_eq!(failing, (0..5).map(|k| format!("primitive/gelu#{k}")).collect::<Vec<_>>());
        assert!(SuiteOptions::default().with_fault("nope").is_err());
    }

    #[test]
    fn tiny_model_passes_for_every_variant() {
        let report = check_model(&SuiteOptions::default()).unwrap();
        assert_eq!(report.checks.len(), 3);
        let worst = report.worst().unwrap();
        assert!(report.passed(DEFAULT_TOLERANCE), "{worst:?}");
    }
}
