//! Adam training loop, checkpointing and per-action evaluation.

mod adam;
mod eval;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimState};
pub use eval::{check_compatible, evaluate, evaluate_with, EvalReport, EvalRow, ALL_COLUMN, EVAL_REPORT_VERSION, REGIONS};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{heatmap_loss_on, pose_loss_on, total_loss_on, LossBreakdown, LossRow, LossWeights};
use crate::model::EgoStan;
use crate::synth::{Dataset, Sample, SampleRef};

pub const TRAIN_CONFIG_VERSION: u32 = 1;
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub adam: AdamConfig,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Checkpoint every this many steps.
    pub eval_interval: usize,
    /// Directory for the loss log and checkpoints; nothing is written when
    /// unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_weights: LossWeights,
    /// Poses enter the 3D loss terms in units of this many millimetres.
    pub loss_unit_mm: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: TRAIN_CONFIG_VERSION,
            adam: AdamConfig::default(),
            batch_size: 8,
            steps: 200,
            seed: 0,
            eval_interval: 100,
            checkpoint_dir: None,
            loss_weights: LossWeights::default(),
            loss_unit_mm: 1000.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema_version != TRAIN_CONFIG_VERSION {
            return fail(format!("train config schema version {} (expected {TRAIN_CONFIG_VERSION})", self.schema_version));
        }
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be at least 1".into());
        }
        let w = self.loss_weights;
        if !(w.theta.is_finite() && w.l1.is_finite() && w.l1 >= 0.0) {
            return fail(format!("loss weights must be finite with l1 >= 0, got {w:?}"));
        }
        if !(self.loss_unit_mm > 0.0 && self.loss_unit_mm.is_finite()) {
            return fail(format!("loss_unit_mm must be positive, got {}", self.loss_unit_mm));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Training windows drawn from a dataset.
#[derive(Clone, Debug)]
pub struct TrainSet<'a> {
    dataset: &'a Dataset,
    refs: Vec<SampleRef>,
    window: usize,
}

impl<'a> TrainSet<'a> {
    /// Windows of `window` frames ending at every frame with at least
    /// `align_to` frames of history (and at least `window`), so models with
    /// different context lengths can share target frames.
    pub fn new(dataset: &'a Dataset, window: usize, align_to: usize) -> Result<Self> {
        let refs = dataset.sample_refs(window.max(align_to));
        if refs.is_empty() {
            return Err(Error::Dataset(format!("no sequence is long enough for {}-frame windows", window.max(align_to))));
        }
        Ok(Self { dataset, refs, window })
    }

    /// Keeps the first `n` windows.
    pub fn truncated(mut self, n: usize) -> Self {
        self.refs.truncate(n.max(1));
        self
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn refs(&self) -> &[SampleRef] {
        &self.refs
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let r = *self.refs.get(i).ok_or_else(|| Error::InvalidArgument(format!("sample {i} of {}", self.refs.len())))?;
        self.dataset.sample(r, self.window)
    }
}

/// Loss terms and parameter gradients of one sample.
pub struct SampleGradient {
    pub loss: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

fn non_finite_location(model: &EgoStan, tape: &Tape, params: usize) -> String {
    match tape.first_non_finite() {
        Some((i, _)) if i < params => {
            format!("parameter `{}`", model.registry().iter().nth(i).map(|(n, _)| n).unwrap_or("?"))
        }
        Some((i, _)) if i == params => "input frames".into(),
        Some((i, op)) => format!("output of {op} (tape node {i})"),
        None => "loss".into(),
    }
}

/// Forward and backward pass of the training objective on one sample.
/// `step` only labels diagnostics.
pub fn sample_gradient(model: &EgoStan, sample: &Sample, cfg: &TrainConfig, step: usize) -> Result<SampleGradient> {
    let mut tape = Tape::new();
    let p = model.registry().bind(&mut tape);
    let x = tape.constant(&sample.frames);
    let overflow = |e: Error| match e {
        Error::Autodiff(AutodiffError::NonFiniteOutput { primitive, node }) => {
            Error::NonFinite { step, location: format!("output of {primitive} (tape node {node})") }
        }
        other => other,
    };
    let (l2d, terms, total) = (|| {
        let out = model.forward_on(&mut tape, &p, x)?;
        let l2d = heatmap_loss_on(&mut tape, out.heatmaps, &sample.heatmaps)?;
        let pose = tape.scale(out.pose, 1.0 / cfg.loss_unit_mm)?;
        let target = Tensor::from_fn(sample.pose.shape(), |i| sample.pose.values()[i] / cfg.loss_unit_mm);
        let terms = pose_loss_on(&mut tape, pose, &target)?;
        let total = total_loss_on(&mut tape, l2d, &terms, cfg.loss_weights)?;
        Ok((l2d, terms, total))
    })()
    .map_err(overflow)?;
    if !tape.value(total)[0].is_finite() {
        return Err(Error::NonFinite { step, location: non_finite_location(model, &tape, model.registry().len()) });
    }
    let grads = tape.backward(total)?;
    let grads = model.registry().collect_grads(&p, &grads);
    if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        let name = model.registry().iter().nth(k).map(|(n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::NonFinite { step, location: format!("gradient of `{name}`") });
    }
    let scalar = |v| tape.value(v)[0];
    let loss = LossBreakdown {
        l2d: scalar(l2d),
        l_l2: scalar(terms.l_l2),
        l_theta: scalar(terms.l_theta),
        l_l1: scalar(terms.l_l1),
        total: scalar(total),
        degenerate_joints: terms.degenerate_joints,
    };
    Ok(SampleGradient { loss, grads })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub row: LossRow,
    /// Batch-mean gradient norm of every parameter, in registry order,
    /// before clipping.
    pub grad_norms: Vec<f64>,
}

/// Stateful optimizer over a model; one `step` is one Adam update on one
/// batch.
pub struct Trainer {
    model: EgoStan,
    cfg: TrainConfig,
    state: OptimState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    log: Vec<LossRow>,
}

impl Trainer {
    pub fn new(model: EgoStan, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = OptimState::new(model.registry());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // separate stream from model initialization under the same seed
        rng.set_stream(2);
        Ok(Self { model, cfg, state, rng, order: Vec::new(), cursor: 0, log: Vec::new() })
    }

    pub fn model(&self) -> &EgoStan {
        &self.model
    }

    pub fn into_model(self) -> EgoStan {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[LossRow] {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.state.step as usize
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    pub fn step(&mut self, data: &TrainSet) -> Result<StepReport> {
        if data.window() != self.model.config().frames {
            return Err(Error::Config(format!(
                "training windows have {} frames, the model expects {}",
                data.window(),
                self.model.config().frames
            )));
        }
        let step = self.steps_done() + 1;
        let batch = self.next_batch(data.len());
        let mut sum: Vec<Vec<f64>> = self.model.registry().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let sample = data.sample(i)?;
            let g = sample_gradient(&self.model, &sample, &self.cfg, step)?;
            for (acc, gi) in sum.iter_mut().zip(&g.grads) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
            losses.push(g.loss);
        }
        let scale = 1.0 / batch.len() as f64;
        sum.iter_mut().flatten().for_each(|g| *g *= scale);
        let grad_norms: Vec<f64> = sum.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if let Some(clip) = self.cfg.grad_clip {
            let global = grad_norms.iter().map(|n| n * n).sum::<f64>().sqrt();
            if global > clip {
                let f = clip / global;
                sum.iter_mut().flatten().for_each(|g| *g *= f);
            }
        }
        self.model.registry_mut().assign_grads(sum)?;
        adam_step(self.model.registry_mut(), &mut self.state, &self.cfg.adam)?;
        self.model.registry_mut().zero_grads();

        let mut mean = LossBreakdown::mean(&losses);
        mean.recompute_total(self.cfg.loss_weights);
        let row = LossRow::new(step, &mean);
        self.log.push(row.clone());
        Ok(StepReport { row, grad_norms })
    }
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub model: EgoStan,
    pub log: Vec<LossRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs `cfg.steps` optimizer steps. With a checkpoint directory, writes
/// the loss log after every step, a checkpoint every `eval_interval` steps
/// and a final checkpoint.
pub fn train_loop(model: EgoStan, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(model, data, cfg, |_| {})
}

/// [`train_loop`] calling `on_step` with every logged row.
pub fn train_loop_with<F>(model: EgoStan, data: &TrainSet, cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&LossRow),
{
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let dir = cfg.checkpoint_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut log_writer = match dir {
        Some(d) => {
            let path = d.join(LOSS_LOG_FILE);
            Some((csv::Writer::from_path(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?, path))
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let report = trainer.step(data);
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                if let Some((w, path)) = log_writer.as_mut() {
                    w.flush().map_err(|io| Error::io(&*path, io))?;
                }
                return Err(e);
            }
        };
        on_step(&report.row);
        if let Some((w, path)) = log_writer.as_mut() {
            w.serialize(&report.row)?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(d) = dir {
            if step % cfg.eval_interval == 0 {
                let path = d.join(checkpoint_name(step));
                trainer.model().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(d) = dir {
        let path = d.join(FINAL_CHECKPOINT);
        trainer.model().save(&path)?;
        checkpoints.push(path);
    }
    let log = trainer.log().to_vec();
    Ok(TrainOutcome { model: trainer.into_model(), log, checkpoints })
}

/// Writes `value` as pretty JSON to `path`.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
