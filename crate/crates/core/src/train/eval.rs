use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::joint_errors;
use crate::model::EgoStan;
use crate::synth::{Action, Dataset, Sample};

pub const EVAL_REPORT_VERSION: u32 = 1;
pub const ALL_COLUMN: &str = "All";
/// Row order of the report. `average` covers every joint; `occluded` and
/// `visible` pool joints by their per-frame occlusion flag.
pub const REGIONS: [&str; 5] = ["upper", "lower", "average", "occluded", "visible"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub region: String,
    /// MPJPE in millimetres per column; `None` where the cell has no joints.
    pub mpjpe: Vec<Option<f64>>,
}

/// Per-action MPJPE table: one column per action plus `All`, one row per
/// entry of [`REGIONS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub approach: String,
    pub param_count: usize,
    pub samples: usize,
    pub occluded_joints: usize,
    pub visible_joints: usize,
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, region: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.region == region)?.mpjpe[c]
    }

    pub fn average_mpjpe(&self) -> Option<f64> {
        self.get("average", ALL_COLUMN)
    }

    pub fn occluded_mpjpe(&self) -> Option<f64> {
        self.get("occluded", ALL_COLUMN)
    }

    pub fn visible_mpjpe(&self) -> Option<f64> {
        self.get("visible", ALL_COLUMN)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["approach".to_string(), "region".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![self.approach.clone(), row.region.clone()];
            rec.extend(row.mpjpe.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_json(path, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != EVAL_REPORT_VERSION {
            return Err(Error::Config(format!(
                "eval report schema version {} (expected {EVAL_REPORT_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Errors unless the dataset's frames and heatmaps have the shapes the model expects.
pub fn check_compatible(model: &EgoStan, dataset: &Dataset) -> Result<()> {
    let m = model.config();
    let d = &dataset.manifest.config;
    let mismatch = |context: &str, expected: Vec<usize>, found: Vec<usize>| {
        Err(Error::Shape { context: format!("{context}: model vs dataset"), expected, found })
    };
    if [m.channels, m.image_size[0], m.image_size[1]] != [d.channels, d.image_size[0], d.image_size[1]] {
        return mismatch("frame [C, H, W]", vec![m.channels, m.image_size[0], m.image_size[1]], vec![
            d.channels,
            d.image_size[0],
            d.image_size[1],
        ]);
    }
    let joints = d.skeleton.names.len();
    if [m.heatmap_size[0], m.heatmap_size[1], m.joints] != [d.heatmap_size[0], d.heatmap_size[1], joints] {
        return mismatch(
            "heatmap [h, w, J]",
            vec![m.heatmap_size[0], m.heatmap_size[1], m.joints],
            vec![d.heatmap_size[0], d.heatmap_size[1], joints],
        );
    }
    Ok(())
}

/// MPJPE of `model` on every window of `dataset` whose last frame has at
/// least `align_to` frames of history (see [`TrainSet::new`]).
pub fn evaluate(model: &EgoStan, dataset: &Dataset, align_to: usize) -> Result<EvalReport> {
    evaluate_with(model, dataset, align_to, |s| Ok(model.forward(&s.frames)?.pose))
}

/// Like [`evaluate`] with poses from `predict` instead of the model's
/// forward pass; the model supplies the layout and parameter count.
pub fn evaluate_with<F>(model: &EgoStan, dataset: &Dataset, align_to: usize, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&Sample) -> Result<Tensor>,
{
    check_compatible(model, dataset)?;
    let config = model.config();
    let data = TrainSet::new(dataset, config.frames, align_to)?;
    let mut columns: Vec<String> = Action::ALL.iter().map(|a| a.name().to_string()).collect();
    columns.push(ALL_COLUMN.into());
    let all = columns.len() - 1;
    let mut sums = vec![vec![(0.0, 0usize); columns.len()]; REGIONS.len()];
    let (mut occluded, mut visible) = (0, 0);
    let mut add = |region: usize, col: usize, e: f64| {
        for c in [col, all] {
            sums[region][c].0 += e;
            sums[region][c].1 += 1;
        }
    };
    for i in 0..data.len() {
        let sample = data.sample(i)?;
        let pred = predict(&sample)?;
        let errors = joint_errors(&pred, &sample.pose)?;
        let col = sample.action.index();
        for &j in &config.upper_body {
            add(0, col, errors[j]);
        }
        for &j in &config.lower_body {
            add(1, col, errors[j]);
        }
        for (j, &e) in errors.iter().enumerate() {
            add(2, col, e);
            if sample.occluded[j] {
                add(3, col, e);
                occluded += 1;
            } else {
                add(4, col, e);
                visible += 1;
            }
        }
    }
    let rows = REGIONS
        .iter()
        .zip(&sums)
        .map(|(region, cells)| EvalRow {
            region: region.to_string(),
            mpjpe: cells.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect(),
        })
        .collect();
    Ok(EvalReport {
        schema_version: EVAL_REPORT_VERSION,
        approach: format!("{}-T{}", config.variant, config.frames),
        param_count: model.param_count(),
        samples: data.len(),
        occluded_joints: occluded,
        visible_joints: visible,
        columns,
        rows,
    })
}
