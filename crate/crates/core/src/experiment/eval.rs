//! Inference and metric reports.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::data::{load_split, Dataset, Split};
use super::report::RunInfo;
use super::train::checkpoint_model;
use super::{create_dir, par_map, write_json, EvalConfig, ExperimentConfig};
use crate::autodiff::{load_checkpoint, read_checkpoint_index, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::labels::{LabelTensor, MAX_SPEAKERS};
use crate::metrics::{
    evaluate, frame_predictions, frame_rows, random_slot_baseline, write_frame_csv, BaselineReport, FramePrediction,
    FrameRow, MetricReport,
};
use crate::model::{canonical_order, encode_angles, Model, Prediction, Variant, ANGLE_FEATURES};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    /// Trained weights; ignored in pass-through mode.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub out_dir: PathBuf,
    /// Score the reference labels themselves as predictions.
    pub passthrough: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub baseline: Option<BaselineReport>,
    pub metrics_path: PathBuf,
    pub frames_path: PathBuf,
}

/// Labels in the slot order the model sees.
fn model_labels(labels: &LabelTensor, variant: Variant) -> Result<LabelTensor> {
    match variant {
        Variant::Adoa => Ok(labels.clone()),
        Variant::Mdoa => labels.reorder(&canonical_order(labels)),
    }
}

fn predict(model: &Model, store: &ParamStore<f32>, ex: &super::data::Example, labels: &LabelTensor) -> Result<Prediction> {
    let cfg = &model.cfg;
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(&[1, ex.channels, ex.feature_frames, ex.n_mels], ex.features.clone())?);
    let angles = match cfg.variant {
        Variant::Adoa => None,
        Variant::Mdoa => {
            let a: Vec<f32> = encode_angles(labels, cfg.max_speakers)?.into_iter().map(|v| v as f32).collect();
            Some(g.input(Tensor::new(&[1, labels.n_frames(), cfg.max_speakers * ANGLE_FEATURES], a)?))
        }
    };
    let out = model.forward(&mut g, store, x, angles, false)?;
    model.predictions(&g, &out).pop().ok_or_else(|| Error::Validation("empty prediction".into()))
}

/// Reference labels dressed up as model output.
fn passthrough_prediction(labels: &LabelTensor) -> Prediction {
    let l = labels.n_frames();
    Prediction {
        n_frames: l,
        slots: MAX_SPEAKERS,
        y_hat: (0..l * MAX_SPEAKERS).map(|i| labels.y(i / MAX_SPEAKERS, i % MAX_SPEAKERS)).collect(),
        theta_deg: Some((0..l * MAX_SPEAKERS).map(|i| labels.theta(i / MAX_SPEAKERS, i % MAX_SPEAKERS)).collect()),
    }
}

fn score(frames: Vec<(String, f64, Vec<FramePrediction>)>, eval: &EvalConfig) -> Result<(MetricReport, Vec<FrameRow>)> {
    let rows = frames.iter().flat_map(|(id, hop, f)| frame_rows(id, *hop, f)).collect();
    let all: Vec<FramePrediction> = frames.into_iter().flat_map(|f| f.2).collect();
    Ok((evaluate(&all, eval.allowance_deg)?, rows))
}

/// Runs the model over every utterance and scores it.
pub fn evaluate_dataset(
    model: &Model,
    store: &ParamStore<f32>,
    ds: &Dataset,
    eval: &EvalConfig,
) -> Result<(MetricReport, Vec<FrameRow>)> {
    let v = model.cfg.variant;
    let frames = par_map(&ds.examples, |ex| {
        let labels = model_labels(&ex.labels, v)?;
        let pred = predict(model, store, ex, &labels)?;
        Ok((ex.id.clone(), labels.hop_s, frame_predictions(&labels, &pred, v, eval.counts)?))
    })?;
    score(frames, eval)
}

fn evaluate_passthrough(ds: &Dataset, variant: Variant, eval: &EvalConfig) -> Result<(MetricReport, Vec<FrameRow>)> {
    let frames = ds
        .examples
        .iter()
        .map(|ex| {
            let labels = model_labels(&ex.labels, variant)?;
            let pred = passthrough_prediction(&labels);
            Ok((ex.id.clone(), labels.hop_s, frame_predictions(&labels, &pred, variant, eval.counts)?))
        })
        .collect::<Result<Vec<_>>>()?;
    score(frames, eval)
}

/// Evaluates a checkpoint (or the references in pass-through mode) on one
/// split and writes `metrics.json`, `frames.csv` and `run.json` (plus
/// `baseline.json` for the angle-conditioned model when enabled).
pub fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<EvalSummary> {
    cfg.validate()?;
    let variant = cfg.model.variant;
    let model_cfg = match (&args.checkpoint, args.passthrough) {
        (_, true) => cfg.model.clone(),
        (Some(p), false) => {
            let m = checkpoint_model(&read_checkpoint_index(p)?.meta)?;
            if m.variant != variant {
                return Err(Error::Validation(format!(
                    "{} holds a {} model but the configuration asks for {}",
                    p.display(),
                    m.variant.name(),
                    variant.name()
                )));
            }
            m
        }
        (None, false) => return Err(Error::InvalidArgument("a checkpoint is required unless pass-through is set".into())),
    };
    let ds = load_split(cfg, args.split)?;
    let (report, rows) = if args.passthrough {
        evaluate_passthrough(&ds, variant, &cfg.eval)?
    } else {
        let ck = load_checkpoint(args.checkpoint.as_ref().expect("checked above"))?;
        let model = Model::new(model_cfg.clone())?;
        evaluate_dataset(&model, &ck.store, &ds, &cfg.eval)?
    };
    let baseline = if variant == Variant::Mdoa && cfg.eval.baseline_trials > 0 {
        let labels: Vec<LabelTensor> =
            ds.examples.iter().map(|ex| model_labels(&ex.labels, variant)).collect::<Result<_>>()?;
        Some(random_slot_baseline(&labels, cfg.eval.baseline_trials, cfg.seed, cfg.eval.allowance_deg)?)
    } else {
        None
    };

    create_dir(&args.out_dir)?;
    let metrics_path = args.out_dir.join("metrics.json");
    let frames_path = args.out_dir.join("frames.csv");
    write_json(&metrics_path, &report)?;
    write_frame_csv(&frames_path, &rows)?;
    if let Some(b) = &baseline {
        write_json(&args.out_dir.join("baseline.json"), b)?;
    }
    let info = RunInfo {
        variant,
        encoder: RunInfo::encoder_name(&model_cfg),
        split: args.split.name().into(),
        checkpoint: args.checkpoint.clone().filter(|_| !args.passthrough),
        passthrough: args.passthrough,
    };
    write_json(&args.out_dir.join("run.json"), &info)?;
    Ok(EvalSummary { report, baseline, metrics_path, frames_path })
}
