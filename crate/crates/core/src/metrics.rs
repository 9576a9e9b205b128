//! Peak picking and the assignment-based evaluation metrics.
//!
//! Each evaluation frame pairs reference azimuths with predicted ones by a
//! minimum-cost assignment under `|θ − θ̂|` (cone angles do not wrap). PIMAE
//! averages the assigned errors over all pairs; ACC counts the pairs whose
//! error is strictly below the allowance.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign;
use crate::error::{Error, IoContext, Result};
use crate::labels::{LabelTensor, MAX_SPEAKERS};
use crate::model::{Prediction, Variant};

pub const DEFAULT_ALLOWANCE_DEG: f64 = 20.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How many slots to select per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "threshold")]
pub enum CountMode {
    /// The number of active reference speakers.
    Oracle,
    /// Every eligible slot with posterior above the threshold.
    Threshold(f64),
}

impl Default for CountMode {
    fn default() -> Self {
        CountMode::Oracle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub slot: usize,
    pub azimuth_deg: f64,
}

/// References and predictions of one evaluation frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FramePrediction {
    pub refs: Vec<Peak>,
    pub preds: Vec<Peak>,
}

impl FramePrediction {
    /// Frame from bare azimuth lists; slots are list positions.
    pub fn from_angles(refs: &[f64], preds: &[f64]) -> Self {
        let peaks = |v: &[f64]| v.iter().enumerate().map(|(slot, &azimuth_deg)| Peak { slot, azimuth_deg }).collect();
        FramePrediction { refs: peaks(refs), preds: peaks(preds) }
    }

    pub fn n_pairs(&self) -> usize {
        self.refs.len().min(self.preds.len())
    }

    fn validate(&self) -> Result<()> {
        for p in self.refs.iter().chain(&self.preds) {
            if !(0.0..=180.0).contains(&p.azimuth_deg) {
                return Err(Error::Validation(format!("azimuth {} outside [0°, 180°]", p.azimuth_deg)));
            }
        }
        Ok(())
    }

    /// Square cost matrix of side `max(|refs|, |preds|)`; rows are
    /// references, padding entries are zero.
    pub fn cost_matrix(&self) -> (Vec<f64>, usize) {
        let n = self.refs.len().max(self.preds.len());
        let mut cost = vec![0.0; n * n];
        for (i, r) in self.refs.iter().enumerate() {
            for (j, p) in self.preds.iter().enumerate() {
                cost[i * n + j] = (r.azimuth_deg - p.azimuth_deg).abs();
            }
        }
        (cost, n)
    }
}

/// Assigned pairs of one frame: `(ref index, pred index, error)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAssignment {
    pub pairs: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

/// Correctly rounded sum (Shewchuk's exact partials).
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else { return 0.0 };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even across the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `|a − b|` as an exact unevaluated pair `hi + lo`.
fn exact_abs_diff(a: f64, b: f64) -> [f64; 2] {
    let s = a - b;
    let bb = s - a;
    let e = (a - (s - bb)) + (-b - bb);
    if s < 0.0 {
        [-s, -e]
    } else {
        [s, e]
    }
}

/// Total error of the pairing that maps reference `i` to prediction
/// `cols[i]` (indices past either list are padding). Rounded once from the
/// exact value, so pairings with equal real cost give identical totals.
pub fn pairing_cost(frame: &FramePrediction, cols: &[usize]) -> f64 {
    exact_sum(
        cols.iter()
            .enumerate()
            .filter(|&(i, &j)| i < frame.refs.len() && j < frame.preds.len())
            .flat_map(|(i, &j)| exact_abs_diff(frame.refs[i].azimuth_deg, frame.preds[j].azimuth_deg)),
    )
}

pub fn assign_frame(frame: &FramePrediction) -> FrameAssignment {
    let (cost, n) = frame.cost_matrix();
    let (cols, _) = assign::hungarian(&cost, n);
    let pairs = cols
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < frame.refs.len() && j < frame.preds.len())
        .map(|(i, &j)| (i, j, cost[i * n + j]))
        .collect();
    FrameAssignment { pairs, cost: pairing_cost(frame, &cols) }
}

/// Minimum of [`pairing_cost`] over every permutation.
pub fn frame_cost_exhaustive(frame: &FramePrediction) -> f64 {
    let n = frame.refs.len().max(frame.preds.len());
    let mut cols: Vec<usize> = (0..n).collect();
    let mut best = pairing_cost(frame, &cols);
    while assign::next_permutation(&mut cols) {
        best = best.min(pairing_cost(frame, &cols));
    }
    best
}

/// Indices of the `k` largest entries of `posteriors` among `eligible`
/// slots, in descending posterior order; ties go to the lower slot.
pub fn top_k(posteriors: &[f64], eligible: &[usize], k: usize) -> Vec<usize> {
    let mut idx = eligible.to_vec();
    idx.sort_by(|&a, &b| posteriors[b].total_cmp(&posteriors[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Selects `counts[t]` slots per frame from `y_hat` (`[T, 6]`) and pairs
/// each with its azimuth in `angles` (`[T, 6]`, degrees). For the audio-only
/// model `angles` are the decoded predictions and every slot is eligible;
/// for the angle-conditioned model they are the input candidates and only
/// slots with a finite candidate are eligible.
pub fn pick_peaks(y_hat: &[f64], counts: &[usize], variant: Variant, angles: &[f64]) -> Result<Vec<Vec<Peak>>> {
    let t_n = counts.len();
    if y_hat.len() != t_n * MAX_SPEAKERS || angles.len() != t_n * MAX_SPEAKERS {
        return Err(Error::shape(
            "pick_peaks",
            format!("{} posteriors and {} angles for {t_n} frames", y_hat.len(), angles.len()),
        ));
    }
    let mut out = Vec::with_capacity(t_n);
    for (t, &p) in counts.iter().enumerate() {
        let row = &y_hat[t * MAX_SPEAKERS..][..MAX_SPEAKERS];
        let ang = &angles[t * MAX_SPEAKERS..][..MAX_SPEAKERS];
        let eligible: Vec<usize> = match variant {
            Variant::Adoa => (0..MAX_SPEAKERS).collect(),
            Variant::Mdoa => (0..MAX_SPEAKERS).filter(|&s| ang[s].is_finite()).collect(),
        };
        if p > eligible.len() {
            return Err(Error::InvalidArgument(format!(
                "frame {t}: {p} speakers requested but only {} slots are eligible",
                eligible.len()
            )));
        }
        out.push(top_k(row, &eligible, p).into_iter().map(|slot| Peak { slot, azimuth_deg: ang[slot] }).collect());
    }
    Ok(out)
}

/// Builds evaluation frames for one sample. For the angle-conditioned model
/// `labels` must be in the slot order the model saw; the candidate angles
/// are the label azimuths.
pub fn frame_predictions(
    labels: &LabelTensor,
    pred: &Prediction,
    variant: Variant,
    mode: CountMode,
) -> Result<Vec<FramePrediction>> {
    let t_n = labels.n_frames();
    if pred.n_frames != t_n || pred.slots != MAX_SPEAKERS {
        return Err(Error::shape(
            "frame_predictions",
            format!("{}×{} predictions for {t_n} label frames", pred.n_frames, pred.slots),
        ));
    }
    let angles: Vec<f64> = match variant {
        Variant::Adoa => pred
            .theta_deg
            .clone()
            .ok_or_else(|| Error::InvalidArgument("audio-only evaluation needs decoded azimuths".into()))?,
        Variant::Mdoa => (0..t_n)
            .flat_map(|t| (0..MAX_SPEAKERS).map(move |s| if s < labels.n_speakers() { labels.theta(t, s) } else { f64::NAN }))
            .collect(),
    };
    let counts: Vec<usize> = match mode {
        CountMode::Oracle => (0..t_n).map(|t| labels.active_count(t)).collect(),
        CountMode::Threshold(th) => (0..t_n)
            .map(|t| {
                (0..MAX_SPEAKERS)
                    .filter(|&s| pred.y(t, s) > th && (variant == Variant::Adoa || angles[t * MAX_SPEAKERS + s].is_finite()))
                    .count()
            })
            .collect(),
    };
    let peaks = pick_peaks(&pred.y_hat, &counts, variant, &angles)?;
    Ok(peaks
        .into_iter()
        .enumerate()
        .map(|(t, preds)| FramePrediction {
            refs: (0..MAX_SPEAKERS)
                .filter(|&s| labels.active(t, s))
                .map(|s| Peak { slot: s, azimuth_deg: labels.theta(t, s) })
                .collect(),
            preds,
        })
        .collect())
}

/// Aggregate metrics over a set of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pimae_deg: f64,
    pub acc: f64,
    pub n_frames: usize,
    pub n_assignments: usize,
}

/// PIMAE and ACC from the same per-frame assignments. Frames whose
/// reference and prediction counts differ (threshold mode) contribute
/// `min(|refs|, |preds|)` pairs.
pub fn evaluate(frames: &[FramePrediction], allowance_deg: f64) -> Result<MetricReport> {
    let mut total = 0.0;
    let mut hits = 0usize;
    let mut n = 0usize;
    for f in frames {
        f.validate()?;
        let a = assign_frame(f);
        total += a.cost;
        hits += a.pairs.iter().filter(|p| p.2 < allowance_deg).count();
        n += a.pairs.len();
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no assigned speaker pairs".into()));
    }
    Ok(MetricReport { pimae_deg: total / n as f64, acc: hits as f64 / n as f64, n_frames: frames.len(), n_assignments: n })
}

pub fn pimae(frames: &[FramePrediction]) -> Result<f64> {
    Ok(evaluate(frames, DEFAULT_ALLOWANCE_DEG)?.pimae_deg)
}

pub fn acc(frames: &[FramePrediction], allowance_deg: f64) -> Result<f64> {
    Ok(evaluate(frames, allowance_deg)?.acc)
}

/// One row of the per-frame CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub id: String,
    pub frame: usize,
    pub t: f64,
    /// `ref` or `pred`.
    pub kind: String,
    /// Reference or model slot.
    pub track: usize,
    pub azimuth_deg: f64,
    /// Assigned error; empty for unassigned entries.
    pub error_deg: Option<f64>,
}

pub fn frame_rows(id: &str, hop_s: f64, frames: &[FramePrediction]) -> Vec<FrameRow> {
    let mut rows = Vec::new();
    for (l, f) in frames.iter().enumerate() {
        let a = assign_frame(f);
        let err_ref = |i: usize| a.pairs.iter().find(|p| p.0 == i).map(|p| p.2);
        let err_pred = |j: usize| a.pairs.iter().find(|p| p.1 == j).map(|p| p.2);
        let t = l as f64 * hop_s;
        for (i, p) in f.refs.iter().enumerate() {
            rows.push(FrameRow {
                id: id.into(),
                frame: l,
                t,
                kind: "ref".into(),
                track: p.slot,
                azimuth_deg: p.azimuth_deg,
                error_deg: err_ref(i),
            });
        }
        for (j, p) in f.preds.iter().enumerate() {
            rows.push(FrameRow {
                id: id.into(),
                frame: l,
                t,
                kind: "pred".into(),
                track: p.slot,
                azimuth_deg: p.azimuth_deg,
                error_deg: err_pred(j),
            });
        }
    }
    rows
}

pub fn write_frame_csv(path: &Path, rows: &[FrameRow]) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record(["id", "frame", "t", "kind", "track", "azimuth_deg", "error_deg"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_frame_csv(path: &Path) -> Result<Vec<FrameRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Monte-Carlo reference for the angle-conditioned model: per frame, pick
/// the oracle number of slots uniformly among the slots with a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub trials: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub pimae_mean: f64,
}

pub fn random_slot_baseline(labels: &[LabelTensor], trials: usize, seed: u64, allowance_deg: f64) -> Result<BaselineReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("baseline needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::with_capacity(trials);
    let mut pimaes = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut frames = Vec::new();
        for lab in labels {
            for t in 0..lab.n_frames() {
                let eligible: Vec<usize> = (0..lab.n_speakers()).filter(|&s| lab.theta(t, s).is_finite()).collect();
                let p = lab.active_count(t);
                if p > eligible.len() {
                    return Err(Error::Validation(format!("frame {t}: active speaker without an azimuth")));
                }
                let preds = sample(&mut rng, eligible.len(), p)
                    .into_iter()
                    .map(|i| Peak { slot: eligible[i], azimuth_deg: lab.theta(t, eligible[i]) })
                    .collect();
                let refs = (0..MAX_SPEAKERS)
                    .filter(|&s| lab.active(t, s))
                    .map(|s| Peak { slot: s, azimuth_deg: lab.theta(t, s) })
                    .collect();
                frames.push(FramePrediction { refs, preds });
            }
        }
        let r = evaluate(&frames, allowance_deg)?;
        accs.push(r.acc);
        pimaes.push(r.pimae_deg);
    }
    let n = trials as f64;
    let acc_mean = accs.iter().sum::<f64>() / n;
    let acc_std = (accs.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BaselineReport { trials, acc_mean, acc_std, pimae_mean: pimaes.iter().sum::<f64>() / n })
}
