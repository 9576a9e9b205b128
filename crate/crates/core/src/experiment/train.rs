//! Mini-batch training with checkpointing and resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{load_split, Dataset, Split};
use super::eval::evaluate_dataset;
use super::{create_dir, derive_seed, write_json, ExperimentConfig};
use crate::autodiff::{load_checkpoint, save_checkpoint, Adam, BnStats, Graph, ParamStore, Real, Tensor};
use crate::error::{Error, IoContext, Result};
use crate::labels::LabelTensor;
use crate::loss::{adoa_loss, mdoa_loss_with, AdoaPred};
use crate::model::{canonical_order, encode_angles, update_running_stats, Model, ModelConfig, Variant, ANGLE_FEATURES};

const INIT_TAG: u64 = 0x1417;
const EPOCH_TAG: u64 = 0xE90C_0000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainArgs {
    /// Continue from this checkpoint (normally `<run_dir>/last.ckpt`).
    pub resume: Option<PathBuf>,
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub e_cos: f64,
    pub e_bce: f64,
    pub val_pimae_deg: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_pimae_deg: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// A training sample: `len` label frames of one utterance from `start`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ChunkRef {
    example: usize,
    start: usize,
}

fn chunk_refs(ds: &Dataset, len: usize) -> Vec<ChunkRef> {
    let mut out = Vec::new();
    for (example, ex) in ds.examples.iter().enumerate() {
        for k in 0..ex.labels.n_frames() / len {
            out.push(ChunkRef { example, start: k * len });
        }
    }
    out
}

/// Network-ready batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, C, L·frames_per_label, n_mels]`.
    pub features: Vec<f32>,
    pub feature_shape: [usize; 4],
    /// Canonically ordered for the angle-conditioned model.
    pub labels: Vec<LabelTensor>,
    /// `[N, L, 3·S]` (angle-conditioned model only).
    pub angles: Option<Vec<f32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `range` as a batch of their own.
    pub fn shard(&self, range: std::ops::Range<usize>) -> Batch {
        let [_, c, t, m] = self.feature_shape;
        let per = c * t * m;
        let a_per = self.angles.as_ref().map(|a| a.len() / self.len());
        Batch {
            ids: self.ids[range.clone()].to_vec(),
            features: self.features[range.start * per..range.end * per].to_vec(),
            feature_shape: [range.len(), c, t, m],
            labels: self.labels[range.clone()].to_vec(),
            angles: self.angles.as_ref().zip(a_per).map(|(a, p)| a[range.start * p..range.end * p].to_vec()),
        }
    }
}

fn make_batch(ds: &Dataset, refs: &[ChunkRef], len: usize, cfg: &ModelConfig) -> Result<Batch> {
    let fpl = cfg.frames_per_label;
    let first = &ds.examples[refs[0].example];
    let (c, m) = (first.channels, first.n_mels);
    let t = len * fpl;
    let mut features = Vec::with_capacity(refs.len() * c * t * m);
    let mut labels = Vec::with_capacity(refs.len());
    let mut ids = Vec::with_capacity(refs.len());
    let mut angles = Vec::new();
    for r in refs {
        let ex = &ds.examples[r.example];
        for ch in 0..c {
            features.extend_from_slice(ex.channel_rows(ch, r.start * fpl, t));
        }
        let mut lab = ex.labels.slice(r.start, len)?;
        if cfg.variant == Variant::Mdoa {
            lab = lab.reorder(&canonical_order(&lab))?;
            angles.extend(encode_angles(&lab, cfg.max_speakers)?.into_iter().map(|v| v as f32));
        }
        labels.push(lab);
        ids.push(format!("{}@{}", ex.id, r.start));
    }
    Ok(Batch {
        ids,
        features,
        feature_shape: [refs.len(), c, t, m],
        labels,
        angles: (cfg.variant == Variant::Mdoa).then_some(angles),
    })
}

/// Loss normalizers of the full batch, shared by all of its shards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorms {
    pub n: usize,
    pub s_prime: usize,
    pub b: usize,
}

impl BatchNorms {
    pub fn of(labels: &[LabelTensor]) -> Self {
        BatchNorms {
            n: labels.len(),
            s_prime: labels.iter().map(|l| l.n_speakers()).max().unwrap_or(0),
            b: labels.iter().map(|l| l.b_n()).sum(),
        }
    }
}

pub struct StepOut<T: Real> {
    pub loss: f64,
    pub e_cos: f64,
    pub e_bce: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
    pub bn_stats: Vec<(String, BnStats<f64>)>,
}

fn to_tensor<T: Real>(shape: &[usize], v: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape, v.iter().map(|&x| T::of(x as f64)).collect())
}

/// Forward, loss and backward for one (shard of a) batch.
pub fn train_step<T: Real>(model: &Model, store: &ParamStore<T>, batch: &Batch, norms: BatchNorms) -> Result<StepOut<T>> {
    let cfg = &model.cfg;
    let mut g = Graph::<T>::new();
    let x = g.input(to_tensor(&batch.feature_shape, &batch.features)?);
    let n = batch.len();
    let l = batch.labels[0].n_frames();
    let angles = match &batch.angles {
        Some(a) => Some(g.input(to_tensor(&[n, l, cfg.max_speakers * ANGLE_FEATURES], a)?)),
        None => None,
    };
    let out = model.forward(&mut g, store, x, angles, true)?;
    let s = cfg.max_speakers;
    let y: Vec<f64> = g.value(out.y_hat).to_f64_vec();
    let (loss_node, loss, e_cos, e_bce) = match cfg.variant {
        Variant::Adoa => {
            let th_var = out.theta.ok_or_else(|| Error::Validation("audio-only forward without angles".into()))?;
            let th: Vec<f64> = g.value(th_var).to_f64_vec();
            let preds: Vec<AdoaPred> = (0..n)
                .map(|i| AdoaPred { theta: &th[i * l * s * 2..(i + 1) * l * s * 2], y_hat: &y[i * l * s..(i + 1) * l * s] })
                .collect();
            let r = adoa_loss(&batch.labels, &preds)?;
            let scale = n as f64 / norms.n as f64;
            let gt: Vec<f64> = r.grad_theta.concat().iter().map(|v| v * scale).collect();
            let gy: Vec<f64> = r.grad_y.concat().iter().map(|v| v * scale).collect();
            let total = r.total * scale;
            let a = g.external_loss(th_var, T::zero(), &Tensor::from_f64(g.shape(th_var), &gt)?)?;
            let b = g.external_loss(out.y_hat, T::of(total), &Tensor::from_f64(g.shape(out.y_hat), &gy)?)?;
            (g.add(a, b)?, total, r.e_cos * scale, r.e_bce * scale)
        }
        Variant::Mdoa => {
            let ys: Vec<&[f64]> = (0..n).map(|i| &y[i * l * s..(i + 1) * l * s]).collect();
            let r = mdoa_loss_with(&batch.labels, &ys, norms.s_prime, norms.b)?;
            let gy = r.grad_y.concat();
            let node = g.external_loss(out.y_hat, T::of(r.value), &Tensor::from_f64(g.shape(out.y_hat), &gy)?)?;
            (node, r.value, 0.0, r.value)
        }
    };
    let grads = g.backward(loss_node)?.params(store);
    Ok(StepOut { loss, e_cos, e_bce, grads, bn_stats: out.bn_stats })
}

/// Runs the shards of one batch on separate threads and sums their
/// gradients in shard order; batch statistics are averaged by shard size.
fn sharded_step(model: &Model, store: &ParamStore<f32>, batch: &Batch, shards: usize) -> Result<StepOut<f32>> {
    let norms = BatchNorms::of(&batch.labels);
    let shards = shards.min(batch.len()).max(1);
    if shards == 1 {
        return train_step(model, store, batch, norms);
    }
    let per = batch.len().div_ceil(shards);
    let parts: Vec<Batch> = (0..batch.len()).step_by(per).map(|a| batch.shard(a..(a + per).min(batch.len()))).collect();
    let outs: Vec<Result<StepOut<f32>>> = std::thread::scope(|sc| {
        let hs: Vec<_> = parts.iter().map(|p| sc.spawn(move || train_step(model, store, p, norms))).collect();
        hs.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Validation("shard thread panicked".into())))).collect()
    });
    let mut acc: Option<StepOut<f32>> = None;
    for (o, p) in outs.into_iter().zip(&parts) {
        let o = o?;
        let w = p.len() as f64 / batch.len() as f64;
        match &mut acc {
            None => {
                let mut first = o;
                for (_, st) in &mut first.bn_stats {
                    st.mean.iter_mut().chain(st.var.iter_mut()).for_each(|v| *v *= w);
                }
                acc = Some(first);
            }
            Some(a) => {
                a.loss += o.loss;
                a.e_cos += o.e_cos;
                a.e_bce += o.e_bce;
                for (k, gk) in o.grads {
                    if let Some(t) = a.grads.get_mut(&k) {
                        for (x, y) in t.data_mut().iter_mut().zip(gk.data()) {
                            *x += *y;
                        }
                    }
                }
                for ((_, sa), (_, so)) in a.bn_stats.iter_mut().zip(&o.bn_stats) {
                    for (x, y) in sa.mean.iter_mut().zip(&so.mean).chain(sa.var.iter_mut().zip(&so.var)) {
                        *x += w * y;
                    }
                }
            }
        }
    }
    acc.ok_or_else(|| Error::Validation("empty batch".into()))
}

fn dump_nonfinite(run_dir: &Path, epoch: usize, step: u64, batch: &Batch, out: &StepOut<f32>) -> Result<PathBuf> {
    let bad: Vec<&String> = out.grads.iter().filter(|(_, t)| !t.is_finite()).map(|(k, _)| k).collect();
    let feats: Vec<serde_json::Value> = (0..batch.len())
        .map(|i| {
            let s = batch.shard(i..i + 1);
            let finite = s.features.iter().all(|v| v.is_finite());
            let (lo, hi) = s.features.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            serde_json::json!({
                "id": batch.ids[i],
                "features_finite": finite,
                "feature_min": lo,
                "feature_max": hi,
                "active_frames": batch.labels[i].b_n(),
                "speakers": batch.labels[i].n_speakers(),
            })
        })
        .collect();
    let path = run_dir.join("nonfinite_dump.json");
    write_json(
        &path,
        &serde_json::json!({
            "epoch": epoch,
            "step": step,
            "loss": out.loss.to_string(),
            "e_cos": out.e_cos.to_string(),
            "e_bce": out.e_bce.to_string(),
            "nonfinite_gradients": bad,
            "samples": feats,
        }),
    )?;
    Ok(path)
}

fn checkpoint_meta(cfg: &ExperimentConfig, epoch: usize, step: u64, best: Option<(usize, f64)>, val: Option<(f64, f64)>) -> serde_json::Value {
    serde_json::json!({
        "model": cfg.model,
        "features": cfg.features,
        "seed": cfg.seed,
        "epoch": epoch,
        "step": step,
        "best_epoch": best.map(|b| b.0),
        "best_val_pimae_deg": best.map(|b| b.1),
        "val_pimae_deg": val.map(|v| v.0),
        "val_acc": val.map(|v| v.1),
    })
}

fn meta_model(meta: &serde_json::Value) -> Result<ModelConfig> {
    serde_json::from_value(meta["model"].clone()).map_err(|e| Error::Validation(format!("checkpoint model config: {e}")))
}

/// Trains `cfg.model` on the train split; keeps `last.ckpt` and the best
/// checkpoint by validation PIMAE (`best.ckpt`) in `run_dir`, and appends
/// one JSON line per epoch to `train_log.jsonl`.
pub fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<TrainSummary> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    let train = load_split(cfg, Split::Train)?;
    let val = if cfg.train.validate { Some(load_split(cfg, Split::Val)?) } else { None };
    let len = cfg.chunk_frames();
    let refs = chunk_refs(&train, len);
    if refs.is_empty() {
        return Err(Error::Validation(format!("no training utterance is at least {} s long", cfg.train.chunk_s)));
    }

    let (mut store, mut adam, mut epoch0, mut best) = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let m = meta_model(&ck.meta)?;
            if m != cfg.model {
                return Err(Error::Validation(format!("{}: checkpoint model config differs from the configuration", p.display())));
            }
            let adam = ck.adam.ok_or_else(|| Error::Validation(format!("{}: no optimizer state to resume", p.display())))?;
            let epoch = ck.meta["epoch"].as_u64().unwrap_or(0) as usize;
            let best = ck.meta["best_epoch"].as_u64().zip(ck.meta["best_val_pimae_deg"].as_f64()).map(|(e, v)| (e as usize, v));
            (ck.store, adam, epoch, best)
        }
        None => (model.init::<f32>(derive_seed(cfg.seed, INIT_TAG)), Adam::new(cfg.train.adam), 0, None),
    };

    create_dir(&cfg.run_dir)?;
    let last_path = cfg.run_dir.join("last.ckpt");
    let best_path = cfg.run_dir.join("best.ckpt");
    let log_path = cfg.run_dir.join("train_log.jsonl");
    if args.resume.is_none() {
        std::fs::write(&log_path, b"").at(&log_path)?;
        cfg.save(&cfg.run_dir.join("config.toml"))?;
    }
    let mut summary = TrainSummary {
        epochs: Vec::new(),
        best_epoch: best.map(|b| b.0),
        best_val_pimae_deg: best.map(|b| b.1),
        best_checkpoint: best_path.clone(),
        last_checkpoint: last_path.clone(),
    };

    while epoch0 < cfg.train.epochs {
        let epoch = epoch0 + 1;
        let started = Instant::now();
        let mut order = refs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EPOCH_TAG + epoch as u64)));
        let mut batches: Vec<&[ChunkRef]> = order.chunks(cfg.train.batch_size).collect();
        if let Some(cap) = cfg.train.max_steps_per_epoch {
            batches.truncate(cap);
        }
        let (mut loss, mut e_cos, mut e_bce) = (0.0, 0.0, 0.0);
        for b in &batches {
            let batch = make_batch(&train, b, len, &cfg.model)?;
            let out = sharded_step(&model, &store, &batch, cfg.train.shards)?;
            if !out.loss.is_finite() || !out.grads.values().all(|t| t.is_finite()) {
                let dump = dump_nonfinite(&cfg.run_dir, epoch, adam.step + 1, &batch, &out)?;
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {}; batch dumped to {}",
                    adam.step + 1,
                    dump.display()
                )));
            }
            adam.update(&mut store, &out.grads)?;
            update_running_stats(&mut store, &out.bn_stats)?;
            loss += out.loss;
            e_cos += out.e_cos;
            e_bce += out.e_bce;
        }
        let nb = batches.len().max(1) as f64;
        let val_metrics = match &val {
            Some(v) if !v.examples.is_empty() => {
                let (r, _) = evaluate_dataset(&model, &store, v, &cfg.eval)?;
                Some((r.pimae_deg, r.acc))
            }
            _ => None,
        };
        let improved = match (val_metrics, best) {
            (Some((p, _)), Some((_, b))) => p < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = Some((epoch, val_metrics.map_or(f64::NAN, |v| v.0)));
        }
        let meta = checkpoint_meta(cfg, epoch, adam.step, best.filter(|b| b.1.is_finite()), val_metrics);
        save_checkpoint(&last_path, &store, Some(&adam), meta.clone())?;
        if improved {
            save_checkpoint(&best_path, &store, Some(&adam), meta)?;
        }
        let entry = EpochLog {
            epoch,
            steps: adam.step,
            loss: loss / nb,
            e_cos: e_cos / nb,
            e_bce: e_bce / nb,
            val_pimae_deg: val_metrics.map(|v| v.0),
            val_acc: val_metrics.map(|v| v.1),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cos {:.4}, bce {:.4}), val PIMAE {:?}, ACC {:?}, {:.0} s",
            entry.loss,
            entry.e_cos,
            entry.e_bce,
            entry.val_pimae_deg,
            entry.val_acc,
            entry.seconds
        );
        let mut f = std::fs::OpenOptions::new().append(true).create(true).open(&log_path).at(&log_path)?;
        writeln!(f, "{}", serde_json::to_string(&entry)?).at(&log_path)?;
        summary.epochs.push(entry);
        epoch0 = epoch;
    }
    summary.best_epoch = best.map(|b| b.0);
    summary.best_val_pimae_deg = best.map(|b| b.1).filter(|v| v.is_finite());
    Ok(summary)
}

/// Model config stored in a checkpoint's metadata.
pub(crate) fn checkpoint_model(meta: &serde_json::Value) -> Result<ModelConfig> {
    meta_model(meta)
}
