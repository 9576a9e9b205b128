//! Experiment harness behind the `doalab` binary: dataset simulation,
//! annotation, feature extraction, training, evaluation and reporting.
//!
//! Everything is driven by an [`ExperimentConfig`] read from TOML. Relative
//! paths in a config file are resolved against the file's directory.

mod data;
mod eval;
mod report;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, IoContext, Result};
use crate::metrics::{CountMode, DEFAULT_ALLOWANCE_DEG};
use crate::model::ModelConfig;
use crate::simulate::{RenderConfig, RirConfig, SceneSampling};

pub use data::{
    check_entry_consistency, cmd_annotate, cmd_features, cmd_simulate, entry_features, load_split, read_manifest, read_scene,
    write_manifest, AnnotateArgs, Dataset, Example, FeaturesSummary, ManifestEntry, SimulateSummary, Split,
};
pub use eval::{cmd_eval, evaluate_dataset, EvalArgs, EvalSummary};
pub use report::{cmd_report, render_timeline_svg, ReportSummary, RunInfo};
pub use train::{cmd_train, train_step, EpochLog, TrainArgs, TrainSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_minutes: f64,
    pub val_minutes: f64,
    pub test_minutes: f64,
    /// Voice identities per split; split `k` draws from
    /// `[k·voices_per_split, (k+1)·voices_per_split)`.
    pub voices_per_split: u64,
    /// Video frame rate of the exported track files.
    pub fps: f64,
    pub scene: SceneSampling,
    pub rir: RirConfig,
    pub render: RenderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_minutes: 60.0,
            val_minutes: 10.0,
            test_minutes: 10.0,
            voices_per_split: 100,
            fps: 25.0,
            scene: SceneSampling::default(),
            rir: RirConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

/// Fixed global normalization of the log-mel input: `(x − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub mean: f64,
    pub std: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { mean: -14.1, std: 7.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub chunk_s: f64,
    pub epochs: usize,
    /// Caps the optimizer steps per epoch (all batches when absent).
    pub max_steps_per_epoch: Option<usize>,
    /// Splits every batch into this many shards processed on separate
    /// threads; batch norm then normalizes per shard.
    pub shards: usize,
    /// Run validation after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            chunk_s: 10.0,
            epochs: 20,
            max_steps_per_epoch: None,
            shards: 1,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub allowance_deg: f64,
    pub counts: CountMode,
    /// Monte-Carlo trials of the random-slot reference (angle-conditioned
    /// model only; 0 disables it).
    pub baseline_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { allowance_deg: DEFAULT_ALLOWANCE_DEG, counts: CountMode::Oracle, baseline_trials: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset root: manifests `train.jsonl`, `val.jsonl`, `test.jsonl` and
    /// one directory of files per split.
    pub data_dir: PathBuf,
    /// Training output: checkpoints and the epoch log.
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: Self = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (name, m) in [("train", d.train_minutes), ("val", d.val_minutes), ("test", d.test_minutes)] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config(format!("{name}_minutes must be non-negative, got {m}")));
            }
        }
        if d.voices_per_split == 0 {
            return Err(Error::Config("voices_per_split must be positive".into()));
        }
        if !(d.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", d.fps)));
        }
        d.scene.validate()?;
        if d.rir.speed_of_sound <= 0.0 {
            return Err(Error::Config("speed of sound must be positive".into()));
        }
        if !(self.features.std > 0.0 && self.features.mean.is_finite()) {
            return Err(Error::Config("feature normalization needs a finite mean and positive std".into()));
        }
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.shards == 0 || t.shards > t.batch_size {
            return Err(Error::Config(format!(
                "need 0 < shards <= batch_size (batch {}, shards {})",
                t.batch_size, t.shards
            )));
        }
        if !(t.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let label_frames = t.chunk_s / d.render.label_hop_s;
        if !(label_frames >= 1.0 && (label_frames - label_frames.round()).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "chunk of {} s is not a whole number of {} s label frames",
                t.chunk_s, d.render.label_hop_s
            )));
        }
        if !(self.eval.allowance_deg > 0.0) {
            return Err(Error::Config("allowance must be positive".into()));
        }
        if let CountMode::Threshold(th) = self.eval.counts {
            if !(0.0..1.0).contains(&th) {
                return Err(Error::Config(format!("threshold {th} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.jsonl", split.name()))
    }

    pub fn chunk_frames(&self) -> usize {
        (self.train.chunk_s / self.data.render.label_hop_s).round() as usize
    }
}

/// Independent stream seed for `(seed, tag)`.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps `f` over `items` on all available cores; output order follows the
/// input and the first error wins.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(per).map(|chunk| s.spawn(move || chunk.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Validation("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).at(path)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).at(path)
}
