//! Dataset simulation, manifests, annotation and feature extraction.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{create_dir, derive_seed, par_map, write_json, ExperimentConfig, FeatureConfig};
use crate::annotate::{self, AnnotateOptions};
use crate::audio::{read_wav, write_wav};
use crate::dsp::{self, FbankConfig, FbankExtractor, FeatureCacheIndex};
use crate::error::{Error, IoContext, Result};
use crate::geom::CameraIntrinsics;
use crate::labels::{read_label_file, write_label_file, LabelTensor};
use crate::simulate::{export_camera_tracks, render_mixture, simulate_rir, RenderConfig, Scene};

/// Largest tolerated gap between annotated and simulated azimuths.
const CONSISTENCY_TOL_DEG: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?} (train, val, test)")))
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub labels: PathBuf,
    pub tracks: PathBuf,
    pub intrinsics: PathBuf,
    pub duration_s: f64,
    pub n_speakers: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

/// Reads a manifest and checks that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Parse { line: i as u64 + 1, msg: format!("{}: {err}", path.display()) })?;
        for p in [&mut e.wav, &mut e.labels, &mut e.tracks, &mut e.intrinsics] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::Validation(format!("{}: entry {} references missing {}", path.display(), e.id, p.display())));
            }
        }
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub scenes: [usize; 3],
    pub duration_s: [f64; 3],
    pub manifests: Vec<PathBuf>,
}

fn scene_count(minutes: f64, scene_s: f64) -> usize {
    (minutes * 60.0 / scene_s).round() as usize
}

/// Simulates one scene and writes its files under `dir`; returns the
/// manifest entry with paths relative to the dataset root.
fn simulate_scene(cfg: &ExperimentConfig, split: Split, i: usize, dir: &Path) -> Result<ManifestEntry> {
    let d = &cfg.data;
    let tag = (split.index() << 32) | i as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag));
    let voices = split.index() * d.voices_per_split..(split.index() + 1) * d.voices_per_split;
    let scene = d.scene.sample_scene(&mut rng, voices)?;
    let rirs = simulate_rir(&scene, &d.rir)?;
    let render = RenderConfig { noise_seed: derive_seed(cfg.seed ^ 0x6E6F_6973_65, tag), ..d.render };
    let out = render_mixture(&scene, &rirs, &render, None)?;
    let tracks = export_camera_tracks(&scene, d.fps)?;

    let id = format!("{}-{i:05}", split.name());
    let rel = PathBuf::from(split.name());
    let entry = ManifestEntry {
        wav: rel.join(format!("{id}.wav")),
        labels: rel.join(format!("{id}.labels.jsonl")),
        tracks: rel.join(format!("{id}.tracks.csv")),
        intrinsics: rel.join(format!("{id}.intrinsics.txt")),
        duration_s: scene.duration_s,
        n_speakers: scene.speakers.len(),
        id: id.clone(),
    };
    let root = dir;
    write_wav(&root.join(&entry.wav), &out.audio)?;
    write_label_file(&root.join(&entry.labels), &out.labels.to_records())?;
    annotate::write_tracks(&root.join(&entry.tracks), &tracks)?;
    scene.intrinsics.save(&root.join(&entry.intrinsics))?;
    write_json(&root.join(rel.join(format!("{id}.scene.json"))), &scene)?;
    Ok(entry)
}

/// Generates the train/val/test splits: disjoint scene seeds and disjoint
/// voice identities per split. Every entry is re-read and cross-checked
/// (annotated track azimuths against the simulator labels) before the
/// manifests are written.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let scene_s = cfg.data.scene.duration_s;
    let counts = [
        scene_count(cfg.data.train_minutes, scene_s),
        scene_count(cfg.data.val_minutes, scene_s),
        scene_count(cfg.data.test_minutes, scene_s),
    ];
    create_dir(&cfg.data_dir)?;
    let probe = cfg.data_dir.join(".write-probe");
    std::fs::write(&probe, b"").at(&probe)?;
    std::fs::remove_file(&probe).at(&probe)?;

    let mut summary = SimulateSummary { scenes: counts, duration_s: [0.0; 3], manifests: Vec::new() };
    for split in Split::ALL {
        let n = counts[split.index() as usize];
        create_dir(&cfg.data_dir.join(split.name()))?;
        let idx: Vec<usize> = (0..n).collect();
        log::info!("simulating {n} {} scenes", split.name());
        let entries = par_map(&idx, |&i| simulate_scene(cfg, split, i, &cfg.data_dir))?;
        for e in &entries {
            let abs = ManifestEntry {
                labels: cfg.data_dir.join(&e.labels),
                tracks: cfg.data_dir.join(&e.tracks),
                intrinsics: cfg.data_dir.join(&e.intrinsics),
                ..e.clone()
            };
            check_entry_consistency(&abs, cfg.data.fps)?;
        }
        summary.duration_s[split.index() as usize] = entries.iter().map(|e| e.duration_s).sum();
        let path = cfg.manifest_path(split);
        write_manifest(&path, &entries)?;
        summary.manifests.push(path);
    }
    Ok(summary)
}

/// Label/geometry consistency of one entry: every active frame has an
/// azimuth, and the azimuths annotated from the track file match the
/// simulator labels within 1e-6° wherever the track is present.
pub fn check_entry_consistency(e: &ManifestEntry, fps: f64) -> Result<()> {
    let labels = LabelTensor::from_records(&read_label_file(&e.labels)?, crate::labels::LABEL_HOP_S)?;
    let k = CameraIntrinsics::load(&e.intrinsics)?;
    let opts = AnnotateOptions { fps, ..AnnotateOptions::default() };
    let tl = annotate::annotate_tracks(&annotate::read_tracks(&e.tracks)?, &k, &opts)?;
    let grid = annotate::resample_to_label_grid(&tl, labels.hop_s, Some(labels.n_frames()))?;
    if labels.n_speakers() != e.n_speakers {
        return Err(Error::Validation(format!("{}: {} labelled speakers, manifest says {}", e.id, labels.n_speakers(), e.n_speakers)));
    }
    for (s, id) in labels.speaker_ids.iter().enumerate() {
        let Some(col) = grid.ids.iter().position(|g| g == id) else {
            return Err(Error::Validation(format!("{}: speaker {id} has no track", e.id)));
        };
        for t in 0..labels.n_frames() {
            let theta = labels.theta(t, s);
            if labels.active(t, s) && !theta.is_finite() {
                return Err(Error::Validation(format!("{}: speaker {id} active at frame {t} without azimuth", e.id)));
            }
            if let Some(az) = grid.azimuth[col][t] {
                if (az - theta).abs() > CONSISTENCY_TOL_DEG {
                    return Err(Error::Validation(format!(
                        "{}: speaker {id} frame {t}: annotated {az}° vs simulated {theta}°",
                        e.id
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AnnotateArgs {
    pub tracks: PathBuf,
    pub intrinsics: PathBuf,
    pub out: PathBuf,
    pub options: AnnotateOptions,
    pub hop_s: f64,
    pub n_frames: Option<usize>,
}

/// Track file + intrinsics → label file on the label grid. Returns the
/// number of frames written.
pub fn cmd_annotate(args: &AnnotateArgs) -> Result<usize> {
    let k = CameraIntrinsics::load(&args.intrinsics)?;
    let records = annotate::read_tracks(&args.tracks)?;
    let tl = annotate::annotate_tracks(&records, &k, &args.options)?;
    let grid = annotate::resample_to_label_grid(&tl, args.hop_s, args.n_frames)?;
    write_label_file(&args.out, &grid.to_records())?;
    Ok(grid.n_frames())
}

/// Per-channel log-mel features on the label grid, normalized:
/// `[channels, L·frames_per_label, n_mels]`. The signal is zero-padded by
/// `win − hop` samples so that the feature count is exactly one per hop.
pub fn entry_features(
    audio: &crate::audio::Audio,
    n_label_frames: usize,
    label_hop_s: f64,
    norm: &FeatureConfig,
) -> Result<(Vec<f32>, usize)> {
    let fb = FbankConfig::default();
    let ext = FbankExtractor::new(fb, audio.sample_rate)?;
    let per_label = dsp::frames_per_label(fb.hop as f64 / audio.sample_rate as f64, label_hop_s)?;
    let t_n = n_label_frames * per_label;
    let need = t_n * fb.hop;
    let mut out = Vec::with_capacity(audio.channels.len() * t_n * fb.n_mels);
    for ch in &audio.channels {
        if ch.len() < need {
            return Err(Error::Validation(format!(
                "{} samples cannot cover {n_label_frames} label frames",
                ch.len()
            )));
        }
        let mut x = ch[..need].to_vec();
        x.resize(need + fb.win - fb.hop, 0.0);
        let f = ext.process(&x)?;
        debug_assert_eq!(f.n_frames, t_n);
        out.extend(f.frames.iter().map(|&v| ((v - norm.mean) / norm.std) as f32));
    }
    Ok((out, t_n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesSummary {
    pub utterances: usize,
    pub frames: usize,
    pub mean: f64,
    pub std: f64,
}

/// Writes one normalized feature cache per manifest entry and reports the
/// raw log-mel statistics (for choosing the normalization constants).
pub fn cmd_features(manifest: &Path, out: &Path, norm: &FeatureConfig) -> Result<FeaturesSummary> {
    let entries = read_manifest(manifest)?;
    create_dir(out)?;
    let stats = par_map(&entries, |e| {
        let ex = load_example(e, norm)?;
        let index = FeatureCacheIndex {
            shape: vec![ex.channels, ex.feature_frames, ex.n_mels],
            hop_s: FbankConfig::default().hop as f64 / crate::SAMPLE_RATE as f64,
            sample_rate: crate::SAMPLE_RATE,
            dtype: "f32".into(),
        };
        dsp::write_feature_cache(&out.join(format!("{}.fbank", e.id)), &ex.features, &index)?;
        let raw = ex.features.iter().map(|&v| v as f64 * norm.std + norm.mean);
        let (s, s2) = raw.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
        Ok((ex.feature_frames, ex.features.len(), s, s2))
    })?;
    let frames = stats.iter().map(|s| s.0).sum();
    let n: usize = stats.iter().map(|s| s.1).sum();
    let (s, s2) = stats.iter().fold((0.0, 0.0), |(a, b), x| (a + x.2, b + x.3));
    let mean = if n > 0 { s / n as f64 } else { 0.0 };
    let std = if n > 0 { (s2 / n as f64 - mean * mean).max(0.0).sqrt() } else { 0.0 };
    Ok(FeaturesSummary { utterances: entries.len(), frames, mean, std })
}

/// One utterance ready for the network.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub labels: LabelTensor,
    /// `[channels, feature_frames, n_mels]`, normalized.
    pub features: Vec<f32>,
    pub channels: usize,
    pub feature_frames: usize,
    pub n_mels: usize,
}

impl Example {
    /// Feature rows `[start, start + len)` of channel `c`.
    pub fn channel_rows(&self, c: usize, start: usize, len: usize) -> &[f32] {
        let base = (c * self.feature_frames + start) * self.n_mels;
        &self.features[base..base + len * self.n_mels]
    }
}

fn load_example(e: &ManifestEntry, norm: &FeatureConfig) -> Result<Example> {
    let labels = LabelTensor::from_records(&read_label_file(&e.labels)?, crate::labels::LABEL_HOP_S)?;
    let audio = read_wav(&e.wav)?;
    let (features, t_n) = entry_features(&audio, labels.n_frames(), labels.hop_s, norm)?;
    Ok(Example {
        id: e.id.clone(),
        labels,
        features,
        channels: audio.channels.len(),
        feature_frames: t_n,
        n_mels: FbankConfig::default().n_mels,
    })
}

pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let entries = read_manifest(&cfg.manifest_path(split))?;
    let examples = par_map(&entries, |e| load_example(e, &cfg.features))?;
    for ex in &examples {
        if ex.channels != cfg.model.in_planes {
            return Err(Error::Validation(format!(
                "{}: {} channels but the model expects {}",
                ex.id, ex.channels, cfg.model.in_planes
            )));
        }
    }
    Ok(Dataset { split, examples })
}

/// Scenes are the single geometric source of truth; reload one for checks.
pub fn read_scene(path: &Path) -> Result<Scene> {
    let s: Scene = serde_json::from_slice(&std::fs::read(path).at(path)?)?;
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig { seed: 11, data_dir: dir.join("data"), run_dir: dir.join("run"), ..Default::default() };
        cfg.data.train_minutes = 0.1;
        cfg.data.val_minutes = 0.05;
        cfg.data.test_minutes = 0.05;
        cfg.data.scene.duration_s = 3.0;
        cfg.data.scene.utterance_s = [1.0, 2.0];
        cfg.data.scene.gap_s = [0.2, 0.5];
        cfg.data.rir.max_order = 2;
        cfg
    }

    #[test]
    fn simulate_writes_consistent_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let s = cmd_simulate(&cfg).unwrap();
        assert_eq!(s.scenes, [2, 1, 1]);
        let train = read_manifest(&cfg.manifest_path(Split::Train)).unwrap();
        assert_eq!(train.len(), 2);
        assert!((train.iter().map(|e| e.duration_s).sum::<f64>() - 6.0).abs() < 1e-9);
        for e in &train {
            check_entry_consistency(e, cfg.data.fps).unwrap();
            let scene = read_scene(&cfg.data_dir.join("train").join(format!("{}.scene.json", e.id))).unwrap();
            assert_eq!(scene.speakers.len(), e.n_speakers);
        }
        let ds = load_split(&cfg, Split::Train).unwrap();
        assert_eq!(ds.examples[0].feature_frames, 300);
        assert_eq!(ds.examples[0].labels.n_frames(), 30);
    }

    #[test]
    fn splits_use_disjoint_voices() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_simulate(&cfg).unwrap();
        let mut voices = Vec::new();
        for split in Split::ALL {
            let mut v = std::collections::BTreeSet::new();
            for e in read_manifest(&cfg.manifest_path(split)).unwrap() {
                let scene = read_scene(&cfg.data_dir.join(split.name()).join(format!("{}.scene.json", e.id))).unwrap();
                for sp in &scene.speakers {
                    for u in &sp.utterances {
                        if let crate::simulate::Source::Synthetic { voice, .. } = u.source {
                            v.insert(voice);
                        }
                    }
                }
            }
            voices.push(v);
        }
        assert!(voices[0].is_disjoint(&voices[1]) && voices[0].is_disjoint(&voices[2]) && voices[1].is_disjoint(&voices[2]));
    }

    #[test]
    fn manifest_with_missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let e = ManifestEntry {
            id: "x".into(),
            wav: "x.wav".into(),
            labels: "x.labels.jsonl".into(),
            tracks: "x.csv".into(),
            intrinsics: "x.txt".into(),
            duration_s: 1.0,
            n_speakers: 1,
        };
        write_manifest(&path, &[e]).unwrap();
        assert_eq!(read_manifest(&path).unwrap_err().kind(), "validation");
    }

    #[test]
    fn features_cover_the_label_grid() {
        let audio = crate::audio::Audio { sample_rate: 16_000, channels: vec![vec![0.01; 16_000]; 2] };
        let (f, t) = entry_features(&audio, 10, 0.1, &FeatureConfig::default()).unwrap();
        assert_eq!(t, 100);
        assert_eq!(f.len(), 2 * 100 * 64);
        assert!(entry_features(&audio, 11, 0.1, &FeatureConfig::default()).is_err());
    }
}
