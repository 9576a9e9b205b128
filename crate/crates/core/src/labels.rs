//! Frame-level reference labels and their JSON-lines file form.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Number of output slots of both estimators.
pub const MAX_SPEAKERS: usize = 6;

/// Default label period in seconds.
pub const LABEL_HOP_S: f64 = 0.1;

/// Per-frame activity `y`, reference azimuth `theta` and derived counts for
/// one utterance. Slots beyond `speaker_ids.len()` are padding (inactive,
/// azimuth 0); a speaker's azimuth is NaN on frames where it is unknown.
#[derive(Debug, Clone)]
pub struct LabelTensor {
    pub hop_s: f64,
    pub speaker_ids: Vec<u32>,
    n_frames: usize,
    active: Vec<bool>,
    theta: Vec<f64>,
}

/// Unknown azimuths (NaN) compare equal to each other.
impl PartialEq for LabelTensor {
    fn eq(&self, other: &Self) -> bool {
        self.hop_s == other.hop_s
            && self.speaker_ids == other.speaker_ids
            && self.n_frames == other.n_frames
            && self.active == other.active
            && self.theta.iter().zip(&other.theta).all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl LabelTensor {
    pub fn new(hop_s: f64, speaker_ids: Vec<u32>, n_frames: usize) -> Result<Self> {
        if speaker_ids.len() > MAX_SPEAKERS {
            return Err(Error::Validation(format!(
                "{} speakers exceed the {MAX_SPEAKERS} output slots",
                speaker_ids.len()
            )));
        }
        let n = speaker_ids.len();
        let theta = (0..n_frames * MAX_SPEAKERS).map(|i| if i % MAX_SPEAKERS < n { f64::NAN } else { 0.0 }).collect();
        Ok(Self {
            hop_s,
            speaker_ids,
            n_frames,
            active: vec![false; n_frames * MAX_SPEAKERS],
            theta,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// `S_n`.
    pub fn n_speakers(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn set(&mut self, t: usize, s: usize, active: bool, theta_deg: f64) {
        debug_assert!(s < self.speaker_ids.len());
        self.active[t * MAX_SPEAKERS + s] = active;
        self.theta[t * MAX_SPEAKERS + s] = theta_deg;
    }

    pub fn active(&self, t: usize, s: usize) -> bool {
        self.active[t * MAX_SPEAKERS + s]
    }

    pub fn y(&self, t: usize, s: usize) -> f64 {
        if self.active(t, s) {
            1.0
        } else {
            0.0
        }
    }

    pub fn theta(&self, t: usize, s: usize) -> f64 {
        self.theta[t * MAX_SPEAKERS + s]
    }

    pub fn active_count(&self, t: usize) -> usize {
        (0..MAX_SPEAKERS).filter(|&s| self.active(t, s)).count()
    }

    /// Non-silence mask `m_t`.
    pub fn m(&self, t: usize) -> f64 {
        if self.active_count(t) > 0 {
            1.0
        } else {
            0.0
        }
    }

    /// `A_n`: total number of activations.
    pub fn a_n(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// `B_n`: number of non-silent frames.
    pub fn b_n(&self) -> usize {
        (0..self.n_frames).filter(|&t| self.active_count(t) > 0).count()
    }

    /// Azimuths of the active speakers at frame `t`, in slot order.
    pub fn refs_at(&self, t: usize) -> Vec<f64> {
        (0..MAX_SPEAKERS)
            .filter(|&s| self.active(t, s))
            .map(|s| self.theta(t, s))
            .collect()
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_frames {
            return Err(Error::InvalidArgument(format!(
                "label slice {start}..{} beyond {} frames",
                start + len,
                self.n_frames
            )));
        }
        let r = start * MAX_SPEAKERS..(start + len) * MAX_SPEAKERS;
        Ok(Self {
            hop_s: self.hop_s,
            speaker_ids: self.speaker_ids.clone(),
            n_frames: len,
            active: self.active[r.clone()].to_vec(),
            theta: self.theta[r].to_vec(),
        })
    }

    /// Reorders speakers so that new slot `i` holds old slot `order[i]`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_speakers();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&o| o >= n || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of {n} speakers"
            )));
        }
        let mut out = Self::new(self.hop_s, order.iter().map(|&o| self.speaker_ids[o]).collect(), self.n_frames)?;
        for t in 0..self.n_frames {
            for (new, &old) in order.iter().enumerate() {
                out.set(t, new, self.active(t, old), self.theta(t, old));
            }
        }
        Ok(out)
    }

    /// Center time of label frame `t`.
    pub fn frame_time(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.hop_s
    }

    pub fn to_records(&self) -> Vec<LabelFrame> {
        (0..self.n_frames)
            .map(|t| LabelFrame {
                t: self.frame_time(t),
                speakers: self
                    .speaker_ids
                    .iter()
                    .enumerate()
                    .map(|(s, &id)| SpeakerLabel {
                        id,
                        azimuth_deg: Some(self.theta(t, s)).filter(|v| v.is_finite()),
                        active: self.active(t, s),
                    })
                    .collect(),
            })
            .collect()
    }

    /// Rebuilds a tensor from label records; speakers get slots in order of
    /// first appearance.
    pub fn from_records(records: &[LabelFrame], hop_s: f64) -> Result<Self> {
        let mut ids: Vec<u32> = Vec::new();
        for r in records {
            for sp in &r.speakers {
                if !ids.contains(&sp.id) {
                    ids.push(sp.id);
                }
            }
        }
        let mut out = Self::new(hop_s, ids, records.len())?;
        for (t, r) in records.iter().enumerate() {
            for sp in &r.speakers {
                let s = out.speaker_ids.iter().position(|&i| i == sp.id).unwrap_or(0);
                match (sp.active, sp.azimuth_deg) {
                    (true, None) => {
                        return Err(Error::Validation(format!(
                            "frame {t}: speaker {} active without an azimuth",
                            sp.id
                        )))
                    }
                    (active, az) => out.set(t, s, active, az.unwrap_or(f64::NAN)),
                }
            }
        }
        Ok(out)
    }
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFrame {
    pub t: f64,
    pub speakers: Vec<SpeakerLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerLabel {
    pub id: u32,
    pub azimuth_deg: Option<f64>,
    pub active: bool,
}

pub fn write_label_file(path: &Path, frames: &[LabelFrame]) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = std::io::BufWriter::new(file);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelFrame>> {
    let file = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
