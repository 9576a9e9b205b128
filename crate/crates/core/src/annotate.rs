//! Turns head-and-shoulder track files into azimuth timelines and labels on
//! the 100 ms grid.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geom::{self, BoundingBox, CameraIntrinsics};
use crate::labels::{LabelFrame, SpeakerLabel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame_idx: u64,
    pub track_id: u32,
    pub bbox: BoundingBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    frame_idx: u64,
    track_id: u32,
    u1: f64,
    v1: f64,
    u2: f64,
    v2: f64,
}

pub const TRACK_HEADER: [&str; 6] = ["frame_idx", "track_id", "u1", "v1", "u2", "v2"];

pub fn parse_tracks(reader: impl Read) -> Result<Vec<TrackRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != TRACK_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}, got {}", TRACK_HEADER.join(","), header.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<TrackRow>() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let bbox = BoundingBox { u1: row.u1, v1: row.v1, u2: row.u2, v2: row.v2 };
        bbox.validate().map_err(|e| Error::Parse {
            // header is line 1
            line: out.len() as u64 + 2,
            msg: e.to_string(),
        })?;
        out.push(TrackRecord { frame_idx: row.frame_idx, track_id: row.track_id, bbox });
    }
    Ok(out)
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path).at(path)?;
    parse_tracks(std::io::BufReader::new(file))
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(TrackRow {
            frame_idx: r.frame_idx,
            track_id: r.track_id,
            u1: r.bbox.u1,
            v1: r.bbox.v1,
            u2: r.bbox.u2,
            v2: r.bbox.v2,
        })?;
    }
    w.flush().at(path)
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub fps: f64,
    /// Longest dropout (seconds) bridged by linear interpolation.
    pub gap_limit_s: f64,
    /// Added to every video timestamp to put it on the audio clock.
    pub time_offset_s: f64,
    /// Roster of expected track ids; records outside it are rejected.
    pub known_tracks: Option<BTreeSet<u32>>,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            fps: 25.0,
            gap_limit_s: 0.5,
            time_offset_s: 0.0,
            known_tracks: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelinePoint {
    pub t: f64,
    /// Degrees; NaN when `present` is false.
    pub azimuth_deg: f64,
    pub present: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationTimeline {
    pub tracks: BTreeMap<u32, Vec<TimelinePoint>>,
}

pub fn annotate_tracks(
    records: &[TrackRecord],
    k: &CameraIntrinsics,
    opts: &AnnotateOptions,
) -> Result<AnnotationTimeline> {
    if !(opts.fps.is_finite() && opts.fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {}", opts.fps)));
    }
    k.validate()?;

    let mut per_track: BTreeMap<u32, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        if let Some(known) = &opts.known_tracks {
            if !known.contains(&r.track_id) {
                return Err(Error::Validation(format!(
                    "frame {}: unknown track id {}",
                    r.frame_idx, r.track_id
                )));
            }
        }
        let az = geom::pixel_azimuth(geom::mouth_from_bbox(&r.bbox), k)?;
        if per_track.entry(r.track_id).or_default().insert(r.frame_idx, az).is_some() {
            return Err(Error::Validation(format!(
                "duplicate record for track {} at frame {}",
                r.track_id, r.frame_idx
            )));
        }
    }

    let time = |f: u64| f as f64 / opts.fps + opts.time_offset_s;
    let mut tl = AnnotationTimeline::default();
    for (id, frames) in per_track {
        let mut points = Vec::with_capacity(frames.len());
        let mut prev: Option<(u64, f64)> = None;
        for (&f, &az) in &frames {
            if let Some((pf, paz)) = prev {
                let bridged = (f - pf) as f64 / opts.fps <= opts.gap_limit_s;
                for g in pf + 1..f {
                    let w = (g - pf) as f64 / (f - pf) as f64;
                    points.push(TimelinePoint {
                        t: time(g),
                        azimuth_deg: if bridged { paz + w * (az - paz) } else { f64::NAN },
                        present: bridged,
                    });
                }
            }
            points.push(TimelinePoint { t: time(f), azimuth_deg: az, present: true });
            prev = Some((f, az));
        }
        tl.tracks.insert(id, points);
    }
    Ok(tl)
}

/// Per-speaker azimuths on the label grid; `None` where the speaker is not
/// visible.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub hop_s: f64,
    pub ids: Vec<u32>,
    pub azimuth: Vec<Vec<Option<f64>>>,
}

impl LabelGrid {
    pub fn n_frames(&self) -> usize {
        self.azimuth.first().map_or(0, Vec::len)
    }

    pub fn to_records(&self) -> Vec<LabelFrame> {
        (0..self.n_frames())
            .map(|l| LabelFrame {
                t: (l as f64 + 0.5) * self.hop_s,
                speakers: self
                    .ids
                    .iter()
                    .zip(&self.azimuth)
                    .map(|(&id, az)| SpeakerLabel { id, azimuth_deg: az[l], active: az[l].is_some() })
                    .collect(),
            })
            .collect()
    }
}

/// Samples each track at label-frame centers `(l + 1/2)·hop`, taking the
/// nearest present timeline point within `hop/2`. `n_frames` defaults to
/// the number of frames needed to cover the last timeline point.
pub fn resample_to_label_grid(
    tl: &AnnotationTimeline,
    hop_s: f64,
    n_frames: Option<usize>,
) -> Result<LabelGrid> {
    if !(hop_s.is_finite() && hop_s > 0.0) {
        return Err(Error::InvalidArgument(format!("label hop must be positive, got {hop_s}")));
    }
    let n = n_frames.unwrap_or_else(|| {
        tl.tracks
            .values()
            .flatten()
            .map(|p| p.t)
            .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))))
            .map_or(0, |t| (t.max(0.0) / hop_s).floor() as usize + 1)
    });

    let mut grid = LabelGrid { hop_s, ids: Vec::new(), azimuth: Vec::new() };
    for (&id, points) in &tl.tracks {
        let present: Vec<&TimelinePoint> = points.iter().filter(|p| p.present).collect();
        let col = (0..n)
            .map(|l| {
                let c = (l as f64 + 0.5) * hop_s;
                let i = present.partition_point(|p| p.t < c);
                let mut best: Option<&TimelinePoint> = None;
                for p in [i.checked_sub(1).map(|j| present[j]), present.get(i).copied()].into_iter().flatten() {
                    let d = (p.t - c).abs();
                    if d <= hop_s / 2.0 && best.map_or(true, |b| d < (b.t - c).abs()) {
                        best = Some(p);
                    }
                }
                best.map(|p| p.azimuth_deg)
            })
            .collect();
        grid.ids.push(id);
        grid.azimuth.push(col);
    }
    Ok(grid)
}
