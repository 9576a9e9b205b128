//! Shoebox-room simulation of a six-microphone linear array with a
//! co-located camera.
//!
//! A [`Scene`] is the single source of truth: room, array pose, camera and
//! speakers with their utterance schedules. [`simulate_rir`] builds
//! image-source impulse responses, [`render_mixture`] produces the
//! multichannel mixture with frame labels, and [`export_camera_tracks`]
//! produces the bounding-box track file a detector would have emitted.

mod gcc;
mod render;
mod rir;
mod sampling;
mod speech;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::annotate::TrackRecord;
use crate::error::{Error, Result};
use crate::geom::{self, BoundingBox, CameraIntrinsics, CameraPoint};
use crate::labels::MAX_SPEAKERS;

pub use gcc::{gcc_phat_azimuth, gcc_phat_tdoa, GccConfig};
pub use render::{render_mixture, RenderConfig, Rendered};
pub use rir::{image_source_rir, simulate_rir, RirConfig, RirSet, TapInterpolation};
pub use sampling::{sample_scene, SceneSampling};
pub use speech::{synth_speech, synth_utterance, Voice};

pub type Vec3 = [f64; 3];

pub const MIC_COUNT: usize = 6;
pub const MIC_PITCH_M: f64 = 0.035;

/// Physical size of the synthetic head-and-shoulder box in meters.
const BBOX_SIZE_M: (f64, f64) = (0.45, 0.55);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    /// Mono (first channel used) WAV file, relative paths resolved against
    /// the render base directory.
    Wav { path: PathBuf },
    /// Built-in speech-like generator.
    Synthetic { voice: u64, seed: u64, duration_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub onset_s: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: u32,
    pub position: Vec3,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Room extent (Lx, Ly, Lz) in meters; the room spans `[0, L]` per axis.
    pub room: Vec3,
    /// Energy absorption per wall: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub absorption: [f64; 6],
    pub array_center: Vec3,
    /// Unit vector from the first to the last microphone; doubles as the
    /// camera X axis.
    pub array_axis: Vec3,
    /// Unit optical axis of the camera, orthogonal to the array axis.
    pub camera_forward: Vec3,
    pub intrinsics: CameraIntrinsics,
    pub mic_count: usize,
    pub mic_pitch: f64,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub speakers: Vec<Speaker>,
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn inside(p: Vec3, room: Vec3) -> bool {
    (0..3).all(|i| p[i] > 0.0 && p[i] < room[i])
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !self.room.iter().all(|&l| l.is_finite() && l > 0.0) {
            return bad(format!("room dimensions must be positive: {:?}", self.room));
        }
        if !self.absorption.iter().all(|&a| a > 0.0 && a <= 1.0) {
            return bad(format!("absorption must lie in (0, 1]: {:?}", self.absorption));
        }
        if (norm(self.array_axis) - 1.0).abs() > 1e-9 || (norm(self.camera_forward) - 1.0).abs() > 1e-9 {
            return bad("array axis and camera forward must be unit vectors".into());
        }
        if dot(self.array_axis, self.camera_forward).abs() > 1e-9 {
            return bad("camera forward must be orthogonal to the array axis".into());
        }
        self.intrinsics.validate()?;
        if self.mic_count < 2 || !(self.mic_pitch > 0.0) {
            return bad(format!("need at least two mics with positive pitch ({} @ {})", self.mic_count, self.mic_pitch));
        }
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return bad("sample rate and duration must be positive".into());
        }
        if self.speakers.is_empty() || self.speakers.len() > MAX_SPEAKERS {
            return bad(format!("speaker count {} outside 1..={MAX_SPEAKERS}", self.speakers.len()));
        }
        for m in self.mic_positions() {
            if !inside(m, self.room) {
                return bad(format!("microphone at {m:?} is outside the room"));
            }
        }
        for (i, s) in self.speakers.iter().enumerate() {
            if !inside(s.position, self.room) {
                return bad(format!("speaker {} at {:?} is outside the room", s.id, s.position));
            }
            if self.speakers[..i].iter().any(|o| o.id == s.id) {
                return bad(format!("duplicate speaker id {}", s.id));
            }
        }
        Ok(())
    }

    pub fn mic_positions(&self) -> Vec<Vec3> {
        let mid = (self.mic_count as f64 - 1.0) / 2.0;
        (0..self.mic_count)
            .map(|i| {
                let off = (i as f64 - mid) * self.mic_pitch;
                [0, 1, 2].map(|k| self.array_center[k] + off * self.array_axis[k])
            })
            .collect()
    }

    /// Camera-frame basis: X = array axis, Z = optical axis, Y = Z × X.
    pub fn camera_basis(&self) -> [Vec3; 3] {
        let x = self.array_axis;
        let z = self.camera_forward;
        [x, cross(z, x), z]
    }

    /// World point in the camera frame (origin at the array center).
    pub fn to_camera(&self, p: Vec3) -> CameraPoint {
        let d = sub(p, self.array_center);
        let [bx, by, bz] = self.camera_basis();
        CameraPoint::new(dot(d, bx), dot(d, by), dot(d, bz))
    }

    /// Cone angle between `p - array_center` and the array axis, degrees.
    pub fn azimuth_of_point(&self, p: Vec3) -> Result<f64> {
        let d = sub(p, self.array_center);
        let along = dot(d, self.array_axis);
        let across = norm(cross(d, self.array_axis));
        if along == 0.0 && across == 0.0 {
            return Err(Error::InvalidArgument("point coincides with the array center".into()));
        }
        Ok(across.atan2(along).to_degrees())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// Projects every speaker into the co-located camera and emits one
/// head-and-shoulder box per video frame, centered on the projected mouth.
/// Speakers behind the camera are skipped with a warning.
pub fn export_camera_tracks(scene: &Scene, fps: f64) -> Result<Vec<TrackRecord>> {
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let n_frames = (scene.duration_s * fps).round() as u64;
    let k = &scene.intrinsics;
    let mut boxes = Vec::new();
    for s in &scene.speakers {
        let p = scene.to_camera(s.position);
        match geom::camera_to_pixel(p, k) {
            Ok(px) => {
                let bbox = BoundingBox::centered(px, k.fx * BBOX_SIZE_M.0 / p.z, k.fy * BBOX_SIZE_M.1 / p.z);
                boxes.push((s.id, bbox));
            }
            Err(Error::BehindCamera(z)) => {
                log::warn!("speaker {} is behind the camera (Zc = {z:.3}); no track exported", s.id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((0..n_frames)
        .flat_map(|f| boxes.iter().map(move |&(track_id, bbox)| TrackRecord { frame_idx: f, track_id, bbox }))
        .collect())
}
