//! Random scene generation for dataset building.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{norm, sub, Scene, Source, Speaker, Utterance, MIC_COUNT, MIC_PITCH_M};
use crate::error::{Error, Result};
use crate::geom::CameraIntrinsics;

/// Sampling ranges (`[lo, hi]`) for rooms, array pose, speakers and
/// utterance schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSampling {
    pub room_side_m: [f64; 2],
    pub room_height_m: [f64; 2],
    pub absorption: [f64; 2],
    /// Distance of the array from the wall it is mounted on.
    pub array_wall_offset_m: [f64; 2],
    pub array_height_m: [f64; 2],
    /// Horizontal speaker distance from the array center.
    pub speaker_distance_m: [f64; 2],
    pub speaker_height_m: [f64; 2],
    /// Horizontal direction from the array axis.
    pub direction_deg: [f64; 2],
    pub wall_margin_m: f64,
    pub min_speaker_separation_m: f64,
    pub speakers: [usize; 2],
    pub duration_s: f64,
    pub utterance_s: [f64; 2],
    pub gap_s: [f64; 2],
    pub intrinsics: CameraIntrinsics,
    pub sample_rate: u32,
}

impl Default for SceneSampling {
    fn default() -> Self {
        Self {
            room_side_m: [4.0, 8.0],
            room_height_m: [2.5, 3.5],
            absorption: [0.2, 0.6],
            array_wall_offset_m: [0.3, 0.6],
            array_height_m: [0.8, 1.3],
            speaker_distance_m: [3.0, 5.0],
            speaker_height_m: [1.0, 1.3],
            direction_deg: [15.0, 165.0],
            wall_margin_m: 0.3,
            min_speaker_separation_m: 0.6,
            speakers: [1, 3],
            duration_s: 30.0,
            utterance_s: [2.0, 8.0],
            gap_s: [0.5, 4.0],
            intrinsics: CameraIntrinsics { fx: 1000.0, fy: 1000.0, u0: 640.0, v0: 360.0 },
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

fn range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Quantizes seconds to whole milliseconds.
fn ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

impl SceneSampling {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("room_side_m", self.room_side_m),
            ("room_height_m", self.room_height_m),
            ("absorption", self.absorption),
            ("array_wall_offset_m", self.array_wall_offset_m),
            ("array_height_m", self.array_height_m),
            ("speaker_distance_m", self.speaker_distance_m),
            ("speaker_height_m", self.speaker_height_m),
            ("direction_deg", self.direction_deg),
            ("utterance_s", self.utterance_s),
            ("gap_s", self.gap_s),
        ];
        for (name, r) in ranges {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= 0.0) {
                return Err(Error::Config(format!("{name}: invalid range {r:?}")));
            }
        }
        if !(self.absorption[0] > 0.0 && self.absorption[1] <= 1.0) {
            return Err(Error::Config("absorption must lie in (0, 1]".into()));
        }
        if self.speakers[0] == 0 || self.speakers[0] > self.speakers[1] || self.speakers[1] > crate::labels::MAX_SPEAKERS {
            return Err(Error::Config(format!("speaker count range {:?} outside 1..=6", self.speakers)));
        }
        if !(self.duration_s > 0.0) || !(self.utterance_s[0] > 0.0) {
            return Err(Error::Config("durations must be positive".into()));
        }
        self.intrinsics.validate()
    }

    pub fn sample_scene(&self, rng: &mut impl Rng, voice_ids: std::ops::Range<u64>) -> Result<Scene> {
        sample_scene(rng, self, voice_ids)
    }
}

/// Draws a room, an array mounted along one wall looking into the room, and
/// 1–N seated speakers in front of it with random utterance schedules.
/// Voices are drawn from `voice_ids` so that dataset splits can use
/// disjoint speaker identities.
pub fn sample_scene(rng: &mut impl Rng, cfg: &SceneSampling, voice_ids: std::ops::Range<u64>) -> Result<Scene> {
    cfg.validate()?;
    if voice_ids.is_empty() {
        return Err(Error::Config("empty voice id range".into()));
    }
    let n_speakers = rng.gen_range(cfg.speakers[0]..=cfg.speakers[1]);
    for _attempt in 0..200 {
        let room = [range(rng, cfg.room_side_m), range(rng, cfg.room_side_m), range(rng, cfg.room_height_m)];
        let absorption: [f64; 6] = std::array::from_fn(|_| range(rng, cfg.absorption));
        let center = [
            rng.gen_range(0.35..0.65) * room[0],
            range(rng, cfg.array_wall_offset_m),
            range(rng, cfg.array_height_m),
        ];
        let m = cfg.wall_margin_m;
        let mut positions: Vec<[f64; 3]> = Vec::new();
        for _ in 0..500 {
            if positions.len() == n_speakers {
                break;
            }
            let r = range(rng, cfg.speaker_distance_m);
            let phi = range(rng, cfg.direction_deg).to_radians();
            let p = [center[0] + r * phi.cos(), center[1] + r * phi.sin(), range(rng, cfg.speaker_height_m)];
            let inside = (0..3).all(|i| p[i] > m && p[i] < room[i] - m);
            let apart = positions.iter().all(|q| norm(sub(p, *q)) >= cfg.min_speaker_separation_m);
            if inside && apart {
                positions.push(p);
            }
        }
        if positions.len() < n_speakers {
            continue;
        }

        let speakers = positions
            .into_iter()
            .enumerate()
            .map(|(i, position)| {
                let voice = rng.gen_range(voice_ids.clone());
                let mut utterances = Vec::new();
                let mut t = ms(rng.gen_range(0.0..cfg.gap_s[1].max(0.5)));
                while t + cfg.utterance_s[0] <= cfg.duration_s {
                    let len = ms(range(rng, cfg.utterance_s).min(cfg.duration_s - t));
                    utterances.push(Utterance {
                        onset_s: t,
                        source: Source::Synthetic { voice, seed: rng.gen(), duration_s: len },
                    });
                    t = ms(t + len + range(rng, cfg.gap_s));
                }
                Speaker { id: i as u32, position, utterances }
            })
            .collect();
        let scene = Scene {
            room,
            absorption,
            array_center: center,
            array_axis: [1.0, 0.0, 0.0],
            camera_forward: [0.0, 1.0, 0.0],
            intrinsics: cfg.intrinsics,
            mic_count: MIC_COUNT,
            mic_pitch: MIC_PITCH_M,
            sample_rate: cfg.sample_rate,
            duration_s: cfg.duration_s,
            speakers,
        };
        scene.validate()?;
        return Ok(scene);
    }
    Err(Error::Config("could not place the speakers; widen the sampling ranges".into()))
}
