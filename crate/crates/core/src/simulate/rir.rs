use serde::{Deserialize, Serialize};

use super::{norm, sub, Scene, Vec3};
use crate::error::{Error, Result};

/// How an image arriving between two samples is written into the RIR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapInterpolation {
    /// Single tap at the rounded delay.
    Nearest,
    /// Fractional delay split linearly over the two neighbouring samples.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RirConfig {
    pub max_order: usize,
    pub interpolation: TapInterpolation,
    pub speed_of_sound: f64,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self {
            max_order: 10,
            interpolation: TapInterpolation::Linear,
            speed_of_sound: crate::SPEED_OF_SOUND,
        }
    }
}

/// Impulse responses indexed `[speaker][mic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    pub sample_rate: u32,
    pub rirs: Vec<Vec<Vec<f64>>>,
}

impl RirSet {
    pub fn energy(&self) -> f64 {
        self.rirs.iter().flatten().flatten().map(|v| v * v).sum()
    }
}

/// Image positions along one axis: (coordinate, reflection count).
fn axis_images(src: f64, len: f64, max_order: usize, betas: (f64, f64)) -> Vec<(f64, usize, f64)> {
    let max = max_order as i64;
    let mut out = Vec::new();
    for m in -max..=max {
        for q in 0..=1i64 {
            let low = (m - q).unsigned_abs() as usize;
            let high = m.unsigned_abs() as usize;
            if low + high > max_order {
                continue;
            }
            let pos = (1 - 2 * q) as f64 * src + 2.0 * m as f64 * len;
            let gain = betas.0.powi(low as i32) * betas.1.powi(high as i32);
            out.push((pos, low + high, gain));
        }
    }
    out
}

/// Image-source RIR between one source and one microphone in a shoebox
/// room with frequency-independent wall absorption.
pub fn image_source_rir(
    source: Vec3,
    mic: Vec3,
    room: Vec3,
    absorption: &[f64; 6],
    sample_rate: u32,
    cfg: &RirConfig,
) -> Vec<f64> {
    let beta: Vec<f64> = absorption.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
    let per_axis: Vec<Vec<(f64, usize, f64)>> = (0..3)
        .map(|i| axis_images(source[i], room[i], cfg.max_order, (beta[2 * i], beta[2 * i + 1])))
        .collect();
    let fs = sample_rate as f64;
    let mut taps: Vec<(f64, f64)> = Vec::new();
    for &(x, ox, gx) in &per_axis[0] {
        for &(y, oy, gy) in &per_axis[1] {
            if ox + oy > cfg.max_order {
                continue;
            }
            for &(z, oz, gz) in &per_axis[2] {
                if ox + oy + oz > cfg.max_order {
                    continue;
                }
                let gain = gx * gy * gz;
                if gain == 0.0 && ox + oy + oz > 0 {
                    continue;
                }
                let d = norm(sub([x, y, z], mic));
                taps.push((d / cfg.speed_of_sound * fs, gain / (4.0 * std::f64::consts::PI * d)));
            }
        }
    }
    let max_delay = taps.iter().map(|t| t.0).fold(0.0, f64::max);
    let mut h = vec![0.0; max_delay.ceil() as usize + 2];
    for (delay, amp) in taps {
        // integer delays computed with rounding noise stay single taps
        let delay = if (delay - delay.round()).abs() < 1e-9 { delay.round() } else { delay };
        match cfg.interpolation {
            TapInterpolation::Nearest => h[delay.round() as usize] += amp,
            TapInterpolation::Linear => {
                let i = delay.floor() as usize;
                let frac = delay - i as f64;
                h[i] += amp * (1.0 - frac);
                if frac > 0.0 {
                    h[i + 1] += amp * frac;
                }
            }
        }
    }
    while h.len() > 1 && h[h.len() - 1] == 0.0 {
        h.pop();
    }
    h
}

pub fn simulate_rir(scene: &Scene, cfg: &RirConfig) -> Result<RirSet> {
    scene.validate()?;
    if !(cfg.speed_of_sound > 0.0) {
        return Err(Error::Config("speed of sound must be positive".into()));
    }
    let mics = scene.mic_positions();
    let rirs = scene
        .speakers
        .iter()
        .map(|s| {
            mics.iter()
                .map(|&m| image_source_rir(s.position, m, scene.room, &scene.absorption, scene.sample_rate, cfg))
                .collect()
        })
        .collect();
    Ok(RirSet { sample_rate: scene.sample_rate, rirs })
}
