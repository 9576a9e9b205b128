//! Speech-like test signals: formant-filtered pulse/noise excitation,
//! shaped into syllables and phrases separated by silent pauses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Speaker-dependent generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0_hz: f64,
    pub formant_scale: f64,
    /// Noise share of the voiced excitation.
    pub breathiness: f64,
}

impl Voice {
    /// Deterministic voice for a synthetic speaker identity.
    pub fn from_id(id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0x5eed_0f_f0ce);
        Self {
            f0_hz: rng.gen_range(90.0..240.0),
            formant_scale: rng.gen_range(0.85..1.2),
            breathiness: rng.gen_range(0.05..0.3),
        }
    }
}

/// Vowel-like formant targets (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 160.0];

/// Peak 100 ms RMS after normalization.
const PEAK_RMS: f64 = 0.2;

/// Two-pole resonator with unit gain at its center frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, fs: f64) -> Self {
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt(),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bw: f64, fs: f64) {
        let fresh = Self::new(freq, bw, fs);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Speech-like signal for `voice`; starts with speech and contains pauses of
/// exact silence between phrases.
pub fn synth_utterance(voice: &Voice, duration_s: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let fs = sample_rate as f64;
    let n = (duration_s * fs).round().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n];
    let mut res: Vec<Resonator> = (0..3).map(|i| Resonator::new(VOWELS[0][i], BANDWIDTHS[i], fs)).collect();

    let mut pos = 0usize;
    let mut phase = 0.0f64;
    while pos < n {
        let phrase_end = (pos + (rng.gen_range(0.6..2.4) * fs) as usize).min(n);
        let contour = rng.gen_range(-0.2..0.2);
        let phrase_start = pos;
        while pos < phrase_end {
            let syl = ((rng.gen_range(0.12..0.28) * fs) as usize).min(phrase_end - pos);
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            for (i, r) in res.iter_mut().enumerate() {
                let f = (vowel[i] * voice.formant_scale * rng.gen_range(0.93..1.07)).min(0.45 * fs);
                r.retune(f, BANDWIDTHS[i], fs);
            }
            let voiced = rng.gen_bool(0.8);
            let amp = rng.gen_range(0.4..1.0);
            for j in 0..syl {
                let t = pos + j;
                let prog = (t - phrase_start) as f64 / (phrase_end - phrase_start).max(1) as f64;
                let f0 = voice.f0_hz * (1.0 + contour * (prog - 0.5)) * (1.0 + 0.01 * rng.gen_range(-1.0..1.0));
                phase += f0 / fs;
                let noise: f64 = rng.gen_range(-1.0..1.0);
                let exc = if voiced {
                    let pulse = if phase >= 1.0 {
                        phase -= 1.0;
                        8.0
                    } else {
                        0.0
                    };
                    pulse + voice.breathiness * noise
                } else {
                    0.6 * noise
                };
                let env = (std::f64::consts::PI * (j as f64 + 0.5) / syl as f64).sin().powi(2) * amp;
                let y = res.iter_mut().fold(exc, |acc, r| r.step(acc));
                out[t] = y * env;
            }
            pos += syl;
        }
        // pause
        let pause = (rng.gen_range(0.15..0.9) * fs) as usize;
        for r in &mut res {
            r.y1 = 0.0;
            r.y2 = 0.0;
        }
        pos = (pos + pause).min(n);
    }

    let win = (0.1 * fs) as usize;
    let peak = out
        .chunks(win.max(1))
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { PEAK_RMS / peak } else { 0.0 };
    out.into_iter().map(|v| (v * scale) as f32).collect()
}

/// 16 kHz speech-like signal whose voice and content both derive from
/// `seed`.
pub fn synth_speech(duration_s: f64, seed: u64) -> Vec<f32> {
    synth_utterance(&Voice::from_id(seed), duration_s, crate::SAMPLE_RATE, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_rms(x: &[f32]) -> Vec<f64> {
        x.chunks(1600).map(|c| (c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt()).collect()
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_speech(2.0, 9), synth_speech(2.0, 9));
        assert_ne!(synth_speech(2.0, 9), synth_speech(2.0, 10));
    }

    #[test]
    fn rms_in_unit_interval() {
        for seed in 0..5 {
            let x = synth_speech(3.0, seed);
            let rms = (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
            assert!(rms > 0.0 && rms < 1.0, "rms {rms}");
            assert!(x.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn enough_silent_windows_for_vad() {
        for seed in 0..5 {
            let x = synth_speech(10.0, seed);
            let rms = window_rms(&x);
            let peak = rms.iter().cloned().fold(0.0, f64::max);
            let thr = peak * 10f64.powf(-40.0 / 20.0);
            let quiet = rms.iter().filter(|&&r| r <= thr).count();
            assert!(quiet * 10 >= rms.len(), "seed {seed}: {quiet}/{} quiet windows", rms.len());
            assert!(quiet < rms.len() / 2);
        }
    }

    #[test]
    fn starts_with_speech() {
        let x = synth_speech(1.0, 3);
        assert!(window_rms(&x[..3200]).iter().any(|&r| r > 0.0));
    }
}
