use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::speech::{synth_utterance, Voice};
use super::{RirSet, Scene, Source};
use crate::audio::{read_wav, Audio};
use crate::error::{Error, Result};
use crate::labels::{LabelTensor, LABEL_HOP_S};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// A window is active when its dry RMS exceeds the utterance's peak
    /// window RMS by more than this many dB (negative).
    pub vad_threshold_db: f64,
    pub label_hop_s: f64,
    /// Uncorrelated sensor noise at this SNR (dB re. mixture RMS); off when
    /// `None`.
    pub noise_snr_db: Option<f64>,
    pub noise_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            vad_threshold_db: -40.0,
            label_hop_s: LABEL_HOP_S,
            noise_snr_db: None,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub audio: Audio,
    pub labels: LabelTensor,
}

fn load_source(src: &Source, sample_rate: u32, base: Option<&Path>) -> Result<Vec<f32>> {
    match src {
        Source::Synthetic { voice, seed, duration_s } => {
            Ok(synth_utterance(&Voice::from_id(*voice), *duration_s, sample_rate, *seed))
        }
        Source::Wav { path } => {
            let full = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            let a = read_wav(&full)?;
            if a.sample_rate != sample_rate {
                return Err(Error::Validation(format!(
                    "{} is {} Hz but the scene runs at {sample_rate} Hz",
                    full.display(),
                    a.sample_rate
                )));
            }
            Ok(a.channels.into_iter().next().unwrap_or_default())
        }
    }
}

/// Linear convolution of every dry track with its RIRs, truncated to `n`
/// samples and summed per microphone.
fn convolve_sum(dry: &[Vec<f64>], rirs: &RirSet, n_mics: usize, n: usize) -> Vec<Vec<f64>> {
    let longest = rirs.rirs.iter().flatten().map(Vec::len).max().unwrap_or(1);
    let size = (n + longest).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let spectrum = |x: &[f64]| {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let mut acc = vec![vec![Complex::new(0.0, 0.0); size]; n_mics];
    for (s, track) in dry.iter().enumerate() {
        if track.iter().all(|&v| v == 0.0) {
            continue;
        }
        let d = spectrum(track);
        for (m, a) in acc.iter_mut().enumerate() {
            let h = spectrum(&rirs.rirs[s][m]);
            for ((a, d), h) in a.iter_mut().zip(&d).zip(&h) {
                *a += d * h;
            }
        }
    }
    acc.into_iter()
        .map(|mut a| {
            inv.process(&mut a);
            a[..n].iter().map(|c| c.re / size as f64).collect()
        })
        .collect()
}

/// Renders the multichannel mixture and its frame labels.
///
/// Labels live on the `label_hop_s` grid: speaker `s` is active in window
/// `l` when its dry signal's window RMS exceeds the threshold of an
/// utterance overlapping that window, and its reference azimuth is the cone
/// angle of its position with respect to the array axis.
pub fn render_mixture(scene: &Scene, rirs: &RirSet, cfg: &RenderConfig, base: Option<&Path>) -> Result<Rendered> {
    scene.validate()?;
    if rirs.sample_rate != scene.sample_rate || rirs.rirs.len() != scene.speakers.len() {
        return Err(Error::Validation("RIR set does not belong to this scene".into()));
    }
    let fs = scene.sample_rate as f64;
    let n = scene.n_samples();
    let hop = (cfg.label_hop_s * fs).round() as usize;
    if hop == 0 {
        return Err(Error::Config("label hop is shorter than one sample".into()));
    }
    let n_frames = n / hop;
    let thr_ratio = 10f64.powf(cfg.vad_threshold_db / 20.0);

    let mut labels = LabelTensor::new(cfg.label_hop_s, scene.speakers.iter().map(|s| s.id).collect(), n_frames)?;
    let mut dry = Vec::with_capacity(scene.speakers.len());
    for (s, sp) in scene.speakers.iter().enumerate() {
        let theta = scene.azimuth_of_point(sp.position)?;
        let mut track = vec![0.0f64; n];
        let mut spans = Vec::new();
        for u in &sp.utterances {
            let x = load_source(&u.source, scene.sample_rate, base)?;
            let start = (u.onset_s * fs).round();
            if start < 0.0 || start as usize + x.len() > n {
                return Err(Error::Validation(format!(
                    "speaker {}: utterance at {:.3} s of {} samples does not fit in {:.3} s",
                    sp.id,
                    u.onset_s,
                    x.len(),
                    scene.duration_s
                )));
            }
            let start = start as usize;
            for (t, v) in track[start..start + x.len()].iter_mut().zip(&x) {
                *t += *v as f64;
            }
            spans.push((start, start + x.len()));
        }
        let rms: Vec<f64> = (0..n_frames)
            .map(|l| {
                let w = &track[l * hop..(l + 1) * hop];
                (w.iter().map(|v| v * v).sum::<f64>() / hop as f64).sqrt()
            })
            .collect();
        for &(a, b) in &spans {
            let frames = a / hop..b.div_ceil(hop).min(n_frames);
            let peak = rms[frames.clone()].iter().cloned().fold(0.0, f64::max);
            let thr = peak * thr_ratio;
            for l in frames {
                if rms[l] > thr && rms[l] > 0.0 {
                    labels.set(l, s, true, theta);
                }
            }
        }
        for l in 0..n_frames {
            if !labels.active(l, s) {
                labels.set(l, s, false, theta);
            }
        }
        dry.push(track);
    }

    let mut mix = convolve_sum(&dry, rirs, scene.mic_count, n);
    if let Some(snr) = cfg.noise_snr_db {
        let power = mix.iter().flatten().map(|v| v * v).sum::<f64>() / (n * scene.mic_count).max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in mix.iter_mut().flatten() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(Rendered {
        audio: Audio {
            sample_rate: scene.sample_rate,
            channels: mix.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect(),
        },
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::simple_scene;
    use super::super::{simulate_rir, RirConfig, Speaker, Utterance};
    use super::*;
    use crate::audio::write_wav;

    fn synth(voice: u64, seed: u64, duration_s: f64) -> Source {
        Source::Synthetic { voice, seed, duration_s }
    }

    #[test]
    fn silent_schedule_renders_silence() {
        let s = simple_scene();
        let rirs = simulate_rir(&s, &RirConfig { max_order: 2, ..Default::default() }).unwrap();
        let r = render_mixture(&s, &rirs, &RenderConfig::default(), None).unwrap();
        assert_eq!(r.audio.channels.len(), 6);
        assert_eq!(r.audio.len(), 32_000);
        assert!(r.audio.channels.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(r.labels.n_frames(), 20);
        assert_eq!(r.labels.b_n(), 0);
    }

    /// A dense tone burst keeps every window above the VAD threshold.
    fn tone_wav(dir: &Path, name: &str, secs: f64, fs: u32) -> std::path::PathBuf {
        let n = (secs * fs as f64) as usize;
        let x: Vec<f32> = (0..n).map(|i| (0.3 * (i as f64 * 0.3).sin()) as f32).collect();
        let p = dir.join(name);
        write_wav(&p, &Audio { sample_rate: fs, channels: vec![x] }).unwrap();
        p
    }

    #[test]
    fn broadside_speaker_active_throughout() {
        let dir = tempfile::tempdir().unwrap();
        let p = tone_wav(dir.path(), "tone.wav", 2.0, 16_000);
        let mut s = simple_scene();
        s.speakers[0].utterances.push(Utterance { onset_s: 0.0, source: Source::Wav { path: p } });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 3, ..Default::default() }).unwrap();
        let r = render_mixture(&s, &rirs, &RenderConfig::default(), None).unwrap();
        for t in 0..r.labels.n_frames() {
            assert!(r.labels.active(t, 0));
            assert_eq!(r.labels.theta(t, 0), 90.0);
        }
        assert!(r.audio.channels.iter().all(|c| c.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn wav_sample_rate_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        tone_wav(dir.path(), "tone8k.wav", 1.0, 8000);
        let mut s = simple_scene();
        s.speakers[0].utterances.push(Utterance {
            onset_s: 0.0,
            source: Source::Wav { path: "tone8k.wav".into() },
        });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 0, ..Default::default() }).unwrap();
        let err = render_mixture(&s, &rirs, &RenderConfig::default(), Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn overlap_frames_match_schedule_intersection() {
        let dir = tempfile::tempdir().unwrap();
        let a = tone_wav(dir.path(), "a.wav", 1.2, 16_000);
        let b = tone_wav(dir.path(), "b.wav", 1.0, 16_000);
        let mut s = simple_scene();
        s.duration_s = 3.0;
        s.speakers[0].utterances.push(Utterance { onset_s: 0.3, source: Source::Wav { path: a } });
        s.speakers.push(Speaker {
            id: 1,
            position: [1.5, 3.0, 1.2],
            utterances: vec![Utterance { onset_s: 1.0, source: Source::Wav { path: b } }],
        });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 1, ..Default::default() }).unwrap();
        let r = render_mixture(&s, &rirs, &RenderConfig::default(), None).unwrap();
        // independent schedule arithmetic: windows fully inside both spans
        for t in 0..r.labels.n_frames() {
            let (w0, w1) = (t as f64 * 0.1, (t + 1) as f64 * 0.1);
            let inside = |on: f64, len: f64| w0 >= on - 1e-9 && w1 <= on + len + 1e-9;
            let outside = |on: f64, len: f64| w1 <= on + 1e-9 || w0 >= on + len - 1e-9;
            let both = inside(0.3, 1.2) && inside(1.0, 1.0);
            let neither = outside(0.3, 1.2) || outside(1.0, 1.0);
            let count = r.labels.active_count(t);
            if both {
                assert_eq!(count, 2, "frame {t}");
            }
            if neither {
                assert!(count < 2, "frame {t}");
            }
        }
        assert_eq!((0..30).filter(|&t| r.labels.active_count(t) == 2).count(), 5);
    }

    #[test]
    fn labels_only_inside_utterances_and_mask_is_or() {
        let mut s = simple_scene();
        s.duration_s = 6.0;
        s.speakers[0].utterances.push(Utterance { onset_s: 0.5, source: synth(3, 1, 2.0) });
        s.speakers.push(Speaker {
            id: 1,
            position: [1.5, 3.0, 1.2],
            utterances: vec![Utterance { onset_s: 2.0, source: synth(4, 2, 3.5) }],
        });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 2, ..Default::default() }).unwrap();
        let r = render_mixture(&s, &rirs, &RenderConfig::default(), None).unwrap();
        let spans = [(0.5, 2.5), (2.0, 5.5)];
        for t in 0..r.labels.n_frames() {
            for (sp, (a, b)) in spans.iter().enumerate() {
                if r.labels.active(t, sp) {
                    assert!((t + 1) as f64 * 0.1 > *a && (t as f64) * 0.1 < *b);
                }
            }
            assert_eq!(r.labels.m(t) == 1.0, r.labels.active(t, 0) || r.labels.active(t, 1));
        }
        assert!(r.labels.a_n() > 0);
    }

    #[test]
    fn oversized_utterance_rejected() {
        let mut s = simple_scene();
        s.speakers[0].utterances.push(Utterance { onset_s: 1.5, source: synth(0, 0, 1.0) });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 0, ..Default::default() }).unwrap();
        assert!(render_mixture(&s, &rirs, &RenderConfig::default(), None).is_err());
    }

    #[test]
    fn noise_knob_adds_noise() {
        let mut s = simple_scene();
        s.speakers[0].utterances.push(Utterance { onset_s: 0.0, source: synth(0, 0, 1.0) });
        let rirs = simulate_rir(&s, &RirConfig { max_order: 0, ..Default::default() }).unwrap();
        let clean = render_mixture(&s, &rirs, &RenderConfig::default(), None).unwrap();
        let cfg = RenderConfig { noise_snr_db: Some(10.0), ..Default::default() };
        let noisy = render_mixture(&s, &rirs, &cfg, None).unwrap();
        assert_ne!(clean.audio, noisy.audio);
        assert_eq!(clean.labels, noisy.labels);
    }
}
