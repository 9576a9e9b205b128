//! STFT and log-mel filterbank frontend.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbankConfig {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Floor applied to mel power before the logarithm.
    pub floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            win: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8000.0,
            floor: 1e-10,
        }
    }
}

/// One-sided complex spectrogram, row-major `n_frames × n_bins`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Short-time Fourier transform planner with a fixed window and FFT size.
pub struct Stft {
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(win: usize, hop: usize, n_fft: usize) -> Result<Self> {
        if win == 0 || hop == 0 || hop > win || n_fft < win {
            return Err(Error::Config(format!(
                "need 0 < hop <= win <= n_fft (win={win}, hop={hop}, n_fft={n_fft})"
            )));
        }
        Ok(Self {
            win,
            hop,
            n_fft,
            window: hann(win),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn process(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.len() < self.win {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than the {}-sample window",
                x.len(),
                self.win
            )));
        }
        let n_frames = frame_count(x.len(), self.win, self.hop);
        let n_bins = self.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let seg = &x[t * self.hop..t * self.hop + self.win];
            for (b, (&s, &w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            for b in &mut buf[self.win..] {
                *b = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..n_bins]);
        }
        Ok(Spectrogram { n_frames, n_bins, data })
    }
}

/// Hann-windowed STFT with FFT size equal to the window length.
pub fn stft(x: &[f64], win: usize, hop: usize) -> Result<Spectrogram> {
    Stft::new(win, hop, win)?.process(x)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, stored sparsely.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_bins: usize,
    /// Per filter: first bin and weights from that bin on.
    pub filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 || !(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0) {
            return Err(Error::Config(format!(
                "invalid mel range {fmin}..{fmax} Hz for {n_mels} filters at {sample_rate} Hz"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => (start, weights.iter().map(|&(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        Ok(Self { n_bins, filters })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum();
        }
    }

    /// Dense `n_mels × n_bins` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; self.n_bins];
                row[*start..*start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }
}

/// Log-mel energies, row-major `n_frames × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankSequence {
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_s: f64,
    pub sample_rate: u32,
    pub frames: Vec<f64>,
}

impl FbankSequence {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// Reusable log-mel extractor.
pub struct FbankExtractor {
    cfg: FbankConfig,
    sample_rate: u32,
    stft: Stft,
    mel: MelFilterbank,
}

impl FbankExtractor {
    pub fn new(cfg: FbankConfig, sample_rate: u32) -> Result<Self> {
        Ok(Self {
            stft: Stft::new(cfg.win, cfg.hop, cfg.n_fft)?,
            mel: MelFilterbank::new(cfg.n_mels, cfg.n_fft, sample_rate as f64, cfg.fmin, cfg.fmax)?,
            cfg,
            sample_rate,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn mel(&self) -> &MelFilterbank {
        &self.mel
    }

    pub fn process(&self, x: &[f32]) -> Result<FbankSequence> {
        let xd: Vec<f64> = x.iter().map(|&s| s as f64).collect();
        let spec = self.stft.process(&xd)?;
        let n_mels = self.mel.n_mels();
        let mut frames = vec![0.0; spec.n_frames * n_mels];
        let mut power = vec![0.0; spec.n_bins];
        for t in 0..spec.n_frames {
            for (p, c) in power.iter_mut().zip(spec.frame(t)) {
                *p = c.norm_sqr();
            }
            let out = &mut frames[t * n_mels..(t + 1) * n_mels];
            self.mel.apply(&power, out);
            for v in out.iter_mut() {
                *v = v.max(self.cfg.floor).ln();
            }
        }
        Ok(FbankSequence {
            n_frames: spec.n_frames,
            n_mels,
            hop_s: self.cfg.hop as f64 / self.sample_rate as f64,
            sample_rate: self.sample_rate,
            frames,
        })
    }
}

/// 64-band log-mel features with the default 25 ms / 10 ms framing.
pub fn fbank(x: &[f32], sample_rate: u32) -> Result<FbankSequence> {
    if sample_rate != crate::SAMPLE_RATE {
        return Err(Error::Config(format!(
            "fbank expects {} Hz audio, got {sample_rate} Hz",
            crate::SAMPLE_RATE
        )));
    }
    FbankExtractor::new(FbankConfig::default(), sample_rate)?.process(x)
}

/// Feature frames grouped per label frame: `n_groups × group × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGroups {
    pub n_groups: usize,
    pub group: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl LabelGroups {
    pub fn group_slice(&self, l: usize) -> &[f64] {
        let n = self.group * self.n_mels;
        &self.data[l * n..(l + 1) * n]
    }
}

/// Number of feature frames per label frame, or a config error when the
/// label hop is not an integer multiple of the feature hop.
pub fn frames_per_label(feature_hop_s: f64, label_hop_s: f64) -> Result<usize> {
    let ratio = label_hop_s / feature_hop_s;
    let r = ratio.round();
    if !(r >= 1.0 && (ratio - r).abs() < 1e-6) {
        return Err(Error::Config(format!(
            "label hop {label_hop_s} s is not a multiple of the feature hop {feature_hop_s} s"
        )));
    }
    Ok(r as usize)
}

/// Groups consecutive feature frames per label period, dropping a trailing
/// partial group.
pub fn pool_to_label_grid(f: &FbankSequence, label_hop_s: f64) -> Result<LabelGroups> {
    let group = frames_per_label(f.hop_s, label_hop_s)?;
    let n_groups = f.n_frames / group;
    Ok(LabelGroups {
        n_groups,
        group,
        n_mels: f.n_mels,
        data: f.frames[..n_groups * group * f.n_mels].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheIndex {
    pub shape: Vec<usize>,
    pub hop_s: f64,
    pub sample_rate: u32,
    pub dtype: String,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Raw little-endian f32 array plus a `<path>.json` sidecar.
pub fn write_feature_cache(path: &Path, data: &[f32], index: &FeatureCacheIndex) -> Result<()> {
    if index.shape.iter().product::<usize>() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "shape {:?} does not match {} values",
            index.shape,
            data.len()
        )));
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).at(path)?;
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(index)?).at(side)
}

pub fn read_feature_cache(path: &Path) -> Result<(Vec<f32>, FeatureCacheIndex)> {
    let side = sidecar(path);
    let index: FeatureCacheIndex = serde_json::from_slice(&std::fs::read(&side).at(&side)?)?;
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() != 4 * index.shape.iter().product::<usize>() {
        return Err(Error::Validation(format!(
            "{}: {} bytes do not match shape {:?}",
            path.display(),
            bytes.len(),
            index.shape
        )));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((data, index))
}
