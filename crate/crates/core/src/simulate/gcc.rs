//! GCC-PHAT delay estimation, used as a classical check of the simulator.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GccConfig {
    /// Cross-spectrum band kept after PHAT weighting.
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub speed_of_sound: f64,
}

impl Default for GccConfig {
    fn default() -> Self {
        Self {
            fmin_hz: 100.0,
            fmax_hz: 4000.0,
            speed_of_sound: crate::SPEED_OF_SOUND,
        }
    }
}

const MIN_LEN: usize = 1024;

/// Delay of `a` relative to `b` in seconds (positive when `a` hears the
/// source later), searched within `±max_tau_s`.
pub fn gcc_phat_tdoa(a: &[f64], b: &[f64], fs: f64, max_tau_s: f64, cfg: &GccConfig) -> Result<f64> {
    if a.len() != b.len() || a.len() < MIN_LEN {
        return Err(Error::InvalidArgument(format!(
            "need two equally long segments of at least {MIN_LEN} samples (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = (2 * a.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let spec = |x: &[f64]| {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let (sa, sb) = (spec(a), spec(b));
    let energy: f64 = sa.iter().chain(&sb).map(|c| c.norm_sqr()).sum();
    if energy == 0.0 || !energy.is_finite() {
        return Err(Error::NoEstimate("degenerate (silent or non-finite) input".into()));
    }
    let floor = 1e-12 * energy / n as f64;
    let mut cross: Vec<Complex<f64>> = sa
        .iter()
        .zip(&sb)
        .enumerate()
        .map(|(k, (x, y))| {
            let f = k.min(n - k) as f64 * fs / n as f64;
            let c = x * y.conj();
            let mag = c.norm();
            if f < cfg.fmin_hz || f > cfg.fmax_hz || mag <= floor {
                Complex::new(0.0, 0.0)
            } else {
                c / mag
            }
        })
        .collect();
    if cross.iter().all(|c| c.norm_sqr() == 0.0) {
        return Err(Error::NoEstimate("no usable cross-spectrum bins".into()));
    }
    planner.plan_fft_inverse(n).process(&mut cross);
    let r = |lag: i64| cross[lag.rem_euclid(n as i64) as usize].re;

    let max_lag = ((max_tau_s * fs).ceil() as i64 + 1).min(n as i64 / 2 - 1);
    let best = (-max_lag..=max_lag).max_by(|&x, &y| r(x).total_cmp(&r(y))).unwrap_or(0);
    let (ym, y0, yp) = (r(best - 1), r(best), r(best + 1));
    let denom = ym - 2.0 * y0 + yp;
    let shift = if denom < 0.0 { (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    Ok((best as f64 + shift) / fs)
}

/// Azimuth (degrees) of a far-field source from two microphones `spacing`
/// meters apart, where `b` sits `spacing` further along the array axis than
/// `a`.
pub fn gcc_phat_azimuth(a: &[f64], b: &[f64], spacing: f64, fs: f64) -> Result<f64> {
    let cfg = GccConfig::default();
    let max_tau = spacing / cfg.speed_of_sound;
    let tau = gcc_phat_tdoa(a, b, fs, max_tau, &cfg)?;
    Ok((tau * cfg.speed_of_sound / spacing).clamp(-1.0, 1.0).acos().to_degrees())
}

#[cfg(test)]
mod tests {
    use super::super::speech::synth_speech;
    use super::*;

    /// Integer-sample delayed copies of a broadband signal.
    fn pair(delay_a: usize, delay_b: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = synth_speech(1.0, 4).into_iter().map(f64::from).collect();
        let n = 8192;
        let shift = |d: usize| (0..n).map(|i| if i >= d { x[i - d + 2000] } else { 0.0 }).collect::<Vec<_>>();
        (shift(delay_a), shift(delay_b))
    }

    #[test]
    fn broadside_is_ninety_degrees() {
        let (a, b) = pair(3, 3);
        let az = gcc_phat_azimuth(&a, &b, 0.175, 16_000.0).unwrap();
        assert!((az - 90.0).abs() < 1e-6, "{az}");
    }

    #[test]
    fn endfire_is_zero_degrees() {
        // d/c·fs = 0.1715 m / 343 m/s · 16 kHz = 8 samples exactly
        let (a, b) = pair(8, 0);
        let az = gcc_phat_azimuth(&a, &b, 0.1715, 16_000.0).unwrap();
        assert!(az.abs() < 1.0, "{az}");
        let (a, b) = pair(0, 8);
        let az = gcc_phat_azimuth(&a, &b, 0.1715, 16_000.0).unwrap();
        assert!((az - 180.0).abs() < 1.0, "{az}");
    }

    #[test]
    fn degenerate_inputs() {
        let z = vec![0.0; 2048];
        assert!(matches!(gcc_phat_azimuth(&z, &z, 0.035, 16_000.0), Err(Error::NoEstimate(_))));
        let short = vec![1.0; 100];
        assert!(matches!(gcc_phat_azimuth(&short, &short, 0.035, 16_000.0), Err(Error::InvalidArgument(_))));
    }
}
