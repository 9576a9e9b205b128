//! Training objectives.
//!
//! The audio-only objective is a cosine angle loss under the slot
//! permutation that minimizes it, plus an activity BCE evaluated under the
//! same permutation. The angle-conditioned objective is a plain BCE over the
//! first `S′` slots, since its slots are identified by their input angles.
//! Both return gradients with respect to the raw head outputs so that the
//! autodiff graph can take over from there.

use crate::assign;
use crate::error::{Error, Result};
use crate::labels::{LabelTensor, MAX_SPEAKERS};

/// Posterior clamp used inside the BCE.
pub const BCE_EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

pub fn bce(y: f64, y_hat: f64) -> f64 {
    let p = clamp(y_hat);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `∂bce/∂ŷ`; zero where the clamp is active.
pub fn bce_grad(y: f64, y_hat: f64) -> f64 {
    if y_hat <= BCE_EPS || y_hat >= 1.0 - BCE_EPS {
        return 0.0;
    }
    -y / y_hat + (1.0 - y) / (1.0 - y_hat)
}

/// Unit vector of an azimuth given in degrees.
pub fn unit(theta_deg: f64) -> [f64; 2] {
    let r = theta_deg.to_radians();
    [r.cos(), r.sin()]
}

/// `1 − cos(θ_ref − θ_pred)`, computed from unit vectors.
pub fn cosine_loss(theta_ref_deg: f64, theta_pred_deg: f64) -> f64 {
    let (a, b) = (unit(theta_ref_deg), unit(theta_pred_deg));
    1.0 - (a[0] * b[0] + a[1] * b[1])
}

/// Slot alignment: prediction slot `s` is compared with reference slot
/// `phi[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub phi: Vec<usize>,
    pub cost: f64,
}

/// Audio-only head outputs of one sample.
#[derive(Debug, Clone, Copy)]
pub struct AdoaPred<'a> {
    /// `[L, 6, 2]` predicted `(cos, sin)` vectors, flattened.
    pub theta: &'a [f64],
    /// `[L, 6]` posteriors, flattened.
    pub y_hat: &'a [f64],
}

fn check_shapes(labels: &LabelTensor, theta: Option<&[f64]>, y_hat: &[f64], op: &'static str) -> Result<()> {
    let l = labels.n_frames();
    if y_hat.len() != l * MAX_SPEAKERS {
        return Err(Error::shape(op, format!("{} posteriors for {l} frames × {MAX_SPEAKERS} slots", y_hat.len())));
    }
    if let Some(th) = theta {
        if th.len() != l * MAX_SPEAKERS * 2 {
            return Err(Error::shape(op, format!("{} angle values for {l} frames × {MAX_SPEAKERS} × 2", th.len())));
        }
    }
    Ok(())
}

/// `cost[s][r]`: activity-weighted cosine loss of prediction slot `s`
/// against reference slot `r`, normalized by `A_n`. All zero when the
/// sample has no activity.
pub fn pit_cost_matrix(labels: &LabelTensor, theta: &[f64]) -> Vec<f64> {
    let s_n = MAX_SPEAKERS;
    let mut cost = vec![0.0; s_n * s_n];
    let a_n = labels.a_n();
    if a_n == 0 {
        return cost;
    }
    for s in 0..s_n {
        for r in 0..labels.n_speakers() {
            let mut acc = 0.0;
            for t in 0..labels.n_frames() {
                if labels.active(t, r) {
                    let u = unit(labels.theta(t, r));
                    let v = &theta[(t * s_n + s) * 2..][..2];
                    acc += 1.0 - (u[0] * v[0] + u[1] * v[1]);
                }
            }
            cost[s * s_n + r] = acc / a_n as f64;
        }
    }
    cost
}

/// Cosine-optimal alignment by exhaustive search over all slot
/// permutations (ties → lexicographically smallest `phi`).
pub fn pit_align(labels: &LabelTensor, theta: &[f64]) -> Result<Alignment> {
    check_shapes(labels, Some(theta), &vec![0.0; labels.n_frames() * MAX_SPEAKERS], "pit_align")?;
    if labels.a_n() == 0 {
        return Ok(Alignment { phi: (0..MAX_SPEAKERS).collect(), cost: 0.0 });
    }
    let (phi, cost) = assign::exhaustive(&pit_cost_matrix(labels, theta), MAX_SPEAKERS);
    Ok(Alignment { phi, cost })
}

/// Same optimum via the Hungarian algorithm.
pub fn pit_align_hungarian(labels: &LabelTensor, theta: &[f64]) -> Result<Alignment> {
    check_shapes(labels, Some(theta), &vec![0.0; labels.n_frames() * MAX_SPEAKERS], "pit_align")?;
    if labels.a_n() == 0 {
        return Ok(Alignment { phi: (0..MAX_SPEAKERS).collect(), cost: 0.0 });
    }
    let (phi, cost) = assign::hungarian(&pit_cost_matrix(labels, theta), MAX_SPEAKERS);
    Ok(Alignment { phi, cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdoaLoss {
    pub e_cos: f64,
    pub e_bce: f64,
    pub total: f64,
    pub alignments: Vec<Alignment>,
    /// Per-sample `∂E/∂θ̂` in the layout of [`AdoaPred::theta`].
    pub grad_theta: Vec<Vec<f64>>,
    /// Per-sample `∂E/∂ŷ`.
    pub grad_y: Vec<Vec<f64>>,
}

/// Audio-only objective `E_cos + E_bce` over a batch, with
/// `E_cos = mean_n(aligned cosine cost)` and
/// `E_bce = Σ_n Σ_t Σ_s m_t·bce(y^{φ(s)}, ŷ^s) / (N·S·B_n)`, `S = 6`.
/// Samples with `A_n = 0` (`B_n = 0`) add nothing to `E_cos` (`E_bce`).
pub fn adoa_loss(labels: &[LabelTensor], preds: &[AdoaPred<'_>]) -> Result<AdoaLoss> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::shape("adoa_loss", format!("{} label sets for {} predictions", labels.len(), preds.len())));
    }
    let n = labels.len() as f64;
    let s_n = MAX_SPEAKERS;
    let mut out = AdoaLoss {
        e_cos: 0.0,
        e_bce: 0.0,
        total: 0.0,
        alignments: Vec::with_capacity(labels.len()),
        grad_theta: Vec::with_capacity(labels.len()),
        grad_y: Vec::with_capacity(labels.len()),
    };
    for (lab, p) in labels.iter().zip(preds) {
        check_shapes(lab, Some(p.theta), p.y_hat, "adoa_loss")?;
        let al = pit_align(lab, p.theta)?;
        let mut gt = vec![0.0; p.theta.len()];
        let mut gy = vec![0.0; p.y_hat.len()];
        let a_n = lab.a_n();
        if a_n > 0 {
            out.e_cos += al.cost / n;
            let scale = 1.0 / (a_n as f64 * n);
            for t in 0..lab.n_frames() {
                for s in 0..s_n {
                    let r = al.phi[s];
                    if r < lab.n_speakers() && lab.active(t, r) {
                        let u = unit(lab.theta(t, r));
                        let o = (t * s_n + s) * 2;
                        gt[o] -= u[0] * scale;
                        gt[o + 1] -= u[1] * scale;
                    }
                }
            }
        }
        let b_n = lab.b_n();
        if b_n > 0 {
            let scale = 1.0 / (n * s_n as f64 * b_n as f64);
            let mut acc = 0.0;
            for t in 0..lab.n_frames() {
                if lab.m(t) == 0.0 {
                    continue;
                }
                for s in 0..s_n {
                    let y = lab.y(t, al.phi[s]);
                    let yh = p.y_hat[t * s_n + s];
                    acc += bce(y, yh);
                    gy[t * s_n + s] = bce_grad(y, yh) * scale;
                }
            }
            out.e_bce += acc * scale;
        }
        out.alignments.push(al);
        out.grad_theta.push(gt);
        out.grad_y.push(gy);
    }
    out.total = out.e_cos + out.e_bce;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdoaLoss {
    pub value: f64,
    pub s_prime: usize,
    pub b: usize,
    pub grad_y: Vec<Vec<f64>>,
}

/// Angle-conditioned objective
/// `Σ_n Σ_t Σ_{s<S′} m_t·bce(y^s, ŷ^s) / (S′·B)` with `S′ = max_n S_n`
/// and `B = Σ_n B_n`; labels must already be in canonical slot order.
pub fn mdoa_loss(labels: &[LabelTensor], y_hat: &[&[f64]]) -> Result<MdoaLoss> {
    let s_prime = labels.iter().map(|l| l.n_speakers()).max().unwrap_or(0);
    let b = labels.iter().map(|l| l.b_n()).sum();
    mdoa_loss_with(labels, y_hat, s_prime, b)
}

/// [`mdoa_loss`] with explicit batch normalizers, for evaluating one shard
/// of a larger batch.
pub fn mdoa_loss_with(labels: &[LabelTensor], y_hat: &[&[f64]], s_prime: usize, b: usize) -> Result<MdoaLoss> {
    if labels.len() != y_hat.len() {
        return Err(Error::shape("mdoa_loss", format!("{} label sets for {} predictions", labels.len(), y_hat.len())));
    }
    if s_prime > MAX_SPEAKERS {
        return Err(Error::shape("mdoa_loss", format!("S' = {s_prime} exceeds {MAX_SPEAKERS} slots")));
    }
    let mut grad_y = Vec::with_capacity(labels.len());
    for (lab, yh) in labels.iter().zip(y_hat) {
        check_shapes(lab, None, yh, "mdoa_loss")?;
        grad_y.push(vec![0.0; yh.len()]);
    }
    if b == 0 || s_prime == 0 {
        log::warn!("silent batch: angle-conditioned loss is zero");
        return Ok(MdoaLoss { value: 0.0, s_prime, b, grad_y });
    }
    let scale = 1.0 / (s_prime as f64 * b as f64);
    let mut acc = 0.0;
    for ((lab, yh), g) in labels.iter().zip(y_hat).zip(&mut grad_y) {
        for t in 0..lab.n_frames() {
            if lab.m(t) == 0.0 {
                continue;
            }
            for s in 0..s_prime {
                let (y, p) = (lab.y(t, s), yh[t * MAX_SPEAKERS + s]);
                acc += bce(y, p);
                g[t * MAX_SPEAKERS + s] = bce_grad(y, p) * scale;
            }
        }
    }
    Ok(MdoaLoss { value: acc * scale, s_prime, b, grad_y })
}
