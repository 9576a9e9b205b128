//! ResNet encoder, multi-scale TCN and the two output heads.
//!
//! Input features are `[N, planes, T_feat, n_mels]` (one log-mel plane per
//! microphone). The encoder halves the frequency axis in the stem and in
//! every residual layer, mean-pools frequency away and averages each group
//! of `frames_per_label` frames onto the 100 ms label grid. The audio-only
//! variant regresses a unit `(cos, sin)` vector and an activity posterior
//! per slot; the angle-conditioned variant receives the candidate azimuths
//! as input and only predicts which slots are active.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, BnStats, Graph, ParamStore, Real, Tensor, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::labels::{LabelTensor, MAX_SPEAKERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Adoa,
    Mdoa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Adoa => "adoa",
            Variant::Mdoa => "mdoa",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adoa" => Ok(Variant::Adoa),
            "mdoa" => Ok(Variant::Mdoa),
            other => Err(Error::Config(format!("unknown model variant {other:?} (expected adoa or mdoa)"))),
        }
    }
}

/// Values per slot in the angle input: `(cos θ, sin θ, valid)`.
pub const ANGLE_FEATURES: usize = 3;

/// Encoder sizes studied in the original sweep: (name, base channels,
/// blocks per layer).
pub const ENCODER_SWEEP: [(&str, usize, usize); 5] = [
    ("Channel32_Block1", 32, 1),
    ("Channel32_Block2", 32, 2),
    ("Channel64_Block2", 64, 2),
    ("Channel128_Block2", 128, 2),
    ("Channel128_Block3", 128, 3),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channels of the first residual layer; doubled in each later layer.
    pub base_channels: usize,
    pub blocks_per_layer: usize,
    pub tcn_channels: usize,
    pub tcn_blocks: usize,
    pub tcn_modules_per_block: usize,
    pub tcn_kernels: Vec<usize>,
    pub max_speakers: usize,
    /// Width of the projected angle input.
    pub angle_dim: usize,
    pub in_planes: usize,
    pub n_mels: usize,
    pub frames_per_label: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Adoa,
            base_channels: 16,
            blocks_per_layer: 1,
            tcn_channels: 256,
            tcn_blocks: 4,
            tcn_modules_per_block: 2,
            tcn_kernels: vec![3, 5, 7],
            max_speakers: MAX_SPEAKERS,
            angle_dim: 32,
            in_planes: 6,
            n_mels: 64,
            frames_per_label: 10,
        }
    }
}

const RESNET_LAYERS: usize = 4;

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    /// Configuration of one encoder size from [`ENCODER_SWEEP`].
    pub fn sweep(name: &str, variant: Variant) -> Result<Self> {
        let &(_, c, b) = ENCODER_SWEEP
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown encoder size {name}")))?;
        Ok(Self { variant, base_channels: c, blocks_per_layer: b, ..Default::default() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.blocks_per_layer == 0 || self.in_planes == 0 || self.n_mels == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.frames_per_label == 0 {
            return bad("frames_per_label must be positive".into());
        }
        if self.tcn_kernels.is_empty() || self.tcn_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("tcn kernels must be odd, got {:?}", self.tcn_kernels));
        }
        if self.tcn_channels < self.tcn_kernels.len() {
            return bad("tcn_channels smaller than the number of branches".into());
        }
        if self.max_speakers == 0 || self.max_speakers > MAX_SPEAKERS {
            return bad(format!("max_speakers must lie in 1..={MAX_SPEAKERS}"));
        }
        if self.variant == Variant::Mdoa && self.angle_dim == 0 {
            return bad("angle_dim must be positive for the angle-conditioned model".into());
        }
        Ok(())
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }

    /// Encoder output width (`8c`).
    pub fn embed_dim(&self) -> usize {
        self.layer_channels(RESNET_LAYERS - 1)
    }

    /// Output widths of the parallel TCN branches; the remainder of the
    /// channel split goes to the first branches (256 → 86/85/85).
    pub fn branch_widths(&self) -> Vec<usize> {
        let k = self.tcn_kernels.len();
        (0..k).map(|i| self.tcn_channels / k + usize::from(i < self.tcn_channels % k)).collect()
    }

    pub fn angle_input_dim(&self) -> usize {
        self.max_speakers * ANGLE_FEATURES
    }
}

fn kaiming<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("consistent shape")
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let b = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-b, b);
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("consistent shape")
}

/// Per-sample model outputs on the label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub n_frames: usize,
    pub slots: usize,
    /// Activity posteriors, `[frame][slot]` flattened.
    pub y_hat: Vec<f64>,
    /// Decoded azimuths in degrees (audio-only model).
    pub theta_deg: Option<Vec<f64>>,
}

impl Prediction {
    pub fn y(&self, t: usize, s: usize) -> f64 {
        self.y_hat[t * self.slots + s]
    }

    pub fn theta(&self, t: usize, s: usize) -> Option<f64> {
        self.theta_deg.as_ref().map(|v| v[t * self.slots + s])
    }
}

/// Graph handles of one forward pass.
pub struct Output {
    /// `[N, L, S, 2]` unit vectors (audio-only model).
    pub theta: Option<Var>,
    /// `[N, L, S]` posteriors.
    pub y_hat: Var,
    /// Batch statistics of every batch norm, keyed by layer prefix
    /// (training mode only).
    pub bn_stats: Vec<(String, BnStats<f64>)>,
}

/// Azimuth in `[0°, 180°]` from a predicted `(cos, sin)` pair; negative
/// angles are reflected since references always have `sin ≥ 0`.
pub fn decode_azimuth(c: f64, s: f64) -> f64 {
    s.atan2(c).to_degrees().abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn bn_init<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) {
        store.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{name}.mean"), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{name}.var"), Tensor::full(&[c], T::one()));
    }

    /// Seeded initialization: Kaiming-normal convolutions, uniform
    /// `±1/√fan_in` linear layers, identity batch norms.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c0 = cfg.layer_channels(0);
        s.insert("stem.conv.w", kaiming(&mut rng, &[c0, cfg.in_planes, 3, 3], cfg.in_planes * 9));
        Self::bn_init(&mut s, "stem.bn", c0);
        let mut cin = c0;
        for l in 0..RESNET_LAYERS {
            let cout = cfg.layer_channels(l);
            for b in 0..cfg.blocks_per_layer {
                let p = format!("layer{l}.block{b}");
                s.insert(format!("{p}.conv1.w"), kaiming(&mut rng, &[cout, cin, 3, 3], cin * 9));
                Self::bn_init(&mut s, &format!("{p}.bn1"), cout);
                s.insert(format!("{p}.conv2.w"), kaiming(&mut rng, &[cout, cout, 3, 3], cout * 9));
                Self::bn_init(&mut s, &format!("{p}.bn2"), cout);
                if b == 0 {
                    s.insert(format!("{p}.proj.w"), kaiming(&mut rng, &[cout, cin, 1, 1], cin));
                    Self::bn_init(&mut s, &format!("{p}.proj_bn"), cout);
                }
                cin = cout;
            }
        }
        let mut tcn_in = cfg.embed_dim();
        if cfg.variant == Variant::Mdoa {
            let a = cfg.angle_input_dim();
            s.insert("angle.proj.w", uniform(&mut rng, &[cfg.angle_dim, a], a));
            s.insert("angle.proj.b", uniform(&mut rng, &[cfg.angle_dim], a));
            tcn_in += cfg.angle_dim;
        }
        let d = cfg.tcn_channels;
        s.insert("tcn.in.w", uniform(&mut rng, &[d, tcn_in], tcn_in));
        s.insert("tcn.in.b", uniform(&mut rng, &[d], tcn_in));
        for b in 0..cfg.tcn_blocks {
            for m in 0..cfg.tcn_modules_per_block {
                let p = format!("tcn.block{b}.mod{m}");
                for (k, w) in cfg.tcn_kernels.iter().zip(cfg.branch_widths()) {
                    s.insert(format!("{p}.k{k}.w"), kaiming(&mut rng, &[w, *k, d], k * d));
                    s.insert(format!("{p}.k{k}.b"), Tensor::zeros(&[w]));
                }
                Self::bn_init(&mut s, &format!("{p}.bn"), d);
            }
        }
        let slots = cfg.max_speakers;
        if cfg.variant == Variant::Adoa {
            s.insert("head.doa.w", uniform(&mut rng, &[2 * slots, d], d));
            s.insert("head.doa.b", uniform(&mut rng, &[2 * slots], d));
        }
        s.insert("head.vad.w", uniform(&mut rng, &[slots, d], d));
        s.insert("head.vad.b", uniform(&mut rng, &[slots], d));
        s
    }

    fn bn<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
        x: Var,
        axis: usize,
        train: bool,
        stats: &mut Vec<(String, BnStats<f64>)>,
    ) -> Result<Var> {
        let gamma = g.param(store, &format!("{name}.gamma"))?;
        let beta = g.param(store, &format!("{name}.beta"))?;
        if train {
            let (y, st) = g.batch_norm(x, gamma, beta, axis, BnMode::Train)?;
            let st = st.expect("training mode returns statistics");
            stats.push((
                name.to_string(),
                BnStats { mean: st.mean.iter().map(|v| v.f64()).collect(), var: st.var.iter().map(|v| v.f64()).collect() },
            ));
            Ok(y)
        } else {
            let missing = || Error::Config(format!("missing running statistics for {name}"));
            let mean = store.buffer(&format!("{name}.mean")).ok_or_else(missing)?.data();
            let var = store.buffer(&format!("{name}.var")).ok_or_else(missing)?.data();
            Ok(g.batch_norm(x, gamma, beta, axis, BnMode::Eval { mean, var })?.0)
        }
    }

    /// Encoder: `[N, planes, T_feat, n_mels]` → `[N, T_feat / fpl, 8c]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        train: bool,
        stats: &mut Vec<(String, BnStats<f64>)>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let fs = g.shape(features).to_vec();
        if fs.len() != 4 || fs[1] != cfg.in_planes || fs[3] != cfg.n_mels {
            return Err(Error::shape(
                "resnet_encode",
                format!("features {fs:?}, expected [N, {}, T, {}]", cfg.in_planes, cfg.n_mels),
            ));
        }
        if fs[2] == 0 || fs[2] % cfg.frames_per_label != 0 {
            return Err(Error::shape(
                "resnet_encode",
                format!("{} feature frames is not a positive multiple of {}", fs[2], cfg.frames_per_label),
            ));
        }
        let w = g.param(store, "stem.conv.w")?;
        let h = g.conv2d(features, w, None, (1, 2), (1, 1))?;
        let h = Self::bn(g, store, "stem.bn", h, 1, train, stats)?;
        let mut h = g.relu(h);
        for l in 0..RESNET_LAYERS {
            for b in 0..cfg.blocks_per_layer {
                let p = format!("layer{l}.block{b}");
                let stride = if b == 0 { (1, 2) } else { (1, 1) };
                let w1 = g.param(store, &format!("{p}.conv1.w"))?;
                let y = g.conv2d(h, w1, None, stride, (1, 1))?;
                let y = Self::bn(g, store, &format!("{p}.bn1"), y, 1, train, stats)?;
                let y = g.relu(y);
                let w2 = g.param(store, &format!("{p}.conv2.w"))?;
                let y = g.conv2d(y, w2, None, (1, 1), (1, 1))?;
                let y = Self::bn(g, store, &format!("{p}.bn2"), y, 1, train, stats)?;
                let skip = if b == 0 {
                    let wp = g.param(store, &format!("{p}.proj.w"))?;
                    let s = g.conv2d(h, wp, None, stride, (0, 0))?;
                    Self::bn(g, store, &format!("{p}.proj_bn"), s, 1, train, stats)?
                } else {
                    h
                };
                let y = g.add(y, skip)?;
                h = g.relu(y);
            }
        }
        let pooled = g.mean_pool_freq(h)?;
        g.mean_pool_time(pooled, cfg.frames_per_label)
    }

    /// Multi-scale TCN: input projection to `tcn_channels`, then residual
    /// modules of parallel same-padded convolutions.
    pub fn mstcn<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
        stats: &mut Vec<(String, BnStats<f64>)>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (w, b) = (g.param(store, "tcn.in.w")?, g.param(store, "tcn.in.b")?);
        let mut h = g.linear(x, w, Some(b))?;
        for bl in 0..cfg.tcn_blocks {
            for m in 0..cfg.tcn_modules_per_block {
                let p = format!("tcn.block{bl}.mod{m}");
                let mut branches = Vec::with_capacity(cfg.tcn_kernels.len());
                for k in &cfg.tcn_kernels {
                    let w = g.param(store, &format!("{p}.k{k}.w"))?;
                    let b = g.param(store, &format!("{p}.k{k}.b"))?;
                    branches.push(g.conv1d(h, w, Some(b))?);
                }
                let y = g.concat(&branches)?;
                let y = Self::bn(g, store, &format!("{p}.bn"), y, 2, train, stats)?;
                let y = g.relu(y);
                h = g.add(y, h)?;
            }
        }
        Ok(h)
    }

    /// Full forward pass. `angles` (`[N, L, 3·S]`) is required by, and only
    /// accepted for, the angle-conditioned model.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        angles: Option<Var>,
        train: bool,
    ) -> Result<Output> {
        let cfg = &self.cfg;
        let mut stats = Vec::new();
        let emb = self.encode(g, store, features, train, &mut stats)?;
        let es = g.shape(emb).to_vec();
        let x = match (cfg.variant, angles) {
            (Variant::Adoa, None) => emb,
            (Variant::Mdoa, Some(a)) => {
                let want = [es[0], es[1], cfg.angle_input_dim()];
                if g.shape(a) != want {
                    return Err(Error::shape("mdoa_forward", format!("angles {:?}, expected {want:?}", g.shape(a))));
                }
                validate_angle_values(g.value(a).data(), cfg.max_speakers)?;
                let (w, b) = (g.param(store, "angle.proj.w")?, g.param(store, "angle.proj.b")?);
                let proj = g.linear(a, w, Some(b))?;
                g.concat(&[emb, proj])?
            }
            (Variant::Adoa, Some(_)) => {
                return Err(Error::InvalidArgument("the audio-only model takes no angle input".into()))
            }
            (Variant::Mdoa, None) => {
                return Err(Error::InvalidArgument("the angle-conditioned model needs an angle input".into()))
            }
        };
        let h = self.mstcn(g, store, x, train, &mut stats)?;
        let (n, l, slots) = (es[0], es[1], cfg.max_speakers);
        let theta = if cfg.variant == Variant::Adoa {
            let (w, b) = (g.param(store, "head.doa.w")?, g.param(store, "head.doa.b")?);
            let t = g.linear(h, w, Some(b))?;
            let t = g.reshape(t, &[n, l, slots, 2])?;
            Some(g.l2_normalize_rows(t)?)
        } else {
            None
        };
        let (w, b) = (g.param(store, "head.vad.w")?, g.param(store, "head.vad.b")?);
        let logits = g.linear(h, w, Some(b))?;
        let y_hat = g.sigmoid(logits);
        Ok(Output { theta, y_hat, bn_stats: stats })
    }

    /// Splits graph outputs into per-sample predictions.
    pub fn predictions<T: Real>(&self, g: &Graph<T>, out: &Output) -> Vec<Prediction> {
        let ys = g.shape(out.y_hat);
        let (n, l, s) = (ys[0], ys[1], ys[2]);
        let y = g.value(out.y_hat).data();
        let th = out.theta.map(|t| g.value(t).data());
        (0..n)
            .map(|i| Prediction {
                n_frames: l,
                slots: s,
                y_hat: y[i * l * s..(i + 1) * l * s].iter().map(|v| v.f64()).collect(),
                theta_deg: th.map(|th| {
                    th[i * l * s * 2..(i + 1) * l * s * 2].chunks(2).map(|p| decode_azimuth(p[0].f64(), p[1].f64())).collect()
                }),
            })
            .collect()
    }
}

/// Blends batch statistics into the running averages:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, BnStats<f64>)]) -> Result<()> {
    let mom = BN_MOMENTUM;
    for (name, st) in stats {
        for (suffix, batch) in [("mean", &st.mean), ("var", &st.var)] {
            let key = format!("{name}.{suffix}");
            let buf = store.buffer_mut(&key).ok_or_else(|| Error::Config(format!("missing buffer {key}")))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = T::of((1.0 - mom) * r.f64() + mom * b);
            }
        }
    }
    Ok(())
}

fn validate_angle_values<T: Real>(data: &[T], slots: usize) -> Result<()> {
    for (i, v) in data.chunks(ANGLE_FEATURES).enumerate() {
        let (c, s, valid) = (v[0].f64(), v[1].f64(), v[2].f64());
        let ok = if valid == 1.0 {
            ((c * c + s * s) - 1.0).abs() <= 1e-3
        } else {
            valid == 0.0 && c == 0.0 && s == 0.0
        };
        if !ok {
            return Err(Error::Validation(format!(
                "angle input slot {} of row {}: (cos {c}, sin {s}, valid {valid}) is not a valid encoding",
                i % slots,
                i / slots
            )));
        }
    }
    Ok(())
}

/// Slot order that sorts speakers by ascending mean azimuth over the
/// frames where their azimuth is known (ties keep the original order).
pub fn canonical_order(labels: &LabelTensor) -> Vec<usize> {
    let mean = |s: usize| {
        let vals: Vec<f64> = (0..labels.n_frames()).map(|t| labels.theta(t, s)).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            f64::INFINITY
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mut order: Vec<usize> = (0..labels.n_speakers()).collect();
    let keys: Vec<f64> = order.iter().map(|&s| mean(s)).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}

/// Angle input `[L, 3·slots]` for canonically ordered labels: each speaker
/// slot carries `(cos θ, sin θ, 1)` on every frame with a known azimuth,
/// everything else is zero.
pub fn encode_angles(labels: &LabelTensor, slots: usize) -> Result<Vec<f64>> {
    if labels.n_speakers() > slots {
        return Err(Error::Validation(format!("{} speakers exceed {slots} slots", labels.n_speakers())));
    }
    let mut out = vec![0.0; labels.n_frames() * slots * ANGLE_FEATURES];
    for t in 0..labels.n_frames() {
        for s in 0..labels.n_speakers() {
            let th = labels.theta(t, s);
            if th.is_finite() {
                let r = th.to_radians();
                let o = (t * slots + s) * ANGLE_FEATURES;
                out[o] = r.cos();
                out[o + 1] = r.sin();
                out[o + 2] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Validates a flat angle input: unit `(cos, sin)` on valid slots and all
/// zeros elsewhere.
pub fn validate_angle_input(data: &[f64], slots: usize) -> Result<()> {
    if data.len() % (slots * ANGLE_FEATURES) != 0 {
        return Err(Error::shape("angle_input", format!("{} values is not a multiple of {}", data.len(), slots * 3)));
    }
    validate_angle_values(data, slots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            base_channels: 2,
            blocks_per_layer: 1,
            tcn_channels: 12,
            tcn_blocks: 2,
            tcn_modules_per_block: 2,
            angle_dim: 4,
            in_planes: 2,
            n_mels: 8,
            frames_per_label: 2,
            ..Default::default()
        }
    }

    fn features(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, t: usize) -> Tensor<f64> {
        let len = n * cfg.in_planes * t * cfg.n_mels;
        Tensor::new(&[n, cfg.in_planes, t, cfg.n_mels], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent count: conv weights, BN affine pairs, linear layers.
    fn count_params(cfg: &ModelConfig) -> usize {
        let c = |l: usize| cfg.base_channels << l;
        let mut n = c(0) * cfg.in_planes * 9 + 2 * c(0);
        let mut cin = c(0);
        for l in 0..4 {
            let co = c(l);
            n += cin * co * 9 + 2 * co + co * co * 9 + 2 * co + cin * co + 2 * co;
            n += (cfg.blocks_per_layer - 1) * (co * co * 9 * 2 + 4 * co);
            cin = co;
        }
        let d = cfg.tcn_channels;
        let mut tin = 8 * cfg.base_channels;
        if cfg.variant == Variant::Mdoa {
            n += cfg.angle_dim * (cfg.max_speakers * 3 + 1);
            tin += cfg.angle_dim;
        }
        n += d * (tin + 1);
        let per_module: usize =
            cfg.tcn_kernels.iter().zip(cfg.branch_widths()).map(|(k, w)| w * k * d + w).sum::<usize>() + 2 * d;
        n += cfg.tcn_blocks * cfg.tcn_modules_per_block * per_module;
        if cfg.variant == Variant::Adoa {
            n += 12 * (d + 1);
        }
        n + 6 * (d + 1)
    }

    #[test]
    fn branch_split_is_86_85_85() {
        assert_eq!(ModelConfig::default().branch_widths(), vec![86, 85, 85]);
        assert_eq!(micro(Variant::Adoa).branch_widths(), vec![4, 4, 4]);
    }

    #[test]
    fn parameter_counts_match_independent_formula() {
        for variant in [Variant::Adoa, Variant::Mdoa] {
            for cfg in [micro(variant), ModelConfig::default().with_variant(variant)] {
                let m = Model::new(cfg.clone()).unwrap();
                let a = m.init::<f32>(1).numel();
                assert_eq!(a, m.init::<f32>(2).numel());
                assert_eq!(a, count_params(&cfg), "{cfg:?}");
            }
        }
    }

    #[test]
    fn sweep_variants_construct() {
        for (name, c, b) in ENCODER_SWEEP {
            for v in [Variant::Adoa, Variant::Mdoa] {
                let cfg = ModelConfig::sweep(name, v).unwrap();
                assert_eq!((cfg.base_channels, cfg.blocks_per_layer), (c, b));
                let m = Model::new(cfg.clone()).unwrap();
                assert_eq!(m.init::<f32>(0).numel(), count_params(&cfg));
            }
        }
        assert!(ModelConfig::sweep("Channel7_Block9", Variant::Adoa).is_err());
    }

    #[test]
    fn encoder_output_shape() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f32>(0);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 6, 100, 64]));
        let e = m.encode(&mut g, &store, x, false, &mut Vec::new()).unwrap();
        assert_eq!(g.shape(e), &[1, 10, 128]);
        // zero input leaves only the bias path: all frames identical
        let v = g.value(e).data();
        assert!(v.iter().all(|x| x.is_finite()));
        for t in 1..10 {
            assert_eq!(&v[t * 128..(t + 1) * 128], &v[..128]);
        }
        let bad = g.input(Tensor::zeros(&[1, 6, 95, 64]));
        assert!(m.encode(&mut g, &store, bad, false, &mut Vec::new()).is_err());
    }

    #[test]
    fn eval_forward_is_batch_independent() {
        let cfg = micro(Variant::Adoa);
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f64>(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = features(&mut rng, &cfg, 1, 8);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(&[2, cfg.in_planes, 8, cfg.n_mels], data).unwrap();
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(t);
            let out = m.forward(&mut g, &store, x, None, false).unwrap();
            m.predictions(&g, &out)
        };
        let a = run(one);
        let b = run(two);
        assert_eq!(b[0], a[0]);
        assert_eq!(b[1], a[0]);
    }

    #[test]
    fn adoa_outputs_are_unit_vectors_and_probabilities() {
        let cfg = micro(Variant::Adoa);
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f64>(4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut g = Graph::new();
            let x = g.input(features(&mut rng, &cfg, 2, 6));
            let out = m.forward(&mut g, &store, x, None, true).unwrap();
            (g.value(out.theta.unwrap()).clone(), g.value(out.y_hat).clone())
        };
        let (theta, y) = run();
        for p in theta.data().chunks(2) {
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-6);
        }
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(run(), (theta, y));
    }

    #[test]
    fn mdoa_accepts_empty_angles_and_rejects_bad_encodings() {
        let cfg = micro(Variant::Mdoa);
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f64>(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(features(&mut rng, &cfg, 1, 4));
        let none = g.input(Tensor::zeros(&[1, 2, 18]));
        let out = m.forward(&mut g, &store, x, Some(none), false).unwrap();
        assert!(out.theta.is_none());
        assert!(g.value(out.y_hat).data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        let mut bad = vec![0.0; 36];
        bad[0] = 0.5;
        bad[2] = 1.0;
        let bad = g.input(Tensor::new(&[1, 2, 18], bad).unwrap());
        assert!(matches!(m.forward(&mut g, &store, x, Some(bad), false), Err(Error::Validation(_))));
        assert!(m.forward(&mut g, &store, x, None, false).is_err());
    }

    #[test]
    fn canonical_sort_makes_forward_order_free() {
        let cfg = micro(Variant::Mdoa);
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f64>(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = features(&mut rng, &cfg, 1, 4);
        let mut lab = LabelTensor::new(0.1, vec![7, 9, 11], 2).unwrap();
        for t in 0..2 {
            lab.set(t, 0, true, 120.0);
            lab.set(t, 1, t == 0, 40.0);
            lab.set(t, 2, false, 75.0);
        }
        let swapped = lab.reorder(&[2, 0, 1]).unwrap();
        let run = |l: &LabelTensor| {
            let l = l.reorder(&canonical_order(l)).unwrap();
            let a = encode_angles(&l, 6).unwrap();
            let mut g = Graph::new();
            let x = g.input(feats.clone());
            let a = g.input(Tensor::new(&[1, 2, 18], a).unwrap());
            let out = m.forward(&mut g, &store, x, Some(a), false).unwrap();
            (l.speaker_ids.clone(), m.predictions(&g, &out))
        };
        let (ids_a, pa) = run(&lab);
        let (ids_b, pb) = run(&swapped);
        assert_eq!(ids_a, vec![9, 11, 7]);
        assert_eq!(ids_a, ids_b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn angle_encoding_contract() {
        let mut lab = LabelTensor::new(0.1, vec![0, 1], 3).unwrap();
        lab.set(0, 0, true, 30.0);
        lab.set(1, 1, false, 150.0);
        let a = encode_angles(&lab, 6).unwrap();
        validate_angle_input(&a, 6).unwrap();
        assert!((a[0] - 30f64.to_radians().cos()).abs() < 1e-15);
        assert_eq!(a[2], 1.0);
        // frame 2 has no known azimuths at all
        assert!(a[36..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_reflects_into_upper_half() {
        assert!((decode_azimuth(0.0, 1.0) - 90.0).abs() < 1e-12);
        assert!((decode_azimuth(0.5, -(0.75f64.sqrt())) - 60.0).abs() < 1e-9);
        assert!((decode_azimuth(-1.0, 0.0) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn tcn_receptive_field_is_49_frames() {
        let cfg = ModelConfig { tcn_blocks: 4, tcn_modules_per_block: 2, ..micro(Variant::Adoa) };
        let m = Model::new(cfg.clone()).unwrap();
        let store = m.init::<f64>(7);
        let t = 80;
        let run = |bump: f64| {
            let mut x = vec![0.1; t * 16];
            x[40 * 16..41 * 16].iter_mut().for_each(|v| *v += bump);
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(&[1, t, 16], x).unwrap());
            let h = m.mstcn(&mut g, &store, xv, false, &mut Vec::new()).unwrap();
            assert_eq!(g.shape(h), &[1, t, 12]);
            g.value(h).data().to_vec()
        };
        let (a, b) = (run(0.0), run(1.0));
        let changed: Vec<usize> =
            (0..t).filter(|&f| a[f * 12..(f + 1) * 12] != b[f * 12..(f + 1) * 12]).collect();
        assert!(changed.len() <= 49, "{}", changed.len());
        assert!(changed.iter().all(|&f| (16..=64).contains(&f)));
    }

    #[test]
    fn zeroed_tcn_modules_pass_the_projection_through() {
        let cfg = micro(Variant::Adoa);
        let m = Model::new(cfg.clone()).unwrap();
        let mut store = m.init::<f64>(8);
        let names: Vec<String> = store.params().keys().filter(|k| k.starts_with("tcn.block")).cloned().collect();
        for k in names {
            if k.ends_with(".w") || k.ends_with(".b") || k.ends_with(".beta") {
                store.get_mut(&k).unwrap().data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(&[1, 3, 16], x).unwrap());
        let h = m.mstcn(&mut g, &store, xv, false, &mut Vec::new()).unwrap();
        let (w, b) = (g.param(&store, "tcn.in.w").unwrap(), g.param(&store, "tcn.in.b").unwrap());
        let p = g.linear(xv, w, Some(b)).unwrap();
        assert_eq!(g.value(h).data(), g.value(p).data());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = micro(Variant::Adoa);
        let m = Model::new(cfg.clone()).unwrap();
        let mut store = m.init::<f64>(9);
        let stats = vec![(
            "stem.bn".to_string(),
            BnStats { mean: vec![1.0, 2.0], var: vec![3.0, 5.0] },
        )];
        update_running_stats(&mut store, &stats).unwrap();
        let mean = store.buffer("stem.bn.mean").unwrap().data();
        let var = store.buffer("stem.bn.var").unwrap().data();
        assert!((mean[0] - 0.1).abs() < 1e-12 && (mean[1] - 0.2).abs() < 1e-12);
        assert!((var[0] - 1.2).abs() < 1e-12 && (var[1] - 1.4).abs() < 1e-12);
    }
}
