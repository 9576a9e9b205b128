use std::collections::BTreeMap;

use super::tensor::{gemm, Real, Tensor};
use super::ParamStore;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics from a training-mode batch norm; `var` is
/// unbiased, as used for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

/// Epsilon inside the row norm of `l2_normalize_rows`.
const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize) },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, axis: usize, train: bool, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    MeanPoolFreq { x: Var },
    MeanPoolTime { x: Var, group: usize },
    L2Normalize { x: Var },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    WeightedSum { x: Var, w: Vec<T> },
    SquareSum { x: Var },
    External { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the record is acyclic and already topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf, keyed by parameter name. Leaves
    /// that received no gradient get zeros.
    pub fn params(&self, shapes: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.get(*v).cloned().unwrap_or_else(|| {
                    Tensor::zeros(shapes.get(name).map(|t| t.shape()).unwrap_or(&[]))
                });
                (name.clone(), g)
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Column matrix of one NCHW sample: rows `(c, i, j)`, columns `(oh, ow)`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let ncol = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((ci * kh + i) * kw + j) * ncol..][..ncol];
                for oh in 0..ho {
                    let ih = (oh * stride.0 + i) as isize - pad.0 as isize;
                    let out = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + ih as usize) * w..][..w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * stride.1 + j) as isize - pad.1 as isize;
                        *o = if iw < 0 || iw >= w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let ncol = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((ci * kh + i) * kw + j) * ncol..][..ncol];
                for oh in 0..ho {
                    let ih = (oh * stride.0 + i) as isize - pad.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + ih as usize) * w..][..w];
                    for ow in 0..wo {
                        let iw = (ow * stride.1 + j) as isize - pad.1 as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix of channels-last sequences `[N, T, C]` for a same-padded
/// kernel of odd size `k`: rows `(n, t)`, columns `(j, c)`.
fn seq_im2col<T: Real>(x: &[T], n: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let mut cols = vec![T::zero(); n * t * k * c];
    for b in 0..n {
        for ti in 0..t {
            let row = &mut cols[(b * t + ti) * k * c..][..k * c];
            for j in 0..k {
                let src = ti as isize + j as isize - p as isize;
                if src >= 0 && (src as usize) < t {
                    row[j * c..(j + 1) * c].copy_from_slice(&x[(b * t + src as usize) * c..][..c]);
                }
            }
        }
    }
    cols
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf holding `t`; tracked when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad;
        self.push(t, Op::Leaf, g)
    }

    /// Constant leaf.
    pub fn input(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf for parameter `name`; repeated requests return the same
    /// leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store.get(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.push(t.clone().with_grad(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`
    /// and optional bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "zero stride"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride.0, pad.0), conv_out(wd, kw, stride.1, pad.1)) else {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        };
        let krows = c * kh * kw;
        let ncol = ho * wo;
        let mut out = vec![T::zero(); n * o * ncol];
        let mut cols = vec![T::zero(); krows * ncol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                im2col(&xv[s * c * h * wd..][..c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                gemm(false, false, o, ncol, krows, T::one(), wv, &cols, T::zero(), &mut out[s * o * ncol..][..o * ncol]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for chunk in out.chunks_mut(ncol).enumerate() {
                    let bias = bv[chunk.0 % o];
                    chunk.1.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.needs(&deps);
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, g))
    }

    /// Same-padded 1-D cross-correlation over time of channels-last
    /// sequences `x: [N, T, C]` with `w: [O, k, C]` (odd `k`); output
    /// `[N, T, O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[2] || ws[1] % 2 == 0 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weight {ws:?} (need [N,T,C] and [O,odd k,C])")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv1d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (n, t, c) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[1]);
        let cols = seq_im2col(self.value(x).data(), n, t, c, k);
        let mut out = vec![T::zero(); n * t * o];
        gemm(false, true, n * t, o, k * c, T::one(), &cols, self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.needs(&deps);
        Ok(self.push(Tensor::new(&[n, t, o], out)?, Op::Conv1d { x, w, b }, g))
    }

    /// `x·wᵀ + b` over the last axis; `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (fin, fout) = (ws[1], ws[0]);
        let m = self.value(x).numel() / fin;
        let mut out = vec![T::zero(); m * fout];
        gemm(false, true, m, fout, fin, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.needs(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, g))
    }

    /// Per-channel normalization along `axis` (1 for NCHW, the last axis for
    /// channels-last sequences) followed by the affine `gamma·x̂ + beta`.
    /// Returns batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("batch_norm", format!("axis {axis} for input {xs:?}")));
        }
        let c = xs[axis];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} / beta {:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let count = outer * inner;
        let xv = self.value(x).data();
        let idx = |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::shape("batch_norm", format!("training mode needs > 1 value per channel, got {count}")));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            s += xv[idx(o, ch, i)].f64();
                        }
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = xv[idx(o, ch, i)].f64() - m;
                            q += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                let stats = BnStats {
                    mean: mean.iter().map(|&v| T::of(v)).collect(),
                    var: var.iter().map(|&v| T::of(v * count as f64 / (count - 1) as f64)).collect(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats of length {} for {c} channels", mean.len())));
                }
                (mean.iter().map(|v| v.f64()).collect(), var.iter().map(|v| v.f64()).collect(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = idx(o, ch, 0);
                for i in 0..inner {
                    let h = (xv[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let g = self.needs(&[x, gamma, beta]);
        let train = stats.is_some();
        let v = self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNorm { x, gamma, beta, axis, train, xhat, inv_std },
            g,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let g = self.needs(&[x]);
        self.push(out, Op::Relu { x }, g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let g = self.needs(&[x]);
        self.push(out, Op::Sigmoid { x }, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(self.shape(a), data)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, g))
    }

    /// Mean over the frequency axis of `[N, C, H, W]`, returned channels-last
    /// as `[N, H, C]`.
    pub fn mean_pool_freq(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[3] == 0 {
            return Err(Error::shape("mean_pool_freq", format!("input {xs:?} (need [N,C,H,W>0])")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let scale = T::one() / T::of(w as f64);
        let mut out = vec![T::zero(); n * h * c];
        for s in 0..n {
            for ch in 0..c {
                for r in 0..h {
                    let row = &xv[((s * c + ch) * h + r) * w..][..w];
                    out[(s * h + r) * c + ch] = row.iter().copied().sum::<T>() * scale;
                }
            }
        }
        let g = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, h, c], out)?, Op::MeanPoolFreq { x }, g))
    }

    /// Mean over consecutive groups of `group` time steps of `[N, T, C]`.
    pub fn mean_pool_time(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || group == 0 || xs[1] % group != 0 {
            return Err(Error::shape("mean_pool_time", format!("input {xs:?} with group {group}")));
        }
        let (n, t, c) = (xs[0], xs[1], xs[2]);
        let tl = t / group;
        let xv = self.value(x).data();
        let scale = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); n * tl * c];
        for s in 0..n {
            for l in 0..tl {
                let dst = &mut out[(s * tl + l) * c..][..c];
                for k in 0..group {
                    let src = &xv[(s * t + l * group + k) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        let g = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, tl, c], out)?, Op::MeanPoolTime { x, group }, g))
    }

    /// Scales every row along the last axis to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&d) = xs.last().filter(|&&d| d > 0) else {
            return Err(Error::shape("l2_normalize_rows", format!("input {xs:?}")));
        };
        let eps2 = T::of(L2_EPS * L2_EPS);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps2).sqrt();
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let g = self.needs(&[x]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::L2Normalize { x }, g))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let lead = self.shape(*first).to_vec();
        if lead.is_empty() {
            return Err(Error::shape("concat", "scalar input"));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(Error::shape("concat", format!("{s:?} does not match leading dims {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let g = self.needs(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec() }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape { x }, g))
    }

    /// Scalar `Σ w·x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        same_shape("weighted_sum", self.shape(x), w.shape())?;
        let s = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let g = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.data().to_vec() }, g))
    }

    /// Scalar `Σ x²`.
    pub fn square_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let g = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SquareSum { x }, g)
    }

    /// Scalar node carrying a loss evaluated outside the graph: its value is
    /// `value` and its gradient with respect to `x` is `grad`.
    pub fn external_loss(&mut self, x: Var, value: T, grad: &Tensor<T>) -> Result<Var> {
        same_shape("external_loss", self.shape(x), grad.shape())?;
        let g = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad: grad.data().to_vec() }, g))
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let (krows, ncol) = (c * kh * kw, ho * wo);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); krows * ncol];
                let mut dw = vec![T::zero(); wv.len()];
                let want_x = self.wants(*x);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dcols = if want_x { vec![T::zero(); krows * ncol] } else { Vec::new() };
                for s in 0..n {
                    let dys = &dy[s * o * ncol..][..o * ncol];
                    if self.wants(*w) {
                        im2col(&xv[s * c * h * wd..][..c * h * wd], c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                        gemm(false, true, o, krows, ncol, T::one(), dys, &cols, T::one(), &mut dw);
                    }
                    if want_x {
                        gemm(true, false, krows, ncol, o, T::one(), wv, dys, T::zero(), &mut dcols);
                        col2im(&dcols, c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut dx[s * c * h * wd..][..c * h * wd]);
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); o];
                    for (k, chunk) in dy.chunks(ncol).enumerate() {
                        db[k % o] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, b, Tensor::new(&[o], db)?);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, t, c) = (xs[0], xs[1], xs[2]);
                let (o, k) = (ws[0], ws[1]);
                if self.wants(*w) {
                    let cols = seq_im2col(self.value(*x).data(), n, t, c, k);
                    let mut dw = vec![T::zero(); o * k * c];
                    gemm(true, false, o, k * c, n * t, T::one(), dy, &cols, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); n * t * k * c];
                    gemm(false, false, n * t, k * c, o, T::one(), dy, self.value(*w).data(), T::zero(), &mut dcols);
                    let p = k / 2;
                    let mut dx = vec![T::zero(); n * t * c];
                    for s in 0..n {
                        for ti in 0..t {
                            let row = &dcols[(s * t + ti) * k * c..][..k * c];
                            for j in 0..k {
                                let src = ti as isize + j as isize - p as isize;
                                if src >= 0 && (src as usize) < t {
                                    let dst = &mut dx[(s * t + src as usize) * c..][..c];
                                    dst.iter_mut().zip(&row[j * c..(j + 1) * c]).for_each(|(d, &v)| *d += v);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accumulate(grads, b, Tensor::new(&[o], column_sums(dy, o))?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (fout, fin) = (ws[0], ws[1]);
                let m = self.value(*x).numel() / fin;
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(true, false, fout, fin, m, T::one(), dy, self.value(*x).data(), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * fin];
                    gemm(false, false, m, fin, fout, T::one(), dy, self.value(*w).data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accumulate(grads, b, Tensor::new(&[fout], column_sums(dy, fout))?);
                }
            }
            Op::BatchNorm { x, gamma, beta, axis, train, xhat, inv_std } => {
                let xs = self.shape(*x);
                let c = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            dgamma[ch] += dy[base + i] * xhat[base + i];
                            dbeta[ch] += dy[base + i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let count = T::of((outer * inner) as f64);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            for i in 0..inner {
                                dx[base + i] = if *train {
                                    k * (dy[base + i] - (dbeta[ch] + xhat[base + i] * dgamma[ch]) / count)
                                } else {
                                    k * dy[base + i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = dy.iter().zip(y).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = dy.iter().zip(y).map(|(&g, &v)| g * v * (T::one() - v)).collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, gy.clone());
                    }
                }
            }
            Op::MeanPoolFreq { x } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let scale = T::one() / T::of(w as f64);
                let mut dx = vec![T::zero(); n * c * h * w];
                for s in 0..n {
                    for ch in 0..c {
                        for r in 0..h {
                            let g = dy[(s * h + r) * c + ch] * scale;
                            dx[((s * c + ch) * h + r) * w..][..w].fill(g);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::MeanPoolTime { x, group } => {
                let xs = self.shape(*x);
                let (n, t, c) = (xs[0], xs[1], xs[2]);
                let tl = t / group;
                let scale = T::one() / T::of(*group as f64);
                let mut dx = vec![T::zero(); n * t * c];
                for s in 0..n {
                    for l in 0..tl {
                        let src = &dy[(s * tl + l) * c..][..c];
                        for k in 0..*group {
                            let dst = &mut dx[(s * t + l * group + k) * c..][..c];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = g * scale);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::L2Normalize { x } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let y = node.value.data();
                let eps2 = T::of(L2_EPS * L2_EPS);
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, (yr, gr)), xr) in dx.chunks_mut(d).zip(y.chunks(d).zip(dy.chunks(d))).zip(xv.chunks(d)) {
                    let n = (xr.iter().map(|&v| v * v).sum::<T>() + eps2).sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dxr[k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Concat { parts } => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p);
                    let w = s[s.len() - 1];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + offset..][..w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(s, dp)?);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, gy.clone().reshape(self.shape(*x))?);
            }
            Op::WeightedSum { x, w } => {
                let g = dy[0];
                let dx = w.iter().map(|&v| v * g).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::SquareSum { x } => {
                let g = dy[0] + dy[0];
                let dx = self.value(*x).data().iter().map(|&v| v * g).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::External { x, grad } => {
                let g = dy[0];
                let dx = grad.iter().map(|&v| v * g).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(dy: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in dy.chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}
