use std::collections::HashMap;

use super::kernels::{conv_backward, conv_forward, ConvGeom};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::{NnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Zero padding on each side of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics of one training-mode batchnorm call, committed to the
/// running buffers after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_id: usize,
    pub var_id: usize,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { x: Var, idx: Vec<usize> },
    Upsample(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<u8>, weights: Vec<T>, total: T },
    WeightedSum { x: Var, coeffs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of a single forward pass. Nodes are appended in creation order, so
/// every parent precedes its children and the reverse of creation order is
/// a valid topological order for backward.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

/// Gradients from one backward pass.
pub struct Grads<T> {
    nodes: Vec<Option<Vec<T>>>,
    /// `(param id, gradient)` for every parameter that takes gradients.
    pub params: Vec<(usize, Vec<T>)>,
}

impl<T> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

fn mismatch(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), bn_updates: Vec::new() }
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

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings parameter `id` onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.takes_grad());
        self.params.insert(id, v);
        v
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub(crate) fn record_bn_update(&mut self, u: BnUpdate<T>) {
        self.bn_updates.push(u);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(mismatch(format!("conv input has {cin} channels, kernel expects {wcin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch(format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(NnError::NonIntegralOutput);
        }
        let span_h = h + pad.top + pad.bottom;
        let span_w = wd + pad.left + pad.right;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(NnError::NonIntegralOutput);
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let out = conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Per-channel normalization over `(N, H, W)`. With `running = None` the
    /// batch statistics are used and returned as `(mean, unbiased var)`;
    /// otherwise the given running statistics are used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(mismatch(format!("batchnorm {name} shape {:?}, expected [{c}]", self.shape(p))));
            }
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(mismatch(format!("running stats length {}/{} for {c} channels", m.len(), v.len())));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut stats = None;
        match running {
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
            None => {
                let mut unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_f64(count as f64);
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..][..hw] {
                            ss += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / T::from_f64(count as f64);
                    unbiased[ch] = ss / T::from_f64(count.max(2) as f64 - 1.0);
                }
                stats = Some((mean.clone(), unbiased));
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: running.is_none() }, ng);
        Ok((v, stats))
    }

    /// 2×2 max pooling, stride 2. Odd extents are padded on the right/bottom
    /// with −∞. Ties go to the first position in row-major window order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (usize::MAX, T::neg_infinity());
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let i = base + y * w + xx;
                            if best.0 == usize::MAX || xd[i] > best.1 {
                                best = (i, xd[i]);
                            }
                        }
                    }
                    out.push(best.1);
                    idx.push(best.0);
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool { x, idx }, ng))
    }

    /// Argmax positions (flat input indices) recorded by a pooling node.
    pub fn pool_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { idx, .. } => Some(idx),
            _ => None,
        }
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                let src = &xd[(plane * h + y / 2) * w..][..w];
                let dst = &mut out[(plane * ho + y) * wo..][..wo];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::Upsample(x), ng))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| mismatch("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut cs = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(mismatch(format!("concat of {:?} with {:?}", self.shape(first), self.shape(v))));
            }
            cs.push(vc);
        }
        let ctot: usize = cs.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (&v, &c) in xs.iter().zip(&cs) {
                out.extend_from_slice(&self.value(v).data()[b * c * hw..][..c * hw]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        let t = Tensor::new(vec![n, ctot, h, w], out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), ng))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = softmax_nchw(self.value(x).data(), n, c, h * w);
        let ng = self.ng(x);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Mean per-pixel categorical cross entropy of `softmax(logits)` against
    /// `labels` (`N·H·W` class ids). With class weights, the mean is weighted
    /// by each pixel's label weight.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], class_weights: Option<&[T]>) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(mismatch(format!("{} labels for {} pixels", labels.len(), n * hw)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(NnError::LabelOutOfRange(bad));
        }
        let weights = match class_weights {
            Some(cw) if cw.len() != c => return Err(mismatch(format!("{} class weights for {c} classes", cw.len()))),
            Some(cw) => cw.to_vec(),
            None => vec![T::one(); c],
        };
        let probs = softmax_nchw(self.value(logits).data(), n, c, hw);
        let mut total = T::zero();
        let mut loss = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let l = labels[b * hw + p] as usize;
                let wl = weights[l];
                total += wl;
                // log-softmax from the logits keeps extreme margins finite
                let base = b * c * hw + p;
                let lg = self.value(logits).data();
                let m = (0..c).map(|k| lg[base + k * hw]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..c).map(|k| (lg[base + k * hw] - m).exp()).sum::<T>().ln();
                loss += wl * (lse - lg[base + l * hw]);
            }
        }
        if total <= T::zero() {
            return Err(mismatch("class weights sum to zero over the batch".into()));
        }
        let ng = self.ng(logits);
        let t = Tensor::scalar(loss / total);
        Ok(self.push(t, Op::CrossEntropy { logits, probs, labels: labels.to_vec(), weights, total }, ng))
    }

    /// `Σ coeffs ⊙ x`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let xd = self.value(x).data();
        if coeffs.len() != xd.len() {
            return Err(mismatch(format!("{} coefficients for {} values", coeffs.len(), xd.len())));
        }
        let s = xd.iter().zip(coeffs).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs: coeffs.to_vec() }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backward_node(node, g, lo);
        }
        let mut params: Vec<(usize, Vec<T>)> = self
            .params
            .iter()
            .filter(|(_, v)| self.ng(**v))
            .map(|(&id, &v)| (id, grads[v.0].clone().unwrap_or_else(|| vec![T::zero(); self.value(v).numel()])))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Grads { nodes: grads, params })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], lo: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (n, cout) = (self.value(*x).shape()[0], self.value(*w).shape()[0]);
                let mut dx = self.ng(*x).then(|| lo[x.0].take().unwrap_or_else(|| vec![T::zero(); self.value(*x).numel()]));
                let mut dw = self.ng(*w).then(|| lo[w.0].take().unwrap_or_else(|| vec![T::zero(); self.value(*w).numel()]));
                let mut db = b
                    .filter(|b| self.ng(*b))
                    .map(|b| lo[b.0].take().unwrap_or_else(|| vec![T::zero(); cout]));
                conv_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    lo[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    lo[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    lo[b.0] = Some(d);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = acc(lo, *x, xd.len());
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.ng(*gamma) {
                    for (d, s) in acc(lo, *gamma, c).iter_mut().zip(&sum_gx) {
                        *d += *s;
                    }
                }
                if self.ng(*beta) {
                    for (d, s) in acc(lo, *beta, c).iter_mut().zip(&sum_g) {
                        *d += *s;
                    }
                }
                if self.ng(*x) {
                    let dx = acc(lo, *x, n * c * hw);
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for i in o..o + hw {
                                dx[i] += if *batch_stats {
                                    k * (g[i] - (sum_g[ch] + xhat[i] * sum_gx[ch]) / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, idx } => {
                let d = acc(lo, *x, self.value(*x).numel());
                for (&i, &gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
            }
            Op::Upsample(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let wo = 2 * w;
                let d = acc(lo, *x, n * c * h * w);
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        let src = &g[(plane * 2 * h + y) * wo..][..wo];
                        let dst = &mut d[(plane * h + y / 2) * w..][..w];
                        for (xo, &gv) in src.iter().enumerate() {
                            dst[xo / 2] += gv;
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let (n, ctot, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.ng(v) {
                        let d = acc(lo, v, n * c * hw);
                        for b in 0..n {
                            let src = &g[(b * ctot + off) * hw..][..c * hw];
                            for (dv, &gv) in d[b * c * hw..][..c * hw].iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let y = node.value.data();
                let d = acc(lo, *x, n * c * hw);
                for b in 0..n {
                    for p in 0..hw {
                        let base = b * c * hw + p;
                        let dot: T = (0..c).map(|k| g[base + k * hw] * y[base + k * hw]).sum();
                        for k in 0..c {
                            let i = base + k * hw;
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, labels, weights, total } => {
                let (n, c, h, w) = self.value(*logits).dims4().expect("rank 4");
                let hw = h * w;
                let d = acc(lo, *logits, n * c * hw);
                let scale = g[0] / *total;
                for b in 0..n {
                    for p in 0..hw {
                        let l = labels[b * hw + p] as usize;
                        let k0 = scale * weights[l];
                        let base = b * c * hw + p;
                        for k in 0..c {
                            let i = base + k * hw;
                            let t = if k == l { T::one() } else { T::zero() };
                            d[i] += k0 * (probs[i] - t);
                        }
                    }
                }
            }
            Op::WeightedSum { x, coeffs } => {
                let d = acc(lo, *x, coeffs.len());
                for (dv, &cv) in d.iter_mut().zip(coeffs) {
                    *dv += g[0] * cv;
                }
            }
        }
    }
}

fn softmax_nchw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let m = (0..c).map(|k| x[base + k * hw]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..c {
                let e = (x[base + k * hw] - m).exp();
                out[base + k * hw] = e;
                s += e;
            }
            for k in 0..c {
                out[base + k * hw] /= s;
            }
        }
    }
    out
}
