//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. Convolutions use
//! im2col followed by a GEMM and recompute the column buffer on the way
//! back instead of caching it.

use crate::error::{Result, TowerError};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter in a [`crate::nn::ModelState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<S>,
    },
    Add(Var, Var),
    Scale(Var, S),
    Sum(Var),
    InfoNce {
        z: Var,
        zt: Var,
        tau: S,
        coef: Vec<S>,
    },
    Mse {
        pred: Var,
        target: Tensor<S>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<S>,
        labels: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        target: Tensor<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    by_param: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(p, g)| (*p, g))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn global_norm(&self) -> S {
        self.by_param
            .iter()
            .fold(S::zero(), |a, (_, g)| a + g.sq_norm())
            .sqrt()
    }

    pub fn scale(&mut self, s: S) {
        self.by_param.iter_mut().for_each(|(_, g)| g.scale(s));
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().all(|(_, g)| g.all_finite())
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn shape4(t: &[usize]) -> (usize, usize, usize, usize) {
    (t[0], t[1], t[2], t[3])
}

/// `cols[(ci*k + ky)*k + kx][y*w + x] = x[ci][y+ky-pad][x+kx-pad]`, zero outside.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(S::zero());
                    out[x_hi..].fill(S::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let ddx = kx as isize - pad as isize;
                let x_lo = (-ddx).max(0) as usize;
                let x_hi = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, &g) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, id: ParamId, value: Tensor<S>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// `x: N x C x H x W`, `w: O x C x K x K`, `b: O`; stride 1, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(TowerError::Usage(format!(
                "conv2d weight {ws:?} / bias {:?} incompatible with input channels {c}",
                self.shape(b)
            )));
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || 2 * pad != k - 1 {
            return Err(TowerError::Usage(format!(
                "conv2d supports same-size kernels only (k={k}, pad={pad})"
            )));
        }
        let hw = h * wd;
        let ck = c * k * k;
        let mut out = Tensor::zeros(&[n, o, h, wd]);
        let mut cols = vec![S::zero(); ck * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..n {
                let dst = &mut od[i * o * hw..(i + 1) * o * hw];
                for (oc, &bias) in bv.iter().enumerate() {
                    dst[oc * hw..(oc + 1) * hw].fill(bias);
                }
                im2col(
                    &xv[i * c * hw..(i + 1) * c * hw],
                    c,
                    h,
                    wd,
                    k,
                    pad,
                    &mut cols,
                );
                S::gemm(
                    o,
                    ck,
                    hw,
                    S::one(),
                    wv,
                    ck as isize,
                    1,
                    &cols,
                    hw as isize,
                    1,
                    S::one(),
                    dst,
                    hw as isize,
                    1,
                );
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// `x: N x I`, `w: O x I`, `b: O` -> `N x O`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(TowerError::Usage(format!(
                "dense shapes x {xs:?} w {ws:?} incompatible"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        {
            let bv = self.value(b).data();
            let od = out.data_mut();
            for r in 0..n {
                od[r * o..(r + 1) * o].copy_from_slice(bv);
            }
            // out (n x o) += x (n x i) * w^T (i x o)
            S::gemm(
                n,
                i,
                o,
                S::one(),
                self.value(x).data(),
                i as isize,
                1,
                self.value(w).data(),
                1,
                i as isize,
                S::one(),
                od,
                o as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            Tensor::new(
                v.shape().to_vec(),
                v.data().iter().map(|&a| a.max(S::zero())).collect(),
            )
            .expect("same shape")
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            Tensor::new(
                v.shape().to_vec(),
                v.data().iter().map(|&a| sigmoid(a)).collect(),
            )
            .expect("same shape")
        };
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    fn dims4(&self, x: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TowerError::Usage(format!(
                "expected N x C x H x W, got {s:?}"
            )));
        }
        Ok(shape4(s))
    }

    /// 2x2 max pooling, stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TowerError::Config(format!(
                "max_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for p in 0..n * c {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (2 * y) * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * y + dy) * w + 2 * xx + dx;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                        let o = p * oh * ow + y * ow + xx;
                        od[o] = plane[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        od[p * oh * ow + y * ow + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// Channel concatenation of two `N x C x H x W` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.dims4(a)?;
        let (nb, cb, hb, wb) = self.dims4(b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TowerError::Usage(format!(
                "concat of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                data.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
                data.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Spatial mean: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let hw = h * w;
        let inv = S::one() / S::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(S::zero(), |a, &b| a + b) * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Row-wise `x / ||x||` on an `N x E` matrix; a zero row is a numeric error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TowerError::Usage(format!(
                "l2_normalize expects N x E, got {s:?}"
            )));
        }
        let e = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * e);
        for (r, row) in self.value(x).data().chunks(e).enumerate() {
            let norm = row.iter().fold(S::zero(), |a, &b| a + b * b).sqrt();
            if !(norm > S::zero()) || !norm.is_finite() {
                return Err(TowerError::Numeric(format!(
                    "row {r} has norm {norm}; cannot normalize"
                )));
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(s, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Column-wise standardization of an `N x D` matrix with batch
    /// statistics (biased variance, no affine parameters).
    pub fn batch_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TowerError::Usage(format!(
                "batch_norm expects N x D with N >= 1, got {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let inv_n = S::one() / S::lit(n as f64);
        let mut mean = vec![S::zero(); d];
        for row in xd.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v * inv_n;
            }
        }
        let mut var = vec![S::zero(); d];
        for row in xd.chunks(d) {
            for ((q, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *q += (v - m) * (v - m) * inv_n;
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&q| S::one() / (q + eps).sqrt()).collect();
        let data = xd
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((&v, &m), &k)| (v - m) * k)
            })
            .collect();
        let out = Tensor::new(s, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BatchNorm { x, inv_std }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TowerError::Usage(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// InfoNCE over unit-norm embeddings `z` (anchors) and `zt` (their
    /// transformed views). For anchor `n` the positive is `zt[n]`; the
    /// negatives are every other row of `z` and `zt`. With `symmetric`, the
    /// views also act as anchors and the loss averages over `2N` anchors.
    pub fn info_nce(&mut self, z: Var, zt: Var, tau: S, symmetric: bool) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.len() != 2 || self.shape(zt) != s.as_slice() {
            return Err(TowerError::Usage(format!(
                "info_nce shapes {s:?} / {:?}",
                self.shape(zt)
            )));
        }
        if !(tau > S::zero()) {
            return Err(TowerError::Config(format!("temperature {tau} must be > 0")));
        }
        let (n, e) = (s[0], s[1]);
        if n < 2 {
            return Err(TowerError::Contract(format!(
                "contrastive loss needs N >= 2, got {n}"
            )));
        }
        let m = 2 * n;
        // u = [z; zt]
        let mut u = Vec::with_capacity(m * e);
        u.extend_from_slice(self.value(z).data());
        u.extend_from_slice(self.value(zt).data());
        let mut sim = vec![S::zero(); m * m];
        S::gemm(
            m,
            e,
            m,
            S::one() / tau,
            &u,
            e as isize,
            1,
            &u,
            1,
            e as isize,
            S::zero(),
            &mut sim,
            m as isize,
            1,
        );
        let anchors = if symmetric { m } else { n };
        // coef[a][c] = d loss / d sim[a][c]
        let mut coef = vec![S::zero(); m * m];
        let mut loss = S::zero();
        let inv_a = S::one() / S::lit(anchors as f64);
        for a in 0..anchors {
            let idx = a % n;
            let pos = if a < n { n + idx } else { idx };
            let row = &sim[a * m..(a + 1) * m];
            let included = |c: usize| c == pos || (c % n != idx);
            let max = (0..m)
                .filter(|&c| included(c))
                .map(|c| row[c])
                .fold(S::neg_infinity(), S::max);
            let denom = (0..m)
                .filter(|&c| included(c))
                .fold(S::zero(), |acc, c| acc + (row[c] - max).exp());
            let lse = max + denom.ln();
            loss += lse - row[pos];
            for c in (0..m).filter(|&c| included(c)) {
                let p = (row[c] - lse).exp();
                coef[a * m + c] = (p - if c == pos { S::one() } else { S::zero() }) * inv_a;
            }
        }
        let out = Tensor::scalar(loss * inv_a);
        let rg = self.rg(z) || self.rg(zt);
        Ok(self.push(out, Op::InfoNce { z, zt, tau, coef }, rg))
    }

    /// Sum over the batch of per-sample mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: Tensor<S>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(TowerError::Data(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let n = target.batch().max(1);
        let per = target.len() / n;
        let inv = S::one() / S::lit(per as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .fold(S::zero(), |a, (&p, &t)| a + (p - t) * (p - t))
            * inv;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TowerError::Usage(format!(
                "logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TowerError::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut loss = S::zero();
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let denom = row.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
            let lse = max + denom.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / S::lit(labels.len().max(1) as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits against a `{0,1}` (or soft) target.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<S>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(TowerError::Data(format!(
                "logits {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            )));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .fold(S::zero(), |a, (&l, &t)| {
                a + l.max(S::zero()) - l * t + (S::one() + (-l.abs()).exp()).ln()
            })
            / S::lit(target.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// parameter node reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(TowerError::Usage(
                "backward called on a node that was never recorded".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TowerError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut out = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                out.push((id, g));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        // a parameter bound twice contributes the sum of both uses
        let mut merged: Vec<(ParamId, Tensor<S>)> = Vec::with_capacity(out.len());
        for (id, g) in out {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => merged.push((id, g)),
            }
        }
        Ok(Gradients { by_param: merged })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<S>>],
        v: Var,
        make: impl FnOnce() -> Tensor<S>,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad } => {
                let (n, c, h, wd) = shape4(self.value(*x).shape());
                let ws = self.value(*w).shape();
                let (o, k) = (ws[0], ws[2]);
                let (hw, ck) = (h * wd, c * k * k);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dw = Tensor::zeros(ws);
                let mut db = Tensor::zeros(&[o]);
                let mut dx = if need_x {
                    Tensor::zeros(self.value(*x).shape())
                } else {
                    Tensor::zeros(&[0])
                };
                let mut cols = vec![S::zero(); ck * hw];
                for i in 0..n {
                    let go = &gd[i * o * hw..(i + 1) * o * hw];
                    for (oc, acc) in db.data_mut().iter_mut().enumerate() {
                        *acc += go[oc * hw..(oc + 1) * hw]
                            .iter()
                            .fold(S::zero(), |a, &v| a + v);
                    }
                    if need_w {
                        im2col(
                            &xv[i * c * hw..(i + 1) * c * hw],
                            c,
                            h,
                            wd,
                            k,
                            *pad,
                            &mut cols,
                        );
                        // dw (o x ck) += go (o x hw) * cols^T (hw x ck)
                        S::gemm(
                            o,
                            hw,
                            ck,
                            S::one(),
                            go,
                            hw as isize,
                            1,
                            &cols,
                            1,
                            hw as isize,
                            S::one(),
                            dw.data_mut(),
                            ck as isize,
                            1,
                        );
                    }
                    if need_x {
                        // dcols (ck x hw) = w^T (ck x o) * go (o x hw)
                        S::gemm(
                            ck,
                            o,
                            hw,
                            S::one(),
                            wv,
                            1,
                            ck as isize,
                            go,
                            hw as isize,
                            1,
                            S::zero(),
                            &mut cols,
                            hw as isize,
                            1,
                        );
                        col2im(
                            &cols,
                            c,
                            h,
                            wd,
                            k,
                            *pad,
                            &mut dx.data_mut()[i * c * hw..(i + 1) * c * hw],
                        );
                    }
                }
                self.accumulate(grads, *w, || dw);
                self.accumulate(grads, *b, || db);
                if need_x {
                    self.accumulate(grads, *x, || dx);
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, i) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[0];
                self.accumulate(grads, *w, || {
                    // dw (o x i) = g^T (o x n) * x (n x i)
                    let mut dw = Tensor::zeros(&[o, i]);
                    S::gemm(
                        o,
                        n,
                        i,
                        S::one(),
                        gd,
                        1,
                        o as isize,
                        self.value(*x).data(),
                        i as isize,
                        1,
                        S::zero(),
                        dw.data_mut(),
                        i as isize,
                        1,
                    );
                    dw
                });
                self.accumulate(grads, *b, || {
                    let mut db = Tensor::zeros(&[o]);
                    for row in gd.chunks(o) {
                        for (a, &v) in db.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    db
                });
                self.accumulate(grads, *x, || {
                    // dx (n x i) = g (n x o) * w (o x i)
                    let mut dx = Tensor::zeros(&[n, i]);
                    S::gemm(
                        n,
                        o,
                        i,
                        S::one(),
                        gd,
                        o as isize,
                        1,
                        self.value(*w).data(),
                        i as isize,
                        1,
                        S::zero(),
                        dx.data_mut(),
                        i as isize,
                        1,
                    );
                    dx
                });
            }
            Op::Relu(x) => self.accumulate(grads, *x, || {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gv)| if a > S::zero() { gv } else { S::zero() })
                    .collect();
                Tensor::new(xv.shape().to_vec(), data).expect("same shape")
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, || {
                let y = node.value.data();
                let data = y
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| gv * s * (S::one() - s))
                    .collect();
                Tensor::new(node.value.shape().to_vec(), data).expect("same shape")
            }),
            Op::MaxPool2 { x, argmax } => self.accumulate(grads, *x, || {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let per_out = (h / 2) * (w / 2);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for (o, (&gv, &am)) in gd.iter().zip(argmax).enumerate() {
                    let plane = o / per_out;
                    dd[plane * h * w + am as usize] += gv;
                }
                dx
            }),
            Op::Upsample2(x) => self.accumulate(grads, *x, || {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for p in 0..xs[0] * xs[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dd[p * h * w + (y / 2) * w + xx / 2] += gd[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                dx
            }),
            Op::Concat(a, b) => {
                let (n, ca, h, w) = shape4(self.value(*a).shape());
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let split = |first: bool| {
                    let (off, cc) = if first { (0, ca) } else { (ca, cb) };
                    let mut data = Vec::with_capacity(n * cc * hw);
                    for i in 0..n {
                        let base = i * (ca + cb) * hw + off * hw;
                        data.extend_from_slice(&gd[base..base + cc * hw]);
                    }
                    Tensor::new(vec![n, cc, h, w], data).expect("split shape")
                };
                self.accumulate(grads, *a, || split(true));
                self.accumulate(grads, *b, || split(false));
            }
            Op::GlobalAvgPool(x) => self.accumulate(grads, *x, || {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = S::one() / S::lit(hw as f64);
                let data = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, hw))
                    .collect();
                Tensor::new(xs.to_vec(), data).expect("pool shape")
            }),
            Op::L2Normalize { x, norms } => self.accumulate(grads, *x, || {
                let e = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * e..(r + 1) * e];
                    let gr = &gd[r * e..(r + 1) * e];
                    let dot = yr.iter().zip(gr).fold(S::zero(), |a, (&p, &q)| a + p * q);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                Tensor::new(node.value.shape().to_vec(), dx).expect("same shape")
            }),
            Op::BatchNorm { x, inv_std } => self.accumulate(grads, *x, || {
                // dx = k/N * (N*g - sum(g) - y*sum(g*y)) per column
                let d = inv_std.len();
                let y = node.value.data();
                let n = y.len() / d;
                let mut sg = vec![S::zero(); d];
                let mut sgy = vec![S::zero(); d];
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    for c in 0..d {
                        sg[c] += gr[c];
                        sgy[c] += gr[c] * yr[c];
                    }
                }
                let nn = S::lit(n as f64);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    dx.extend(
                        (0..d).map(|c| (nn * gr[c] - sg[c] - yr[c] * sgy[c]) * inv_std[c] / nn),
                    );
                }
                Tensor::new(node.value.shape().to_vec(), dx).expect("same shape")
            }),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, || {
                let mut t = g.clone();
                t.scale(*s);
                t
            }),
            Op::Sum(x) => {
                self.accumulate(grads, *x, || Tensor::filled(self.value(*x).shape(), gd[0]))
            }
            Op::InfoNce { z, zt, tau, coef } => {
                let s = self.value(*z).shape();
                let (n, e) = (s[0], s[1]);
                let m = 2 * n;
                let mut u = Vec::with_capacity(m * e);
                u.extend_from_slice(self.value(*z).data());
                u.extend_from_slice(self.value(*zt).data());
                // d sim / d u with sim = u u^T / tau: du = (C + C^T) u / tau
                let scale = gd[0] / *tau;
                let sym: Vec<S> = (0..m * m)
                    .map(|idx| coef[idx] + coef[(idx % m) * m + idx / m])
                    .collect();
                let mut du = vec![S::zero(); m * e];
                S::gemm(
                    m,
                    m,
                    e,
                    scale,
                    &sym,
                    m as isize,
                    1,
                    &u,
                    e as isize,
                    1,
                    S::zero(),
                    &mut du,
                    e as isize,
                    1,
                );
                self.accumulate(grads, *z, || {
                    Tensor::new(vec![n, e], du[..n * e].to_vec()).expect("z grad")
                });
                self.accumulate(grads, *zt, || {
                    Tensor::new(vec![n, e], du[n * e..].to_vec()).expect("zt grad")
                });
            }
            Op::Mse { pred, target } => self.accumulate(grads, *pred, || {
                let n = target.batch().max(1);
                let per = target.len() / n;
                let k = S::lit(2.0) * gd[0] / S::lit(per as f64);
                let data = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| k * (p - t))
                    .collect();
                Tensor::new(target.shape().to_vec(), data).expect("same shape")
            }),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => self.accumulate(grads, *logits, || {
                let k = self.value(*logits).shape()[1];
                let inv = gd[0] / S::lit(labels.len().max(1) as f64);
                let mut data: Vec<S> = probs.iter().map(|&p| p * inv).collect();
                for (r, &y) in labels.iter().enumerate() {
                    data[r * k + y] -= inv;
                }
                Tensor::new(self.value(*logits).shape().to_vec(), data).expect("same shape")
            }),
            Op::BceLogits { logits, target } => self.accumulate(grads, *logits, || {
                let inv = gd[0] / S::lit(target.len().max(1) as f64);
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&l, &t)| (sigmoid(l) - t) * inv)
                    .collect();
                Tensor::new(target.shape().to_vec(), data).expect("same shape")
            }),
        }
    }
}
