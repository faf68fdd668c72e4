//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value plus whatever intermediates its backward
//! rule needs; [`Graph::backward`] replays the tape in reverse and adds the
//! resulting gradients into every leaf that requires them.

use crate::kernels::{self, ConvGeom};
use crate::tensor::{Result, Shape, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects used to confirm that the self-check suite detects a
/// broken backward rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the convolution weight gradient by 1.5.
    ConvWeightGrad,
}

/// Per-channel statistics observed by a training-mode batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over N x H x W.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, lo: usize, hi: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu { x: Var },
    Mask { x: Var, mask: Vec<f64> },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some leaf requiring grad is upstream of this node.
    tracked: bool,
}

/// Append-only tape of executed operations. Inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Graph { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        let mut value = t;
        if tracked && value.grad().is_none() {
            let zeros = vec![0.0; value.numel()];
            value.accumulate_grad(&zeros);
        }
        self.push(value, Op::Leaf, tracked)
    }

    /// Leaf holding a copy of `t`'s values, tracked iff `t` requires grad.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = t.detached();
        copy.set_requires_grad(t.requires_grad());
        self.leaf(copy)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn out(dims: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(dims, values).expect("output shape derived from valid inputs")
    }

    /// Elementwise sum. `b` may also be a per-channel vector of length
    /// `a.dims[1]`, broadcast over the batch and spatial axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let broadcast = if ad == bd {
            false
        } else if bd.len() == 1 && ad.len() >= 2 && ad[1] == bd[0] {
            true
        } else {
            return Err(TensorError::ShapeMismatch { op: "add", left: ad, right: bd });
        };
        let av = self.vals(a);
        let bv = self.vals(b);
        let values = if broadcast {
            let (_, c, s) = Shape::new(ad.clone())?.ncs();
            av.iter()
                .enumerate()
                .map(|(i, x)| x + bv[(i / s) % c])
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Self::out(ad, values), Op::Add { a, b, broadcast }, tracked))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad != bd {
            return Err(TensorError::ShapeMismatch { op: "mul", left: ad, right: bd });
        }
        let values = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Self::out(ad, values), Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let d = self.dims(x).to_vec();
        let values = self.vals(x).iter().map(|v| v * factor).collect();
        let tracked = self.tracked(&[x]);
        self.push(Self::out(d, values), Op::Scale { x, factor }, tracked)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    /// Concatenates NCHW tensors along the channel axis, in order.
    /// A single part is returned unchanged.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_channels" })?;
        let [n, _, h, w] = Shape::new(self.dims(first).to_vec())?.nchw("concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = Shape::new(self.dims(p).to_vec())?.nchw("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: self.dims(first).to_vec(),
                    right: self.dims(p).to_vec(),
                });
            }
            total_c += pc;
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let plane = h * w;
        let mut values = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.dims(p)[1];
                values.extend_from_slice(&self.vals(p)[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            Self::out(vec![n, total_c, h, w], values),
            Op::Concat { parts: parts.to_vec() },
            tracked,
        ))
    }

    /// Channels `[lo, hi)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let [n, c, h, w] = Shape::new(self.dims(x).to_vec())?.nchw("slice_channels")?;
        if lo >= hi || hi > c {
            return Err(TensorError::OutOfRange { op: "slice_channels", lo, hi, extent: c });
        }
        let plane = h * w;
        let xv = self.vals(x);
        let mut values = Vec::with_capacity(n * (hi - lo) * plane);
        for b in 0..n {
            values.extend_from_slice(&xv[(b * c + lo) * plane..(b * c + hi) * plane]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Self::out(vec![n, hi - lo, h, w], values), Op::Slice { x, lo, hi }, tracked))
    }

    /// Bias-free cross-correlation of NCHW `x` with OIHW square filters `w`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = Shape::new(self.dims(x).to_vec())?.nchw("conv2d")?;
        let [o, i, kh, kw] = Shape::new(self.dims(w).to_vec())?.nchw("conv2d")?;
        if i != c {
            return Err(TensorError::ChannelMismatch { op: "conv2d", expected: i, got: c });
        }
        if kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.dims(x).to_vec(),
                right: self.dims(w).to_vec(),
            });
        }
        let out_size = |size: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if stride == 0 || span < kh || !(span - kh).is_multiple_of(stride) {
                return Err(TensorError::NonIntegralOutput { size, padding: pad, kernel: kh, stride });
            }
            Ok((span - kh) / stride + 1)
        };
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: o,
            kernel: kh,
            stride,
            pad,
            out_h: out_size(h)?,
            out_w: out_size(wd)?,
        };
        let values = kernels::conv2d_forward(&geom, self.vals(x), self.vals(w));
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(
            Self::out(vec![n, o, geom.out_h, geom.out_w], values),
            Op::Conv2d { x, w, geom },
            tracked,
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xd = self.dims(x);
        if xd.len() < 2 {
            return Err(TensorError::Rank { op: "batch_norm", expected: 4, got: xd.to_vec() });
        }
        let (n, c, s) = Shape::new(xd.to_vec())?.ncs();
        for p in [gamma, beta] {
            if self.dims(p) != [c] {
                return Err(TensorError::ChannelMismatch {
                    op: "batch_norm",
                    expected: self.dims(p).iter().product(),
                    got: c,
                });
            }
        }
        Ok((n, c, s))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch: bool) -> Var {
        let dims = self.dims(x).to_vec();
        let (n, c, s) = Shape::new(dims.clone()).expect("validated").ncs();
        let (xv, gv, bv) = (self.vals(x), self.vals(gamma), self.vals(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        self.push(
            Self::out(dims, y),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch },
            tracked,
        )
    }

    /// Batch-norm standardizing by the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, s) = self.check_bn(x, gamma, beta)?;
        if n * s == 0 {
            return Err(TensorError::Empty { op: "batch_norm" });
        }
        let (mean, var) = kernels::channel_moments(n, c, s, self.vals(x));
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((out, BatchStats { mean, var, count: n * s }))
    }

    /// Batch-norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ChannelMismatch { op: "batch_norm", expected: running_mean.len(), got: c });
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, inv_std, false))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let d = self.dims(x).to_vec();
        let values = self.vals(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let tracked = self.tracked(&[x]);
        self.push(Self::out(d, values), Op::Relu { x }, tracked)
    }

    /// Multiplies by a fixed mask (dropout with the scale folded in).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if mask.len() != self.vals(x).len() {
            return Err(TensorError::ShapeMismatch { op: "mask", left: d, right: vec![mask.len()] });
        }
        let values = self.vals(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Self::out(d, values), Op::Mask { x, mask }, tracked))
    }

    /// Non-overlapping 2x2 mean pooling.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = Shape::new(self.dims(x).to_vec())?.nchw("avg_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { op: "avg_pool2x2", height: h, width: w });
        }
        let values = kernels::avg_pool2x2_forward(n, c, h, w, self.vals(x));
        let tracked = self.tracked(&[x]);
        Ok(self.push(Self::out(vec![n, c, h / 2, w / 2], values), Op::AvgPool2 { x }, tracked))
    }

    /// Mean over the full spatial extent: NCHW -> NC.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = Shape::new(self.dims(x).to_vec())?.nchw("global_avg_pool")?;
        let plane = h * w;
        let values = self
            .vals(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Self::out(vec![n, c], values), Op::GlobalAvgPool { x }, tracked))
    }

    /// `x W^T + b` for `x: N x F`, `W: O x F`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xd, wd, bd) = (self.dims(x).to_vec(), self.dims(w).to_vec(), self.dims(b).to_vec());
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] || bd != [wd[0]] {
            return Err(TensorError::ShapeMismatch { op: "linear", left: xd, right: wd });
        }
        let (n, f, o) = (xd[0], xd[1], wd[0]);
        let mut values: Vec<f64> = (0..n).flat_map(|_| self.vals(b).iter().copied()).collect();
        kernels::gemm(n, f, o, self.vals(x), (f, 1), self.vals(w), (1, f), 1.0, &mut values);
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(Self::out(vec![n, o], values), Op::Linear { x, w, b }, tracked))
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss and
    /// the `N x C` class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let d = self.dims(logits).to_vec();
        if d.len() != 2 || d[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: d,
                right: vec![labels.len()],
            });
        }
        let (n, c) = (d[0], d[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
        }
        let lv = self.vals(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            loss += log_z - (row[label] - max);
        }
        loss /= n as f64;
        let probs_t = Self::out(d, probs.clone());
        let tracked = self.tracked(&[logits]);
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            tracked,
        );
        Ok((v, probs_t))
    }

    /// Back-propagates from a scalar `loss`, adding d(loss)/d(leaf) into
    /// every tracked leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ld = self.dims(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar(ld.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            for (target, delta) in self.node_backward(id, &g) {
                if !self.nodes[target.0].tracked {
                    continue;
                }
                match &mut adj[target.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for (id, g) in adj.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[id].op) {
                self.nodes[id].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Add { a, b, broadcast } => {
                let mut out = vec![(a, g.to_vec())];
                if broadcast {
                    if self.wants(b) {
                        let (_, c, s) = node.value.shape().ncs();
                        let mut gb = vec![0.0; c];
                        for (i, v) in g.iter().enumerate() {
                            gb[(i / s) % c] += v;
                        }
                        out.push((b, gb));
                    }
                } else {
                    out.push((b, g.to_vec()));
                }
                out
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.vals(a), self.vals(b));
                vec![
                    (a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            &Op::Scale { x, factor } => vec![(x, g.iter().map(|v| v * factor).collect())],
            &Op::Sum { x } => vec![(x, vec![g[0]; self.vals(x).len()])],
            Op::Concat { parts } => {
                let d = node.value.dims();
                let (n, total_c, plane) = (d[0], d[1], d[2] * d[3]);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = self.dims(p)[1];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            gp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        out.push((p, gp));
                    }
                    offset += pc;
                }
                out
            }
            &Op::Slice { x, lo, hi } => {
                let d = self.dims(x);
                let (n, c, plane) = (d[0], d[1], d[2] * d[3]);
                let width = (hi - lo) * plane;
                let mut gx = vec![0.0; n * c * plane];
                for b in 0..n {
                    gx[(b * c + lo) * plane..(b * c + hi) * plane]
                        .copy_from_slice(&g[b * width..(b + 1) * width]);
                }
                vec![(x, gx)]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.vals(*x),
                    self.vals(*w),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(mut dw) = dw {
                    if self.fault == Some(Fault::ConvWeightGrad) {
                        dw.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    out.push((*w, dw));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (n, c, s) = node.value.shape().ncs();
                let gv = self.vals(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                let m = (n * s) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        let k = gv[ch] * inv_std[ch];
                        for i in base..base + s {
                            dx[i] = if *batch {
                                k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            &Op::Relu { x } => {
                let xv = self.vals(x);
                vec![(x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Mask { x, mask } => vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            &Op::AvgPool2 { x } => {
                let d = self.dims(x);
                vec![(x, kernels::avg_pool2x2_backward(d[0], d[1], d[2], d[3], g))]
            }
            &Op::GlobalAvgPool { x } => {
                let d = self.dims(x);
                let plane = d[2] * d[3];
                let inv = 1.0 / plane as f64;
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                vec![(x, gx)]
            }
            &Op::Linear { x, w, b } => {
                let (n, f) = (self.dims(x)[0], self.dims(x)[1]);
                let o = self.dims(w)[0];
                let mut out = Vec::new();
                if self.wants(x) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, o, f, g, (o, 1), self.vals(w), (f, 1), 0.0, &mut dx);
                    out.push((x, dx));
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; o * f];
                    kernels::gemm(o, n, f, g, (1, o), self.vals(x), (f, 1), 0.0, &mut dw);
                    out.push((w, dw));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((b, db));
                }
                out
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = self.dims(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= scale;
                }
                vec![(*logits, dl)]
            }
        }
    }
}
