//! Layer primitives: bias-free convolution, batch-norm, ReLU, dropout,
//! pooling, the linear classifier and softmax cross-entropy.
//!
//! Layers own their parameters as [`Tensor`]s. To run one, its parameters
//! are bound into a [`Graph`] as leaves (see [`ParamCursor`]) and the layer
//! records its computation on that graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight `r` in `running <- (1 - r) running + r batch`.
pub const BN_RUNNING_RATE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Hands out bound parameter leaves in enumeration order.
#[derive(Debug)]
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        ParamCursor { vars, pos: 0 }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.vars.len()
    }
}

fn he_normal(dims: Vec<usize>, fan: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(dims, values).expect("valid dims").with_grad()
}

/// Square-kernel convolution with no bias term.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    /// OIHW filter bank.
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// Weights drawn from N(0, 2 / (k*k*out_ch)).
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, rng: &mut impl Rng) -> Self {
        Conv2dLayer {
            weight: he_normal(vec![out_ch, in_ch, kernel, kernel], kernel * kernel * out_ch, rng),
            stride: 1,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let w = p.next();
        g.conv2d(x, w, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2dLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub running_update_rate: f64,
    pub mode: Mode,
}

impl BatchNorm2dLayer {
    pub fn new(channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Tensor::full(vec![channels], 1.0).expect("channels > 0").with_grad(),
            beta: Tensor::zeros(vec![channels]).expect("channels > 0").with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            running_update_rate: BN_RUNNING_RATE,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Records the normalization. In train mode the batch statistics are
    /// returned so the caller can fold them into the running estimates.
    pub fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Result<(Var, Option<BatchStats>)> {
        let (gamma, beta) = (p.next(), p.next());
        let c = g.value(x).dims().get(1).copied().unwrap_or(0);
        if c != self.channels() {
            return Err(TensorError::ChannelMismatch { op: "batch_norm", expected: self.channels(), got: c });
        }
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => Ok((
                g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)?,
                None,
            )),
        }
    }

    /// Moves the running estimates toward a batch's statistics. The variance
    /// estimate uses the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let r = self.running_update_rate;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - r) * self.running_mean[c] + r * stats.mean[c];
            self.running_var[c] = (1.0 - r) * self.running_var[c] + r * stats.var[c] * correction;
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

/// Fully connected layer `x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// He-normal weights (fan-in), zero bias.
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: he_normal(vec![out_features, in_features], in_features, rng),
            bias: Tensor::zeros(vec![out_features]).expect("out_features > 0").with_grad(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let (w, b) = (p.next(), p.next());
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Inverted dropout: kept activations are scaled by `1 / keep_prob`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutLayer {
    pub keep_prob: f64,
    pub mode: Mode,
}

impl DropoutLayer {
    pub fn new(keep_prob: f64) -> Self {
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob must lie in (0, 1]");
        DropoutLayer { keep_prob, mode: Mode::Train }
    }

    pub fn is_identity(&self) -> bool {
        self.mode == Mode::Eval || self.keep_prob >= 1.0
    }

    pub fn forward(&self, g: &mut Graph, x: Var, rng: &mut impl Rng) -> Result<Var> {
        if self.is_identity() {
            return Ok(x);
        }
        let scale = 1.0 / self.keep_prob;
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.random::<f64>() < self.keep_prob { scale } else { 0.0 })
            .collect();
        g.mask(x, mask)
    }
}

fn run_unary(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.detached());
    let out = f(&mut g, v)?;
    Ok(g.value(out).detached())
}

fn bind_all(g: &mut Graph, params: &[(&'static str, &Tensor)]) -> Vec<Var> {
    params.iter().map(|(_, t)| g.param(t)).collect()
}

/// Evaluates a convolution layer on a concrete input.
pub fn conv2d_forward(layer: &Conv2dLayer, x: &Tensor) -> Result<Tensor> {
    run_unary(x, |g, v| {
        let vars = bind_all(g, &layer.params());
        layer.forward(g, &mut ParamCursor::new(&vars), v)
    })
}

/// Evaluates a batch-norm layer, updating its running statistics in train mode.
pub fn batchnorm_forward(layer: &mut BatchNorm2dLayer, x: &Tensor) -> Result<Tensor> {
    if x.dims().first() == Some(&0) {
        return Err(TensorError::Empty { op: "batch_norm" });
    }
    let mut stats = None;
    let out = run_unary(x, |g, v| {
        let vars = bind_all(g, &layer.params());
        let (y, s) = layer.forward(g, &mut ParamCursor::new(&vars), v)?;
        stats = s;
        Ok(y)
    })?;
    if let Some(s) = stats {
        layer.update_running(&s);
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    run_unary(x, |g, v| Ok(g.relu(v)))
}

pub fn avgpool2x2(x: &Tensor) -> Result<Tensor> {
    run_unary(x, |g, v| g.avg_pool2x2(v))
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    run_unary(x, |g, v| g.global_avg_pool(v))
}

pub fn dropout_forward(layer: &DropoutLayer, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    run_unary(x, |g, v| layer.forward(g, v, rng))
}

pub fn linear_forward(layer: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    run_unary(x, |g, v| {
        let vars = bind_all(g, &layer.params());
        layer.forward(g, &mut ParamCursor::new(&vars), v)
    })
}

/// Mean cross-entropy loss and per-row class probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let v = g.constant(logits.detached());
    let (loss, probs) = g.softmax_cross_entropy(v, labels)?;
    Ok((g.value(loss).values()[0], probs))
}
