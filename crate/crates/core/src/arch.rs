//! Windowed dense connectivity.
//!
//! Inside a dense block with `L` layers, target layer `t` (1-based) consumes
//! the channel concatenation of sources `max(0, t - N) .. t`, where source 0
//! is the block input and source `s >= 1` is the output of layer `s`. The
//! layer after the block (transition or head) is target `L + 1` under the
//! same rule, so a window of `L + 1` reproduces full DenseNet connectivity
//! and any smaller window cuts the block input off from the exit.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{BatchStats, Graph, Var};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, DropoutLayer, LinearLayer, Mode, ParamCursor};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("window {window} outside [1, {max}] for {layers} layers per block")]
    Window { window: usize, layers: usize, max: usize },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("input {height}x{width} cannot be halved {halvings} times by transitions")]
    InputSize { height: usize, width: usize, halvings: usize },
    #[error("block {block}, target {target} does not exist")]
    Index { block: usize, target: usize },
    #[error("bad architecture field {key}: {message}")]
    Field { key: String, message: String },
}

/// Hyperparameters of a windowed DenseNet.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub num_blocks: usize,
    /// Layers per dense block (`L`).
    pub layers_per_block: usize,
    /// New feature maps emitted by each layer (`k`).
    pub growth_rate: usize,
    /// Dense window (`N`), in `1..=L+1`.
    pub window: usize,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ArchConfig {
    /// DenseNet-40 on CIFAR-10: 3 blocks of 12 layers, growth 12, full window.
    fn default() -> Self {
        ArchConfig {
            num_blocks: 3,
            layers_per_block: 12,
            growth_rate: 12,
            window: 13,
            stem_channels: 16,
            num_classes: 10,
            input_channels: 3,
            input_height: 32,
            input_width: 32,
        }
    }
}

impl ArchConfig {
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_growth(mut self, growth_rate: usize) -> Self {
        self.growth_rate = growth_rate;
        self
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_rate", self.growth_rate),
            ("stem_channels", self.stem_channels),
            ("num_classes", self.num_classes),
            ("input_channels", self.input_channels),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
        ] {
            if v == 0 {
                return Err(ArchError::NonPositive(name));
            }
        }
        let max = self.layers_per_block + 1;
        if self.window == 0 || self.window > max {
            return Err(ArchError::Window { window: self.window, layers: self.layers_per_block, max });
        }
        let halvings = self.num_blocks - 1;
        let div = 1usize << halvings.min(usize::BITS as usize - 1);
        if halvings >= usize::BITS as usize || !self.input_height.is_multiple_of(div) || !self.input_width.is_multiple_of(div) {
            return Err(ArchError::InputSize { height: self.input_height, width: self.input_width, halvings });
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; also the input to the checkpoint digest.
    pub fn to_canonical(&self) -> String {
        format!(
            "blocks = {}\nlayers = {}\ngrowth = {}\nwindow = {}\nstem = {}\nclasses = {}\ninput_channels = {}\ninput_height = {}\ninput_width = {}\n",
            self.num_blocks,
            self.layers_per_block,
            self.growth_rate,
            self.window,
            self.stem_channels,
            self.num_classes,
            self.input_channels,
            self.input_height,
            self.input_width
        )
    }
}

impl ArchConfig {
    /// Sets one field by its canonical key. Returns `Ok(false)` for keys that
    /// are not architecture fields.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<bool, ArchError> {
        let slot = match key {
            "blocks" => &mut self.num_blocks,
            "layers" => &mut self.layers_per_block,
            "growth" => &mut self.growth_rate,
            "window" => &mut self.window,
            "stem" => &mut self.stem_channels,
            "classes" => &mut self.num_classes,
            "input_channels" => &mut self.input_channels,
            "input_height" => &mut self.input_height,
            "input_width" => &mut self.input_width,
            _ => return Ok(false),
        };
        *slot = value
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| ArchError::Field { key: key.to_string(), message: e.to_string() })?;
        Ok(true)
    }

    /// Inverse of [`ArchConfig::to_canonical`]. Every field must be present.
    pub fn from_canonical(text: &str) -> Result<Self, ArchError> {
        let mut config = ArchConfig::default();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| ArchError::Field {
                key: line.to_string(),
                message: "expected `key = value`".into(),
            })?;
            if !config.set_field(k.trim(), v)? {
                return Err(ArchError::Field { key: k.trim().to_string(), message: "unknown key".into() });
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(ArchError::Field { key: "*".into(), message: format!("expected 9 fields, found {seen}") });
        }
        config.validate()?;
        Ok(config)
    }
}

/// Whether the window reaches back to every block input (full DenseNet).
pub fn equivalent_to_full(config: &ArchConfig) -> bool {
    config.window > config.layers_per_block
}

/// Sources of one dense block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    /// Width of source 0, the block input.
    pub input_channels: usize,
    pub growth_rate: usize,
    /// `targets[t - 1]` lists the sources of target `t`; the last entry is the exit.
    pub targets: Vec<Vec<usize>>,
}

impl BlockPlan {
    pub fn layers(&self) -> usize {
        self.targets.len() - 1
    }

    pub fn source_channels(&self, source: usize) -> usize {
        if source == 0 {
            self.input_channels
        } else {
            self.growth_rate
        }
    }

    /// Sources of target `t` (1-based; `L + 1` is the exit).
    pub fn sources(&self, target: usize) -> Option<&[usize]> {
        target.checked_sub(1).and_then(|i| self.targets.get(i)).map(Vec::as_slice)
    }

    pub fn exit_sources(&self) -> &[usize] {
        self.targets.last().expect("non-empty plan")
    }

    pub fn input_width(&self, target: usize) -> Option<usize> {
        self.sources(target).map(|s| s.iter().map(|&s| self.source_channels(s)).sum())
    }

    pub fn exit_width(&self) -> usize {
        self.input_width(self.targets.len()).expect("exit exists")
    }

    /// Channel range `[lo, hi)` that `source` occupies in `target`'s input.
    pub fn channel_range(&self, target: usize, source: usize) -> Option<(usize, usize)> {
        let mut lo = 0;
        for &s in self.sources(target)? {
            let w = self.source_channels(s);
            if s == source {
                return Some((lo, lo + w));
            }
            lo += w;
        }
        None
    }
}

/// Per-block source lists for every target layer and block exit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectivityPlan {
    pub window: usize,
    pub blocks: Vec<BlockPlan>,
}

impl ConnectivityPlan {
    pub fn block(&self, block: usize) -> Option<&BlockPlan> {
        self.blocks.get(block)
    }
}

/// Sources of target `t` under window `n`.
fn window_sources(target: usize, window: usize) -> Vec<usize> {
    (target.saturating_sub(window)..target).collect()
}

pub fn build_connectivity(config: &ArchConfig) -> Result<ConnectivityPlan, ArchError> {
    config.validate()?;
    let l = config.layers_per_block;
    let mut input = config.stem_channels;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        let plan = BlockPlan {
            input_channels: input,
            growth_rate: config.growth_rate,
            targets: (1..=l + 1).map(|t| window_sources(t, config.window)).collect(),
        };
        input = plan.exit_width();
        blocks.push(plan);
    }
    Ok(ConnectivityPlan { window: config.window, blocks })
}

/// Width of the concatenated input to `target` (1-based) of `block` (0-based).
pub fn input_channels(plan: &ConnectivityPlan, block: usize, target: usize) -> Result<usize, ArchError> {
    plan.block(block)
        .and_then(|b| b.input_width(target))
        .ok_or(ArchError::Index { block, target })
}

/// Trainable parameter total with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.breakdown.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, count) in &self.breakdown {
            writeln!(f, "{name:<width$}  {count:>9}")?;
        }
        write!(f, "{:<width$}  {:>9}", "total", self.total)
    }
}

/// Exact count of trainable parameters: bias-free convolutions, two per
/// channel for every batch-norm, and a biased linear classifier.
pub fn count_parameters(config: &ArchConfig) -> Result<ParamReport, ArchError> {
    let plan = build_connectivity(config)?;
    let k = config.growth_rate;
    let mut breakdown = vec![(
        "stem.conv".to_string(),
        config.input_channels * config.stem_channels * 9,
    )];
    let last = plan.blocks.len() - 1;
    for (b, block) in plan.blocks.iter().enumerate() {
        for t in 1..=block.layers() {
            let w = block.input_width(t).expect("target in range");
            breakdown.push((format!("block{}.layer{t}.bn", b + 1), 2 * w));
            breakdown.push((format!("block{}.layer{t}.conv", b + 1), w * k * 9));
        }
        let w = block.exit_width();
        if b < last {
            breakdown.push((format!("block{}.transition.bn", b + 1), 2 * w));
            breakdown.push((format!("block{}.transition.conv", b + 1), w * w));
        } else {
            breakdown.push(("head.bn".to_string(), 2 * w));
            breakdown.push(("head.fc".to_string(), w * config.num_classes + config.num_classes));
        }
    }
    let total = breakdown.iter().map(|(_, c)| c).sum();
    Ok(ParamReport { total, breakdown })
}

/// BN -> ReLU -> 3x3 conv -> dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLayer {
    pub bn: BatchNorm2dLayer,
    pub conv: Conv2dLayer,
    pub dropout: DropoutLayer,
}

/// BN -> ReLU -> 1x1 conv -> dropout -> 2x2 average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub bn: BatchNorm2dLayer,
    pub conv: Conv2dLayer,
    pub dropout: DropoutLayer,
}

/// BN -> ReLU -> global average pool -> linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub bn: BatchNorm2dLayer,
    pub fc: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub layers: Vec<CompositeLayer>,
    /// Present on every block except the last.
    pub transition: Option<Transition>,
}

/// Output of [`Network::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Batch statistics of every batch-norm, in enumeration order (train mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// A windowed DenseNet with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ArchConfig,
    pub plan: ConnectivityPlan,
    pub stem: Conv2dLayer,
    pub blocks: Vec<DenseBlock>,
    pub head: Head,
}

/// Default retain probability for dropout layers.
pub const DEFAULT_KEEP_PROB: f64 = 0.8;

pub fn build_network(config: &ArchConfig, init_seed: u64) -> Result<Network, ArchError> {
    let plan = build_connectivity(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let k = config.growth_rate;
    let stem = Conv2dLayer::new(config.input_channels, config.stem_channels, 3, 1, &mut rng);
    let last = plan.blocks.len() - 1;
    let mut blocks = Vec::with_capacity(plan.blocks.len());
    let mut head = None;
    for (b, bp) in plan.blocks.iter().enumerate() {
        let layers = (1..=bp.layers())
            .map(|t| {
                let w = bp.input_width(t).expect("target in range");
                CompositeLayer {
                    bn: BatchNorm2dLayer::new(w),
                    conv: Conv2dLayer::new(w, k, 3, 1, &mut rng),
                    dropout: DropoutLayer::new(DEFAULT_KEEP_PROB),
                }
            })
            .collect();
        let w = bp.exit_width();
        let transition = (b < last).then(|| Transition {
            bn: BatchNorm2dLayer::new(w),
            conv: Conv2dLayer::new(w, w, 1, 0, &mut rng),
            dropout: DropoutLayer::new(DEFAULT_KEEP_PROB),
        });
        if b == last {
            head = Some(Head {
                bn: BatchNorm2dLayer::new(w),
                fc: LinearLayer::new(w, config.num_classes, &mut rng),
            });
        }
        blocks.push(DenseBlock { layers, transition });
    }
    Ok(Network {
        config: config.clone(),
        plan,
        stem,
        blocks,
        head: head.expect("at least one block"),
    })
}

impl Network {
    /// Trainable parameters in manifest order: stem, then each block's layers
    /// and transition, then the head.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params_named(&mut |name, t| out.push((name, t)));
        out
    }

    fn params_named<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (n, t) in self.stem.params() {
            f(format!("stem.conv.{n}"), t);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, layer) in block.layers.iter().enumerate() {
                let p = format!("block{}.layer{}", b + 1, i + 1);
                for (n, t) in layer.bn.params() {
                    f(format!("{p}.bn.{n}"), t);
                }
                for (n, t) in layer.conv.params() {
                    f(format!("{p}.conv.{n}"), t);
                }
            }
            if let Some(tr) = &block.transition {
                let p = format!("block{}.transition", b + 1);
                for (n, t) in tr.bn.params() {
                    f(format!("{p}.bn.{n}"), t);
                }
                for (n, t) in tr.conv.params() {
                    f(format!("{p}.conv.{n}"), t);
                }
            }
        }
        for (n, t) in self.head.bn.params() {
            f(format!("head.bn.{n}"), t);
        }
        for (n, t) in self.head.fc.params() {
            f(format!("head.fc.{n}"), t);
        }
    }

    /// Mutable parameters, same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.stem.params_mut().into_iter().map(|(_, t)| t));
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                out.extend(layer.bn.params_mut().into_iter().map(|(_, t)| t));
                out.extend(layer.conv.params_mut().into_iter().map(|(_, t)| t));
            }
            if let Some(tr) = &mut block.transition {
                out.extend(tr.bn.params_mut().into_iter().map(|(_, t)| t));
                out.extend(tr.conv.params_mut().into_iter().map(|(_, t)| t));
            }
        }
        out.extend(self.head.bn.params_mut().into_iter().map(|(_, t)| t));
        out.extend(self.head.fc.params_mut().into_iter().map(|(_, t)| t));
        out
    }

    /// Total scalar count over [`Network::params`].
    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Batch-norm layers in forward order.
    pub fn batch_norms(&self) -> Vec<&BatchNorm2dLayer> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.extend(block.layers.iter().map(|l| &l.bn));
            if let Some(tr) = &block.transition {
                out.push(&tr.bn);
            }
        }
        out.push(&self.head.bn);
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2dLayer> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.extend(block.layers.iter_mut().map(|l| &mut l.bn));
            if let Some(tr) = &mut block.transition {
                out.push(&mut tr.bn);
            }
        }
        out.push(&mut self.head.bn);
        out
    }

    fn dropouts_mut(&mut self) -> Vec<&mut DropoutLayer> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.extend(block.layers.iter_mut().map(|l| &mut l.dropout));
            if let Some(tr) = &mut block.transition {
                out.push(&mut tr.dropout);
            }
        }
        out
    }

    /// Switches every batch-norm and dropout layer.
    pub fn set_mode(&mut self, mode: Mode) {
        self.batch_norms_mut().into_iter().for_each(|bn| bn.mode = mode);
        self.dropouts_mut().into_iter().for_each(|d| d.mode = mode);
    }

    pub fn set_keep_prob(&mut self, keep_prob: f64) {
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob must lie in (0, 1]");
        self.dropouts_mut().into_iter().for_each(|d| d.keep_prob = keep_prob);
    }

    /// Records every parameter as a graph leaf, in manifest order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Records a forward pass of an `N x C x H x W` input. `vars` must come
    /// from [`Network::bind`] on the same graph.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var, rng: &mut impl Rng) -> TensorResult<Forward> {
        let dims = g.value(input).dims().to_vec();
        if dims.len() != 4 || dims[1] != self.config.input_channels {
            return Err(TensorError::ChannelMismatch {
                op: "network",
                expected: self.config.input_channels,
                got: dims.get(1).copied().unwrap_or(0),
            });
        }
        let mut p = ParamCursor::new(vars);
        let mut bn_stats = Vec::new();
        let mut record = |s: Option<BatchStats>| bn_stats.extend(s);

        let mut x = self.stem.forward(g, &mut p, input)?;
        let mut logits = None;
        for (block, bp) in self.blocks.iter().zip(&self.plan.blocks) {
            let mut features = vec![x];
            for (i, layer) in block.layers.iter().enumerate() {
                let srcs: Vec<Var> = bp.targets[i].iter().map(|&s| features[s]).collect();
                let h = g.concat_channels(&srcs)?;
                let (h, s) = layer.bn.forward(g, &mut p, h)?;
                record(s);
                let h = g.relu(h);
                let h = layer.conv.forward(g, &mut p, h)?;
                let h = layer.dropout.forward(g, h, rng)?;
                features.push(h);
            }
            let srcs: Vec<Var> = bp.exit_sources().iter().map(|&s| features[s]).collect();
            let h = g.concat_channels(&srcs)?;
            match &block.transition {
                Some(tr) => {
                    let (h, s) = tr.bn.forward(g, &mut p, h)?;
                    record(s);
                    let h = g.relu(h);
                    let h = tr.conv.forward(g, &mut p, h)?;
                    let h = tr.dropout.forward(g, h, rng)?;
                    x = g.avg_pool2x2(h)?;
                }
                None => {
                    let (h, s) = self.head.bn.forward(g, &mut p, h)?;
                    record(s);
                    let h = g.relu(h);
                    let h = g.global_avg_pool(h)?;
                    logits = Some(self.head.fc.forward(g, &mut p, h)?);
                }
            }
        }
        debug_assert!(p.is_exhausted());
        Ok(Forward { logits: logits.expect("last block has a head"), bn_stats })
    }

    /// Folds train-mode batch statistics (from [`Forward::bn_stats`]) into
    /// the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Adds the gradients held by the bound leaves into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (t, &v) in self.params_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Logits for a batch of images, without recording gradients.
    pub fn predict(&self, images: &Tensor) -> TensorResult<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().into_iter().map(|(_, t)| g.constant(t.detached())).collect();
        let x = g.constant(images.detached());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, x, &mut rng)?;
        Ok(g.value(out.logits).detached())
    }
}
