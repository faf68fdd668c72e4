//! SGD with momentum and weight decay, a piecewise-constant learning-rate
//! schedule, and the per-epoch train/evaluate loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{ArchConfig, Network};
use crate::data::{batches, Dataset};
use crate::graph::Graph;
use crate::nn::Mode;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid learning-rate schedule: {0}")]
    Schedule(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("optimizer state has {state} buffers for {params} parameters")]
    StateMismatch { state: usize, params: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `(start_epoch, lr)` pairs with strictly increasing epochs starting at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule(Vec<(usize, f64)>);

impl LrSchedule {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self, TrainError> {
        match entries.first() {
            None => return Err(TrainError::Schedule("empty".into())),
            Some(&(e, _)) if e != 0 => return Err(TrainError::Schedule("first entry must start at epoch 0".into())),
            _ => {}
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(TrainError::Schedule("epochs must be strictly increasing".into()));
        }
        if entries.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(TrainError::Schedule("learning rates must be positive".into()));
        }
        Ok(LrSchedule(entries))
    }

    pub fn constant(lr: f64) -> Result<Self, TrainError> {
        Self::new(vec![(0, lr)])
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    /// Rate of the latest entry starting at or before `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .rev()
            .find(|&&(start, _)| start <= epoch)
            .map(|&(_, lr)| lr)
            .expect("schedule starts at epoch 0")
    }
}

impl Default for LrSchedule {
    /// 0.1, dropping to 0.01 at epoch 150 and 0.001 at epoch 225.
    fn default() -> Self {
        LrSchedule(vec![(0, 0.1), (150, 0.01), (225, 0.001)])
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for LrSchedule {
    type Err = TrainError;

    /// Parses `epoch:lr` pairs separated by commas, e.g. `0:0.1,150:0.01`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let entries = s
            .split(',')
            .map(|part| {
                let (e, lr) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| TrainError::Schedule(format!("expected epoch:lr, got {part:?}")))?;
                let e = e.trim().parse().map_err(|_| TrainError::Schedule(format!("bad epoch {e:?}")))?;
                let lr = lr.trim().parse().map_err(|_| TrainError::Schedule(format!("bad rate {lr:?}")))?;
                Ok((e, lr))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Self::new(entries)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}

/// Optimization recipe. Defaults: batch 64, momentum 0.9, weight decay
/// 1e-4, dropout keep 0.8, 300 epochs, no augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub keep_prob: f64,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub nesterov: bool,
    pub augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            keep_prob: 0.8,
            epochs: 300,
            lr_schedule: LrSchedule::default(),
            seed: 0,
            nesterov: false,
            augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep_prob must lie in (0, 1]");
        }
        if self.augmentation {
            return bad("data augmentation is not supported");
        }
        Ok(())
    }
}

/// Momentum buffers, one per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocities: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        SgdState { velocities: params.iter().map(|t| vec![0.0; t.numel()]).collect() }
    }

    pub fn for_network(net: &Network) -> Self {
        let params: Vec<&Tensor> = net.params().into_iter().map(|(_, t)| t).collect();
        Self::zeros_like(&params)
    }
}

/// One update per parameter, reading each tensor's accumulated gradient:
/// `g = grad + wd * w; v = momentum * v + g; w -= lr * v`
/// (with Nesterov, `w -= lr * (g + momentum * v)`).
pub fn sgd_step(
    params: &mut [&mut Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) -> Result<(), TrainError> {
    if state.velocities.len() != params.len() {
        return Err(TrainError::StateMismatch { state: state.velocities.len(), params: params.len() });
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocities) {
        if v.len() != p.numel() {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "sgd_step",
                left: p.dims().to_vec(),
                right: vec![v.len()],
            }));
        }
        let grad = p.grad().map(<[f64]>::to_vec);
        let values = p.values_mut();
        for i in 0..values.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * values[i];
            v[i] = momentum * v[i] + g;
            let step = if nesterov { g + momentum * v[i] } else { v[i] };
            values[i] -= lr * step;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed derived from the run seed and a sequence of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let c = probs.dims()[1];
    probs
        .values()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// One shuffled pass of SGD over `ds` in train mode. Shuffling and dropout
/// masks are derived from `(config.seed, epoch)`, so the pass is
/// reproducible in isolation.
pub fn train_epoch(
    net: &mut Network,
    ds: &Dataset,
    config: &TrainConfig,
    state: &mut SgdState,
    epoch: usize,
) -> Result<EpochMetrics, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_epoch_at_lr(net, ds, config, state, epoch, config.lr_schedule.lr_at(epoch))
}

/// [`train_epoch`] with an explicit learning rate in place of the schedule.
pub fn train_epoch_at_lr(
    net: &mut Network,
    ds: &Dataset,
    config: &TrainConfig,
    state: &mut SgdState,
    epoch: usize,
    lr: f64,
) -> Result<EpochMetrics, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    net.set_mode(Mode::Train);
    net.set_keep_prob(config.keep_prob);
    let order = batches(ds.len(), config.batch_size, true, derive_seed(config.seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (b, idx) in order.iter().enumerate() {
        let (images, labels) = ds.gather(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_DROPOUT, epoch as u64, b as u64]));
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let x = g.constant(images);
        let fwd = net.forward(&mut g, &vars, x, &mut rng)?;
        let (loss, probs) = g.softmax_cross_entropy(fwd.logits, &labels)?;
        loss_sum += g.value(loss).values()[0] * labels.len() as f64;
        correct += count_correct(&probs, &labels);
        g.backward(loss)?;
        net.zero_grads();
        net.accumulate_grads(&g, &vars);
        net.update_running_stats(&fwd.bn_stats);
        let mut params = net.params_mut();
        sgd_step(&mut params, state, lr, config.momentum, config.weight_decay, config.nesterov)?;
    }
    net.zero_grads();
    Ok(EpochMetrics { loss: loss_sum / ds.len() as f64, accuracy: correct as f64 / ds.len() as f64 })
}

/// Mean loss and top-1 accuracy with running batch-norm statistics and
/// dropout disabled. The network is not modified.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<EpochMetrics, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut eval_net = net.clone();
    eval_net.set_mode(Mode::Eval);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for idx in batches(ds.len(), batch_size.max(1), false, 0) {
        let (images, labels) = ds.gather(&idx);
        let logits = eval_net.predict(&images)?;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let (loss, probs) = g.softmax_cross_entropy(l, &labels)?;
        loss_sum += g.value(loss).values()[0] * labels.len() as f64;
        correct += count_correct(&probs, &labels);
    }
    Ok(EpochMetrics { loss: loss_sum / ds.len() as f64, accuracy: correct as f64 / ds.len() as f64 })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,test_loss,test_acc,wall_seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_loss, self.test_acc, self.wall_seconds
        )
    }

    pub fn from_csv(line: &str) -> Option<EpochRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(EpochRow {
            epoch: f[0].parse().ok()?,
            lr: f[1].parse().ok()?,
            train_loss: f[2].parse().ok()?,
            train_acc: f[3].parse().ok()?,
            test_loss: f[4].parse().ok()?,
            test_acc: f[5].parse().ok()?,
            wall_seconds: f[6].parse().ok()?,
        })
    }

    /// Everything but the wall-clock column, which legitimately differs
    /// between otherwise identical runs.
    pub fn same_results(&self, other: &EpochRow) -> bool {
        self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.test_loss.to_bits() == other.test_loss.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
    }
}

/// Training history plus the configuration and weights that produced it.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub arch: ArchConfig,
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
    pub network: Network,
}

/// Trains `net` from `start_epoch` up to `config.epochs`, calling
/// `on_epoch` after each completed epoch. Returning `false` from the
/// callback stops training early.
pub fn fit<F>(
    net: &mut Network,
    state: &mut SgdState,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<EpochRow>, TrainError>
where
    F: FnMut(&EpochRow, &Network, &SgdState) -> Result<bool, TrainError>,
{
    config.validate()?;
    let mut rows = Vec::new();
    for epoch in start_epoch..config.epochs {
        let t0 = Instant::now();
        let tr = train_epoch(net, train, config, state, epoch)?;
        let te = match test {
            Some(ds) => evaluate(net, ds, config.batch_size)?,
            None => EpochMetrics { loss: f64::NAN, accuracy: f64::NAN },
        };
        let row = EpochRow {
            epoch,
            lr: config.lr_schedule.lr_at(epoch),
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            test_loss: te.loss,
            test_acc: te.accuracy,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        let keep_going = on_epoch(&row, net, state)?;
        rows.push(row);
        if !keep_going {
            break;
        }
    }
    Ok(rows)
}
