//! Self-check suite: finite-difference gradient checks for every graph op
//! and a composed network, the parameter-count oracle, and a tiny
//! overfitting run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_network, count_parameters, ArchConfig};
use crate::data::{synthetic_dataset_sized, Dataset};
use crate::gradcheck::{finite_diff_check_in, network_param_check, GradCheck};
use crate::graph::{Fault, Graph, Var};
use crate::nn::BN_EPS;
use crate::tensor::{Result, Tensor};
use crate::train::{train_epoch, LrSchedule, SgdState, TrainConfig, TrainError};

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Default-architecture parameter counts for windows 1 through 13.
pub const REFERENCE_COUNTS: [usize; 13] = [
    48_882, 99_218, 151_450, 205_578, 261_602, 319_522, 379_338, 441_050, 504_658, 570_162, 637_562, 706_858,
    1_019_722,
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SmokeReport {
    pub checks: Vec<CheckOutcome>,
}

impl SmokeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckOutcome { name: name.into(), passed, detail: detail.into() });
    }
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("nonzero dims")
}

/// Values bounded away from zero so a finite step cannot cross a ReLU kink.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(dims, rng);
    t.values_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

/// `sum(out * r)` for a fixed random `r`, so every output coordinate
/// contributes a distinct weight to the checked gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let dims = g.value(out).dims().to_vec();
    let r = g.constant(random(&dims, &mut ChaCha8Rng::seed_from_u64(seed)));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// Named single-op checks: `(name, point, scalar function of the point)`.
fn op_cases() -> Vec<(&'static str, Tensor, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x4 = random(&[2, 3, 4, 4], &mut rng);
    let x5 = random(&[2, 3, 5, 5], &mut rng);
    let w3 = random(&[2, 3, 3, 3], &mut rng);
    let w1 = random(&[3, 3, 1, 1], &mut rng);
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let rm: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
    let feats = random(&[4, 5], &mut rng);
    let lw = random(&[3, 5], &mut rng);
    let lb = random(&[3], &mut rng);
    let other = random(&[2, 2, 4, 4], &mut rng);
    let mask: Vec<f64> = (0..x4.numel()).map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 }).collect();
    let labels = vec![0usize, 2, 1, 2];

    let mut cases: Vec<(&'static str, Tensor, OpFn)> = Vec::new();
    {
        let w = w3.clone();
        cases.push(("conv2d.input", x4.clone(), Box::new(move |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, 1, 1)?;
            project(g, y, 1)
        })));
    }
    {
        let x = x4.clone();
        cases.push(("conv2d.weight", w3.clone(), Box::new(move |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv2d(x, w, 1, 1)?;
            project(g, y, 2)
        })));
    }
    {
        let x = x5;
        cases.push(("conv2d.weight.stride2", w3.clone(), Box::new(move |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv2d(x, w, 2, 1)?;
            project(g, y, 3)
        })));
    }
    {
        let w = w1.clone();
        cases.push(("conv2d.pointwise.input", x4.clone(), Box::new(move |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, 1, 0)?;
            project(g, y, 4)
        })));
    }
    {
        let x = x4.clone();
        cases.push(("conv2d.pointwise.weight", w1.clone(), Box::new(move |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv2d(x, w, 1, 0)?;
            project(g, y, 5)
        })));
    }
    {
        let (gm, bt) = (gamma.clone(), beta.clone());
        cases.push(("batch_norm.train.input", x4.clone(), Box::new(move |g, x| {
            let gm = g.constant(gm.clone());
            let bt = g.constant(bt.clone());
            let (y, _) = g.batch_norm_train(x, gm, bt, BN_EPS)?;
            project(g, y, 6)
        })));
    }
    {
        let (x, bt) = (x4.clone(), beta.clone());
        cases.push(("batch_norm.train.gamma", gamma.clone(), Box::new(move |g, gm| {
            let x = g.constant(x.clone());
            let bt = g.constant(bt.clone());
            let (y, _) = g.batch_norm_train(x, gm, bt, BN_EPS)?;
            project(g, y, 7)
        })));
    }
    {
        let (x, gm) = (x4.clone(), gamma.clone());
        cases.push(("batch_norm.train.beta", beta.clone(), Box::new(move |g, bt| {
            let x = g.constant(x.clone());
            let gm = g.constant(gm.clone());
            let (y, _) = g.batch_norm_train(x, gm, bt, BN_EPS)?;
            project(g, y, 8)
        })));
    }
    {
        let (gm, bt, rm, rv) = (gamma.clone(), beta.clone(), rm.clone(), rv.clone());
        cases.push(("batch_norm.eval.input", x4.clone(), Box::new(move |g, x| {
            let gm = g.constant(gm.clone());
            let bt = g.constant(bt.clone());
            let y = g.batch_norm_eval(x, gm, bt, &rm, &rv, BN_EPS)?;
            project(g, y, 9)
        })));
    }
    cases.push(("relu", away_from_zero(&[2, 3, 4, 4], &mut rng), Box::new(|g, x| {
        let y = g.relu(x);
        project(g, y, 10)
    })));
    {
        let mask = mask.clone();
        cases.push(("dropout.mask", x4.clone(), Box::new(move |g, x| {
            let y = g.mask(x, mask.clone())?;
            project(g, y, 11)
        })));
    }
    cases.push(("avg_pool2x2", x4.clone(), Box::new(|g, x| {
        let y = g.avg_pool2x2(x)?;
        project(g, y, 12)
    })));
    cases.push(("global_avg_pool", x4.clone(), Box::new(|g, x| {
        let y = g.global_avg_pool(x)?;
        project(g, y, 13)
    })));
    {
        let o = other.clone();
        cases.push(("concat_channels", x4.clone(), Box::new(move |g, x| {
            let o = g.constant(o.clone());
            let y = g.concat_channels(&[o, x, o])?;
            project(g, y, 14)
        })));
    }
    cases.push(("slice_channels", x4.clone(), Box::new(|g, x| {
        let y = g.slice_channels(x, 1, 3)?;
        project(g, y, 15)
    })));
    {
        let x = x4.clone();
        cases.push(("add.channel_bias", beta.clone(), Box::new(move |g, b| {
            let x = g.constant(x.clone());
            let y = g.add(x, b)?;
            project(g, y, 16)
        })));
    }
    cases.push(("mul.self", x4.clone(), Box::new(|g, x| {
        let y = g.mul(x, x)?;
        project(g, y, 17)
    })));
    {
        let (w, b) = (lw.clone(), lb.clone());
        cases.push(("linear.input", feats.clone(), Box::new(move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.linear(x, w, b)?;
            project(g, y, 18)
        })));
    }
    {
        let (x, b) = (feats.clone(), lb.clone());
        cases.push(("linear.weight", lw.clone(), Box::new(move |g, w| {
            let x = g.constant(x.clone());
            let b = g.constant(b.clone());
            let y = g.linear(x, w, b)?;
            project(g, y, 19)
        })));
    }
    {
        let (x, w) = (feats.clone(), lw.clone());
        cases.push(("linear.bias", lb.clone(), Box::new(move |g, b| {
            let x = g.constant(x.clone());
            let w = g.constant(w.clone());
            let y = g.linear(x, w, b)?;
            project(g, y, 20)
        })));
    }
    cases.push(("softmax_cross_entropy", random(&[4, 3], &mut rng), Box::new(move |g, z| {
        Ok(g.softmax_cross_entropy(z, &labels)?.0)
    })));
    cases
}

/// Finite-difference checks of every graph op, in a fixed order.
pub fn op_gradient_checks(fault: Option<Fault>) -> Result<Vec<(&'static str, GradCheck)>> {
    op_cases()
        .into_iter()
        .map(|(name, x, f)| Ok((name, finite_diff_check_in(|| Graph::with_fault(fault), f, &x, GRAD_EPS)?)))
        .collect()
}

/// Architecture of the composed-network gradient check.
pub fn gradcheck_arch() -> ArchConfig {
    ArchConfig {
        num_blocks: 2,
        layers_per_block: 3,
        growth_rate: 3,
        window: 2,
        stem_channels: 4,
        num_classes: 3,
        input_height: 8,
        input_width: 8,
        ..ArchConfig::default()
    }
}

/// Parameter-gradient check of the [`gradcheck_arch`] network with random
/// frozen batch-norm statistics and affine parameters.
pub fn network_gradient_check(fault: Option<Fault>) -> Result<GradCheck> {
    let mut net = build_network(&gradcheck_arch(), 5).expect("valid architecture");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for bn in net.batch_norms_mut() {
        bn.running_mean.iter_mut().for_each(|m| *m = rng.random_range(-0.2..0.2));
        bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        bn.gamma.values_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        bn.beta.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    let images = random(&[2, 3, 8, 8], &mut rng);
    network_param_check(&net, &images, &[0, 2], GRAD_EPS, fault)
}

/// Architecture used for the overfitting smoke run.
pub fn overfit_arch() -> ArchConfig {
    ArchConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        window: 2,
        stem_channels: 8,
        num_classes: 4,
        input_height: 8,
        input_width: 8,
        ..ArchConfig::default()
    }
}

/// Trains [`overfit_arch`] on one batch of `n` samples without dropout and
/// returns the number of epochs until the pass reaches 100% accuracy.
pub fn epochs_to_memorize(n: usize, max_epochs: usize) -> std::result::Result<Option<usize>, TrainError> {
    let arch = overfit_arch();
    let ds: Dataset = synthetic_dataset_sized(n, arch.num_classes, arch.input_height, 17)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut net = build_network(&arch, 3).expect("valid architecture");
    let config = TrainConfig {
        batch_size: n,
        keep_prob: 1.0,
        weight_decay: 0.0,
        epochs: max_epochs,
        lr_schedule: LrSchedule::constant(0.1)?,
        ..TrainConfig::default()
    };
    let mut state = SgdState::for_network(&net);
    for epoch in 0..max_epochs {
        if train_epoch(&mut net, &ds, &config, &mut state, epoch)?.accuracy == 1.0 {
            return Ok(Some(epoch + 1));
        }
    }
    Ok(None)
}

fn grad_outcome(report: &mut SmokeReport, name: &str, r: Result<GradCheck>) {
    match r {
        Ok(c) => report.push(
            format!("grad:{name}"),
            c.max_rel_error < GRAD_TOLERANCE,
            format!("max relative error {:.2e} at index {}", c.max_rel_error, c.worst_index),
        ),
        Err(e) => report.push(format!("grad:{name}"), false, e.to_string()),
    }
}

/// Runs the full suite. `fault` deliberately breaks a backward rule so the
/// suite's own sensitivity can be confirmed.
pub fn run_smoke(fault: Option<Fault>) -> SmokeReport {
    let mut report = SmokeReport::default();
    match op_gradient_checks(fault) {
        Ok(checks) => checks.into_iter().for_each(|(name, c)| grad_outcome(&mut report, name, Ok(c))),
        Err(e) => report.push("grad:ops", false, e.to_string()),
    }
    grad_outcome(&mut report, "network", network_gradient_check(fault));

    for (i, &expected) in REFERENCE_COUNTS.iter().enumerate() {
        let window = i + 1;
        let name = format!("count:window{window}");
        match count_parameters(&ArchConfig::default().with_window(window)) {
            Ok(r) => report.push(name, r.total == expected, format!("{} (expected {expected})", r.total)),
            Err(e) => report.push(name, false, e.to_string()),
        }
    }
    for window in [1, 2, 3] {
        let arch = gradcheck_arch().with_window(window.min(4));
        let built = build_network(&arch, 0).map(|n| n.num_parameters());
        let counted = count_parameters(&arch).map(|r| r.total);
        let name = format!("count:builder_agrees:window{window}");
        match (built, counted) {
            (Ok(b), Ok(c)) => report.push(name, b == c, format!("built {b}, counted {c}")),
            (Err(e), _) | (_, Err(e)) => report.push(name, false, e.to_string()),
        }
    }

    match epochs_to_memorize(8, 50) {
        Ok(Some(e)) => report.push("train:memorize_batch", true, format!("100% accuracy after {e} epochs")),
        Ok(None) => report.push("train:memorize_batch", false, "accuracy below 100% after 50 epochs"),
        Err(e) => report.push("train:memorize_batch", false, e.to_string()),
    }
    report
}
