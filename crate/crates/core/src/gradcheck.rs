//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::graph::{Fault, Graph, Var};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::tensor::{Result, Tensor};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|a - n| / max(DENOMINATOR_FLOOR, |a| + |n|)`.
    pub max_rel_error: f64,
    /// Coordinate achieving the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+eps e_i) - f(x-eps e_i)) / 2 eps` at every coordinate.
///
/// `f` receives a fresh graph and the leaf for `x`, and must return a scalar
/// node. It has to be deterministic (no dropout sampling, no batch
/// statistics that depend on anything but `x`).
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_in(Graph::new, f, x, eps)
}

/// As [`finite_diff_check`], building each graph with `make_graph`.
pub fn finite_diff_check_in<G, F>(make_graph: G, f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = make_graph();
    let leaf = g.leaf(x.detached().with_grad());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).expect("tracked leaf").to_vec();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = make_graph();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).values()[0])
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.detached();
        plus.values_mut()[i] += eps;
        let mut minus = x.detached();
        minus.values_mut()[i] -= eps;
        let num = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = rel_error(a, num);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(num);
    }
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

/// Central differences at `eps = 1e-4` carry about `1e-10` absolute
/// round-off, so relative error is only resolvable above this magnitude.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(DENOMINATOR_FLOOR)
}

/// Checks the cross-entropy gradient of every network parameter. The
/// network is evaluated with frozen batch-norm statistics and without
/// dropout, so the loss is a deterministic function of the weights.
pub fn network_param_check(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    eps: f64,
    fault: Option<Fault>,
) -> Result<GradCheck> {
    let mut net = net.clone();
    net.set_mode(Mode::Eval);
    let mut g = Graph::with_fault(fault);
    let vars = net.bind(&mut g);
    let x = g.constant(images.detached());
    let fwd = net.forward(&mut g, &vars, x, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (loss, _) = g.softmax_cross_entropy(fwd.logits, labels)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.grad(v).expect("bound parameter").to_vec()).collect();

    let loss_of = |net: &Network| -> Result<f64> { Ok(softmax_cross_entropy(&net.predict(images)?, labels)?.0) };
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = net.params().iter().map(|(_, t)| t.numel()).collect();
    for (p, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = net.params_mut()[p].values()[i];
            net.params_mut()[p].values_mut()[i] = orig + eps;
            let up = loss_of(&net)?;
            net.params_mut()[p].values_mut()[i] = orig - eps;
            let down = loss_of(&net)?;
            net.params_mut()[p].values_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}
