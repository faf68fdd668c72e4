//! Post-hoc analyses: per-source filter strength (feature reuse), per-block
//! reuse means, growth-rate capacity matching, and curve smoothing.

use thiserror::Error;

use crate::arch::{count_parameters, ArchConfig, ArchError, BlockPlan, ConnectivityPlan, Network};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("target {target} parameters is below the k=1 capacity {min}")]
    BelowRange { target: usize, min: usize },
    #[error("target {target} parameters exceeds the k={k_max} capacity {max}")]
    AboveRange { target: usize, k_max: usize, max: usize },
    #[error("smoothing window must be odd and positive, got {0}")]
    Window(usize),
    #[error("no reuse matrices given")]
    Empty,
    #[error("network and plan disagree: {0}")]
    Mismatch(String),
}

/// Column-normalized mean filter strength of one dense block.
///
/// Rows are sources `0..=L`, columns are targets `1..=L+1` (the last column
/// is the layer following the block). Cells outside the window are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReuseMatrix {
    pub block: usize,
    pub layers: usize,
    cells: Vec<Option<f64>>,
}

impl ReuseMatrix {
    fn empty(block: usize, layers: usize) -> Self {
        ReuseMatrix { block, layers, cells: vec![None; (layers + 1) * (layers + 1)] }
    }

    pub fn num_sources(&self) -> usize {
        self.layers + 1
    }

    pub fn num_targets(&self) -> usize {
        self.layers + 1
    }

    /// Cell for `source` (0-based) and `target` (1-based).
    pub fn get(&self, source: usize, target: usize) -> Option<f64> {
        if source > self.layers || target == 0 || target > self.layers + 1 {
            return None;
        }
        self.cells[source * self.num_targets() + target - 1]
    }

    fn set(&mut self, source: usize, target: usize, v: f64) {
        let nt = self.num_targets();
        self.cells[source * nt + target - 1] = Some(v);
    }

    /// Present cell values in row-major order.
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().flatten().copied()
    }

    /// `block<b>_reuse.csv` body: header `source,t1,...,exit`, one row per
    /// source, absent cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in 1..=self.layers {
            out.push_str(&format!(",t{t}"));
        }
        out.push_str(",exit\n");
        for s in 0..self.num_sources() {
            out.push_str(&s.to_string());
            for t in 1..=self.num_targets() {
                out.push(',');
                if let Some(v) = self.get(s, t) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Weights consuming a target's input, as `(rows, in_features, per_channel)`
/// so that input channel `c` of row `r` covers
/// `w[(r * in_features + c) * per_channel ..][..per_channel]`.
fn target_weights(net: &Network, block: usize, target: usize) -> (&Tensor, usize) {
    let b = &net.blocks[block];
    let layers = b.layers.len();
    if target <= layers {
        (&b.layers[target - 1].conv.weight, 9)
    } else if let Some(tr) = &b.transition {
        (&tr.conv.weight, 1)
    } else {
        (&net.head.fc.weight, 1)
    }
}

fn mean_abs_slice(w: &Tensor, per_channel: usize, lo: usize, hi: usize) -> f64 {
    let d = w.dims();
    let (rows, in_f) = (d[0], d[1]);
    let v = w.values();
    let mut acc = 0.0;
    for r in 0..rows {
        let start = (r * in_f + lo) * per_channel;
        let end = (r * in_f + hi) * per_channel;
        acc += v[start..end].iter().map(|x| x.abs()).sum::<f64>();
    }
    acc / (rows * (hi - lo) * per_channel) as f64
}

fn block_reuse(net: &Network, block: usize, bp: &BlockPlan) -> Result<ReuseMatrix, AnalysisError> {
    let layers = bp.layers();
    let mut m = ReuseMatrix::empty(block, layers);
    for t in 1..=layers + 1 {
        let (w, per_channel) = target_weights(net, block, t);
        let width = bp.input_width(t).expect("target in range");
        if w.dims()[1] != width {
            return Err(AnalysisError::Mismatch(format!(
                "block {block} target {t}: weights take {} inputs, plan says {width}",
                w.dims()[1]
            )));
        }
        let strengths: Vec<(usize, f64)> = bp
            .sources(t)
            .expect("target in range")
            .iter()
            .map(|&s| {
                let (lo, hi) = bp.channel_range(t, s).expect("source of target");
                (s, mean_abs_slice(w, per_channel, lo, hi))
            })
            .collect();
        let max = strengths.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        for (s, v) in strengths {
            m.set(s, t, if max > 0.0 { v / max } else { 0.0 });
        }
    }
    Ok(m)
}

/// One [`ReuseMatrix`] per dense block: the mean absolute weight over each
/// source's input-channel slice, divided by the column maximum.
pub fn feature_reuse(net: &Network, plan: &ConnectivityPlan) -> Result<Vec<ReuseMatrix>, AnalysisError> {
    if plan.blocks.len() != net.blocks.len() {
        return Err(AnalysisError::Mismatch(format!(
            "{} planned blocks, network has {}",
            plan.blocks.len(),
            net.blocks.len()
        )));
    }
    plan.blocks.iter().enumerate().map(|(b, bp)| block_reuse(net, b, bp)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReuseSummary {
    pub per_block: Vec<f64>,
    /// Mean of the per-block means.
    pub overall: f64,
}

impl ReuseSummary {
    /// `reuse_summary.csv` body.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,mean_reuse\n");
        for (b, m) in self.per_block.iter().enumerate() {
            out.push_str(&format!("{},{}\n", b + 1, m));
        }
        out.push_str(&format!("overall,{}\n", self.overall));
        out
    }
}

pub fn block_mean_reuse(matrices: &[ReuseMatrix]) -> Result<ReuseSummary, AnalysisError> {
    if matrices.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let per_block: Vec<f64> = matrices
        .iter()
        .map(|m| {
            let (sum, n) = m.present().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / n as f64
        })
        .collect();
    let overall = per_block.iter().sum::<f64>() / per_block.len() as f64;
    Ok(ReuseSummary { per_block, overall })
}

/// Growth rates bracketing a target parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityBracket {
    pub window: usize,
    pub target_params: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    pub params_lo: usize,
    pub params_hi: usize,
    /// Position of the target between the two capacities, in `[0, 1]`.
    pub lambda: f64,
}

impl CapacityBracket {
    pub fn is_exact(&self) -> bool {
        self.k_lo == self.k_hi
    }
}

/// Scans the growth rate of `base` upward from 1 (parameter counts are
/// strictly increasing in k) for the pair with
/// `count(k_lo) <= target <= count(k_lo + 1)`. An exact hit yields the
/// degenerate bracket `(k, k)` with lambda 0.
pub fn capacity_normalize(base: &ArchConfig, target: usize, k_max: usize) -> Result<CapacityBracket, AnalysisError> {
    let count = |k: usize| count_parameters(&base.clone().with_growth(k)).map(|r| r.total);
    let mut prev = None;
    for k in 1..=k_max.max(1) {
        let c = count(k)?;
        if c == target {
            return Ok(CapacityBracket {
                window: base.window,
                target_params: target,
                k_lo: k,
                k_hi: k,
                params_lo: c,
                params_hi: c,
                lambda: 0.0,
            });
        }
        if c > target {
            let Some((k_lo, c_lo)) = prev else {
                return Err(AnalysisError::BelowRange { target, min: c });
            };
            return Ok(CapacityBracket {
                window: base.window,
                target_params: target,
                k_lo,
                k_hi: k,
                params_lo: c_lo,
                params_hi: c,
                lambda: (target - c_lo) as f64 / (c - c_lo) as f64,
            });
        }
        prev = Some((k, c));
    }
    Err(AnalysisError::AboveRange { target, k_max, max: prev.map_or(0, |(_, c)| c) })
}

/// Linear interpolation of the two bracket accuracies at the target capacity.
pub fn interpolate_accuracy(bracket: &CapacityBracket, acc_lo: f64, acc_hi: f64) -> f64 {
    acc_lo + bracket.lambda * (acc_hi - acc_lo)
}

/// Centered moving mean over `window` points, truncated at both ends.
pub fn smooth_series(values: &[f64], window: usize) -> Result<Vec<f64>, AnalysisError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(AnalysisError::Window(window));
    }
    let half = window / 2;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    Ok((0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            if window == 1 {
                values[i]
            } else {
                (prefix[hi] - prefix[lo]) / (hi - lo) as f64
            }
        })
        .collect())
}

/// Smoothing window used for training curves.
pub const CURVE_SMOOTHING: usize = 11;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_connectivity, build_network};

    fn small() -> ArchConfig {
        ArchConfig { num_blocks: 3, layers_per_block: 4, growth_rate: 3, window: 3, stem_channels: 5, ..ArchConfig::default() }
    }

    #[test]
    fn constant_magnitude_weights_give_unit_cells() {
        let mut net = build_network(&small(), 1).unwrap();
        for t in net.params_mut() {
            t.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 0.3 } else { -0.3 });
        }
        let m = feature_reuse(&net, &net.plan).unwrap();
        assert!(m.iter().all(|m| m.present().all(|v| (v - 1.0).abs() < 1e-12)));
    }

    #[test]
    fn zeroed_source_slice_gives_zero_cell() {
        let mut net = build_network(&small(), 2).unwrap();
        let bp = net.plan.blocks[1].clone();
        let (lo, hi) = bp.channel_range(4, 2).unwrap();
        let w = &mut net.blocks[1].layers[3].conv.weight;
        let in_f = w.dims()[1];
        for o in 0..w.dims()[0] {
            for c in lo..hi {
                w.values_mut()[(o * in_f + c) * 9..(o * in_f + c + 1) * 9].fill(0.0);
            }
        }
        let m = feature_reuse(&net, &net.plan).unwrap();
        assert_eq!(m[1].get(2, 4), Some(0.0));
        assert_eq!(m[1].get(3, 4).into_iter().chain(m[1].get(1, 4)).fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn absent_cells_follow_window() {
        let net = build_network(&small(), 3).unwrap();
        let plan = build_connectivity(&small()).unwrap();
        for m in feature_reuse(&net, &plan).unwrap() {
            for s in 0..=4 {
                for t in 1..=5 {
                    let in_window = s < t && t - s <= 3;
                    assert_eq!(m.get(s, t).is_some(), in_window, "s={s} t={t}");
                }
            }
        }
    }

    #[test]
    fn block_means() {
        let mut a = ReuseMatrix::empty(0, 1);
        a.set(0, 1, 1.0);
        a.set(0, 2, 1.0);
        a.set(1, 2, 1.0);
        let mut b = ReuseMatrix::empty(1, 1);
        b.set(0, 1, 1.0);
        b.set(1, 2, 0.0);
        let s = block_mean_reuse(&[a, b]).unwrap();
        assert_eq!(s.per_block, vec![1.0, 0.5]);
        assert_eq!(s.overall, 0.75);
        assert!(block_mean_reuse(&[]).is_err());
    }

    #[test]
    fn exact_capacity_hit_is_degenerate() {
        let base = ArchConfig::default().with_window(5);
        let c9 = count_parameters(&base.clone().with_growth(9)).unwrap().total;
        let b = capacity_normalize(&base, c9, 40).unwrap();
        assert_eq!((b.k_lo, b.k_hi, b.lambda), (9, 9, 0.0));
        assert!(b.is_exact());
    }

    #[test]
    fn capacity_range_errors() {
        let base = ArchConfig::default().with_window(3);
        assert!(matches!(capacity_normalize(&base, 10, 40), Err(AnalysisError::BelowRange { .. })));
        assert!(matches!(capacity_normalize(&base, 1_000_000_000, 40), Err(AnalysisError::AboveRange { .. })));
    }

    #[test]
    fn interpolation_endpoints() {
        let mut b = CapacityBracket { window: 7, target_params: 0, k_lo: 1, k_hi: 2, params_lo: 0, params_hi: 0, lambda: 0.0 };
        assert_eq!(interpolate_accuracy(&b, 0.9, 0.92), 0.9);
        b.lambda = 1.0;
        assert_eq!(interpolate_accuracy(&b, 0.9, 0.92), 0.92);
        b.lambda = 0.5;
        assert!((interpolate_accuracy(&b, 0.90, 0.92) - 0.91).abs() < 1e-15);
        b.lambda = 0.37;
        assert_eq!(interpolate_accuracy(&b, 0.8, 0.8), 0.8);
    }

    #[test]
    fn smoothing_cases() {
        assert_eq!(smooth_series(&[2.0; 20], 11).unwrap(), vec![2.0; 20]);
        let v = [1.0, 5.0, -2.0, 4.0];
        assert_eq!(smooth_series(&v, 1).unwrap(), v.to_vec());
        assert_eq!(smooth_series(&v, 3).unwrap(), vec![3.0, 4.0 / 3.0, 7.0 / 3.0, 1.0]);
        assert!(smooth_series(&v, 4).is_err());
        assert!(smooth_series(&v, 0).is_err());
        assert!(smooth_series(&[], 11).unwrap().is_empty());
    }

    #[test]
    fn csv_layout() {
        let net = build_network(&small(), 3).unwrap();
        let m = feature_reuse(&net, &net.plan).unwrap();
        let csv = m[0].to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "source,t1,t2,t3,t4,exit");
        assert_eq!(lines.len(), 6);
        // source 0 feeds t1..t3 only
        assert!(lines[1].ends_with(",,"));
        assert_eq!(lines[1].split(',').count(), 6);
    }
}
