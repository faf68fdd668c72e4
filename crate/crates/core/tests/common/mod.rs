//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use windense::arch::{ArchConfig, Network};

/// Default-architecture parameter counts, windows 1 through 13.
pub const TABLE_COUNTS: [usize; 13] = [
    48882, 99218, 151450, 205578, 261602, 319522, 379338, 441050, 504658, 570162, 637562, 706858, 1019722,
];

/// Hand-rolled parameter count straight from the layer recipe, with its own
/// width bookkeeping.
pub fn count_oracle(c: &ArchConfig) -> usize {
    let (l, k, n) = (c.layers_per_block, c.growth_rate, c.window);
    let mut total = c.input_channels * c.stem_channels * 9;
    let mut block_in = c.stem_channels;
    for b in 0..c.num_blocks {
        let width = |t: usize| -> usize {
            (t.saturating_sub(n)..t).map(|s| if s == 0 { block_in } else { k }).sum()
        };
        for t in 1..=l {
            let w = width(t);
            total += 2 * w + 9 * w * k;
        }
        let exit = width(l + 1);
        if b + 1 < c.num_blocks {
            total += 2 * exit + exit * exit;
        } else {
            total += 2 * exit + exit * c.num_classes + c.num_classes;
        }
        block_in = exit;
    }
    total
}

/// Feature-reuse cells recomputed from raw weight indices:
/// `out[block][source][target - 1]`.
pub fn reuse_oracle(net: &Network) -> Vec<Vec<Vec<Option<f64>>>> {
    let c = &net.config;
    let (l, k, n) = (c.layers_per_block, c.growth_rate, c.window);
    let mut block_in = block_input_width(c, 0);
    let mut out = Vec::new();
    for (b, block) in net.blocks.iter().enumerate() {
        let mut cells = vec![vec![None; l + 1]; l + 1];
        for t in 1..=l + 1 {
            let srcs: Vec<usize> = (t.saturating_sub(n)..t).collect();
            // channel -> source lookup table
            let mut owner = Vec::new();
            for &s in &srcs {
                let w = if s == 0 { block_in } else { k };
                owner.extend(std::iter::repeat_n(s, w));
            }
            let (values, taps): (&[f64], usize) = if t <= l {
                (block.layers[t - 1].conv.weight.values(), 9)
            } else if let Some(tr) = &block.transition {
                (tr.conv.weight.values(), 1)
            } else {
                (net.head.fc.weight.values(), 1)
            };
            let width = owner.len();
            let mut sum = vec![0.0; l + 1];
            let mut cnt = vec![0usize; l + 1];
            for (i, v) in values.iter().enumerate() {
                let s = owner[(i / taps) % width];
                sum[s] += v.abs();
                cnt[s] += 1;
            }
            let means: Vec<(usize, f64)> = srcs.iter().map(|&s| (s, sum[s] / cnt[s] as f64)).collect();
            let max = means.iter().map(|m| m.1).fold(0.0, f64::max);
            for (s, m) in means {
                cells[s][t - 1] = Some(m / max);
            }
        }
        block_in = block_input_width(c, b + 1);
        out.push(cells);
    }
    out
}

/// Input width of block `b`, recomputed from scratch.
fn block_input_width(c: &ArchConfig, b: usize) -> usize {
    let mut w = c.stem_channels;
    for _ in 0..b {
        w = ((c.layers_per_block + 1).saturating_sub(c.window)..=c.layers_per_block)
            .map(|s| if s == 0 { w } else { c.growth_rate })
            .sum();
    }
    w
}

/// Naive centered moving mean with truncated edges.
pub fn naive_smooth(v: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..v.len())
        .map(|i| {
            let mut s = 0.0;
            let mut n = 0;
            for j in 0..v.len() {
                if j + h >= i && j <= i + h {
                    s += v[j];
                    n += 1;
                }
            }
            s / n as f64
        })
        .collect()
}

pub const RECORD: usize = 3073;

/// `n` CIFAR-style records whose bytes are a fixed function of position.
pub fn crafted_records(n: usize, salt: u8) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(n * RECORD);
    for r in 0..n {
        bytes.push(((r + salt as usize) % 10) as u8);
        for p in 0..3072 {
            bytes.push(((p * 7 + r * 13 + salt as usize * 29) % 256) as u8);
        }
    }
    bytes
}

/// Expected pixel of record `r`, channel `c`, row `y`, column `x`, from byte
/// offsets alone.
pub fn pixel_oracle(bytes: &[u8], r: usize, c: usize, y: usize, x: usize) -> f64 {
    bytes[r * RECORD + 1 + c * 1024 + y * 32 + x] as f64 / 255.0
}

pub fn label_oracle(bytes: &[u8], r: usize) -> usize {
    bytes[r * RECORD] as usize
}

/// Writes a complete crafted archive: five train batches and one test batch.
pub fn write_crafted_archive(dir: &Path, per_file: usize) -> (Vec<Vec<u8>>, Vec<u8>) {
    let train: Vec<Vec<u8>> = (0..5).map(|i| crafted_records(per_file, i as u8)).collect();
    for (i, b) in train.iter().enumerate() {
        std::fs::write(dir.join(format!("data_batch_{}.bin", i + 1)), b).unwrap();
    }
    let test = crafted_records(per_file, 77);
    std::fs::write(dir.join("test_batch.bin"), &test).unwrap();
    (train, test)
}
