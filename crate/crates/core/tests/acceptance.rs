//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use windense::analysis::{capacity_normalize, feature_reuse, interpolate_accuracy, CapacityBracket};
use windense::arch::{build_connectivity, build_network, count_parameters, ArchConfig, Network};
use windense::checkpoint::{self, decode, encode};
use windense::data::load_cifar10;
use windense::run::{self, run_training, RunOptions, RunSpec, CHECKPOINT_FILE, METRICS_FILE};
use windense::smoke::{epochs_to_memorize, network_gradient_check, op_gradient_checks, GRAD_TOLERANCE};
use windense::train::{evaluate, EpochRow};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ac1_table_counts() -> Outcome {
    for (i, &want) in common::TABLE_COUNTS.iter().enumerate() {
        let got = count_parameters(&ArchConfig::default().with_window(i + 1)).map_err(|e| e.to_string())?.total;
        ensure(got == want, || format!("N={}: {got} != {want}", i + 1))?;
    }
    Ok("13/13 counts exact".into())
}

fn ac2_full_equivalence() -> Outcome {
    let full = build_connectivity(&ArchConfig::default().with_window(13)).map_err(|e| e.to_string())?;
    let twelve = build_connectivity(&ArchConfig::default().with_window(12)).map_err(|e| e.to_string())?;
    for (fb, tb) in full.blocks.iter().zip(&twelve.blocks) {
        for t in 1..=13 {
            let all: Vec<usize> = (0..t).collect();
            ensure(fb.sources(t) == Some(all.as_slice()), || format!("N=13 target {t} is not all predecessors"))?;
            if t <= 12 {
                ensure(tb.sources(t) == fb.sources(t), || format!("N=12 target {t} differs"))?;
            } else {
                let no_input: Vec<usize> = (1..=12).collect();
                ensure(tb.sources(t) == Some(no_input.as_slice()), || "N=12 exit is not {1..12}".into())?;
            }
        }
    }
    Ok("N=13 plan = all predecessors; N=12 differs only by exit source 0".into())
}

fn ac3_builder_agrees() -> Outcome {
    let mut n = 0;
    for window in 1..=13 {
        for k in [4, 12, 20] {
            let c = ArchConfig::default().with_window(window).with_growth(k);
            let counted = count_parameters(&c).map_err(|e| e.to_string())?.total;
            let built = build_network(&c, 0).map_err(|e| e.to_string())?.num_parameters();
            ensure(built == counted, || format!("N={window} k={k}: built {built}, counted {counted}"))?;
            n += 1;
        }
    }
    Ok(format!("{n}/39 configurations agree"))
}

fn ac4_gradients() -> Outcome {
    let checks = op_gradient_checks(None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (name, c) in &checks {
        ensure(c.max_rel_error < GRAD_TOLERANCE, || format!("{name}: {:.2e}", c.max_rel_error))?;
        worst = worst.max(c.max_rel_error);
    }
    let net = network_gradient_check(None).map_err(|e| e.to_string())?;
    ensure(net.max_rel_error < GRAD_TOLERANCE, || format!("network: {:.2e}", net.max_rel_error))?;
    Ok(format!(
        "{} op checks (worst {:.1e}) + composed net over {} params ({:.1e})",
        checks.len(),
        worst,
        net.analytic.len(),
        net.max_rel_error
    ))
}

fn ac5a_overfit() -> Outcome {
    match epochs_to_memorize(8, 50).map_err(|e| e.to_string())? {
        Some(e) => Ok(format!("single batch at 100% after {e} epochs")),
        None => Err("not memorized within 50 epochs".into()),
    }
}

fn smoke_spec() -> RunSpec {
    let mut spec = RunSpec::default();
    spec.apply_text("blocks = 2\nlayers = 4\ngrowth = 4\nwindow = 2\nepochs = 30\nsynthetic = true\nsubset = 512\nseed = 1\n")
        .expect("valid spec");
    spec
}

fn ac5b_smoke(dir: &Path) -> Outcome {
    let spec = smoke_spec();
    let out = run_training(dir, &spec, &RunOptions::default(), |_| {}).map_err(|e| e.to_string())?;
    let (first, last) = (out.rows.first().unwrap(), out.rows.last().unwrap());
    let ratio = last.train_loss / first.train_loss;
    let (train, _) = run::prepare_data(&spec, None).map_err(|e| e.to_string())?;
    let ck = checkpoint::load(&dir.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let acc = evaluate(&ck.network, &train, 128).map_err(|e| e.to_string())?.accuracy;
    let chance = 1.0 / spec.arch.num_classes as f64;
    ensure(ratio <= 0.5, || format!("loss ratio {ratio:.3} > 0.5"))?;
    ensure(acc > 2.0 * chance, || format!("train accuracy {acc:.3} <= {:.2}", 2.0 * chance))?;
    Ok(format!(
        "synthetic 512 samples, 30 epochs: loss {:.3} -> {:.3} (ratio {ratio:.3}), train accuracy {acc:.3}",
        first.train_loss, last.train_loss
    ))
}

fn ac6_capacity() -> Outcome {
    let target = 1_019_722;
    for window in 1..=12 {
        let base = ArchConfig::default().with_window(window);
        let b = capacity_normalize(&base, target, 64).map_err(|e| e.to_string())?;
        let lo = count_parameters(&base.clone().with_growth(b.k_lo)).unwrap().total;
        let hi = count_parameters(&base.clone().with_growth(b.k_hi)).unwrap().total;
        ensure(lo <= target && target <= hi && b.k_hi - b.k_lo <= 1, || format!("N={window}: bad bracket {b:?}"))?;
    }
    let mut b = CapacityBracket { window: 7, target_params: 0, k_lo: 1, k_hi: 2, params_lo: 0, params_hi: 0, lambda: 0.0 };
    ensure(interpolate_accuracy(&b, 0.90, 0.92) == 0.90, || "lambda=0 endpoint".into())?;
    b.lambda = 1.0;
    ensure(interpolate_accuracy(&b, 0.90, 0.92) == 0.92, || "lambda=1 endpoint".into())?;
    b.lambda = 0.5;
    ensure((interpolate_accuracy(&b, 0.90, 0.92) - 0.91).abs() < 1e-15, || "midpoint".into())?;
    Ok("N=1..12 bracket 1,019,722 with k_hi-k_lo<=1; endpoints and midpoint exact".into())
}

fn reuse_invariants(net: &Network, label: &str) -> Result<(), String> {
    let matrices = feature_reuse(net, &net.plan).map_err(|e| e.to_string())?;
    let (l, n) = (net.config.layers_per_block, net.config.window);
    for m in &matrices {
        for t in 1..=l + 1 {
            let col: Vec<f64> = (0..=l).filter_map(|s| m.get(s, t)).collect();
            let max = col.iter().copied().fold(f64::MIN, f64::max);
            ensure((max - 1.0).abs() <= 1e-12, || format!("{label} block {} t={t}: max {max}", m.block + 1))?;
            ensure(col.iter().all(|v| (0.0..=1.0).contains(v)), || format!("{label}: cell outside [0,1]"))?;
            for s in 0..=l {
                ensure(m.get(s, t).is_some() == (s < t && t - s <= n), || format!("{label}: mask differs at s={s} t={t}"))?;
            }
        }
    }
    let mut scaled = net.clone();
    for (b, block) in scaled.blocks.iter_mut().enumerate() {
        for (i, layer) in block.layers.iter_mut().enumerate() {
            let c = 0.5 + (b * 7 + i) as f64 * 0.37;
            layer.conv.weight.values_mut().iter_mut().for_each(|w| *w *= c);
        }
    }
    let after = feature_reuse(&scaled, &scaled.plan).map_err(|e| e.to_string())?;
    for (x, y) in matrices.iter().zip(&after) {
        for s in 0..=l {
            for t in 1..=l + 1 {
                let same = match (x.get(s, t), y.get(s, t)) {
                    (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                    (a, b) => a == b,
                };
                ensure(same, || format!("{label}: scaling changed cell s={s} t={t}"))?;
            }
        }
    }
    Ok(())
}

fn ac7_reuse(trained_ck: &Path) -> Outcome {
    let untrained = build_network(&ArchConfig::default().with_window(3), 0).map_err(|e| e.to_string())?;
    reuse_invariants(&untrained, "untrained")?;
    let trained = checkpoint::load(trained_ck).map_err(|e| e.to_string())?.network;
    reuse_invariants(&trained, "trained")?;
    Ok("column max 1, cells in [0,1], window mask, scale invariance on untrained and trained nets".into())
}

fn ac8_data(tmp: &Path) -> Outcome {
    let dir = tmp.join("crafted");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let (train_bytes, test_bytes) = common::write_crafted_archive(&dir, 3);
    let (train, test) = load_cifar10(&dir).map_err(|e| e.to_string())?;
    ensure(train.len() == 15 && test.len() == 3, || "crafted sizes".into())?;
    let mut checked = 0;
    for (f, bytes) in train_bytes.iter().enumerate() {
        for r in 0..3 {
            let i = f * 3 + r;
            ensure(train.labels[i] == common::label_oracle(bytes, r), || format!("label {i}"))?;
            for (c, y, x) in [(0, 0, 0), (1, 17, 5), (2, 31, 31), (0, 31, 0), (2, 0, 31)] {
                let got = train.images.values()[((i * 3 + c) * 32 + y) * 32 + x];
                ensure(got == common::pixel_oracle(bytes, r, c, y, x), || format!("pixel {i},{c},{y},{x}"))?;
                checked += 1;
            }
        }
    }
    ensure(test.labels[2] == common::label_oracle(&test_bytes, 2), || "test label".into())?;
    let mut msg = format!("crafted archive: {checked} offset spot checks exact");
    match run::resolve_data_dir(None) {
        Some(real) => {
            let (train, test) = load_cifar10(&real).map_err(|e| e.to_string())?;
            ensure(train.len() == 50_000 && test.len() == 10_000, || "full archive sizes".into())?;
            let in_range = |d: &windense::data::Dataset| d.images.values().iter().all(|v| (0.0..=1.0).contains(v));
            ensure(in_range(&train) && in_range(&test), || "pixel outside [0,1]".into())?;
            msg.push_str("; full archive 50000/10000 in [0,1]");
        }
        None => msg.push_str(&format!("; full archive not present (set {})", run::DATA_ENV)),
    }
    Ok(msg)
}

fn persistence_spec() -> RunSpec {
    let mut spec = RunSpec::default();
    spec.apply_text(
        "blocks = 2\nlayers = 3\ngrowth = 3\nwindow = 2\nstem = 6\nclasses = 4\ninput_height = 16\ninput_width = 16\n\
         epochs = 6\nbatch_size = 16\nlr_schedule = 0:0.1,3:0.01\nsynthetic = true\nsubset = 96\nseed = 5\n",
    )
    .expect("valid spec");
    spec
}

fn metrics_equal(a: &Path, b: &Path) -> Result<usize, String> {
    let ra = run::read_metrics(a).map_err(|e| e.to_string())?;
    let rb = run::read_metrics(b).map_err(|e| e.to_string())?;
    ensure(ra.len() == rb.len(), || format!("{} vs {} rows", ra.len(), rb.len()))?;
    ensure(ra.iter().zip(&rb).all(|(x, y): (&EpochRow, &EpochRow)| x.same_results(y)), || "rows differ".into())?;
    Ok(ra.len())
}

fn ac9_determinism(tmp: &Path) -> Outcome {
    let spec = persistence_spec();
    let opts = RunOptions::default();
    let (a, b, c) = (tmp.join("det_a"), tmp.join("det_b"), tmp.join("det_c"));
    run_training(&a, &spec, &opts, |_| {}).map_err(|e| e.to_string())?;
    run_training(&b, &spec, &opts, |_| {}).map_err(|e| e.to_string())?;
    let rows = metrics_equal(&a.join(METRICS_FILE), &b.join(METRICS_FILE))?;

    run_training(&c, &spec, &RunOptions { stop_after: Some(2), ..Default::default() }, |_| {}).map_err(|e| e.to_string())?;
    run_training(&c, &spec, &RunOptions { stop_after: Some(4), ..Default::default() }, |_| {}).map_err(|e| e.to_string())?;
    let resumed = run_training(&c, &spec, &opts, |_| {}).map_err(|e| e.to_string())?;
    ensure(resumed.resumed_from == Some(4), || "did not resume".into())?;
    metrics_equal(&a.join(METRICS_FILE), &c.join(METRICS_FILE))?;
    let final_a = fs::read(a.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let final_c = fs::read(c.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    ensure(final_a == final_c, || "final checkpoints differ".into())?;

    let ck = decode(&final_a).map_err(|e| e.to_string())?;
    ensure(encode(&ck.network, ck.epochs_done, ck.velocities.as_ref()) == final_a, || "re-encode differs".into())?;
    let p = tmp.join("roundtrip.bin");
    checkpoint::save(&p, &ck.network, ck.epochs_done, ck.velocities.as_ref()).map_err(|e| e.to_string())?;
    ensure(fs::read(&p).map_err(|e| e.to_string())? == final_a, || "save/load/save differs".into())?;
    Ok(format!(
        "{rows} epochs identical across same-seed runs and a run interrupted twice; final checkpoints and save/load/save bitwise equal"
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let smoke_dir = tmp.path().join("smoke");
    let mut failed = 0;
    let mut report = |id: &str, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let r = f();
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(m) => println!("[PASS] {id} {title}: {m} ({secs:.1}s)"),
            Err(m) => {
                failed += 1;
                println!("[FAIL] {id} {title}: {m} ({secs:.1}s)");
            }
        }
    };
    report("AC1", "parameter counts", &mut ac1_table_counts);
    report("AC2", "full-window equivalence", &mut ac2_full_equivalence);
    report("AC3", "builder/counter agreement", &mut ac3_builder_agrees);
    report("AC4", "gradient correctness", &mut ac4_gradients);
    report("AC5a", "single-batch overfit", &mut ac5a_overfit);
    report("AC5b", "training smoke", &mut || ac5b_smoke(&smoke_dir));
    report("AC6", "capacity normalization", &mut ac6_capacity);
    report("AC7", "feature-reuse invariants", &mut || ac7_reuse(&smoke_dir.join(CHECKPOINT_FILE)));
    report("AC8", "data fidelity", &mut || ac8_data(tmp.path()));
    report("AC9", "determinism and persistence", &mut || ac9_determinism(tmp.path()));
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
