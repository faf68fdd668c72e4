use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use windense::arch::{build_network, count_parameters, ArchConfig};
use windense::checkpoint;

fn windense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_windense"))
        .args(args)
        .env_remove("WINDENSE_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--synthetic", "--subset", "32", "--test-subset", "8", "--blocks", "2", "--layers", "2", "--growth", "3",
    "--window", "2", "--stem", "4", "--classes", "4", "--image-size", "8", "--batch-size", "8", "--epochs", "5",
    "--lr-schedule", "0:0.1,3:0.01", "--seed", "3",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    windense(&args)
}

/// metrics.csv without the wall-clock column.
fn results(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn count_reference_totals() {
    let o = windense(&["count", "--window", "13", "--growth", "12"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1019722"));
    let o = windense(&["count", "--window", "1", "--growth", "12"]);
    assert!(stdout(&o).contains("48882"));
}

#[test]
fn count_rejects_oversized_window() {
    let o = windense(&["count", "--window", "14"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("window 14"));
}

#[test]
fn count_csv_matches_builder() {
    for (w, k, b, l) in [(2, 5, 2, 4), (5, 3, 3, 6), (1, 7, 1, 3)] {
        let (w, k, b, l) = (w.to_string(), k.to_string(), b.to_string(), l.to_string());
        let o = windense(&["count", "--csv", "--window", &w, "--growth", &k, "--blocks", &b, "--layers", &l]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let total: usize = out.lines().last().unwrap().strip_prefix("total,").unwrap().parse().unwrap();
        let c = ArchConfig {
            num_blocks: b.parse().unwrap(),
            layers_per_block: l.parse().unwrap(),
            growth_rate: k.parse().unwrap(),
            window: w.parse().unwrap(),
            ..ArchConfig::default()
        };
        assert_eq!(total, build_network(&c, 0).unwrap().num_parameters());
        let parts: usize = out.lines().skip(1).filter(|l| !l.starts_with("total")).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(parts, total);
    }
}

#[test]
fn plan_listing() {
    let o = windense(&["plan", "--window", "3"]);
    assert!(stdout(&o).contains("target 5 <- {2,3,4}"));
    let o = windense(&["plan", "--window", "13"]);
    assert!(stdout(&o).contains("exit <- {0,1,2,3,4,5,6,7,8,9,10,11,12}"));
    let o = windense(&["plan", "--window", "3", "--csv"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("block,target,kind,source,source_channels"));
    let rows: Vec<&str> = lines.collect();
    // per block: targets 1,2 have 1,2 sources; targets 3..=13 have 3
    assert_eq!(rows.len(), 3 * (1 + 2 + 11 * 3));
    assert!(rows.contains(&"1,13,exit,10,12"));
    assert!(!rows.iter().any(|r| r.starts_with("1,13,exit,0,")));
}

#[test]
fn interrupted_training_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &[]).status.success());
    let o = train(&b, &["--stop-after", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("rerun to resume"));
    assert_eq!(results(&b.join("metrics.csv")).len(), 3);
    assert!(train(&b, &[]).status.success());
    assert_eq!(results(&a.join("metrics.csv")), results(&b.join("metrics.csv")));
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    for f in ["config.txt", "checkpoint_epoch0003.bin", "checkpoint_epoch0005.bin"] {
        assert!(b.join(f).is_file(), "{f}");
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# tiny run\nepochs = 1\nseed = 11\nkeep_prob = 0.9\n").unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(snap.contains("keep_prob = 0.9\n"));
    // flags override the file's epochs and seed
    assert!(snap.contains("epochs = 5\n"));
    assert!(snap.contains("seed = 3\n"));
}

#[test]
fn train_error_paths_leave_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = windense(&["train", "--out", out.to_str().unwrap(), "--epochs", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("WINDENSE_DATA"));
    let o = windense(&["train", "--out", out.to_str().unwrap(), "--data", dir.path().join("none").to_str().unwrap()]);
    assert!(!o.status.success());
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "colour = red\n").unwrap();
    let o = windense(&["train", "--out", out.to_str().unwrap(), "--config", bad.to_str().unwrap(), "--synthetic"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("colour"));
    assert!(!out.exists());

    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let o = train(&file.join("run"), &[]);
    assert!(!o.status.success());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "1").unwrap();
    let o = train(&out, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn analyze_zeroed_source_slice() {
    let dir = tempfile::tempdir().unwrap();
    let c = ArchConfig {
        num_blocks: 2,
        layers_per_block: 3,
        growth_rate: 2,
        window: 2,
        stem_channels: 3,
        num_classes: 4,
        input_height: 8,
        input_width: 8,
        ..ArchConfig::default()
    };
    let mut net = build_network(&c, 1).unwrap();
    // block 1, target 3 consumes sources {1, 2}; zero source 1's two channels
    let (lo, hi) = net.plan.blocks[0].channel_range(3, 1).unwrap();
    let w = &mut net.blocks[0].layers[2].conv.weight;
    let in_ch = w.dims()[1];
    for o in 0..w.dims()[0] {
        w.values_mut()[(o * in_ch + lo) * 9..(o * in_ch + hi) * 9].fill(0.0);
    }
    let ck = dir.path().join("ck.bin");
    checkpoint::save(&ck, &net, 0, None).unwrap();
    let out = dir.path().join("analysis");
    let o = windense(&["analyze", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("block1_reuse.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["source", "t1", "t2", "t3", "exit"]);
    assert_eq!(rows[2][3], "0");
    assert_eq!(rows[3][3], "1");
    assert_eq!(rows[1][3], "");
    assert!(out.join("block2_reuse.csv").is_file());
    let summary = fs::read_to_string(out.join("reuse_summary.csv")).unwrap();
    assert!(summary.starts_with("block,mean_reuse\n1,"));
}

#[test]
fn analyze_rejects_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_network(&ArchConfig { num_blocks: 1, layers_per_block: 2, growth_rate: 2, window: 1, stem_channels: 2, ..ArchConfig::default() }, 0).unwrap();
    let bytes = checkpoint::encode(&net, 0, None);
    for (name, offset) in [("magic", 0usize), ("digest", 6 + 32 + 8 + 3)] {
        let mut bad = bytes.clone();
        bad[offset] ^= 0x20;
        let path = dir.path().join(format!("{name}.bin"));
        fs::write(&path, bad).unwrap();
        let out = dir.path().join(format!("out_{name}"));
        let o = windense(&["analyze", "--checkpoint", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(!o.status.success(), "{name}");
        assert!(!out.exists(), "{name}");
    }
}

#[test]
fn analyze_smooths_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &[]).status.success());
    let out = dir.path().join("an");
    let o = windense(&["analyze", "--metrics", run.join("metrics.csv").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("curves_smoothed.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn normalize_brackets() {
    let o = windense(&["normalize", "--window", "7", "--match-window", "13", "--match-growth", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let base = ArchConfig::default().with_window(7);
    let k = (1..64).find(|&k| count_parameters(&base.clone().with_growth(k + 1)).unwrap().total > 1_019_722).unwrap();
    assert!(out.contains(&format!("k_lo {k} ")), "{out}");
    assert!(out.contains(&format!("k_hi {} ", k + 1)), "{out}");

    let o = windense(&["normalize", "--window", "13", "--target-params", "1019722"]);
    let out = stdout(&o);
    assert!(out.contains("k_lo 12 ") && out.contains("k_hi 12 ") && out.contains("lambda 0\n"), "{out}");

    let o = windense(&["normalize", "--window", "3", "--target-params", "1000"]);
    assert!(!o.status.success());
}

#[test]
fn normalize_with_training_interpolates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("norm");
    let mut args = vec!["normalize", "--target-params", "900", "--train", "--out", out.to_str().unwrap()];
    let growth = TINY.iter().position(|a| *a == "--growth").unwrap();
    args.extend(TINY.iter().enumerate().filter(|(i, _)| *i != growth && *i != growth + 1).map(|(_, a)| *a));
    let o = windense(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("interpolated test accuracy"));
}

#[test]
fn smoke_passes_and_detects_injected_fault() {
    let o = windense(&["smoke"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("[PASS] count:window13"));
    let o = windense(&["smoke", "--inject-fault", "conv-backward"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("[FAIL] grad:conv2d.weight"));
    assert!(stderr(&o).contains("grad:conv2d.weight"));
}
