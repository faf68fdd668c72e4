use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use windense::analysis::{block_mean_reuse, capacity_normalize, feature_reuse, interpolate_accuracy, smooth_series, CURVE_SMOOTHING};
use windense::arch::{build_connectivity, count_parameters, ArchConfig};
use windense::checkpoint;
use windense::graph::Fault;
use windense::run::{read_metrics, run_training, RunOptions, RunSpec, DATA_ENV};
use windense::smoke::run_smoke;

#[derive(Parser)]
#[command(name = "windense", version, about = "DenseNets with windowed dense connectivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter count and its per-layer breakdown.
    Count {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Print the sources consumed by every layer and block exit.
    Plan {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Train into a run directory, resuming from its latest checkpoint.
    Train {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write feature-reuse CSVs for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// metrics.csv whose curves are also written smoothed.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the growth rates bracketing a parameter budget.
    Normalize {
        #[arg(long, conflicts_with_all = ["match_window", "match_growth"])]
        target_params: Option<usize>,
        #[arg(long, requires = "match_growth")]
        match_window: Option<usize>,
        #[arg(long, requires = "match_window")]
        match_growth: Option<usize>,
        #[arg(long, default_value_t = 64)]
        growth_max: usize,
        /// Train both bracket networks and interpolate their test accuracy.
        #[arg(long, requires = "out")]
        train: bool,
        #[command(flatten)]
        train_args: TrainArgs,
    },
    /// Run gradient, parameter-count and tiny-training self-checks.
    Smoke {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ConvBackward,
}

/// Architecture flags. Unset flags keep the default (or config-file) value.
#[derive(Args, Clone, Default)]
struct ArchArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    stem: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Square input side length.
    #[arg(long)]
    image_size: Option<usize>,
}

impl ArchArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k, v: Option<usize>| {
            if let Some(v) = v {
                out.push((k, v.to_string()));
            }
        };
        put("window", self.window);
        put("growth", self.growth);
        put("blocks", self.blocks);
        put("layers", self.layers);
        put("stem", self.stem);
        put("classes", self.classes);
        put("input_height", self.image_size);
        put("input_width", self.image_size);
        out
    }

    fn config(&self) -> Result<ArchConfig> {
        let mut c = ArchConfig::default();
        for (k, v) in self.pairs() {
            c.set_field(k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, env = DATA_ENV)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// e.g. `0:0.1,150:0.01,225:0.001`
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nesterov: bool,
    /// Stop after this many completed epochs, leaving the run resumable.
    #[arg(long)]
    stop_after: Option<usize>,
}

impl TrainArgs {
    fn spec(&self) -> Result<RunSpec> {
        let spec = self.spec_unchecked()?;
        spec.validate()?;
        Ok(spec)
    }

    fn spec_unchecked(&self) -> Result<RunSpec> {
        let mut spec = RunSpec::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            spec.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        let mut pairs: Vec<(&str, String)> = self.arch.pairs();
        for (k, v) in [
            ("subset", self.subset.map(|v| v.to_string())),
            ("test_subset", self.test_subset.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr_schedule", self.lr_schedule.clone()),
            ("momentum", self.momentum.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("keep_prob", self.keep_prob.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ] {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        }
        if self.synthetic {
            pairs.push(("synthetic", "true".into()));
        }
        if self.nesterov {
            pairs.push(("nesterov", "true".into()));
        }
        for (k, v) in pairs {
            spec.set(k, &v)?;
        }
        Ok(spec)
    }

    fn options(&self) -> RunOptions {
        RunOptions { data_dir: self.data.clone(), stop_after: self.stop_after }
    }
}

fn cmd_count(arch: &ArchArgs, csv: bool) -> Result<()> {
    let report = count_parameters(&arch.config()?)?;
    if csv {
        println!("component,parameters");
        for (name, n) in &report.breakdown {
            println!("{name},{n}");
        }
        println!("total,{}", report.total);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn fmt_set(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(usize::to_string).collect();
    format!("{{{}}}", items.join(","))
}

fn cmd_plan(arch: &ArchArgs, csv: bool) -> Result<()> {
    let config = arch.config()?;
    let plan = build_connectivity(&config)?;
    if csv {
        println!("block,target,kind,source,source_channels");
    }
    for (b, bp) in plan.blocks.iter().enumerate() {
        if !csv {
            println!("block {} (input {} channels)", b + 1, bp.input_channels);
        }
        for t in 1..=bp.layers() + 1 {
            let kind = if t <= bp.layers() { "layer" } else { "exit" };
            let sources = bp.sources(t).expect("target in range");
            if csv {
                for &s in sources {
                    println!("{},{t},{kind},{s},{}", b + 1, bp.source_channels(s));
                }
            } else {
                let label = if kind == "exit" { "exit".to_string() } else { format!("target {t}") };
                println!("  {label} <- {} ({} channels)", fmt_set(sources), bp.input_width(t).expect("target in range"));
            }
        }
    }
    if !csv {
        println!("{}", count_parameters(&config)?);
    }
    Ok(())
}

fn print_row(row: &windense::train::EpochRow) {
    println!(
        "epoch {:>4}  lr {:<8} train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}  {:.1}s",
        row.epoch, row.lr, row.train_loss, row.train_acc, row.test_loss, row.test_acc, row.wall_seconds
    );
}

fn train_into(dir: &Path, spec: &RunSpec, args: &TrainArgs) -> Result<Option<f64>> {
    let outcome = run_training(dir, spec, &args.options(), print_row)
        .with_context(|| format!("training in {}", dir.display()))?;
    if outcome.finished(spec) {
        println!("finished {} epochs in {}", outcome.epochs_done, dir.display());
    } else {
        println!("stopped after {} of {} epochs; rerun to resume", outcome.epochs_done, spec.train.epochs);
    }
    Ok(outcome.rows.last().filter(|_| outcome.finished(spec)).map(|r| r.test_acc))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let Some(out) = &args.out else { bail!("--out is required") };
    let spec = args.spec()?;
    train_into(out, &spec, args)?;
    Ok(())
}

/// Writes every file to a staging directory first so a failure leaves no
/// partial output behind.
fn write_all(out: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, body) in files {
        let tmp = out.join(format!(".{name}.tmp"));
        fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    }
    for (name, _) in files {
        fs::rename(out.join(format!(".{name}.tmp")), out.join(name))?;
    }
    Ok(())
}

fn cmd_analyze(checkpoint_path: Option<&Path>, metrics: Option<&Path>, out: &Path) -> Result<()> {
    if checkpoint_path.is_none() && metrics.is_none() {
        bail!("nothing to analyze: pass --checkpoint and/or --metrics");
    }
    let mut files = Vec::new();
    if let Some(path) = checkpoint_path {
        let ck = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let matrices = feature_reuse(&ck.network, &ck.network.plan)?;
        for m in &matrices {
            files.push((format!("block{}_reuse.csv", m.block + 1), m.to_csv()));
        }
        let summary = block_mean_reuse(&matrices)?;
        for (b, v) in summary.per_block.iter().enumerate() {
            println!("block {} mean reuse {v:.4}", b + 1);
        }
        println!("overall mean reuse {:.4}", summary.overall);
        files.push(("reuse_summary.csv".into(), summary.to_csv()));
    }
    if let Some(path) = metrics {
        let rows = read_metrics(path)?;
        let col = |f: fn(&windense::train::EpochRow) -> f64| -> Result<Vec<f64>> {
            Ok(smooth_series(&rows.iter().map(f).collect::<Vec<_>>(), CURVE_SMOOTHING)?)
        };
        let (tl, ta, vl, va) = (col(|r| r.train_loss)?, col(|r| r.train_acc)?, col(|r| r.test_loss)?, col(|r| r.test_acc)?);
        let mut body = String::from("epoch,train_loss,train_acc,test_loss,test_acc\n");
        for (i, r) in rows.iter().enumerate() {
            body.push_str(&format!("{},{},{},{},{}\n", r.epoch, tl[i], ta[i], vl[i], va[i]));
        }
        files.push(("curves_smoothed.csv".into(), body));
    }
    write_all(out, &files)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn cmd_normalize(
    target_params: Option<usize>,
    match_window: Option<usize>,
    match_growth: Option<usize>,
    growth_max: usize,
    train: bool,
    train_args: &TrainArgs,
) -> Result<()> {
    let mut spec = train_args.spec_unchecked()?;
    spec.arch.validate()?;
    let base = spec.arch.clone();
    let target = match (target_params, match_window, match_growth) {
        (Some(p), _, _) => p,
        (None, Some(w), Some(k)) => count_parameters(&base.clone().with_window(w).with_growth(k))?.total,
        _ => bail!("pass --target-params or --match-window with --match-growth"),
    };
    let bracket = capacity_normalize(&base, target, growth_max)?;
    println!("window {}", bracket.window);
    println!("target_params {}", bracket.target_params);
    println!("k_lo {} params_lo {}", bracket.k_lo, bracket.params_lo);
    println!("k_hi {} params_hi {}", bracket.k_hi, bracket.params_hi);
    println!("lambda {}", bracket.lambda);
    if !train {
        return Ok(());
    }
    let out = train_args.out.as_deref().expect("clap requires --out");
    spec.validate()?;
    let mut accs = Vec::new();
    for k in [bracket.k_lo, bracket.k_hi] {
        if accs.len() == 1 && bracket.is_exact() {
            accs.push(accs[0]);
            break;
        }
        spec.arch.growth_rate = k;
        match train_into(&out.join(format!("k{k}")), &spec, train_args)? {
            Some(acc) => accs.push(acc),
            None => return Ok(()),
        }
    }
    println!("interpolated test accuracy {:.4}", interpolate_accuracy(&bracket, accs[0], accs[1]));
    Ok(())
}

fn cmd_smoke(fault: Option<FaultArg>) -> Result<()> {
    let fault = fault.map(|FaultArg::ConvBackward| Fault::ConvWeightGrad);
    let report = run_smoke(fault);
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        bail!("{} check(s) failed: {}", names.len(), names.join(", "));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count { arch, csv } => cmd_count(&arch, csv),
        Command::Plan { arch, csv } => cmd_plan(&arch, csv),
        Command::Train { train } => cmd_train(&train),
        Command::Analyze { checkpoint, metrics, out } => cmd_analyze(checkpoint.as_deref(), metrics.as_deref(), &out),
        Command::Normalize { target_params, match_window, match_growth, growth_max, train, train_args } => {
            cmd_normalize(target_params, match_window, match_growth, growth_max, train, &train_args)
        }
        Command::Smoke { inject_fault } => cmd_smoke(inject_fault),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
