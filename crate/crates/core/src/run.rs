//! Run configuration files and run-directory persistence.
//!
//! A run directory holds `config.txt` (written before the first epoch),
//! `metrics.csv` (one row per completed epoch), `checkpoint.bin` (latest
//! state, used to resume), milestone checkpoints at learning-rate boundaries
//! and at the end, and a `.lock` file while a process owns it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::{build_network, ArchConfig, ArchError};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{compute_stats, load_cifar10, normalize, synthetic_dataset_sized, DataError, Dataset, Split};
use crate::train::{derive_seed, fit, EpochRow, SgdState, TrainConfig, TrainError};

pub const DATA_ENV: &str = "WINDENSE_DATA";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOCK_FILE: &str = ".lock";

const TAG_INIT: u64 = 3;
const TAG_SYNTHETIC: u64 = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("no data directory: pass --data, set {DATA_ENV}, or use synthetic data")]
    NoData,
    #[error("run directory {0} is locked by another process (remove .lock if it is stale)")]
    Locked(PathBuf),
    #[error("run directory {dir} was created with a different configuration")]
    ConfigChanged { dir: PathBuf },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, RunError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| RunError::Syntax {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(RunError::Syntax { line: i + 1, message: "empty key".into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Where training data comes from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSpec {
    pub synthetic: bool,
    /// Training samples to keep (first `n` of the archive, or synthetic count).
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
}

/// Everything that determines a run's results.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSpec {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, RunError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| RunError::Value { key: key.to_string(), message: e.to_string() })
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>, RunError> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

impl RunSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunError> {
        if self.arch.set_field(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "keep_prob" => t.keep_prob = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "lr_schedule" => t.lr_schedule = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "nesterov" => t.nesterov = parse_value(key, value)?,
            "augmentation" => t.augmentation = parse_value(key, value)?,
            "synthetic" => self.data.synthetic = parse_value(key, value)?,
            "subset" => self.data.subset = parse_optional(key, value)?,
            "test_subset" => self.data.test_subset = parse_optional(key, value)?,
            _ => return Err(RunError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a config file's contents on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), RunError> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.data.subset == Some(0) || self.data.test_subset == Some(0) {
            return Err(RunError::Value { key: "subset".into(), message: "must be positive".into() });
        }
        if !self.data.synthetic && (self.arch.input_height, self.arch.input_width, self.arch.input_channels) != (32, 32, 3) {
            return Err(RunError::Value {
                key: "input_height".into(),
                message: "CIFAR-10 images are 3x32x32".into(),
            });
        }
        if !self.data.synthetic && self.arch.num_classes != 10 {
            return Err(RunError::Value { key: "classes".into(), message: "CIFAR-10 has 10 classes".into() });
        }
        if self.data.synthetic && self.arch.input_height != self.arch.input_width {
            return Err(RunError::Value { key: "input_width".into(), message: "synthetic images are square".into() });
        }
        Ok(())
    }

    /// Full `key = value` rendering; [`RunSpec::apply_text`] on a default
    /// spec reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        let mut s = self.arch.to_canonical();
        s.push_str(&format!(
            "batch_size = {}\nmomentum = {}\nweight_decay = {}\nkeep_prob = {}\nepochs = {}\nlr_schedule = {}\nseed = {}\nnesterov = {}\naugmentation = {}\n",
            t.batch_size, t.momentum, t.weight_decay, t.keep_prob, t.epochs, t.lr_schedule, t.seed, t.nesterov, t.augmentation
        ));
        s.push_str(&format!(
            "synthetic = {}\nsubset = {}\ntest_subset = {}\n",
            self.data.synthetic,
            opt(self.data.subset),
            opt(self.data.test_subset)
        ));
        s
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.train.seed, &[TAG_INIT])
    }
}

/// Data directory from the explicit argument or the environment.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

fn take_first(ds: &Dataset, n: Option<usize>) -> Result<Dataset, DataError> {
    match n {
        Some(n) if n < ds.len() => ds.subset(n),
        _ => Ok(ds.clone()),
    }
}

/// Loads (or generates) and normalizes the train/test split with
/// training-set channel statistics.
pub fn prepare_data(spec: &RunSpec, data_dir: Option<&Path>) -> Result<(Dataset, Dataset), RunError> {
    let (train, test) = if spec.data.synthetic {
        let n_train = spec.data.subset.unwrap_or(512);
        let n_test = spec.data.test_subset.unwrap_or((n_train / 4).max(spec.arch.num_classes));
        let all = synthetic_dataset_sized(
            n_train + n_test,
            spec.arch.num_classes,
            spec.arch.input_height,
            derive_seed(spec.train.seed, &[TAG_SYNTHETIC]),
        )?;
        let (ti, tl) = all.gather(&(0..n_train).collect::<Vec<_>>());
        let (vi, vl) = all.gather(&(n_train..n_train + n_test).collect::<Vec<_>>());
        (Dataset::new(ti, tl, Split::Train)?, Dataset::new(vi, vl, Split::Test)?)
    } else {
        let dir = resolve_data_dir(data_dir).ok_or(RunError::NoData)?;
        let (train, test) = load_cifar10(&dir)?;
        (take_first(&train, spec.data.subset)?, take_first(&test, spec.data.test_subset)?)
    };
    let stats = compute_stats(&train)?;
    Ok((normalize(&train, &stats)?, normalize(&test, &stats)?))
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::Locked(dir.to_path_buf())),
            Err(e) => Err(RunError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(EpochRow::CSV_HEADER) {
        return Err(RunError::Corrupt { path: path.to_path_buf(), message: "missing metrics header".into() });
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            EpochRow::from_csv(l)
                .ok_or_else(|| RunError::Corrupt { path: path.to_path_buf(), message: format!("bad row `{l}`") })
        })
        .collect()
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn append_row(path: &Path, row: &EpochRow) -> Result<(), RunError> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", row.to_csv()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Milestone file name for the state after `epochs_done` epochs.
pub fn milestone_name(epochs_done: usize) -> String {
    format!("checkpoint_epoch{epochs_done:04}.bin")
}

fn is_milestone(train: &TrainConfig, epochs_done: usize) -> bool {
    epochs_done == train.epochs || train.lr_schedule.entries().iter().any(|&(e, _)| e > 0 && e == epochs_done)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub data_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Every row of `metrics.csv` after this invocation.
    pub rows: Vec<EpochRow>,
    pub epochs_done: usize,
    pub resumed_from: Option<usize>,
}

impl RunOutcome {
    pub fn finished(&self, spec: &RunSpec) -> bool {
        self.epochs_done >= spec.train.epochs
    }
}

/// Trains `spec` in `dir`, resuming from `dir/checkpoint.bin` if present.
/// Inputs are validated and data loaded before anything is written.
pub fn run_training(
    dir: &Path,
    spec: &RunSpec,
    opts: &RunOptions,
    mut progress: impl FnMut(&EpochRow),
) -> Result<RunOutcome, RunError> {
    spec.validate()?;
    let snapshot = spec.to_text();
    let config_path = dir.join(CONFIG_FILE);
    if config_path.is_file() {
        let existing = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        if existing != snapshot {
            return Err(RunError::ConfigChanged { dir: dir.to_path_buf() });
        }
    }
    let (train, test) = prepare_data(spec, opts.data_dir.as_deref())?;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let _lock = RunLock::acquire(dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    let ck_path = dir.join(CHECKPOINT_FILE);

    let (mut net, mut state, start, resumed_from) = if ck_path.is_file() {
        let ck = checkpoint::load_for(&ck_path, &spec.arch)?;
        let state = ck.velocities.ok_or_else(|| RunError::Corrupt {
            path: ck_path.clone(),
            message: "checkpoint has no optimizer state".into(),
        })?;
        (ck.network, state, ck.epochs_done, Some(ck.epochs_done))
    } else {
        let net = build_network(&spec.arch, spec.init_seed())?;
        let state = SgdState::for_network(&net);
        (net, state, 0, None)
    };

    if !config_path.is_file() {
        write_atomic(&config_path, snapshot.as_bytes())?;
    }
    let mut rows = if metrics_path.is_file() { read_metrics(&metrics_path)? } else { Vec::new() };
    // Rows past the checkpoint belong to an epoch whose state was lost.
    if rows.len() != start || rows.iter().enumerate().any(|(i, r)| r.epoch != i) {
        rows.retain(|r| r.epoch < start);
        if rows.len() != start {
            return Err(RunError::Corrupt {
                path: metrics_path,
                message: format!("{} rows for {start} checkpointed epochs", rows.len()),
            });
        }
        let mut text = format!("{}\n", EpochRow::CSV_HEADER);
        rows.iter().for_each(|r| text.push_str(&format!("{}\n", r.to_csv())));
        write_atomic(&metrics_path, text.as_bytes())?;
    } else if !metrics_path.is_file() {
        write_atomic(&metrics_path, format!("{}\n", EpochRow::CSV_HEADER).as_bytes())?;
    }

    let stop = opts.stop_after.unwrap_or(usize::MAX);
    let mut epochs_done = start;
    if start < spec.train.epochs && start < stop {
        let mut io_error = None;
        let new_rows = fit(&mut net, &mut state, &train, Some(&test), &spec.train, start, |row, net, state| {
            let done = row.epoch + 1;
            let res = append_row(&metrics_path, row)
                .and_then(|_| Ok(checkpoint::save(&ck_path, net, done, Some(state))?))
                .and_then(|_| {
                    if is_milestone(&spec.train, done) {
                        checkpoint::save(&dir.join(milestone_name(done)), net, done, None)?;
                    }
                    Ok(())
                });
            progress(row);
            match res {
                Ok(()) => Ok(done < stop),
                Err(e) => {
                    io_error = Some(e);
                    Ok(false)
                }
            }
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
        epochs_done += new_rows.len();
        rows.extend(new_rows);
    }
    Ok(RunOutcome { rows, epochs_done, resumed_from })
}
