//! Command-line front end: run configs, verification, estimates and
//! comparisons.
//!
//! Exit codes are 0 on success, 1 when a config or artifact fails
//! validation and 2 on I/O errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::engine::build_maps;
use crate::fixedpoint::FxFormat;
use crate::interleaver::InterleaverMap;
use crate::perfmodel::{estimate, speedup, EdgeBudget, PerfScenario};
use crate::topology::{validate_hardware, HardwareConfig, TopologySpec};
use crate::training::{
    compare_runs, load_mnist_split, train, ArithMode, DataError, MetricsSeries, RunOutput,
    TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(DataError::Io { path, source }) => CliError::Io {
                path: path.into(),
                source,
            },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const KNOWN_KEYS: &[&str] = &[
    "layers",
    "fanouts",
    "z",
    "clock_hz",
    "mode",
    "format",
    "epochs",
    "train_size",
    "test_size",
    "lr_base",
    "seed_init",
    "seed_il",
    "seed_shuffle",
    "pipelined",
    "biases",
    "mnist_dir",
];

/// A parsed `key=value` run config. `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub mnist_dir: Option<PathBuf>,
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Invalid(format!("{key}: bad integer {v:?}")))
        })
        .collect()
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Invalid(format!("{key}: bad value {value:?}")))
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut kv = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Invalid(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if !KNOWN_KEYS.contains(&k) {
                return Err(CliError::Invalid(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if kv.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::Invalid(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);
        let need = |k: &str| get(k).ok_or_else(|| CliError::Invalid(format!("missing key {k:?}")));

        let layers = list("layers", need("layers")?)?;
        let spec = match need("fanouts")? {
            "full" => TopologySpec::fully_connected(&layers),
            f => TopologySpec::new(&layers, &list("fanouts", f)?),
        }
        .map_err(|e| CliError::Invalid(e.to_string()))?;
        let hardware = match get("z") {
            Some(z) => Some(HardwareConfig::new(
                list("z", z)?,
                get("clock_hz").map_or(Ok(250e6), |v| scalar("clock_hz", v))?,
            )),
            None => None,
        };
        let mode = match get("mode").unwrap_or("real") {
            "real" => {
                if get("format").is_some() {
                    return Err(CliError::Invalid("format given with mode=real".into()));
                }
                ArithMode::Real
            }
            "fixed" => ArithMode::Fixed(
                need("format")?
                    .parse::<FxFormat>()
                    .map_err(|e| CliError::Invalid(e.to_string()))?,
            ),
            other => return Err(CliError::Invalid(format!("mode: expected real or fixed, got {other:?}"))),
        };
        let flag = |k: &str, default: bool| -> Result<bool, CliError> {
            get(k).map_or(Ok(default), |v| scalar(k, v))
        };
        let train = TrainConfig {
            spec,
            hardware,
            seed_init: scalar("seed_init", need("seed_init")?)?,
            seed_interleaver: scalar("seed_il", need("seed_il")?)?,
            seed_shuffle: scalar("seed_shuffle", need("seed_shuffle")?)?,
            lr_base: scalar("lr_base", need("lr_base")?)?,
            epochs: scalar("epochs", need("epochs")?)?,
            train_size: scalar("train_size", need("train_size")?)?,
            test_size: get("test_size").map_or(Ok(10_000), |v| scalar("test_size", v))?,
            mode,
            pipelined: flag("pipelined", false)?,
            biases: flag("biases", true)?,
        };
        Ok(Self {
            train,
            mnist_dir: get("mnist_dir").map(PathBuf::from),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read(path)?)
    }

    /// The configured MNIST directory, else `MNIST_DIR`.
    pub fn resolve_mnist_dir(&self) -> Result<PathBuf, CliError> {
        self.mnist_dir
            .clone()
            .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
            .ok_or_else(|| CliError::Invalid("no mnist_dir in config and MNIST_DIR is unset".into()))
    }
}

/// Loads data, trains and writes `metrics.csv` and `checkpoint.txt` into
/// `out_dir`.
pub fn run_train(config_path: &Path, out_dir: &Path) -> Result<RunOutput, CliError> {
    let cfg = RunConfigFile::load(config_path)?;
    cfg.train.validate()?;
    let dir = cfg.resolve_mnist_dir()?;
    let sizes = cfg.train.spec.layer_sizes();
    let (n_in, n_out) = (sizes[0], sizes[sizes.len() - 1]);
    let train_set = load_mnist_split(&dir, true, n_in, n_out).map_err(TrainError::from)?;
    let test_set = load_mnist_split(&dir, false, n_in, n_out).map_err(TrainError::from)?;
    let out = train(&cfg.train, &train_set, &test_set)?;
    fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write(&out_dir.join(METRICS_FILE), &out.metrics.to_csv())?;
    write(&out_dir.join(CHECKPOINT_FILE), &out.checkpoint)?;
    Ok(out)
}

fn report(result: Result<i32, CliError>) -> i32 {
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> i32 {
    report(run_train(config_path, out_dir).map(|out| {
        if let Some(last) = out.metrics.records.last() {
            println!(
                "epochs={} lr={} final_train_acc={:.4} final_test_acc={:.4}",
                out.metrics.len(),
                out.learning_rate,
                last.train_accuracy,
                last.test_accuracy
            );
        }
        println!("wrote {}", out_dir.display());
        EXIT_OK
    }))
}

/// Runs several configs, `jobs` at a time. With more than one config each
/// run writes into `out_dir/<config file stem>`. Returns the worst exit
/// code.
pub fn cmd_train_many(configs: &[PathBuf], out_dir: &Path, jobs: usize) -> i32 {
    if configs.len() == 1 {
        return cmd_train(&configs[0], out_dir);
    }
    let mut stems = std::collections::HashSet::new();
    for c in configs {
        let stem = c.file_stem().map(|s| s.to_string_lossy().into_owned());
        if !stem.map_or(false, |s| stems.insert(s)) {
            eprintln!("error: config names must have distinct file stems ({})", c.display());
            return EXIT_INVALID;
        }
    }
    let next = AtomicUsize::new(0);
    let worst = Mutex::new(EXIT_OK);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let dir = out_dir.join(config.file_stem().unwrap());
                let code = cmd_train(config, &dir);
                let mut w = worst.lock().unwrap();
                *w = (*w).max(code);
            });
        }
    });
    worst.into_inner().unwrap()
}

/// Verifies a serialized interleaver or every interleaver a config
/// generates.
pub fn run_verify(path: &Path) -> Result<(String, bool), CliError> {
    let text = read(path)?;
    if text.starts_with("interleaver ") {
        let map = InterleaverMap::from_text(&text).map_err(|e| CliError::Invalid(e.to_string()))?;
        let r = map.verify();
        return Ok((r.to_string(), r.passed()));
    }
    let cfg = RunConfigFile::parse(&text)?;
    let mut out = String::new();
    let mut ok = true;
    if let Some(hw) = &cfg.train.hardware {
        let v = validate_hardware(&cfg.train.spec, hw);
        out.push_str(&format!("{v}\n"));
        if !v.passed() {
            return Ok((out, false));
        }
    }
    let maps = build_maps(&cfg.train.spec, cfg.train.hardware.as_ref(), cfg.train.seed_interleaver)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    for (j, map) in maps.iter().enumerate() {
        let r = map.verify();
        ok &= r.passed();
        out.push_str(&format!("junction {}\n{r}\n", j + 1));
    }
    Ok((out, ok))
}

pub fn cmd_verify(path: &Path) -> i32 {
    report(run_verify(path).map(|(text, ok)| {
        println!("{}", text.trim_end());
        if ok {
            EXIT_OK
        } else {
            EXIT_INVALID
        }
    }))
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Layer sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    /// Per-junction connectivity fractions.
    #[arg(long, value_delimiter = ',', conflicts_with = "edges")]
    pub connectivity: Option<Vec<f64>>,
    /// Per-junction edge counts.
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<usize>>,
    /// Per-junction degree of parallelism.
    #[arg(long, value_delimiter = ',', required = true)]
    pub z: Vec<usize>,
    #[arg(long, default_value_t = 250e6)]
    pub clock_hz: f64,
    #[arg(long, default_value_t = 1)]
    pub images: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: u64,
    /// Baseline training time in days for a speedup figure.
    #[arg(long)]
    pub baseline_days: Option<f64>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run_estimate(args: &EstimateArgs) -> Result<String, CliError> {
    let edges = match (&args.connectivity, &args.edges) {
        (Some(c), None) => EdgeBudget::Connectivity(c.clone()),
        (None, Some(e)) => EdgeBudget::Counts(e.clone()),
        _ => return Err(CliError::Invalid("give exactly one of --connectivity or --edges".into())),
    };
    let scenario = PerfScenario {
        layer_sizes: args.layers.clone(),
        edges,
        z_list: args.z.clone(),
        clock_hz: args.clock_hz,
        images_per_epoch: args.images,
        epochs: args.epochs,
    };
    let r = estimate(&scenario).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut text = r.to_string();
    if let Some(days) = args.baseline_days {
        let s = speedup(&r, days * 86_400.0).map_err(|e| CliError::Invalid(e.to_string()))?;
        text.push_str(&format!("\nspeedup          {s:.2}x"));
    }
    if let Some(path) = &args.csv {
        write(path, &r.to_csv())?;
    }
    Ok(text)
}

pub fn cmd_estimate(args: &EstimateArgs) -> i32 {
    report(run_estimate(args).map(|text| {
        println!("{text}");
        EXIT_OK
    }))
}

/// Writes the per-epoch test-accuracy difference `a - b`.
pub fn run_compare(a: &Path, b: &Path, out: &Path) -> Result<String, CliError> {
    let parse = |p: &Path| -> Result<MetricsSeries, CliError> {
        MetricsSeries::from_csv(&read(p)?).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
    };
    let cmp = compare_runs(&parse(a)?, &parse(b)?)?;
    write(out, &cmp.to_csv())?;
    Ok(format!(
        "mean {:+.4} mean|d| {:.4} min {:+.4} max {:+.4}",
        cmp.mean, cmp.mean_abs, cmp.min, cmp.max
    ))
}

pub fn cmd_compare(a: &Path, b: &Path, out: &Path) -> i32 {
    report(run_compare(a, b, out).map(|text| {
        println!("{text}");
        EXIT_OK
    }))
}

#[derive(Debug, Parser)]
#[command(name = "edgeproc", version, about = "Structured-sparse network training on a simulated edge-processing accelerator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from one or more run configs.
    Train {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Configs to run in parallel.
        #[arg(long, short, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a serialized interleaver or the interleavers of a run config.
    Verify { path: PathBuf },
    /// Analytical cycle and time estimate.
    Estimate(EstimateArgs),
    /// Per-epoch test-accuracy difference of two metrics files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Train { configs, out, jobs } => cmd_train_many(&configs, &out, jobs),
        Command::Verify { path } => cmd_verify(&path),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, &out),
    }
}
