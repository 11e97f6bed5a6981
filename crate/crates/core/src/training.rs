//! MNIST ingestion, the training loop, evaluation and run comparison.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::arith::{Arith, Fixed, Real};
use crate::engine::{argmax, build_maps, EngineError, NetOptions, Network, Pipeline};
use crate::fixedpoint::FxFormat;
use crate::rng::{derive_seed, SplitMix64};
use crate::topology::{validate_hardware, HardwareConfig, TopologySpec};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot pad {from} values into {to}")]
    Padding { from: usize, to: usize },
    #[error("label {label} outside {classes} classes")]
    Label { label: u8, classes: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Images and labels with zero padding up to the network's layer sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    pixels_per_image: usize,
    labels: Vec<u8>,
    input_len: usize,
    output_len: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        pixels_per_image: usize,
        labels: Vec<u8>,
        input_len: usize,
        output_len: usize,
        class_count: usize,
    ) -> Result<Self, DataError> {
        let images = if pixels_per_image == 0 {
            0
        } else {
            pixels.len() / pixels_per_image
        };
        if images != labels.len() || images * pixels_per_image != pixels.len() {
            return Err(DataError::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if input_len < pixels_per_image {
            return Err(DataError::Padding {
                from: pixels_per_image,
                to: input_len,
            });
        }
        if output_len < class_count {
            return Err(DataError::Padding {
                from: class_count,
                to: output_len,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(DataError::Label {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            pixels,
            pixels_per_image,
            labels,
            input_len,
            output_len,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Pixels scaled to `[0, 1]`, zero-padded to the input length.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let raw = &self.pixels[i * self.pixels_per_image..(i + 1) * self.pixels_per_image];
        let mut v: Vec<f64> = raw.iter().map(|&p| p as f64 / 255.0).collect();
        v.resize(self.input_len, 0.0);
        v
    }

    /// One-hot label, zero-padded to the output length.
    pub fn target(&self, i: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.output_len];
        t[self.label(i)] = 1.0;
        t
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.pixels_per_image].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            pixels: Vec::new(),
            labels: Vec::new(),
            ..*self
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX file, returning its dimensions and payload.
fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let name = path.display().to_string();
    let truncated = |expected, found| DataError::TruncatedFile {
        path: name.clone(),
        expected,
        found,
    };
    if bytes.len() < 4 {
        return Err(truncated(4, bytes.len()));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: name,
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(truncated(header, bytes.len()));
    }
    let dims: Vec<usize> = (0..ndims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(truncated(header + payload, bytes.len()));
    }
    Ok((dims, bytes[header..header + payload].to_vec()))
}

/// Loads an MNIST image/label pair of IDX files.
pub fn load_mnist(
    images_path: &Path,
    labels_path: &Path,
    pad_to_input: usize,
    pad_to_output: usize,
) -> Result<Dataset, DataError> {
    let (img_dims, pixels) = parse_idx(images_path, &read_file(images_path)?, IMAGE_MAGIC)?;
    let (lbl_dims, labels) = parse_idx(labels_path, &read_file(labels_path)?, LABEL_MAGIC)?;
    if img_dims[0] != lbl_dims[0] {
        return Err(DataError::CountMismatch {
            images: img_dims[0],
            labels: lbl_dims[0],
        });
    }
    Dataset::new(
        pixels,
        img_dims[1] * img_dims[2],
        labels,
        pad_to_input,
        pad_to_output,
        10,
    )
}

/// Loads the standard training or test split from a directory holding the
/// four uncompressed MNIST files.
pub fn load_mnist_split(
    dir: &Path,
    train: bool,
    pad_to_input: usize,
    pad_to_output: usize,
) -> Result<Dataset, DataError> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        pad_to_input,
        pad_to_output,
    )
}

/// Learning rate inversely proportional to connectivity.
pub fn scaled_lr(base: f64, connectivity: f64) -> Result<f64, TrainError> {
    if !(connectivity > 0.0 && connectivity <= 1.0) {
        return Err(TrainError::Config(format!(
            "connectivity {connectivity} outside (0, 1]"
        )));
    }
    Ok(base / connectivity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithMode {
    Real,
    Fixed(FxFormat),
}

impl ArithMode {
    pub fn label(&self) -> String {
        match self {
            ArithMode::Real => "real".into(),
            ArithMode::Fixed(f) => f.to_string(),
        }
    }
}

/// Upper bound on the learning rate in fixed-point mode.
pub const FIXED_LR_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: TopologySpec,
    /// Absent means functional (unbanked) mode.
    pub hardware: Option<HardwareConfig>,
    pub seed_init: u64,
    pub seed_interleaver: u64,
    pub seed_shuffle: u64,
    pub lr_base: f64,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub mode: ArithMode,
    pub pipelined: bool,
    pub biases: bool,
}

impl TrainConfig {
    /// Connectivity-scaled learning rate, clamped in fixed-point mode.
    pub fn learning_rate(&self) -> Result<f64, TrainError> {
        let lr = scaled_lr(self.lr_base, self.spec.connectivity())?;
        Ok(match self.mode {
            ArithMode::Real => lr,
            ArithMode::Fixed(_) => lr.min(FIXED_LR_CLAMP),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(TrainError::Config("train_size and test_size must be positive".into()));
        }
        if !(self.lr_base >= 0.0) {
            return Err(TrainError::Config(format!("lr_base {}", self.lr_base)));
        }
        if let Some(hw) = &self.hardware {
            let report = validate_hardware(&self.spec, hw);
            if !report.passed() {
                return Err(TrainError::Config(report.failures().join("; ")));
            }
        }
        let lr = self.learning_rate()?;
        if let ArithMode::Fixed(fmt) = self.mode {
            // Output deltas are bounded by max|a - t| * max(a(1 - a)) = 1/4
            // and activations by 1, so a single update step is at most lr/4.
            if lr * 0.25 > fmt.max_value() {
                return Err(TrainError::Config(format!(
                    "learning rate {lr} can produce updates outside {fmt}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsSeries {
    pub records: Vec<EpochRecord>,
}

impl MetricsSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_acc,test_acc,mean_loss\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.8}\n",
                r.epoch, r.train_accuracy, r.test_accuracy, r.mean_loss
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("epoch,train_acc,test_acc,mean_loss") {
            return Err("missing metrics header".into());
        }
        let records = lines
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(format!("line {}: expected 4 fields", n + 2));
                }
                let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", n + 2));
                Ok(EpochRecord {
                    epoch: f[0].trim().parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                    train_accuracy: num(f[1])?,
                    test_accuracy: num(f[2])?,
                    mean_loss: num(f[3])?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Fraction of items whose predicted class (argmax over the first
/// `class_count` outputs) matches the label.
pub fn evaluate<A: Arith>(net: &mut Network<A>, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = net.quantize_input(&data.image(i));
        if net.predict(&x, data.class_count())? == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Builds the network a config describes.
pub fn build_network<A: Arith>(config: &TrainConfig, arith: A) -> Result<Network<A>, TrainError> {
    config.validate()?;
    let maps = build_maps(&config.spec, config.hardware.as_ref(), config.seed_interleaver)?;
    let options = NetOptions {
        banked: config.hardware.is_some(),
        biases: config.biases,
        learning_rate: config.learning_rate()?,
        init_seed: config.seed_init,
    };
    Ok(Network::new(arith, config.spec.clone(), maps, options)?)
}

/// Training order for one epoch, a function of the shuffle seed and the
/// epoch number only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
    order
}

/// Steady-state accounting gathered while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub steps: u64,
    pub cycles: u64,
    pub max_ops_per_step: usize,
}

/// Trains `net` in place on `train`, evaluating on both sets after every
/// epoch.
pub fn train_network<A: Arith>(
    config: &TrainConfig,
    net: &mut Network<A>,
    train: &Dataset,
    test: &Dataset,
) -> Result<(MetricsSeries, RunStats), TrainError> {
    let train = train.take(config.train_size);
    let test = test.take(config.test_size);
    let mut series = MetricsSeries::default();
    let mut stats = RunStats::default();
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed_shuffle, epoch, train.len());
        let mut loss_sum = 0.0;
        if config.pipelined {
            let mut pipe = Pipeline::new(net);
            let record = |report: crate::engine::StepReport<A::Value>, stats: &mut RunStats| {
                stats.steps += 1;
                stats.cycles += report.cycles as u64;
                stats.max_ops_per_step = stats.max_ops_per_step.max(report.ops);
                report.output.map_or(0.0, |(_, loss, _)| loss)
            };
            for &i in &order {
                let x = net.quantize_input(&train.image(i));
                let y = net.quantize_input(&train.target(i));
                let report = pipe.step(net, Some((&x, &y)))?;
                loss_sum += record(report, &mut stats);
            }
            for report in pipe.flush(net)? {
                loss_sum += record(report, &mut stats);
            }
        } else {
            for &i in &order {
                let x = net.quantize_input(&train.image(i));
                let y = net.quantize_input(&train.target(i));
                loss_sum += net.run_sequential(&x, &y)?;
            }
        }
        series.records.push(EpochRecord {
            epoch: epoch + 1,
            train_accuracy: evaluate(net, &train)?,
            test_accuracy: evaluate(net, &test)?,
            mean_loss: loss_sum / train.len().max(1) as f64,
        });
    }
    Ok((series, stats))
}

/// Outcome of a full run: metrics, run statistics and a checkpoint of the
/// final network.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsSeries,
    pub stats: RunStats,
    pub checkpoint: String,
    pub learning_rate: f64,
}

fn run_with<A: Arith>(
    config: &TrainConfig,
    arith: A,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, TrainError> {
    let mut net = build_network(config, arith)?;
    let (metrics, stats) = train_network(config, &mut net, train, test)?;
    Ok(RunOutput {
        checkpoint: net.to_checkpoint(stats.steps),
        metrics,
        stats,
        learning_rate: config.learning_rate()?,
    })
}

/// Runs the experiment described by `config` in its arithmetic mode.
pub fn train(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput, TrainError> {
    match config.mode {
        ArithMode::Real => run_with(config, Real, train, test),
        ArithMode::Fixed(fmt) => run_with(config, Fixed(fmt), train, test),
    }
}

/// Per-epoch `fixed - float` test-accuracy differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub diffs: Vec<(usize, f64)>,
    pub mean: f64,
    pub mean_abs: f64,
    pub min: f64,
    pub max: f64,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,diff\n");
        for (epoch, d) in &self.diffs {
            out.push_str(&format!("{epoch},{d:.6}\n"));
        }
        out
    }

    pub fn final_diff(&self) -> Option<f64> {
        self.diffs.last().map(|&(_, d)| d)
    }
}

pub fn compare_runs(fixed: &MetricsSeries, float: &MetricsSeries) -> Result<Comparison, TrainError> {
    if fixed.len() != float.len() {
        return Err(TrainError::Config(format!(
            "cannot compare {} epochs with {}",
            fixed.len(),
            float.len()
        )));
    }
    let diffs: Vec<(usize, f64)> = fixed
        .records
        .iter()
        .zip(&float.records)
        .map(|(a, b)| (a.epoch, a.test_accuracy - b.test_accuracy))
        .collect();
    let n = diffs.len().max(1) as f64;
    let values = || diffs.iter().map(|&(_, d)| d);
    Ok(Comparison {
        mean: values().sum::<f64>() / n,
        mean_abs: values().map(f64::abs).sum::<f64>() / n,
        min: values().fold(f64::INFINITY, f64::min),
        max: values().fold(f64::NEG_INFINITY, f64::max),
        diffs,
    })
}

/// Convenience for callers holding real-valued outputs.
pub fn predicted_class(outputs: &[f64], classes: usize) -> usize {
    argmax(outputs.iter().take(classes).copied())
}
