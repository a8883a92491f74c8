//! Config-driven experiment runner: loads a dataset, builds the scenario's
//! task stream, trains once per seed, and persists reports.
//!
//! Output layout per run directory: `config.json` (effective, defaults
//! filled; re-running from it reproduces the run), `report_seed<k>.json`
//! and `accuracy_seed<k>.csv` and `checkpoint_seed<k>.bin` per seed, an
//! `aggregate.json` with mean and sample standard deviation, and a
//! `timing.json` sidecar. Everything except the timing sidecar is
//! byte-identical across reruns; that's why wall-clock lives in its own
//! file. Reported percentages are rounded to two decimals before they are
//! written, and the aggregate is computed from those rounded per-seed
//! values so it can be recomputed exactly from the report files alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    gaussian_blobs, load_csv, load_idx, mnist360_stream, rotated_domain_il, split_class_il,
    Example, Scenario, TaskStream,
};
use crate::error::{Error, Result};
use crate::metrics::{
    ece, forward_transfer, prediction_confidences, relative_gains, reliability, robust_accuracy,
    task_probabilities, top1_accuracy, MetricsReport, RelativeGains, ReliabilityReport,
    RobustnessReport,
};
use crate::model::MlpClassifier;
use crate::regularizers::RegularizerSpec;
use crate::trainer::{train_continual, train_joint, TrainConfig, TrainLog};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ECE_BINS: usize = 10;

// Scenario-level randomness (rotation angles, stream shuffles) gets its
// own lineage off the run seed, like the trainer's shuffle and buffer rngs.
const STREAM_SALT: u64 = 0x5354_5245_414d_5331;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Headered CSVs with a "label" column.
    Csv { train: PathBuf, test: PathBuf },
    /// Self-contained synthetic clusters; the seed here fixes the dataset
    /// itself and does not vary with the run seed.
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    ClassIl { n_tasks: usize },
    RotatedDomainIl { n_tasks: usize },
    Mnist360,
    /// Upper bound: train on the union of the inner protocol's tasks.
    Joint { protocol: Box<ScenarioConfig> },
    /// Lower bound: the inner protocol with replay disabled entirely.
    Sgd { protocol: Box<ScenarioConfig> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrainMode {
    Continual,
    Joint,
    SgdBaseline,
}

impl ScenarioConfig {
    fn split(&self) -> (TrainMode, &ScenarioConfig) {
        match self {
            ScenarioConfig::Joint { protocol } => (TrainMode::Joint, protocol),
            ScenarioConfig::Sgd { protocol } => (TrainMode::SgdBaseline, protocol),
            other => (TrainMode::Continual, other),
        }
    }

    /// The protocol the run is evaluated on, baselines unwrapped.
    pub fn protocol(&self) -> &ScenarioConfig {
        self.split().1
    }
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_alpha() -> f64 {
    1.0
}
fn default_buffer_capacity() -> usize {
    500
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    1
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_hidden_layers() -> Vec<usize> {
    vec![100, 100]
}
fn default_n_seeds() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub scenario: ScenarioConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "RegularizerSpec::none")]
    pub regularizer: RegularizerSpec,
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn path_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "{what} does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("n_seeds must be at least 1".into()));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layer of width 0".into()));
        }
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                path_exists(train_images, "train images file")?;
                path_exists(train_labels, "train labels file")?;
                path_exists(test_images, "test images file")?;
                path_exists(test_labels, "test labels file")?;
            }
            DatasetConfig::Csv { train, test } => {
                path_exists(train, "train csv")?;
                path_exists(test, "test csv")?;
            }
            DatasetConfig::Blobs { classes, dim, .. } => {
                if *classes == 0 || *dim == 0 {
                    return Err(Error::InvalidConfig("blobs need classes and dim >= 1".into()));
                }
            }
        }
        let (_, protocol) = self.scenario.split();
        if matches!(
            protocol,
            ScenarioConfig::Joint { .. } | ScenarioConfig::Sgd { .. }
        ) {
            return Err(Error::InvalidConfig(
                "joint/sgd must wrap a concrete protocol, not another baseline".into(),
            ));
        }
        match protocol {
            ScenarioConfig::ClassIl { n_tasks } | ScenarioConfig::RotatedDomainIl { n_tasks } => {
                if *n_tasks == 0 {
                    return Err(Error::InvalidConfig("n_tasks must be at least 1".into()));
                }
            }
            _ => {}
        }
        self.train_config(self.seed, TrainMode::Continual).validate()
    }

    pub fn load_dataset(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(train_images, train_labels)?,
                load_idx(test_images, test_labels)?,
            )),
            DatasetConfig::Csv { train, test } => Ok((load_csv(train)?, load_csv(test)?)),
            DatasetConfig::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => gaussian_blobs(*classes, *dim, *train_per_class, *test_per_class, *noise, *seed),
        }
    }

    pub fn build_stream(&self, run_seed: u64) -> Result<TaskStream> {
        let (train, test) = self.load_dataset()?;
        let stream_seed = run_seed ^ STREAM_SALT;
        match self.scenario.split().1 {
            ScenarioConfig::ClassIl { n_tasks } => split_class_il(train, test, *n_tasks),
            ScenarioConfig::RotatedDomainIl { n_tasks } => {
                rotated_domain_il(train, test, *n_tasks, stream_seed)
            }
            ScenarioConfig::Mnist360 => mnist360_stream(train, test, stream_seed),
            ScenarioConfig::Joint { .. } | ScenarioConfig::Sgd { .. } => unreachable!("unwrapped"),
        }
    }

    fn train_config(&self, run_seed: u64, mode: TrainMode) -> TrainConfig {
        let (buffer_capacity, regularizer) = match mode {
            TrainMode::SgdBaseline => (0, RegularizerSpec::none()),
            _ => (self.buffer_capacity, self.regularizer.clone()),
        };
        TrainConfig {
            alpha: self.alpha,
            regularizer,
            buffer_capacity,
            batch_size: self.batch_size,
            epochs_per_task: self.epochs_per_task,
            learning_rate: self.learning_rate,
            seed: run_seed,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn round2_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| round2(x)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub pre_task_accuracy: Vec<f64>,
    pub random_init_accuracy: f64,
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for a single
/// seed), with the "92.20 ± 0.15" rendering used in tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub display: String,
}

impl Aggregate {
    fn over(values: &[f64]) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Aggregate {
            mean,
            std,
            display: format!("{mean:.2} ± {std:.2}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    pub regularizer: RegularizerSpec,
    pub n_seeds: usize,
    pub seeds: Vec<u64>,
    pub avg_top1: Aggregate,
    pub per_seed_avg_top1: Vec<f64>,
    pub ece: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_transfer: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mra: Option<Aggregate>,
    /// Mean task-probability vector over seeds, full precision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_probabilities: Option<Vec<f64>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn accuracy_csv(matrix: &[Vec<f64>]) -> String {
    let cols = matrix.first().map_or(0, |r| r.len());
    let mut out = String::from("after_task");
    for t in 1..=cols {
        out.push_str(&format!(",task_{t}"));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in row {
            out.push_str(&format!(",{v:.2}"));
        }
        out.push('\n');
    }
    out
}

fn is_perfect_square(n: usize) -> bool {
    let s = (n as f64).sqrt().round() as usize;
    s * s == n
}

fn round_robustness(mut r: RobustnessReport) -> RobustnessReport {
    for row in &mut r.accuracy {
        for v in row.iter_mut() {
            *v = round2(*v);
        }
    }
    r.clean = round2(r.clean);
    r.mra = round2(r.mra);
    r
}

/// Clean-set metrics of a trained model over a stream: per-task and average
/// accuracy, calibration over the union of test sets (with the per-bin
/// breakdown), and, where the scenario defines them, forward transfer and
/// task probabilities.
fn collect_metrics(
    model: &MlpClassifier,
    stream: &TaskStream,
    log: &TrainLog,
    run_seed: u64,
    with_robustness: bool,
) -> Result<(MetricsReport, ReliabilityReport)> {
    let per_task = log
        .accuracy_matrix
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("training produced no evaluation".into()))?;
    let avg = per_task.iter().sum::<f64>() / per_task.len() as f64;

    let union: Vec<Example> = stream
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().cloned())
        .collect();
    let (conf, correct) = prediction_confidences(model, &union)?;
    let bins = reliability(&conf, &correct, DEFAULT_ECE_BINS)?;
    let ece_v = ece(&conf, &correct, DEFAULT_ECE_BINS)?;

    let ft = if log.pre_task_accuracy.len() >= 2 {
        Some(round2(forward_transfer(
            &log.pre_task_accuracy,
            log.random_init_accuracy,
        )?))
    } else {
        None
    };
    let probs = if stream.scenario == Scenario::ClassIl {
        Some(task_probabilities(model, stream)?)
    } else {
        None
    };
    let robustness = if with_robustness {
        Some(round_robustness(robust_accuracy(model, &union, run_seed)?))
    } else {
        None
    };

    Ok((
        MetricsReport {
            avg_top1: round2(avg),
            per_task_top1: round2_vec(&per_task),
            ece: round2(ece_v),
            forward_transfer: ft,
            task_probabilities: probs,
            robustness,
            relative_gains: None,
        },
        bins,
    ))
}

/// Trains every seed of the experiment and writes the full report set into
/// the config's output directory. Returns the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no output directory configured".into()))?
        .clone();
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), cfg)?;

    let (mode, _) = cfg.scenario.split();
    let started = Instant::now();
    let mut seed_reports = Vec::with_capacity(cfg.n_seeds);
    let mut per_seed_seconds = Vec::with_capacity(cfg.n_seeds);

    for i in 0..cfg.n_seeds {
        let run_seed = cfg.seed + i as u64;
        let seed_started = Instant::now();
        let stream = cfg.build_stream(run_seed)?;
        let input_dim = stream
            .input_dim()
            .ok_or_else(|| Error::InvalidConfig("dataset has no examples".into()))?;
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(stream.n_classes);
        let model = MlpClassifier::new(&sizes, run_seed)?;

        let train_cfg = cfg.train_config(run_seed, mode);
        let (model, log) = match mode {
            TrainMode::Joint => train_joint(model, &stream, &train_cfg)?,
            _ => train_continual(model, &stream, &train_cfg)?,
        };

        let (metrics, bins) =
            collect_metrics(&model, &stream, &log, run_seed, is_perfect_square(input_dim))?;
        let matrix: Vec<Vec<f64>> = log.accuracy_matrix.iter().map(|r| round2_vec(r)).collect();
        let report = SeedReport {
            schema_version: SCHEMA_VERSION,
            seed: run_seed,
            config: cfg.clone(),
            metrics,
            accuracy_matrix: matrix.clone(),
            pre_task_accuracy: round2_vec(&log.pre_task_accuracy),
            random_init_accuracy: round2(log.random_init_accuracy),
        };
        write_json(&out.join(format!("report_seed{run_seed}.json")), &report)?;
        std::fs::write(
            out.join(format!("accuracy_seed{run_seed}.csv")),
            accuracy_csv(&matrix),
        )?;
        std::fs::write(
            out.join(format!("reliability_seed{run_seed}.csv")),
            bins.to_csv(),
        )?;
        model.save(&out.join(format!("checkpoint_seed{run_seed}.bin")))?;
        per_seed_seconds.push(seed_started.elapsed().as_secs_f64());
        seed_reports.push(report);
    }

    let aggregate = aggregate_reports(cfg, &seed_reports);
    write_json(&out.join("aggregate.json"), &aggregate)?;

    #[derive(Serialize)]
    struct Timing {
        total_seconds: f64,
        per_seed_seconds: Vec<f64>,
    }
    write_json(
        &out.join("timing.json"),
        &Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            per_seed_seconds,
        },
    )?;

    Ok(aggregate)
}

fn aggregate_reports(cfg: &ExperimentConfig, reports: &[SeedReport]) -> AggregateReport {
    let accs: Vec<f64> = reports.iter().map(|r| r.metrics.avg_top1).collect();
    let eces: Vec<f64> = reports.iter().map(|r| r.metrics.ece).collect();
    let fts: Option<Vec<f64>> = reports
        .iter()
        .map(|r| r.metrics.forward_transfer)
        .collect();
    let mras: Option<Vec<f64>> = reports
        .iter()
        .map(|r| r.metrics.robustness.as_ref().map(|rb| rb.mra))
        .collect();
    let probs = reports
        .iter()
        .map(|r| r.metrics.task_probabilities.as_ref())
        .collect::<Option<Vec<_>>>()
        .map(|per_seed| {
            let t = per_seed[0].len();
            (0..t)
                .map(|i| per_seed.iter().map(|p| p[i]).sum::<f64>() / per_seed.len() as f64)
                .collect::<Vec<f64>>()
        });

    AggregateReport {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.scenario.clone(),
        regularizer: cfg.regularizer.clone(),
        n_seeds: reports.len(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        avg_top1: Aggregate::over(&accs),
        per_seed_avg_top1: accs,
        ece: Aggregate::over(&eces),
        forward_transfer: fts.as_deref().map(Aggregate::over),
        mra: mras.as_deref().map(Aggregate::over),
        task_probabilities: probs,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub gains: RelativeGains,
    pub avg_top1_a: Aggregate,
    pub avg_top1_b: Aggregate,
    pub per_seed_a: Vec<f64>,
    pub per_seed_b: Vec<f64>,
}

impl CompareReport {
    /// Side-by-side accuracy table for terminal output.
    pub fn render_table(&self, name_a: &str, name_b: &str) -> String {
        let width = name_a.len().max(name_b.len()).max(3);
        let seeds = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "{:width$}  {:>14}  per-seed\n{:width$}  {:>14}  {}\n{:width$}  {:>14}  {}\n",
            "run",
            "avg_top1",
            name_a,
            self.avg_top1_a.display,
            seeds(&self.per_seed_a),
            name_b,
            self.avg_top1_b.display,
            seeds(&self.per_seed_b),
        )
    }
}

fn read_aggregate(dir: &Path) -> Result<AggregateReport> {
    let path = dir.join("aggregate.json");
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "no aggregate report at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::MalformedData(format!("{}: {e}", path.display())))
}

/// Relative gains of run A over run B, both read from run directories.
/// The runs must share the same evaluation protocol (baseline wrappers are
/// unwrapped before comparing).
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<CompareReport> {
    let a = read_aggregate(dir_a)?;
    let b = read_aggregate(dir_b)?;
    if a.scenario.protocol() != b.scenario.protocol() {
        return Err(Error::InvalidArgument(format!(
            "incompatible scenarios: {} vs {}",
            serde_json::to_string(a.scenario.protocol())?,
            serde_json::to_string(b.scenario.protocol())?
        )));
    }
    let synth = |agg: &AggregateReport| MetricsReport {
        avg_top1: agg.avg_top1.mean,
        per_task_top1: Vec::new(),
        ece: agg.ece.mean,
        forward_transfer: agg.forward_transfer.as_ref().map(|a| a.mean),
        task_probabilities: agg.task_probabilities.clone(),
        robustness: None,
        relative_gains: None,
    };
    let gains = relative_gains(&synth(&a), &synth(&b))?;
    Ok(CompareReport {
        gains,
        avg_top1_a: a.avg_top1,
        avg_top1_b: b.avg_top1,
        per_seed_a: a.per_seed_avg_top1,
        per_seed_b: b.per_seed_avg_top1,
    })
}

/// Clean evaluation of a checkpoint under a config's scenario.
pub fn eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let model = MlpClassifier::load(checkpoint)?;
    let stream = cfg.build_stream(cfg.seed)?;
    let per_task: Vec<f64> = stream
        .tasks
        .iter()
        .map(|t| top1_accuracy(&model, &t.test))
        .collect::<Result<_>>()?;
    let avg = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let union: Vec<Example> = stream
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().cloned())
        .collect();
    let (conf, correct) = prediction_confidences(&model, &union)?;
    let probs = if stream.scenario == Scenario::ClassIl {
        Some(task_probabilities(&model, &stream)?)
    } else {
        None
    };
    Ok(MetricsReport {
        avg_top1: round2(avg),
        per_task_top1: round2_vec(&per_task),
        ece: round2(ece(&conf, &correct, DEFAULT_ECE_BINS)?),
        forward_transfer: None,
        task_probabilities: probs,
        robustness: None,
        relative_gains: None,
    })
}

/// Corruption-robustness table of a checkpoint over the config's test
/// union, seeded by the config seed.
pub fn corrupt_eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let model = MlpClassifier::load(checkpoint)?;
    let stream = cfg.build_stream(cfg.seed)?;
    let union: Vec<Example> = stream
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().cloned())
        .collect();
    Ok(round_robustness(robust_accuracy(&model, &union, cfg.seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::RegularizerKind;

    fn blob_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::Blobs {
                classes: 4,
                dim: 9,
                train_per_class: 20,
                test_per_class: 8,
                noise: 0.06,
                seed: 5,
            },
            scenario: ScenarioConfig::ClassIl { n_tasks: 2 },
            alpha: 1.0,
            regularizer: RegularizerSpec::none(),
            buffer_capacity: 60,
            batch_size: 8,
            epochs_per_task: 2,
            learning_rate: 0.2,
            hidden_layers: vec![12],
            seed: 3,
            n_seeds: 2,
            output_dir: Some(dir.to_path_buf()),
        }
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let json = r#"{
            "dataset": {"kind": "blobs", "classes": 2, "dim": 4,
                        "train_per_class": 5, "test_per_class": 2,
                        "noise": 0.05, "seed": 0},
            "scenario": {"kind": "class_il", "n_tasks": 2}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.buffer_capacity, 500);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs_per_task, 1);
        assert_eq!(cfg.learning_rate, 0.05);
        assert_eq!(cfg.hidden_layers, vec![100, 100]);
        assert_eq!(cfg.n_seeds, 1);
        assert_eq!(cfg.regularizer, RegularizerSpec::none());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_rejects_unknown_fields_bad_versions_and_missing_paths() {
        let unknown = r#"{
            "dataset": {"kind": "blobs", "classes": 2, "dim": 4,
                        "train_per_class": 5, "test_per_class": 2,
                        "noise": 0.05, "seed": 0},
            "scenario": {"kind": "class_il", "n_tasks": 2},
            "learning_rte": 0.1
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(unknown).is_err());

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.schema_version = 2;
        assert!(cfg.validate().is_err());

        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = blob_config(dir.path());
        cfg.dataset = DatasetConfig::Idx {
            train_images: dir.path().join("nope-images"),
            train_labels: dir.path().join("nope-labels"),
            test_images: dir.path().join("nope-images"),
            test_labels: dir.path().join("nope-labels"),
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("nope-images"), "{err}");

        let mut cfg = blob_config(dir.path());
        cfg.scenario = ScenarioConfig::Joint {
            protocol: Box::new(ScenarioConfig::Sgd {
                protocol: Box::new(ScenarioConfig::ClassIl { n_tasks: 2 }),
            }),
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_writes_reports_and_reruns_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        let agg = run_experiment(&cfg).unwrap();
        assert_eq!(agg.n_seeds, 2);
        assert_eq!(agg.seeds, vec![3, 4]);

        let files = [
            "config.json",
            "report_seed3.json",
            "report_seed4.json",
            "accuracy_seed3.csv",
            "reliability_seed3.csv",
            "checkpoint_seed3.bin",
            "aggregate.json",
            "timing.json",
        ];
        for f in files {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }

        let stable = &files[..files.len() - 1]; // timing.json carries wall-clock
        let before: Vec<Vec<u8>> = stable
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        run_experiment(&cfg).unwrap();
        for (f, old) in stable.iter().zip(&before) {
            let new = std::fs::read(dir.path().join(f)).unwrap();
            assert_eq!(&new, old, "{f} changed across reruns");
        }
    }

    #[test]
    fn config_echo_parses_back_to_the_effective_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        run_experiment(&cfg).unwrap();
        let echoed = load_config(&dir.path().join("config.json")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn aggregate_matches_recomputation_from_seed_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 3;
        let agg = run_experiment(&cfg).unwrap();

        let accs: Vec<f64> = (3..6)
            .map(|s| {
                let text = std::fs::read_to_string(
                    dir.path().join(format!("report_seed{s}.json")),
                )
                .unwrap();
                let rep: SeedReport = serde_json::from_str(&text).unwrap();
                rep.metrics.avg_top1
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let std =
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert_eq!(agg.avg_top1.mean, mean);
        assert_eq!(agg.avg_top1.std, std);
        assert_eq!(agg.avg_top1.display, format!("{mean:.2} ± {std:.2}"));
    }

    #[test]
    fn single_seed_aggregate_reports_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 1;
        let agg = run_experiment(&cfg).unwrap();
        assert_eq!(agg.avg_top1.std, 0.0);
        assert!(agg.avg_top1.display.ends_with("± 0.00"));
    }

    #[test]
    fn square_inputs_get_a_robustness_table_flat_inputs_do_not() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 1;
        run_experiment(&cfg).unwrap();
        let rep: SeedReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report_seed3.json")).unwrap(),
        )
        .unwrap();
        assert!(rep.metrics.robustness.is_some(), "9 = 3x3 is square");
        assert!(rep.metrics.task_probabilities.is_some());
        assert!(rep.metrics.forward_transfer.is_some());

        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir2.path());
        cfg.n_seeds = 1;
        cfg.dataset = DatasetConfig::Blobs {
            classes: 4,
            dim: 6,
            train_per_class: 20,
            test_per_class: 8,
            noise: 0.06,
            seed: 5,
        };
        run_experiment(&cfg).unwrap();
        let rep: SeedReport = serde_json::from_str(
            &std::fs::read_to_string(dir2.path().join("report_seed3.json")).unwrap(),
        )
        .unwrap();
        assert!(rep.metrics.robustness.is_none());
    }

    #[test]
    fn sgd_scenario_equals_explicit_degenerate_config() {
        let dir_a = tempfile::tempdir().unwrap();
        let mut sgd = blob_config(dir_a.path());
        sgd.n_seeds = 1;
        sgd.scenario = ScenarioConfig::Sgd {
            protocol: Box::new(ScenarioConfig::ClassIl { n_tasks: 2 }),
        };
        // these fields must be ignored under the sgd wrapper
        sgd.buffer_capacity = 300;
        sgd.regularizer = RegularizerSpec::new(RegularizerKind::Mse);
        let agg_sgd = run_experiment(&sgd).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut plain = blob_config(dir_b.path());
        plain.n_seeds = 1;
        plain.buffer_capacity = 0;
        plain.regularizer = RegularizerSpec::none();
        let agg_plain = run_experiment(&plain).unwrap();

        assert_eq!(agg_sgd.avg_top1.mean, agg_plain.avg_top1.mean);
        assert_eq!(agg_sgd.ece.mean, agg_plain.ece.mean);
    }

    #[test]
    fn joint_scenario_runs_and_reports_a_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 1;
        cfg.scenario = ScenarioConfig::Joint {
            protocol: Box::new(ScenarioConfig::ClassIl { n_tasks: 2 }),
        };
        run_experiment(&cfg).unwrap();
        let rep: SeedReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report_seed3.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(rep.accuracy_matrix.len(), 1);
        assert!(rep.metrics.forward_transfer.is_none());
    }

    #[test]
    fn compare_run_against_itself_is_all_zero_gains() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        run_experiment(&cfg).unwrap();
        let rep = compare(dir.path(), dir.path()).unwrap();
        assert_eq!(rep.gains.accuracy_gain, 0.0);
        assert_eq!(rep.gains.calibration_gain, 0.0);
        assert_eq!(rep.gains.recency_gain, Some(0.0));
        let table = rep.render_table("a", "b");
        assert!(table.contains("avg_top1"));
    }

    #[test]
    fn compare_rejects_missing_aggregates_and_mismatched_protocols() {
        let empty = tempfile::tempdir().unwrap();
        let err = compare(empty.path(), empty.path()).unwrap_err();
        assert!(err.to_string().contains("aggregate.json"), "{err}");

        let dir_a = tempfile::tempdir().unwrap();
        let cfg_a = blob_config(dir_a.path());
        run_experiment(&cfg_a).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_b = blob_config(dir_b.path());
        cfg_b.scenario = ScenarioConfig::ClassIl { n_tasks: 4 };
        run_experiment(&cfg_b).unwrap();
        let err = compare(dir_a.path(), dir_b.path()).unwrap_err();
        assert!(err.to_string().contains("incompatible scenarios"));

        // a baseline wrapper around the same protocol stays comparable
        let dir_c = tempfile::tempdir().unwrap();
        let mut cfg_c = blob_config(dir_c.path());
        cfg_c.scenario = ScenarioConfig::Sgd {
            protocol: Box::new(ScenarioConfig::ClassIl { n_tasks: 2 }),
        };
        run_experiment(&cfg_c).unwrap();
        assert!(compare(dir_a.path(), dir_c.path()).is_ok());
    }

    #[test]
    fn checkpoints_evaluate_cleanly_and_under_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.n_seeds = 1;
        run_experiment(&cfg).unwrap();
        let ckpt = dir.path().join("checkpoint_seed3.bin");

        let metrics = eval_checkpoint(&ckpt, &cfg).unwrap();
        let rep: SeedReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report_seed3.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(metrics.avg_top1, rep.metrics.avg_top1);
        assert_eq!(metrics.per_task_top1, rep.metrics.per_task_top1);
        assert_eq!(metrics.ece, rep.metrics.ece);

        let rob = corrupt_eval_checkpoint(&ckpt, &cfg).unwrap();
        assert_eq!(rob.accuracy.len(), 8);
        assert_eq!(
            rob.accuracy, rep.metrics.robustness.as_ref().unwrap().accuracy,
            "same seed, same table"
        );
    }
}
