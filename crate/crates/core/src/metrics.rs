//! Evaluation quantities: top-1 accuracy, calibration (ECE and
//! reliability bins), forward transfer, task-recency probabilities,
//! corruption robustness, and relative gains between two runs.
//!
//! Everything here is pure over a read-only model snapshot and a dataset,
//! so sweeps can evaluate cells concurrently; the robustness table does so
//! when `REHEARSE_EVAL_THREADS` asks for it, with per-cell seeds derived
//! deterministically so thread count never changes results.

use serde::{Deserialize, Serialize};

use crate::augment::{corrupt, CorruptionKind, N_SEVERITIES};
use crate::autodiff::softmax_row;
use crate::data::{full_batch, Example, Scenario, TaskStream};
use crate::error::{Error, Result};
use crate::model::MlpClassifier;
use crate::tensor::Tensor;

/// Index of the row maximum, ties broken by the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Percent of test examples whose argmax logit matches the label.
pub fn top1_accuracy(model: &MlpClassifier, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (x, y) = full_batch(test)?;
    let logits = model.logits(&x)?;
    Ok(accuracy_from_logits(&logits, &y))
}

/// Per-example (max softmax probability, prediction correct) pairs, the
/// raw material for calibration metrics.
pub fn prediction_confidences(
    model: &MlpClassifier,
    test: &[Example],
) -> Result<(Vec<f64>, Vec<bool>)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (x, y) = full_batch(test)?;
    let logits = model.logits(&x)?;
    let mut conf = Vec::with_capacity(test.len());
    let mut correct = Vec::with_capacity(test.len());
    let mut probs = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        softmax_row(logits.row(i), &mut probs);
        let pred = argmax(logits.row(i));
        conf.push(probs[pred]);
        correct.push(pred == y[i]);
    }
    Ok((conf, correct))
}

/// Equal-width confidence bins on (0,1]: confidence c lands in bin
/// ceil(c*M), with c = 0 counted into bin 1.
fn bin_index(c: f64, n_bins: usize) -> usize {
    if c == 0.0 {
        return 0;
    }
    ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n_bins: usize,
    pub bins: Vec<ReliabilityBin>,
    /// Expected calibration error in percent.
    pub ece: f64,
}

impl ReliabilityReport {
    /// Per-bin CSV (bin edges, count, mean confidence, accuracy) for
    /// external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,mean_confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6},{:.6}\n",
                i + 1,
                i as f64 / self.n_bins as f64,
                (i + 1) as f64 / self.n_bins as f64,
                b.count,
                b.mean_confidence,
                b.accuracy
            ));
        }
        out
    }
}

/// Bins predictions by confidence and reports per-bin statistics plus the
/// expected calibration error: sum over bins of (count/n)*|acc - conf|,
/// in percent. Empty bins contribute zero.
pub fn reliability(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<ReliabilityReport> {
    if confidences.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "{} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() || n_bins == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs at least one sample and one bin".into(),
        ));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0,1]"
            )));
        }
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            if count[b] == 0 {
                return ReliabilityBin { count: 0, mean_confidence: 0.0, accuracy: 0.0 };
            }
            let mean_confidence = conf_sum[b] / count[b] as f64;
            let accuracy = hit_sum[b] / count[b] as f64;
            ece += count[b] as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin { count: count[b], mean_confidence, accuracy }
        })
        .collect();
    Ok(ReliabilityReport { n_bins, bins, ece: ece * 100.0 })
}

pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    Ok(reliability(confidences, correct, n_bins)?.ece)
}

/// Mean over tasks 2..T of (accuracy just before training the task minus
/// the random-init baseline). Task 1 is excluded: nothing has been
/// learned before it.
pub fn forward_transfer(pre_task_acc: &[f64], random_init_acc: f64) -> Result<f64> {
    if pre_task_acc.len() < 2 {
        return Err(Error::InvalidArgument(
            "forward transfer needs at least 2 tasks".into(),
        ));
    }
    let later = &pre_task_acc[1..];
    Ok(later.iter().map(|a| a - random_init_acc).sum::<f64>() / later.len() as f64)
}

/// Average probability mass the model assigns to each task's class block,
/// over the union of all test sets, normalized to sum 1. Only meaningful
/// when tasks own disjoint class blocks.
pub fn task_probabilities(model: &MlpClassifier, stream: &TaskStream) -> Result<Vec<f64>> {
    if stream.scenario != Scenario::ClassIl {
        return Err(Error::InvalidArgument(
            "task probabilities are defined for class-incremental streams only".into(),
        ));
    }
    let all: Vec<Example> = stream
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().cloned())
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (x, _) = full_batch(&all)?;
    let logits = model.logits(&x)?;
    let mut mass = vec![0.0; stream.n_tasks()];
    let mut probs = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        softmax_row(logits.row(i), &mut probs);
        for (t, task) in stream.tasks.iter().enumerate() {
            mass[t] += task.classes.iter().map(|&c| probs[c]).sum::<f64>();
        }
    }
    let total: f64 = mass.iter().sum();
    Ok(mass.into_iter().map(|m| m / total).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Corruption kind per row, in `CorruptionKind::ALL` order.
    pub kinds: Vec<String>,
    /// Accuracy per kind and severity; column 0 is the clean set.
    pub accuracy: Vec<Vec<f64>>,
    /// Clean accuracy (column 0, identical across kinds).
    pub clean: f64,
    /// Mean robust accuracy over the corrupted cells (severities 1..=5).
    pub mra: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_accuracy(
    model: &MlpClassifier,
    test: &[Example],
    kind_idx: usize,
    kind: CorruptionKind,
    severity: usize,
    seed: u64,
) -> Result<f64> {
    let dim = test[0].x.len();
    let mut flat = Vec::with_capacity(test.len() * dim);
    let mut labels = Vec::with_capacity(test.len());
    for (i, e) in test.iter().enumerate() {
        let img_seed = splitmix(
            seed ^ splitmix((kind_idx as u64) << 32 | severity as u64).wrapping_add(i as u64),
        );
        flat.extend_from_slice(&corrupt(&e.x, kind, severity, img_seed)?);
        labels.push(e.y);
    }
    let x = Tensor::new(test.len(), dim, flat)?;
    Ok(accuracy_from_logits(&model.logits(&x)?, &labels))
}

/// Accuracy under every corruption kind at severities 0..=5 (0 = clean),
/// plus the mean robust accuracy over the corrupted cells. Reads
/// `REHEARSE_EVAL_THREADS` for optional parallel cell evaluation.
pub fn robust_accuracy(model: &MlpClassifier, test: &[Example], seed: u64) -> Result<RobustnessReport> {
    let threads = std::env::var("REHEARSE_EVAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1);
    robust_accuracy_with_threads(model, test, seed, threads)
}

pub fn robust_accuracy_with_threads(
    model: &MlpClassifier,
    test: &[Example],
    seed: u64,
    threads: usize,
) -> Result<RobustnessReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let clean = top1_accuracy(model, test)?;
    let cells: Vec<(usize, usize)> = (0..CorruptionKind::ALL.len())
        .flat_map(|k| (1..=N_SEVERITIES).map(move |s| (k, s)))
        .collect();

    let mut results: Vec<Result<f64>> = Vec::with_capacity(cells.len());
    if threads <= 1 {
        for &(k, s) in &cells {
            results.push(cell_accuracy(model, test, k, CorruptionKind::ALL[k], s, seed));
        }
    } else {
        let mut slots: Vec<Option<Result<f64>>> = (0..cells.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut rest = slots.as_mut_slice();
            let mut offset = 0;
            let per = cells.len().div_ceil(threads);
            for _ in 0..threads {
                let take = per.min(rest.len());
                if take == 0 {
                    break;
                }
                let (chunk, tail) = rest.split_at_mut(take);
                rest = tail;
                let cells = &cells[offset..offset + take];
                offset += take;
                scope.spawn(move || {
                    for (slot, &(k, s)) in chunk.iter_mut().zip(cells) {
                        *slot = Some(cell_accuracy(
                            model,
                            test,
                            k,
                            CorruptionKind::ALL[k],
                            s,
                            seed,
                        ));
                    }
                });
            }
        });
        results = slots.into_iter().map(|s| s.expect("all cells evaluated")).collect();
    }

    let mut accuracy: Vec<Vec<f64>> = CorruptionKind::ALL
        .iter()
        .map(|_| vec![clean; N_SEVERITIES + 1])
        .collect();
    let mut mra = 0.0;
    for (&(k, s), r) in cells.iter().zip(results) {
        let a = r?;
        accuracy[k][s] = a;
        mra += a;
    }
    mra /= cells.len() as f64;
    Ok(RobustnessReport {
        kinds: CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        accuracy,
        clean,
        mra,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelativeGains {
    /// 100 * (acc_new - acc_ref) / acc_ref.
    pub accuracy_gain: f64,
    /// Improvement in 1 - (last-task mass - first-task mass); present only
    /// when both runs carry task probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recency_gain: Option<f64>,
    /// 100 * ((100 - ece_new) - (100 - ece_ref)) / (100 - ece_ref).
    pub calibration_gain: f64,
}

/// Aggregated metrics of one run, as persisted in reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_top1: f64,
    pub per_task_top1: Vec<f64>,
    pub ece: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_transfer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_gains: Option<RelativeGains>,
}

/// Relative gains of `new` over `reference`. The recency term needs task
/// probabilities on both sides and is omitted when either lacks them.
pub fn relative_gains(new: &MetricsReport, reference: &MetricsReport) -> Result<RelativeGains> {
    if reference.avg_top1 == 0.0 {
        return Err(Error::InvalidArgument(
            "zero reference accuracy in accuracy gain".into(),
        ));
    }
    let accuracy_gain = 100.0 * (new.avg_top1 - reference.avg_top1) / reference.avg_top1;

    let ref_cal = 100.0 - reference.ece;
    if ref_cal == 0.0 {
        return Err(Error::InvalidArgument(
            "zero reference calibration in calibration gain".into(),
        ));
    }
    let calibration_gain = 100.0 * ((100.0 - new.ece) - ref_cal) / ref_cal;

    let recency_gain = match (&new.task_probabilities, &reference.task_probabilities) {
        (Some(np), Some(rp)) if np.len() >= 2 && rp.len() >= 2 => {
            let spread = |p: &[f64]| 1.0 - (p[p.len() - 1] - p[0]);
            let ref_spread = spread(rp);
            if ref_spread == 0.0 {
                return Err(Error::InvalidArgument(
                    "zero reference spread in recency gain".into(),
                ));
            }
            Some(100.0 * (spread(np) - ref_spread) / ref_spread)
        }
        _ => None,
    };

    Ok(RelativeGains { accuracy_gain, recency_gain, calibration_gain })
}
