//! The continual training loop: stream cross-entropy plus replayed
//! cross-entropy plus a consistency term on a second replay draw, with
//! reservoir writes after every step. Also the joint upper-bound baseline.
//!
//! One step, one graph: the model's parameters are registered once per
//! step so the three loss terms accumulate their gradients into the same
//! nodes, and a single SGD step applies the sum. The buffer stores the
//! logits produced by that step's own forward pass (detached); they are
//! never refreshed afterwards, which is the entire point of the
//! consistency target.
//!
//! Degenerate configurations collapse to the named baselines: capacity 0
//! with beta 0 is sequential SGD, and a one-task stream with capacity 0 is
//! bitwise-identical to joint training under the same config.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::buffer::{BufferEntry, ReservoirBuffer};
use crate::data::{batch, Example, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::top1_accuracy;
use crate::model::{cross_entropy, MlpClassifier};
use crate::regularizers::{make_regularizer, RegularizerKind, RegularizerSpec};
use crate::tensor::Tensor;

// Distinct rng lineages per role, so adding a consumer of one never
// perturbs the others.
pub(crate) const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
pub(crate) const BUFFER_SALT: u64 = 0x4255_4646_4552_5331;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the replayed cross-entropy term.
    pub alpha: f64,
    /// Consistency loss choice; carries its own weight beta.
    pub regularizer: RegularizerSpec,
    /// Reservoir size; 0 disables replay entirely (SGD baseline).
    pub buffer_capacity: usize,
    /// Minibatch size, shared by the stream batch and both buffer draws.
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::InvalidConfig(
                "epochs_per_task must be at least 1".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be non-negative and finite, got {}",
                self.alpha
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        make_regularizer(&self.regularizer).map(|_| ())
    }
}

/// Loss decomposition of one gradient step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub task: usize,
    pub step: usize,
    pub l_er: f64,
    pub l_cr: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<StepLoss>,
    /// Row appended after finishing each task; one column per task.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Accuracy on task t's test set immediately before its first batch.
    pub pre_task_accuracy: Vec<f64>,
    /// Accuracy of the untrained model, averaged over the tasks that enter
    /// the forward-transfer mean (t >= 2; the sole task when T = 1).
    pub random_init_accuracy: f64,
}

fn check_model_fits(model: &MlpClassifier, stream: &TaskStream) -> Result<()> {
    if model.n_classes() != stream.n_classes {
        return Err(Error::ShapeMismatch(format!(
            "model has {} outputs, stream has {} classes",
            model.n_classes(),
            stream.n_classes
        )));
    }
    if let Some(dim) = stream.input_dim() {
        if model.input_dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} inputs, stream provides {dim}",
                model.input_dim()
            )));
        }
    }
    Ok(())
}

fn baseline_accuracy(model: &MlpClassifier, stream: &TaskStream) -> Result<f64> {
    let from = if stream.n_tasks() > 1 { 1 } else { 0 };
    let tasks = &stream.tasks[from..];
    let mut sum = 0.0;
    for t in tasks {
        sum += top1_accuracy(model, &t.test)?;
    }
    Ok(sum / tasks.len() as f64)
}

fn eval_row(model: &MlpClassifier, stream: &TaskStream) -> Result<Vec<f64>> {
    stream
        .tasks
        .iter()
        .map(|t| top1_accuracy(model, &t.test))
        .collect()
}

fn entries_to_tensors(entries: &[BufferEntry]) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let n = entries.len();
    let x_dim = entries[0].x.len();
    let z_dim = entries[0].z.len();
    let mut xs = Vec::with_capacity(n * x_dim);
    let mut zs = Vec::with_capacity(n * z_dim);
    let mut ys = Vec::with_capacity(n);
    for e in entries {
        xs.extend_from_slice(&e.x);
        zs.extend_from_slice(&e.z);
        ys.push(e.y);
    }
    Ok((Tensor::new(n, x_dim, xs)?, ys, Tensor::new(n, z_dim, zs)?))
}

/// Trains over the stream task by task. Per minibatch: cross-entropy on
/// the stream batch, plus alpha times cross-entropy on one buffer draw,
/// plus beta times the consistency loss on an independent second draw
/// (current logits against the stored ones); then one SGD step, then the
/// stream batch enters the reservoir with the logits this step produced.
/// After each task the model is evaluated on every task's test set.
pub fn train_continual(
    mut model: MlpClassifier,
    stream: &TaskStream,
    cfg: &TrainConfig,
) -> Result<(MlpClassifier, TrainLog)> {
    cfg.validate()?;
    check_model_fits(&model, stream)?;
    let regularizer = make_regularizer(&cfg.regularizer)?;
    let beta = cfg.regularizer.beta;
    let consistency_active = beta > 0.0 && cfg.regularizer.kind != RegularizerKind::None;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut buffer = ReservoirBuffer::new(cfg.buffer_capacity, cfg.seed ^ BUFFER_SALT);

    let mut log = TrainLog {
        step_losses: Vec::new(),
        accuracy_matrix: Vec::new(),
        pre_task_accuracy: Vec::new(),
        random_init_accuracy: baseline_accuracy(&model, stream)?,
    };

    let mut step = 0usize;
    for (t, task) in stream.tasks.iter().enumerate() {
        log.pre_task_accuracy.push(top1_accuracy(&model, &task.test)?);

        for _ in 0..cfg.epochs_per_task {
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let (x, y) = batch(&task.train, chunk)?;

                let mut g = Graph::new();
                let vars = model.register(&mut g);
                let x_node = g.constant(&x);
                let stream_logits = model.forward_graph(&mut g, &vars, x_node)?;
                let ce_stream = cross_entropy(&mut g, stream_logits, &y)?;

                let l_er = if buffer.is_empty() {
                    ce_stream
                } else {
                    let draw = buffer.sample(cfg.batch_size)?;
                    let (bx, by, _) = entries_to_tensors(&draw)?;
                    let bx_node = g.constant(&bx);
                    let replay_logits = model.forward_graph(&mut g, &vars, bx_node)?;
                    let ce_replay = cross_entropy(&mut g, replay_logits, &by)?;
                    let weighted = g.scale(ce_replay, cfg.alpha);
                    g.add(ce_stream, weighted)?
                };

                let cr = if consistency_active && !buffer.is_empty() {
                    let draw = buffer.sample(cfg.batch_size)?;
                    let (cx, _, cz) = entries_to_tensors(&draw)?;
                    let cx_node = g.constant(&cx);
                    let current = model.forward_graph(&mut g, &vars, cx_node)?;
                    let stored = g.constant(&cz);
                    Some(regularizer(&mut g, current, stored)?)
                } else {
                    None
                };

                let total = match cr {
                    Some(cr) => {
                        let weighted = g.scale(cr, beta);
                        g.add(l_er, weighted)?
                    }
                    None => l_er,
                };

                let l_er_v = g.data(l_er)[0];
                let l_cr_v = cr.map_or(0.0, |n| g.data(n)[0]);
                let total_v = g.data(total)[0];
                if !total_v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        task: t,
                        step,
                        detail: format!("l_er = {l_er_v}, l_cr = {l_cr_v}"),
                    });
                }

                g.backward(total).map_err(|e| wrap_step_error(e, t, step))?;
                model.sgd_step(&g, &vars, cfg.learning_rate)?;

                // reservoir write happens last, with this step's own logits
                let logits = g.value(stream_logits);
                for (i, &idx) in chunk.iter().enumerate() {
                    buffer.observe(
                        task.train[idx].x.clone(),
                        task.train[idx].y,
                        logits.row(i).to_vec(),
                    )?;
                }

                log.step_losses.push(StepLoss {
                    task: t,
                    step,
                    l_er: l_er_v,
                    l_cr: l_cr_v,
                    total: total_v,
                });
                step += 1;
            }
        }

        log.accuracy_matrix.push(eval_row(&model, stream)?);
    }

    Ok((model, log))
}

/// A numeric blow-up inside a step surfaces as a loss abort with the
/// step's coordinates attached.
fn wrap_step_error(e: Error, task: usize, step: usize) -> Error {
    match e {
        Error::NonFiniteLogits => Error::NonFiniteLoss {
            task,
            step,
            detail: "non-finite logits".into(),
        },
        other => other,
    }
}

/// Upper-bound baseline: plain supervised training on the union of all
/// task train sets for the same per-task epoch budget, then one evaluation
/// row over every task's test set.
pub fn train_joint(
    mut model: MlpClassifier,
    stream: &TaskStream,
    cfg: &TrainConfig,
) -> Result<(MlpClassifier, TrainLog)> {
    cfg.validate()?;
    check_model_fits(&model, stream)?;

    let union: Vec<Example> = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().cloned())
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);

    let mut log = TrainLog {
        step_losses: Vec::new(),
        accuracy_matrix: Vec::new(),
        pre_task_accuracy: Vec::new(),
        random_init_accuracy: baseline_accuracy(&model, stream)?,
    };

    let mut step = 0usize;
    for _ in 0..cfg.epochs_per_task {
        let mut order: Vec<usize> = (0..union.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch(&union, chunk)?;
            let mut g = Graph::new();
            let vars = model.register(&mut g);
            let x_node = g.constant(&x);
            let logits = model.forward_graph(&mut g, &vars, x_node)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            let loss_v = g.data(loss)[0];
            if !loss_v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: 0,
                    step,
                    detail: format!("joint loss = {loss_v}"),
                });
            }
            g.backward(loss).map_err(|e| wrap_step_error(e, 0, step))?;
            model.sgd_step(&g, &vars, cfg.learning_rate)?;
            log.step_losses.push(StepLoss {
                task: 0,
                step,
                l_er: loss_v,
                l_cr: 0.0,
                total: loss_v,
            });
            step += 1;
        }
    }

    log.accuracy_matrix.push(eval_row(&model, stream)?);
    Ok((model, log))
}
