//! Dataset ingestion and stream protocol construction.
//!
//! A [`TaskStream`] is an ordered list of (train, test) pairs presented to
//! the trainer one task at a time. Task boundaries exist only for
//! evaluation scheduling; the learner itself is boundary-free, which is
//! what `boundaries_visible: false` on every constructor encodes.
//!
//! Three protocols are provided: class-incremental splits (disjoint
//! contiguous class blocks), rotated domain-incremental (full class set
//! under one random rotation per task), and a 360-degree stream that
//! interleaves consecutive digit pairs while rotating smoothly through the
//! full circle over six repetitions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::rotate_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled sample: a flattened image (or feature vector) in [0,1]
/// and its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIl,
    DomainIl,
    Mnist360,
}

/// One stream element. `classes` lists the labels present in the task's
/// train set; `rotation` is the task's base angle where the protocol has
/// one (radians).
#[derive(Clone, Debug)]
pub struct Task {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub classes: Vec<usize>,
    pub rotation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub n_classes: usize,
    pub tasks: Vec<Task>,
    /// Always false: the trainer never branches on task identity.
    pub boundaries_visible: bool,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Feature dimension, taken from the first example found.
    pub fn input_dim(&self) -> Option<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(t.test.iter()))
            .next()
            .map(|e| e.x.len())
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::MalformedData(format!("{what}: file too short")))?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (big-endian magic and dimension
/// header, then raw bytes). Pixels are scaled by 1/255, so byte 255 maps
/// to exactly 1.0.
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P) -> Result<Vec<Example>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let ibytes = std::fs::read(images_path)?;
    let lbytes = std::fs::read(labels_path)?;

    let imagic = read_u32_be(&ibytes, 0, "image header")?;
    if imagic != IDX_IMAGE_MAGIC {
        return Err(Error::NotIdx(format!(
            "expected image magic 0x{IDX_IMAGE_MAGIC:08x}, found 0x{imagic:08x} in {}",
            images_path.display()
        )));
    }
    let n_images = read_u32_be(&ibytes, 4, "image count")? as usize;
    let rows = read_u32_be(&ibytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&ibytes, 12, "image cols")? as usize;
    let pixels = &ibytes[16..];
    if pixels.len() != n_images * rows * cols {
        return Err(Error::MalformedData(format!(
            "image file {}: header promises {} bytes, found {}",
            images_path.display(),
            n_images * rows * cols,
            pixels.len()
        )));
    }

    let lmagic = read_u32_be(&lbytes, 0, "label header")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::NotIdx(format!(
            "expected label magic 0x{IDX_LABEL_MAGIC:08x}, found 0x{lmagic:08x} in {}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&lbytes, 4, "label count")? as usize;
    let labels = &lbytes[8..];
    if labels.len() != n_labels {
        return Err(Error::MalformedData(format!(
            "label file {}: header promises {n_labels} bytes, found {}",
            labels_path.display(),
            labels.len()
        )));
    }
    if n_images != n_labels {
        return Err(Error::MalformedData(format!(
            "image/label count mismatch: {n_images} images vs {n_labels} labels"
        )));
    }

    let dim = rows * cols;
    Ok((0..n_images)
        .map(|i| Example {
            x: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            y: labels[i] as usize,
        })
        .collect())
}

/// Loads examples from a headered CSV with a column named "label"; every
/// other column is a numeric feature that must lie in [0,1].
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::MalformedData(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedData(format!("{}: {e}", path.display())))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| {
            Error::MalformedData(format!("{}: no column named \"label\"", path.display()))
        })?;

    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::MalformedData(format!("{}: {e}", path.display())))?;
        let mut x = Vec::with_capacity(headers.len() - 1);
        let mut y = None;
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                y = Some(field.parse::<usize>().map_err(|_| {
                    Error::MalformedData(format!("row {}: bad label {field:?}", line + 1))
                })?);
            } else {
                let v = field.parse::<f64>().map_err(|_| {
                    Error::MalformedData(format!("row {}: bad feature {field:?}", line + 1))
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::MalformedData(format!(
                        "row {}: feature {v} outside [0,1]",
                        line + 1
                    )));
                }
                x.push(v);
            }
        }
        out.push(Example {
            x,
            y: y.expect("label column present"),
        });
    }
    Ok(out)
}

/// Synthetic isotropic Gaussian blobs for self-contained runs: `classes`
/// cluster centers drawn uniformly in [0.2, 0.8]^dim, train and test
/// sampled around the same centers, pixels clipped to [0,1].
pub fn gaussian_blobs(
    classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if classes == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "blobs need at least one class and one dimension".into(),
        ));
    }
    if !(noise.is_finite() && noise > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blob noise must be positive, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect())
        .collect();
    let normal = Normal::new(0.0, noise).expect("noise checked positive");
    let mut draw = |count: usize| -> Vec<Example> {
        let mut set = Vec::with_capacity(classes * count);
        for (y, mean) in means.iter().enumerate() {
            for _ in 0..count {
                let x = mean
                    .iter()
                    .map(|m| (m + normal.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                set.push(Example { x, y });
            }
        }
        set
    };
    let train = draw(train_per_class);
    let test = draw(test_per_class);
    Ok((train, test))
}

fn infer_n_classes(train: &[Example], test: &[Example]) -> Result<usize> {
    let max = train
        .iter()
        .chain(test)
        .map(|e| e.y)
        .max()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    Ok(max + 1)
}

/// Partitions the label range into `n_tasks` contiguous ascending blocks;
/// task t holds exactly the examples whose labels fall in its block.
pub fn split_class_il(
    train: Vec<Example>,
    test: Vec<Example>,
    n_tasks: usize,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be at least 1".into()));
    }
    let n_classes = infer_n_classes(&train, &test)?;
    if n_classes % n_tasks != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes do not divide into {n_tasks} tasks"
        )));
    }
    let per_task = n_classes / n_tasks;
    let tasks = (0..n_tasks)
        .map(|t| {
            let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
            let keep = |e: &&Example| classes.contains(&e.y);
            Task {
                train: train.iter().filter(keep).cloned().collect(),
                test: test.iter().filter(keep).cloned().collect(),
                classes,
                rotation: None,
            }
        })
        .collect();
    Ok(TaskStream {
        scenario: Scenario::ClassIl,
        n_classes,
        tasks,
        boundaries_visible: false,
    })
}

fn rotate_set(set: &[Example], angle: f64) -> Result<Vec<Example>> {
    set.iter()
        .map(|e| {
            Ok(Example {
                x: rotate_image(&e.x, angle)?,
                y: e.y,
            })
        })
        .collect()
}

/// Every task is the full dataset under one fixed rotation, with the angle
/// drawn uniformly from [0, pi) by the seeded rng.
pub fn rotated_domain_il(
    train: Vec<Example>,
    test: Vec<Example>,
    n_tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be at least 1".into()));
    }
    let n_classes = infer_n_classes(&train, &test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<f64> = (0..n_tasks)
        .map(|_| rng.random::<f64>() * std::f64::consts::PI)
        .collect();
    let all_classes: Vec<usize> = (0..n_classes).collect();
    let tasks = angles
        .into_iter()
        .map(|angle| {
            Ok(Task {
                train: rotate_set(&train, angle)?,
                test: rotate_set(&test, angle)?,
                classes: all_classes.clone(),
                rotation: Some(angle),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        scenario: Scenario::DomainIl,
        n_classes,
        tasks,
        boundaries_visible: false,
    })
}

const PAIRS_PER_CYCLE: usize = 8;
const CYCLES: usize = 6;
const BLOCKS: usize = PAIRS_PER_CYCLE * CYCLES;

/// Digit-pair stream: the pairs {0,1},{1,2},...,{7,8} in order, repeated
/// six times (48 blocks), with each sample rotated by an angle growing
/// linearly over the whole stream so the six passes cover [0, 2pi). Digit
/// 9 never appears. Each pair's train data is split across its six blocks
/// (one pass over the data); each block's test set is the pair's full test
/// set under the block's rotation schedule.
pub fn mnist360_stream(train: Vec<Example>, test: Vec<Example>, seed: u64) -> Result<TaskStream> {
    let n_classes = PAIRS_PER_CYCLE + 1; // digits 0..=8
    for d in 0..n_classes {
        if !train.iter().any(|e| e.y == d) || !test.iter().any(|e| e.y == d) {
            return Err(Error::MalformedData(format!(
                "digit class {d} missing from the dataset"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // one shuffled index list per pair, carved into six chunks below
    let mut pair_train: Vec<Vec<usize>> = Vec::with_capacity(PAIRS_PER_CYCLE);
    let mut pair_test: Vec<Vec<usize>> = Vec::with_capacity(PAIRS_PER_CYCLE);
    for p in 0..PAIRS_PER_CYCLE {
        let mut idx: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, e)| e.y == p || e.y == p + 1)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        pair_train.push(idx);
        pair_test.push(
            test.iter()
                .enumerate()
                .filter(|(_, e)| e.y == p || e.y == p + 1)
                .map(|(i, _)| i)
                .collect(),
        );
    }

    let angle_at = |block: usize, i: usize, n: usize| {
        std::f64::consts::TAU * (block as f64 + i as f64 / n as f64) / BLOCKS as f64
    };
    let mut tasks = Vec::with_capacity(BLOCKS);
    for block in 0..BLOCKS {
        let p = block % PAIRS_PER_CYCLE;
        let cycle = block / PAIRS_PER_CYCLE;
        let idx = &pair_train[p];
        let (lo, hi) = (
            cycle * idx.len() / CYCLES,
            (cycle + 1) * idx.len() / CYCLES,
        );
        let chunk = &idx[lo..hi];
        let train_set = chunk
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                Ok(Example {
                    x: rotate_image(&train[j].x, angle_at(block, i, chunk.len()))?,
                    y: train[j].y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let test_idx = &pair_test[p];
        let test_set = test_idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                Ok(Example {
                    x: rotate_image(&test[j].x, angle_at(block, i, test_idx.len()))?,
                    y: test[j].y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(Task {
            train: train_set,
            test: test_set,
            classes: vec![p, p + 1],
            rotation: Some(angle_at(block, 0, 1)),
        });
    }
    Ok(TaskStream {
        scenario: Scenario::Mnist360,
        n_classes,
        tasks,
        boundaries_visible: false,
    })
}

/// Gathers the indexed examples into a design matrix and a label vector.
pub fn batch(data: &[Example], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let dim = data
        .get(indices[0])
        .ok_or_else(|| Error::InvalidArgument(format!("batch index {} out of range", indices[0])))?
        .x
        .len();
    let mut flat = Vec::with_capacity(indices.len() * dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = data
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("batch index {i} out of range")))?;
        if e.x.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "example {i} has {} features, batch expects {dim}",
                e.x.len()
            )));
        }
        flat.extend_from_slice(&e.x);
        labels.push(e.y);
    }
    Ok((Tensor::new(indices.len(), dim, flat)?, labels))
}

pub fn full_batch(data: &[Example]) -> Result<(Tensor, Vec<usize>)> {
    let indices: Vec<usize> = (0..data.len()).collect();
    batch(data, &indices)
}
