//! Fully connected ReLU classifier with raw-logit outputs.
//!
//! One shared output head serves every task; no task-conditioned routing
//! exists anywhere. Weights initialize from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
//! and biases from zero, so two models built with the same sizes and seed are
//! bitwise identical. Optimization is plain SGD on whatever gradients the
//! per-step graph produced.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{matmul_plain, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RHRS";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Node handles for one registration of the parameters in a graph.
pub struct ModelVars {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpClassifier {
    /// `layer_sizes` runs input to output, e.g. `[784, 100, 100, 10]`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-width layer in {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            weights.push(Tensor::new(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Self {
            sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters; shapes must chain.
    pub fn from_parameters(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument(
                "need equally many weight and bias tensors, at least one".into(),
            ));
        }
        let mut sizes = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.rows() != *sizes.last().unwrap() {
                return Err(Error::ShapeMismatch(format!(
                    "layer input {} does not chain from previous output {}",
                    w.rows(),
                    sizes.last().unwrap()
                )));
            }
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "bias {}x{} does not match weight {}x{}",
                    b.rows(),
                    b.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
            sizes.push(w.cols());
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Inserts all parameters as leaves. Call once per graph and reuse the
    /// returned handles for every forward pass in that step, so gradients
    /// from multiple loss terms accumulate in one place.
    pub fn register(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            weights: self.weights.iter().map(|w| g.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| g.leaf(b)).collect(),
        }
    }

    /// Differentiable forward pass: ReLU between layers, raw logits out.
    pub fn forward_graph(&self, g: &mut Graph, vars: &ModelVars, x: NodeId) -> Result<NodeId> {
        let (_, d) = g.dims(x);
        if d != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input dim {d}, model expects {}",
                self.input_dim()
            )));
        }
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            h = g.matmul(h, *w)?;
            h = g.add_row(h, *b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Plain inference without a tape; same arithmetic as the graph path.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input dim {}, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.data().to_vec();
        let mut rows = x.rows();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut out = matmul_plain(&h, rows, w.rows(), w.data(), w.cols());
            let c = w.cols();
            for (idx, v) in out.iter_mut().enumerate() {
                *v += b.data()[idx % c];
                if i < last && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = out;
            rows = x.rows();
        }
        Tensor::new(rows, self.n_classes(), h)
    }

    /// One SGD step from the gradients accumulated in `g` for `vars`.
    /// Parameters without gradients (unreached by backward) stay put.
    pub fn sgd_step(&mut self, g: &Graph, vars: &ModelVars, learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        for (w, id) in self.weights.iter_mut().zip(&vars.weights) {
            if let Some(grad) = g.grad(*id) {
                for (p, gv) in w.data_mut().iter_mut().zip(grad) {
                    *p -= learning_rate * gv;
                }
            }
        }
        for (b, id) in self.biases.iter_mut().zip(&vars.biases) {
            if let Some(grad) = g.grad(*id) {
                for (p, gv) in b.data_mut().iter_mut().zip(grad) {
                    *p -= learning_rate * gv;
                }
            }
        }
        Ok(())
    }

    // ─── checkpoint serialization ───

    /// Binary layout: magic, format version, layer count, layer sizes, then
    /// per layer the row-major weight bits and bias bits as little-endian
    /// u64. Writing f64 bits keeps the round trip exact.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for &v in wt.data() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
            for &v in b.data() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadCheckpoint("file too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let n_sizes = read_u32(&mut r)? as usize;
        if n_sizes < 2 {
            return Err(Error::BadCheckpoint(format!(
                "layer count {n_sizes} below 2"
            )));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(read_u32(&mut r)? as usize);
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::BadCheckpoint("zero-width layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut wdata = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                wdata.push(read_f64(&mut r)?);
            }
            let mut bdata = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bdata.push(read_f64(&mut r)?);
            }
            weights.push(Tensor::new(fan_in, fan_out, wdata)?);
            biases.push(Tensor::new(1, fan_out, bdata)?);
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadCheckpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadCheckpoint("truncated".into()))?;
    Ok(f64::from_bits(u64::from_le_bytes(buf)))
}

/// Mean cross-entropy between logit rows and integer labels, computed
/// through log-softmax so extreme logits stay stable.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, _) = g.dims(logits);
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} logit rows, {} labels",
            labels.len()
        )));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, labels)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}
