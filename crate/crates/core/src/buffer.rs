//! Reservoir-sampled replay memory.
//!
//! The buffer never sees task boundaries: it observes one example at a time
//! and keeps a uniform sample of the whole stream. After the k-th
//! observation (k > capacity M) an incoming item is resident with
//! probability M/k, and the slot it evicts is uniform over residents.
//!
//! Each entry stores the input, its label, and the logits `z` the classifier
//! produced when the example was inserted. `z` is frozen at insertion and
//! never refreshed; the consistency losses treat it as a constant target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    pub y: usize,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReservoirBuffer {
    capacity: usize,
    seen: u64,
    x_dim: usize,
    z_dim: usize,
    entries: Vec<BufferEntry>,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seen: 0,
            x_dim: 0,
            z_dim: 0,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of stream items offered so far, resident or not.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Offers one stream example. Dimensions are pinned by the first
    /// observation and must stay consistent afterwards.
    pub fn observe(&mut self, x: Vec<f64>, y: usize, z: Vec<f64>) -> Result<()> {
        if self.seen == 0 && self.entries.is_empty() {
            self.x_dim = x.len();
            self.z_dim = z.len();
        }
        if x.len() != self.x_dim || z.len() != self.z_dim {
            return Err(Error::BufferDimMismatch(format!(
                "expected x[{}] z[{}], got x[{}] z[{}]",
                self.x_dim,
                self.z_dim,
                x.len(),
                z.len()
            )));
        }
        self.seen += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() < self.capacity {
            self.entries.push(BufferEntry { x, y, z });
        } else {
            // Slot j < capacity is hit with probability capacity/seen, and
            // uniformly over residents, which is exactly reservoir sampling.
            let j = self.rng.random_range(0..self.seen) as usize;
            if j < self.capacity {
                self.entries[j] = BufferEntry { x, y, z };
            }
        }
        Ok(())
    }

    /// Draws `k` distinct entries uniformly without replacement, or every
    /// entry when fewer than `k` are resident. Entries are returned by
    /// value; the stored `z` stays untouched.
    pub fn sample(&mut self, k: usize) -> Result<Vec<BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("minibatch size must be at least 1".into()));
        }
        let amount = k.min(self.entries.len());
        let picked = rand::seq::index::sample(&mut self.rng, self.entries.len(), amount);
        Ok(picked.into_iter().map(|i| self.entries[i].clone()).collect())
    }

    /// Serializes entries, seen count, and the generator state; a restored
    /// buffer continues the exact sampling sequence of the original.
    pub fn dump(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn restore(json: &str) -> Result<Self> {
        let buf: Self = serde_json::from_str(json)?;
        if buf.entries.len() > buf.capacity {
            return Err(Error::MalformedData(format!(
                "buffer dump holds {} entries over capacity {}",
                buf.entries.len(),
                buf.capacity
            )));
        }
        Ok(buf)
    }
}
