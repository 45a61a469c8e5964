//! FIFO bank of recent part embeddings feeding the part-aware triplet loss.
//!
//! The bank holds the last `M` batches of `[B, K, C]` part embeddings together
//! with identity labels and per-part visibility. Everything except the newest
//! batch is stored as a detached copy; the newest batch keeps its autograd
//! graph so the loss can push gradients into the current forward pass.

use std::collections::VecDeque;
use std::ops::Range;

use candle_core::Tensor;

use crate::error::{DropError, Result};

#[derive(Debug, Clone)]
struct StoredBatch {
    /// Detached copy, `[B, K, C]`.
    embs: Tensor,
    visibility: Vec<Vec<bool>>,
    identities: Vec<usize>,
    age: u64,
}

/// Materialized bank contents in insertion order.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    /// `[N, K, C]`; rows in [`BankSnapshot::newest`] carry gradients.
    pub embs: Tensor,
    pub visibility: Vec<Vec<bool>>,
    pub identities: Vec<usize>,
    pub ages: Vec<u64>,
    /// Rows of the most recently pushed batch.
    pub newest: Range<usize>,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PartsMemoryBank {
    capacity_batches: usize,
    batch_size: usize,
    num_parts: usize,
    dim: usize,
    batches: VecDeque<StoredBatch>,
    /// Graph-connected view of the newest batch.
    live: Option<Tensor>,
    next_age: u64,
}

impl PartsMemoryBank {
    pub fn new(capacity_batches: usize, batch_size: usize, num_parts: usize, dim: usize) -> Result<Self> {
        if capacity_batches == 0 || batch_size == 0 || num_parts == 0 || dim == 0 {
            return Err(DropError::Config(format!(
                "memory bank geometry must be positive, got M={capacity_batches} B={batch_size} K={num_parts} C={dim}"
            )));
        }
        Ok(Self {
            capacity_batches,
            batch_size,
            num_parts,
            dim,
            batches: VecDeque::with_capacity(capacity_batches),
            live: None,
            next_age: 0,
        })
    }

    /// Maximum number of stored entries, `M x B`.
    pub fn capacity(&self) -> usize {
        self.capacity_batches * self.batch_size
    }

    pub fn len(&self) -> usize {
        self.batches.len() * self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.batches.len() == self.capacity_batches
    }

    /// Drops every entry; ages keep increasing across resets.
    pub fn reset(&mut self) {
        self.batches.clear();
        self.live = None;
    }

    pub fn push_batch(
        &mut self,
        embs: &Tensor,
        visibility: &[Vec<bool>],
        identities: &[usize],
    ) -> Result<()> {
        let (b, k, c) = embs.dims3()?;
        if b != self.batch_size || k != self.num_parts || c != self.dim {
            return Err(DropError::Dimension(format!(
                "bank expects [{}, {}, {}] embeddings, got [{b}, {k}, {c}]",
                self.batch_size, self.num_parts, self.dim
            )));
        }
        if visibility.len() != b || identities.len() != b || visibility.iter().any(|v| v.len() != k) {
            return Err(DropError::Dimension(
                "visibility/identity rows must match the batch".into(),
            ));
        }
        if self.batches.len() == self.capacity_batches {
            self.batches.pop_front();
        }
        self.batches.push_back(StoredBatch {
            embs: embs.copy()?.detach(),
            visibility: visibility.to_vec(),
            identities: identities.to_vec(),
            age: self.next_age,
        });
        self.live = Some(embs.clone());
        self.next_age += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BankSnapshot> {
        let newest = self.batches.back().ok_or(DropError::EmptyBank)?;
        let live = self.live.as_ref().unwrap_or(&newest.embs);
        let mut parts: Vec<&Tensor> = self
            .batches
            .iter()
            .take(self.batches.len() - 1)
            .map(|s| &s.embs)
            .collect();
        parts.push(live);
        let embs = Tensor::cat(&parts, 0)?;
        let mut visibility = Vec::with_capacity(self.len());
        let mut identities = Vec::with_capacity(self.len());
        let mut ages = Vec::with_capacity(self.len());
        for s in &self.batches {
            visibility.extend(s.visibility.iter().cloned());
            identities.extend_from_slice(&s.identities);
            ages.extend(std::iter::repeat_n(s.age, self.batch_size));
        }
        let n = identities.len();
        Ok(BankSnapshot {
            embs,
            visibility,
            identities,
            ages,
            newest: n - self.batch_size..n,
        })
    }
}
