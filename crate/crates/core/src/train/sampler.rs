//! Identity-balanced batches: `P` identities with `I` instances each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DropError, Result};

#[derive(Debug, Clone)]
pub struct PkSampler {
    /// Sample indices per identity, in identity order.
    pools: Vec<(usize, Vec<usize>)>,
    identities: usize,
    instances: usize,
}

impl PkSampler {
    pub fn new(labels: &[usize], identities: usize, instances: usize) -> Result<Self> {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_id.entry(l).or_default().push(i);
        }
        if by_id.len() < identities {
            return Err(DropError::Config(format!(
                "{} identities available, {identities} needed per batch",
                by_id.len()
            )));
        }
        Ok(Self {
            pools: by_id.into_iter().collect(),
            identities,
            instances,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.instances
    }

    /// One epoch of batches. Each identity's samples are shuffled and cut
    /// into chunks of `I` (topped up with repeats when short, remainder
    /// dropped); batches draw `P` distinct identities that still have chunks.
    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .pools
            .iter()
            .map(|(_, pool)| {
                let mut idx = pool.clone();
                if idx.len() < self.instances {
                    while idx.len() < self.instances {
                        idx.push(pool[rng.random_range(0..pool.len())]);
                    }
                }
                idx.shuffle(rng);
                idx.chunks_exact(self.instances).map(|c| c.to_vec()).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if open.len() < self.identities {
                break;
            }
            open.shuffle(rng);
            let mut batch = Vec::with_capacity(self.batch_size());
            for &i in &open[..self.identities] {
                batch.extend(chunks[i].pop().unwrap_or_default());
            }
            batches.push(batch);
        }
        batches
    }
}
