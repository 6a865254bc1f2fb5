use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Identity-balanced batch sampler: P identities, K samples each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    /// Sample positions grouped by class index.
    groups: Vec<Vec<usize>>,
    labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    /// `labels[i]` is the class of sample position `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::config("sampler.P", "need at least 2 identities per batch"));
        }
        if k < 2 {
            return Err(Error::config("sampler.K", "need at least 2 samples per identity"));
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut groups = vec![Vec::new(); n_classes];
        for (i, &c) in labels.iter().enumerate() {
            groups[c].push(i);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < p {
            return Err(Error::config(
                "sampler.P",
                format!("P={p} exceeds the {} training identities", groups.len()),
            ));
        }
        Ok(PkSampler {
            groups,
            labels: labels.to_vec(),
            p,
            k,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Batches per epoch: `ceil(#samples / (P*K))`.
    pub fn epoch_len(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size())
    }

    pub fn label(&self, pos: usize) -> usize {
        self.labels[pos]
    }

    /// Sample positions for one batch, grouped by identity.
    ///
    /// An identity with fewer than K samples contributes each of its samples once and
    /// fills the remaining slots with replacement.
    pub fn next_batch<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for g in index::sample(rng, self.groups.len(), self.p).into_iter() {
            let group = &self.groups[g];
            if group.len() >= self.k {
                out.extend(index::sample(rng, group.len(), self.k).into_iter().map(|j| group[j]));
            } else {
                let mut slots = group.clone();
                while slots.len() < self.k {
                    slots.push(group[rng.random_range(0..group.len())]);
                }
                slots.shuffle(rng);
                out.extend(slots);
            }
        }
        out
    }
}
