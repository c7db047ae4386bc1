//! P identities × K images per batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity of item `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(config("P and K must both be at least 2"));
        }
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_label.into_values().filter(|g| g.len() >= 2).collect();
        if groups.len() < p {
            return Err(config(format!(
                "need at least P={p} identities with 2+ images, found {}",
                groups.len()
            )));
        }
        Ok(Self { groups, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// One epoch of batches. Every identity is split into shuffled chunks of
    /// K (short tails topped up by resampling that identity); each batch takes
    /// P distinct identities with the most chunks left (ties in random order)
    /// until fewer than P identities remain.
    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .groups
            .iter()
            .map(|g| {
                let mut items = g.clone();
                items.shuffle(rng);
                while items.len() % self.k != 0 {
                    items.push(g[rng.gen_range(0..g.len())]);
                }
                items.chunks(self.k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut avail: Vec<usize> = (0..chunks.len())
                .filter(|&g| !chunks[g].is_empty())
                .collect();
            if avail.len() < self.p {
                break;
            }
            avail.shuffle(rng);
            avail.sort_by_key(|&g| std::cmp::Reverse(chunks[g].len()));
            let mut batch = Vec::with_capacity(self.batch_size());
            for &g in &avail[..self.p] {
                batch.extend(chunks[g].pop().expect("available"));
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_hold_p_ids_with_k_each() {
        let labels: Vec<usize> = (0..8).flat_map(|l| std::iter::repeat_n(l, 16)).collect();
        let s = PkSampler::new(&labels, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = s.epoch(&mut rng);
        assert_eq!(batches.len(), 8);
        for b in &batches {
            assert_eq!(b.len(), 16);
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(labels[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn too_few_identities() {
        assert!(PkSampler::new(&[0, 0, 1, 1], 4, 2).is_err());
    }
}
