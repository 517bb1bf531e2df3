use rand::seq::SliceRandom;
use rand::Rng;

use crate::recmodel::{sample_negatives, Batch};

/// Splits the training pairs into shuffled mini-batches once per epoch.
///
/// When stratified, every batch is topped up from per-group cyclic
/// reservoirs until each group with training pairs has at least
/// `max(1, batch_size / (4 N))` pairs in it.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pairs: Vec<(usize, usize)>,
    group_of_pair: Vec<usize>,
    reservoirs: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
    min_per_group: usize,
    stratified: bool,
}

impl BatchSampler {
    pub fn new(
        pairs: Vec<(usize, usize)>,
        group_of_item: &[usize],
        num_groups: usize,
        batch_size: usize,
        stratified: bool,
    ) -> Self {
        let group_of_pair: Vec<usize> = pairs.iter().map(|&(_, i)| group_of_item[i]).collect();
        let mut reservoirs = vec![Vec::new(); num_groups];
        for (p, &g) in group_of_pair.iter().enumerate() {
            reservoirs[g].push(p);
        }
        Self {
            pairs,
            group_of_pair,
            reservoirs,
            cursors: vec![0; num_groups],
            batch_size: batch_size.max(1),
            min_per_group: (batch_size / (4 * num_groups.max(1))).max(1),
            stratified,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }

    /// Pair indices of every batch of one epoch.
    pub fn epoch<R: Rng>(&mut self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.batch_size) {
            let mut batch = chunk.to_vec();
            if self.stratified {
                let mut counts = vec![0usize; self.reservoirs.len()];
                for &p in &batch {
                    counts[self.group_of_pair[p]] += 1;
                }
                for (g, count) in counts.iter_mut().enumerate() {
                    while *count < self.min_per_group && !self.reservoirs[g].is_empty() {
                        batch.push(self.draw(g, rng));
                        *count += 1;
                    }
                }
            }
            out.push(batch);
        }
        out
    }

    fn draw<R: Rng>(&mut self, g: usize, rng: &mut R) -> usize {
        if self.cursors[g] == 0 {
            self.reservoirs[g].shuffle(rng);
        }
        let p = self.reservoirs[g][self.cursors[g]];
        self.cursors[g] = (self.cursors[g] + 1) % self.reservoirs[g].len();
        p
    }

    /// Materializes a batch with freshly sampled negatives.
    pub fn build<R: Rng>(
        &self,
        indices: &[usize],
        num_items: usize,
        num_negatives: usize,
        histories: Option<&[Vec<usize>]>,
        rng: &mut R,
    ) -> Batch {
        let mut batch = Batch::default();
        for &p in indices {
            let (u, i) = self.pairs[p];
            batch.pairs.push((u, i));
            let hist = histories.map(|h| h[u].as_slice());
            batch.negatives.push(sample_negatives(rng, num_items, i, num_negatives, hist));
            batch.group_of_pair.push(self.group_of_pair[p]);
        }
        batch
    }
}
