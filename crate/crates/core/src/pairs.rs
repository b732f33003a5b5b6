//! Pair generation for Siamese training.
//!
//! The dataset is split once into two groups by a seeded shuffle. Each pair
//! takes one member from each group. Inside an epoch a group is walked in a
//! shuffled order without repetition; a group that runs out mid-epoch is
//! reshuffled, and both groups are reshuffled at every epoch boundary.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Debug)]
pub struct PairStream {
    groups: [Vec<usize>; 2],
    order: [Vec<usize>; 2],
    cursor: [usize; 2],
    epoch_pairs: usize,
    emitted_in_epoch: usize,
    emitted: u64,
    rng: ChaCha8Rng,
}

pub fn make_pairs(clouds: &[PointCloud], seed: u64, epoch_pairs: usize) -> Result<PairStream> {
    if clouds.len() < 2 {
        bail!(Argument, "pairing needs at least 2 clouds, got {}", clouds.len());
    }
    if let Some(c) = clouds.iter().find(|c| c.category != clouds[0].category) {
        bail!(
            Argument,
            "mixed categories `{}` and `{}` in one pair stream",
            clouds[0].category,
            c.category
        );
    }
    PairStream::new(clouds.len(), seed, epoch_pairs)
}

impl PairStream {
    pub fn new(count: usize, seed: u64, epoch_pairs: usize) -> Result<Self> {
        if count < 2 {
            bail!(Argument, "pairing needs at least 2 clouds, got {count}");
        }
        if epoch_pairs == 0 {
            bail!(Argument, "epoch_pairs must be at least 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..count).collect();
        all.shuffle(&mut rng);
        let second = all.split_off(count / 2);
        let groups = [all, second];
        Ok(Self {
            order: groups.clone(),
            groups,
            cursor: [usize::MAX; 2],
            epoch_pairs,
            emitted_in_epoch: 0,
            emitted: 0,
            rng,
        })
    }

    /// The two disjoint groups of dataset indices.
    pub fn groups(&self) -> (&[usize], &[usize]) {
        (&self.groups[0], &self.groups[1])
    }

    pub fn epoch_pairs(&self) -> usize {
        self.epoch_pairs
    }

    /// Number of pairs emitted so far.
    pub fn position(&self) -> u64 {
        self.emitted
    }

    fn reshuffle(&mut self, g: usize) {
        let mut order = self.groups[g].clone();
        order.shuffle(&mut self.rng);
        self.order[g] = order;
        self.cursor[g] = 0;
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        if self.emitted_in_epoch == 0 {
            self.reshuffle(0);
            self.reshuffle(1);
        }
        let mut pick = [0usize; 2];
        for (g, slot) in pick.iter_mut().enumerate() {
            if self.cursor[g] >= self.order[g].len() {
                self.reshuffle(g);
            }
            *slot = self.order[g][self.cursor[g]];
            self.cursor[g] += 1;
        }
        self.emitted_in_epoch += 1;
        if self.emitted_in_epoch == self.epoch_pairs {
            self.emitted_in_epoch = 0;
        }
        self.emitted += 1;
        (pick[0], pick[1])
    }

    /// Advances the stream by `n` pairs.
    pub fn advance(&mut self, n: u64) {
        for _ in 0..n {
            self.next_pair();
        }
    }

    /// The pairs of the next epoch.
    pub fn epoch(&mut self) -> Vec<(usize, usize)> {
        (0..self.epoch_pairs).map(|_| self.next_pair()).collect()
    }
}

impl Iterator for PairStream {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_pair())
    }
}
