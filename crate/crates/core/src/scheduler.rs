//! Seeded image stream that turns decisions into batch plans.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collage::CollageK;
use crate::controller::{Decision, Mode};
use crate::dataset::ImageId;
use crate::error::SchedulerError;

/// Image ids for one iteration: `batch_size` groups of one id (regular) or
/// `k` distinct ids (collage).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub iter: u64,
    pub mode: Mode,
    pub batch_size: usize,
    pub k: CollageK,
    pub groups: Vec<Vec<ImageId>>,
}

impl BatchPlan {
    pub fn image_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Endless stream over a fixed id pool, reshuffled after every full pass.
///
/// Each pass is a permutation of the pool. A group that straddles two passes
/// never repeats an id: the fresh permutation is adjusted by swapping so its
/// leading ids avoid the ones already in the group.
#[derive(Clone, Debug)]
pub struct Sampler {
    order: Vec<ImageId>,
    cursor: usize,
    epoch: u64,
    consumed: u64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(ids: Vec<ImageId>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = ids;
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            epoch: 0,
            consumed: 0,
            rng,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.order.len()
    }

    /// Completed reshuffles so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn next_batch(
        &mut self,
        decision: &Decision,
        batch_size: usize,
        k: CollageK,
    ) -> Result<BatchPlan, SchedulerError> {
        if batch_size == 0 {
            return Err(SchedulerError::ZeroBatch);
        }
        let needed = batch_size * k.get() as usize;
        if self.order.len() < needed {
            return Err(SchedulerError::DatasetTooSmall {
                available: self.order.len(),
                needed,
            });
        }
        let group_len = match decision.mode {
            Mode::Regular => 1,
            Mode::Collage => k.get() as usize,
        };
        let groups = (0..batch_size)
            .map(|_| self.take_group(group_len))
            .collect();
        Ok(BatchPlan {
            iter: decision.iter,
            mode: decision.mode,
            batch_size,
            k,
            groups,
        })
    }

    fn take_group(&mut self, len: usize) -> Vec<ImageId> {
        let mut group = Vec::with_capacity(len);
        while group.len() < len {
            if self.cursor == self.order.len() {
                self.reshuffle(&group, len - group.len());
            }
            group.push(self.order[self.cursor]);
            self.cursor += 1;
            self.consumed += 1;
        }
        group
    }

    fn reshuffle(&mut self, avoid: &[ImageId], prefix: usize) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
        self.epoch += 1;
        if avoid.is_empty() {
            return;
        }
        let avoid: HashSet<_> = avoid.iter().copied().collect();
        let mut spare = prefix;
        for i in 0..prefix {
            if !avoid.contains(&self.order[i]) {
                continue;
            }
            while avoid.contains(&self.order[spare]) {
                spare += 1;
            }
            self.order.swap(i, spare);
            spare += 1;
        }
    }
}
