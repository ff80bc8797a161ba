use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Variant};
use crate::error::{Error, Result};

/// How many inner steps each outer step takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerIterations {
    /// Traversal factor K: every large-batch sample is visited exactly K
    /// times, giving `M = K·|x^LB| / |x^SB|` inner steps.
    Traversals(usize),
    /// Explicit inner step count M.
    Count(usize),
}

const EPOCH_STREAM: u64 = 1;
const INNER_STREAM: u64 = 2;

/// Deterministic outer and inner sampling schedule for one attack run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub dataset_size: usize,
    pub large_batch: usize,
    pub small_batch: usize,
    pub inner: InnerIterations,
}

fn stream_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 56) ^ (a << 28) ^ b);
    rng
}

impl BatchPlan {
    pub fn new(
        dataset_size: usize,
        large_batch: usize,
        small_batch: usize,
        inner: InnerIterations,
        seed: u64,
    ) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::Data("cannot plan batches over an empty dataset".into()));
        }
        if large_batch == 0 || small_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if small_batch > large_batch {
            return Err(Error::Config(format!(
                "small batch {small_batch} exceeds large batch {large_batch}"
            )));
        }
        if !large_batch.is_multiple_of(small_batch) {
            return Err(Error::Config(format!(
                "small batch {small_batch} must divide large batch {large_batch}"
            )));
        }
        match inner {
            InnerIterations::Traversals(0) | InnerIterations::Count(0) => {
                return Err(Error::Config("inner iterations must be at least 1".into()))
            }
            _ => {}
        }
        Ok(Self {
            seed,
            dataset_size,
            large_batch,
            small_batch,
            inner,
        })
    }

    /// Number of large batches per epoch (the last may be partial).
    pub fn batches_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.large_batch)
    }

    /// Small-batch size used inside a large batch of `batch_len` samples:
    /// a partial large batch shorter than `|x^SB|` is its own small batch.
    pub fn effective_small_batch(&self, batch_len: usize) -> usize {
        self.small_batch.min(batch_len).max(1)
    }

    /// Inner step count for a large batch holding `batch_len` samples.
    pub fn inner_steps(&self, batch_len: usize) -> usize {
        match self.inner {
            InnerIterations::Traversals(k) => (k * batch_len).div_ceil(self.effective_small_batch(batch_len)),
            InnerIterations::Count(m) => m,
        }
    }

    /// Epoch-level shuffle cut into consecutive large batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.dataset_size).collect();
        order.shuffle(&mut stream_rng(self.seed, EPOCH_STREAM, epoch as u64, 0));
        order.chunks(self.large_batch).map(<[usize]>::to_vec).collect()
    }

    /// Inner small batches for one outer step: independent shuffles of the
    /// large batch, concatenated and sliced into `small_batch` chunks.
    pub fn inner_batches(&self, epoch: usize, outer: usize, batch: &[usize]) -> Vec<Vec<usize>> {
        let small = self.effective_small_batch(batch.len());
        let needed = self.inner_steps(batch.len()) * small;
        let mut rng = stream_rng(self.seed, INNER_STREAM, epoch as u64, outer as u64);
        let mut pool = Vec::with_capacity(needed + batch.len());
        while pool.len() < needed {
            let mut round = batch.to_vec();
            round.shuffle(&mut rng);
            pool.extend(round);
        }
        // a partial final chunk keeps each sample at exactly K visits
        pool.truncate(match self.inner {
            InnerIterations::Traversals(k) => k * batch.len(),
            InnerIterations::Count(_) => needed,
        });
        pool.chunks(small).map(<[usize]>::to_vec).collect()
    }
}

/// Plan for a dataset of `dataset_size` samples under `config`. SPGD has
/// no inner loop, so its plan ignores the small-batch settings.
pub fn plan_batches(dataset_size: usize, config: &AttackConfig) -> Result<BatchPlan> {
    let (small, inner) = match config.variant {
        Variant::Spgd => (config.large_batch, InnerIterations::Count(1)),
        _ => (config.small_batch, config.inner),
    };
    BatchPlan::new(dataset_size, config.large_batch, small, inner, config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_setting_gives_hundred_inner_steps() {
        let plan = BatchPlan::new(500, 250, 10, InnerIterations::Traversals(4), 0).unwrap();
        let b = &plan.epoch_batches(0)[0];
        assert_eq!(plan.inner_steps(250), 100);
        assert_eq!(plan.inner_batches(0, 0, b).len(), 100);
    }

    #[test]
    fn reduction_case_has_one_step() {
        let plan = BatchPlan::new(500, 250, 250, InnerIterations::Traversals(1), 0).unwrap();
        assert_eq!(plan.inner_steps(250), 1);
    }

    #[test]
    fn each_sample_visited_k_times() {
        for (n, lb, sb, k) in [(500, 250, 10, 4), (37, 12, 4, 3), (10, 10, 5, 1)] {
            let plan = BatchPlan::new(n, lb, sb, InnerIterations::Traversals(k), 9).unwrap();
            let mut outer_seen = vec![0; n];
            for (o, b) in plan.epoch_batches(2).iter().enumerate() {
                let mut seen = vec![0; n];
                for chunk in plan.inner_batches(2, o, b) {
                    assert!(chunk.len() <= sb);
                    for i in chunk {
                        seen[i] += 1;
                    }
                }
                for &i in b {
                    assert_eq!(seen[i], k);
                    outer_seen[i] += 1;
                }
                assert_eq!(seen.iter().sum::<usize>(), k * b.len());
            }
            assert!(outer_seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn partial_batch_rounds_steps_up() {
        let plan = BatchPlan::new(30, 12, 4, InnerIterations::Traversals(3), 0).unwrap();
        let batches = plan.epoch_batches(0);
        assert_eq!(batches.last().unwrap().len(), 6);
        assert_eq!(plan.inner_steps(6), 5); // ceil(3·6/4)
        let chunks = plan.inner_batches(0, 2, &batches[2]);
        assert_eq!(chunks.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 4, 4, 2]);
    }

    #[test]
    fn batch_shorter_than_small_batch_is_used_whole() {
        let plan = BatchPlan::new(26, 12, 4, InnerIterations::Traversals(3), 0).unwrap();
        let last = plan.epoch_batches(0).pop().unwrap();
        assert_eq!(last.len(), 2);
        assert_eq!(plan.inner_steps(2), 3);
        let plan = BatchPlan::new(7, 5, 5, InnerIterations::Count(1), 0).unwrap();
        let last = plan.epoch_batches(0).pop().unwrap();
        let mut chunk = plan.inner_batches(0, 1, &last).pop().unwrap();
        chunk.sort_unstable();
        let mut whole = last.clone();
        whole.sort_unstable();
        assert_eq!(chunk, whole);
    }

    #[test]
    fn explicit_count() {
        let plan = BatchPlan::new(40, 20, 5, InnerIterations::Count(7), 1).unwrap();
        let b = &plan.epoch_batches(0)[0];
        let inner = plan.inner_batches(0, 0, b);
        assert_eq!(inner.len(), 7);
        assert!(inner.iter().all(|c| c.len() == 5));
    }

    #[test]
    fn invalid_plans() {
        assert!(matches!(
            BatchPlan::new(10, 10, 3, InnerIterations::Traversals(1), 0),
            Err(Error::Config(_))
        ));
        assert!(BatchPlan::new(10, 5, 10, InnerIterations::Traversals(1), 0).is_err());
        assert!(BatchPlan::new(10, 5, 5, InnerIterations::Count(0), 0).is_err());
        assert!(matches!(
            BatchPlan::new(0, 5, 5, InnerIterations::Count(1), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn deterministic() {
        let p = BatchPlan::new(100, 20, 5, InnerIterations::Traversals(2), 3).unwrap();
        assert_eq!(p.epoch_batches(1), p.epoch_batches(1));
        assert_ne!(p.epoch_batches(1), p.epoch_batches(2));
        let b = &p.epoch_batches(1)[0];
        assert_eq!(p.inner_batches(1, 0, b), p.inner_batches(1, 0, b));
    }
}
