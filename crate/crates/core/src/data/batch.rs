use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset};
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

/// Iterator over mini-batches of a dataset.
///
/// Train mode visits samples in a permutation keyed by `(seed, epoch)` and
/// drops the final partial batch. Infer mode walks the dataset in stored
/// order and keeps the tail.
#[derive(Debug)]
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    end: usize,
}

pub fn batches(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: Mode,
) -> Result<BatchIter<'_>, DataError> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let end = match mode {
        Mode::Train => {
            if batch_size < 2 {
                return Err(DataError::BatchSize(batch_size));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
            n - n % batch_size
        }
        Mode::Infer => {
            if batch_size == 0 {
                return Err(DataError::BatchSize(0));
            }
            n
        }
    };
    Ok(BatchIter {
        data,
        order,
        batch_size,
        pos: 0,
        end,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.end {
            return None;
        }
        let stop = (self.pos + self.batch_size).min(self.end);
        let rows = &self.order[self.pos..stop];
        self.pos = stop;
        Some(Batch {
            images: self.data.images.select_rows(rows),
            labels: rows.iter().map(|&r| self.data.labels[r]).collect(),
            sample_ids: rows.iter().map(|&r| self.data.sample_ids[r]).collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
