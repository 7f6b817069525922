use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::tensor::Tensor;

/// A minibatch copied out of a dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [c, h, w] = self.data.image_shape();
        let per = c * h * w;
        let src = self.data.images.data();
        let mut buf = Vec::with_capacity(indices.len() * per);
        for &i in &indices {
            buf.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Some(Batch {
            images: Tensor::from_vec(&[indices.len(), c, h, w], buf).expect("batch extents"),
            labels: indices.iter().map(|&i| self.data.labels[i]).collect(),
            indices,
        })
    }
}

/// The permutation used for `epoch`: a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Iterates over `d` in batches of `batch_size` (the last may be short).
/// A zero batch size is treated as one.
pub fn batches(d: &Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Batches<'_> {
    Batches {
        data: d,
        order: epoch_order(d.len(), shuffle, seed, epoch),
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_order() {
        assert_eq!(epoch_order(50, true, 3, 1), epoch_order(50, true, 3, 1));
        assert_ne!(epoch_order(50, true, 3, 1), epoch_order(50, true, 3, 2));
        assert_eq!(epoch_order(5, false, 3, 1), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn permutation_covers_everything() {
        let mut o = epoch_order(97, true, 11, 0);
        o.sort_unstable();
        assert_eq!(o, (0..97).collect::<Vec<_>>());
    }
}
