use rand::seq::SliceRandom;

use super::{MultimodalSample, PAD};
use crate::seed;

/// Samples with captions right-padded to the longest caption in the batch.
#[derive(Debug, Clone)]
pub struct Batch<'d> {
    pub samples: Vec<&'d MultimodalSample>,
    pub tokens: Vec<Vec<u32>>,
    /// `true` for real tokens, `false` for padding.
    pub text_mask: Vec<Vec<bool>>,
}

impl<'d> Batch<'d> {
    pub fn new(samples: Vec<&'d MultimodalSample>) -> Self {
        let max_len = samples.iter().map(|s| s.caption_token_ids.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(samples.len());
        let mut text_mask = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut t = s.caption_token_ids.clone();
            let mut m = vec![true; t.len()];
            t.resize(max_len, PAD);
            m.resize(max_len, false);
            tokens.push(t);
            text_mask.push(m);
        }
        Self {
            samples,
            tokens,
            text_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.sample_id.as_str())
    }
}

/// One epoch of batches in a seed-determined order; the last batch may be
/// short.
pub struct BatchIterator<'d> {
    order: Vec<&'d MultimodalSample>,
    batch_size: usize,
    pos: usize,
}

impl<'d> BatchIterator<'d> {
    pub fn new(samples: &[&'d MultimodalSample], batch_size: usize, shuffle_seed: u64, epoch: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut order = samples.to_vec();
        let mut rng = seed::stream(shuffle_seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut rng);
        Self {
            order,
            batch_size,
            pos: 0,
        }
    }

    /// Batches in the given order, without shuffling.
    pub fn sequential(samples: &[&'d MultimodalSample], batch_size: usize) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        Self {
            order: samples.to_vec(),
            batch_size,
            pos: 0,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<'d> Iterator for BatchIterator<'d> {
    type Item = Batch<'d>;

    fn next(&mut self) -> Option<Batch<'d>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::new(self.order[self.pos..end].to_vec());
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use std::collections::HashSet;

    #[test]
    fn epochs_partition_the_dataset() {
        let ds = generate_synthetic(
            2,
            &SyntheticConfig {
                num_samples: 37,
                ..Default::default()
            },
        )
        .unwrap();
        let all: Vec<_> = ds.samples.iter().collect();
        let it = BatchIterator::new(&all, 8, 11, 0);
        assert_eq!(it.num_batches(), 5);
        let batches: Vec<_> = it.collect();
        assert_eq!(batches.last().unwrap().len(), 5);
        let ids: Vec<&str> = batches.iter().flat_map(|b| b.sample_ids()).collect();
        let unique: HashSet<_> = ids.iter().collect();
        assert_eq!(ids.len(), 37);
        assert_eq!(unique.len(), 37);

        let again: Vec<String> = BatchIterator::new(&all, 8, 11, 0)
            .flat_map(|b| b.sample_ids().map(String::from).collect::<Vec<_>>())
            .collect();
        assert_eq!(again, ids.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let other: Vec<String> = BatchIterator::new(&all, 8, 11, 1)
            .flat_map(|b| b.sample_ids().map(String::from).collect::<Vec<_>>())
            .collect();
        assert_ne!(other, again);

        assert_eq!(BatchIterator::new(&all, 100, 0, 0).count(), 1);
    }

    #[test]
    fn padding_and_masks() {
        let ds = generate_synthetic(
            4,
            &SyntheticConfig {
                num_samples: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let refs: Vec<_> = ds.samples.iter().collect();
        let b = Batch::new(refs);
        let max = b.samples.iter().map(|s| s.caption_token_ids.len()).max().unwrap();
        for (i, s) in b.samples.iter().enumerate() {
            let n = s.caption_token_ids.len();
            assert_eq!(b.tokens[i].len(), max);
            assert_eq!(&b.tokens[i][..n], s.caption_token_ids.as_slice());
            assert!(b.tokens[i][n..].iter().all(|&t| t == PAD));
            assert_eq!(b.text_mask[i].iter().filter(|&&m| m).count(), n);
        }
    }
}
