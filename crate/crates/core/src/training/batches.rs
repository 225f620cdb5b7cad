use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::InteractionMatrix;

/// A positive `(user, item)` pair with the user's sampled history. The
/// history never contains `item`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositivePair {
    pub user: usize,
    pub item: usize,
    pub history: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositivePairBatch {
    pub pairs: Vec<PositivePair>,
}

impl PositivePairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct users in order of first appearance.
    pub fn users(&self) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        self.pairs
            .iter()
            .map(|p| p.user)
            .filter(|u| seen.insert(*u))
            .collect()
    }
}

/// Shuffles all positive pairs and chunks them. A trailing batch with fewer
/// than two pairs is dropped. Each pair gets up to `history_cap` of the
/// user's other items, sampled without replacement.
pub fn make_batches<R: Rng>(
    r: &InteractionMatrix,
    batch_size: usize,
    history_cap: usize,
    rng: &mut R,
) -> Result<Vec<PositivePairBatch>> {
    if r.nnz() == 0 {
        return Err(Error::EmptyInput);
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut pairs: Vec<(usize, usize)> = r.pairs().collect();
    pairs.shuffle(rng);
    let mut batches = Vec::with_capacity(pairs.len().div_ceil(batch_size));
    for chunk in pairs.chunks(batch_size) {
        if chunk.len() < 2 {
            break;
        }
        let pairs = chunk
            .iter()
            .map(|&(user, item)| PositivePair {
                user,
                item,
                history: sample_history(r.items_of(user), item, history_cap, rng),
            })
            .collect();
        batches.push(PositivePairBatch { pairs });
    }
    Ok(batches)
}

fn sample_history<R: Rng>(items: &[u32], target: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    let others: Vec<usize> = items
        .iter()
        .map(|&i| i as usize)
        .filter(|&i| i != target)
        .collect();
    if others.len() <= cap {
        return others;
    }
    let mut picked: Vec<usize> = index::sample(rng, others.len(), cap)
        .into_iter()
        .map(|k| others[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Row bookkeeping for a step that encodes each distinct item once.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    /// Distinct items to encode, in first-appearance order.
    pub items: Vec<usize>,
    /// Row of each pair's target item.
    pub targets: Vec<usize>,
    /// Rows of each pair's history items.
    pub histories: Vec<Vec<usize>>,
    /// Rows of the extra items passed to [`BatchLayout::with_extra`].
    pub extra: Vec<usize>,
}

impl BatchLayout {
    pub fn new(batch: &PositivePairBatch) -> Self {
        Self::with_extra(batch, &[])
    }

    /// Also reserves rows for `extra` items, e.g. a distillation set.
    pub fn with_extra(batch: &PositivePairBatch, extra: &[usize]) -> Self {
        let mut items = Vec::new();
        let mut rows = HashMap::new();
        let mut row_of = |i: usize| -> usize {
            *rows.entry(i).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            })
        };
        let targets = batch.pairs.iter().map(|p| row_of(p.item)).collect();
        let histories = batch
            .pairs
            .iter()
            .map(|p| p.history.iter().map(|&h| row_of(h)).collect())
            .collect();
        let extra = extra.iter().map(|&i| row_of(i)).collect();
        BatchLayout {
            items,
            targets,
            histories,
            extra,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn matrix() -> InteractionMatrix {
        let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 3), (2, 0), (2, 4), (3, 2), (3, 3), (3, 4)];
        InteractionMatrix::from_pairs(4, 5, pairs).unwrap().0
    }

    #[test]
    fn sizes_4_4_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&matrix(), 4, 50, &mut rng).unwrap();
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn short_tail_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&matrix(), 3, 50, &mut rng).unwrap();
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
    }

    #[test]
    fn history_excludes_target_and_is_capped() {
        let r = matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for batch in make_batches(&r, 4, 1, &mut rng).unwrap() {
            for p in &batch.pairs {
                assert!(r.contains(p.user, p.item));
                assert!(!p.history.contains(&p.item));
                assert!(p.history.len() <= 1);
                assert!(p.history.iter().all(|&h| r.contains(p.user, h)));
            }
        }
    }

    #[test]
    fn seeded() {
        let r = matrix();
        let a = make_batches(&r, 4, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_batches(&r, 4, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(make_batches(&InteractionMatrix::empty(2, 2), 4, 2, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn layout_dedupes_rows() {
        let batch = PositivePairBatch {
            pairs: vec![
                PositivePair { user: 0, item: 5, history: vec![1, 2] },
                PositivePair { user: 1, item: 1, history: vec![5] },
            ],
        };
        let l = BatchLayout::with_extra(&batch, &[2, 9]);
        assert_eq!(l.items, vec![5, 1, 2, 9]);
        assert_eq!(l.targets, vec![0, 1]);
        assert_eq!(l.histories, vec![vec![1, 2], vec![0]]);
        assert_eq!(l.extra, vec![2, 3]);
    }
}
