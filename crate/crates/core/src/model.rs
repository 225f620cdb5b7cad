//! Preference scoring through item-item similarity of encoded content.
//!
//! Scores are `R (Y Yᵀ) = (R Y) Yᵀ`: a user's embedding is the (normalized)
//! sum of the encoded content of the items they interacted with, and any
//! item, including one never seen in training, is scored by a dot product
//! with it.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::compute::ops;
use crate::compute::{Scalar, Tensor2D};
use crate::encoder::ItemEmbeddingMatrix;
use crate::error::{Error, Result};

/// Sparse binary user × item matrix stored as sorted item lists per user.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InteractionMatrix {
    n_items: usize,
    rows: Vec<Vec<u32>>,
}

impl InteractionMatrix {
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        InteractionMatrix {
            n_items,
            rows: vec![Vec::new(); n_users],
        }
    }

    /// Builds the matrix from `(user, item)` pairs. Duplicate pairs collapse;
    /// the number collapsed is returned alongside.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, usize)> {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n_users];
        for (u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({u}, {i}) outside {n_users}x{n_items}"
                )));
            }
            rows[u].push(i as u32);
        }
        let mut dupes = 0;
        for r in &mut rows {
            r.sort_unstable();
            let before = r.len();
            r.dedup();
            dupes += before - r.len();
        }
        Ok((InteractionMatrix { n_items, rows }, dupes))
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn items_of(&self, user: usize) -> &[u32] {
        &self.rows[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.rows[user].binary_search(&(item as u32)).is_ok()
    }

    /// All pairs in user-major, item-ascending order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i as usize)))
    }

    /// Number of interactions per item.
    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for r in &self.rows {
            for &i in r {
                deg[i as usize] += 1;
            }
        }
        deg
    }
}

/// One row per user; rows of users without interactions are zero and flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbeddingMatrix {
    embeddings: Tensor2D<f32>,
    empty: Vec<bool>,
}

impl UserEmbeddingMatrix {
    pub fn as_tensor(&self) -> &Tensor2D<f32> {
        &self.embeddings
    }

    pub fn is_empty_user(&self, user: usize) -> bool {
        self.empty[user]
    }

    pub fn n_users(&self) -> usize {
        self.empty.len()
    }
}

/// Unnormalized `R Y`: the sum of item rows per user.
pub fn user_history_sums<T: Scalar>(r: &InteractionMatrix, y: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if r.n_items() != y.rows() {
        return Err(Error::shape(
            "build_user_embeddings",
            format!("{} interaction columns vs {} item rows", r.n_items(), y.rows()),
        ));
    }
    let mut out = Tensor2D::zeros(r.n_users(), y.cols());
    for u in 0..r.n_users() {
        let row = out.row_mut(u);
        for &i in r.items_of(u) {
            for (o, &v) in row.iter_mut().zip(y.row(i as usize)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Row `u` is the L2-normalized sum of `y_i` over the items `u` interacted
/// with.
pub fn build_user_embeddings(
    r: &InteractionMatrix,
    y: &ItemEmbeddingMatrix<f32>,
) -> Result<UserEmbeddingMatrix> {
    let sums = user_history_sums(r, y.as_tensor())?;
    let (embeddings, _) = ops::l2_normalize_rowwise(&sums);
    let empty = (0..r.n_users()).map(|u| r.items_of(u).is_empty()).collect();
    Ok(UserEmbeddingMatrix { embeddings, empty })
}

/// `score[u][i] = ⟨U_u, y_i⟩`, a cosine similarity in `[-1, 1]`.
pub fn score_items(users: &UserEmbeddingMatrix, items: &ItemEmbeddingMatrix<f32>) -> Result<Tensor2D<f32>> {
    if users.as_tensor().cols() != items.dim() {
        return Err(Error::shape(
            "score_items",
            format!("user dim {} vs item dim {}", users.as_tensor().cols(), items.dim()),
        ));
    }
    let mut s = users.as_tensor().matmul_t(items.as_tensor())?;
    // Rounding can push |cos| a hair past 1.
    s.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(s)
}

/// Highest-scoring `k` items, descending, ties broken by ascending index.
pub fn top_k(scores: &[f32], k: usize, exclude: &HashSet<usize>) -> Result<Vec<(usize, f32)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut cand: Vec<(usize, f32)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .collect();
    let order = |a: &(usize, f32), b: &(usize, f32)| -> Ordering {
        b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
    };
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    Ok(cand)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> ItemEmbeddingMatrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0));
        ItemEmbeddingMatrix::from_unnormalized(&t).unwrap()
    }

    #[test]
    fn pairs_dedupe_and_validate() {
        let (r, d) = InteractionMatrix::from_pairs(2, 3, [(0, 2), (0, 1), (0, 2), (1, 0)]).unwrap();
        assert_eq!(d, 1);
        assert_eq!(r.items_of(0), &[1, 2]);
        assert_eq!(r.nnz(), 3);
        assert!(r.contains(1, 0));
        assert!(InteractionMatrix::from_pairs(2, 3, [(2, 0)]).is_err());
    }

    #[test]
    fn single_interaction_user_equals_item() {
        let y = unit_rows(4, 5, 1);
        let (r, _) = InteractionMatrix::from_pairs(2, 4, [(0, 3)]).unwrap();
        let u = build_user_embeddings(&r, &y).unwrap();
        for (a, b) in u.as_tensor().row(0).iter().zip(y.as_tensor().row(3)) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(!u.is_empty_user(0));
        assert!(u.is_empty_user(1));
        assert!(u.as_tensor().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorized_scores_are_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = unit_rows(6, 3, 2);
        let pairs: Vec<(usize, usize)> = (0..5)
            .flat_map(|u| (0..6).map(move |i| (u, i)))
            .filter(|_| rng.random_bool(0.4))
            .collect();
        let (r, _) = InteractionMatrix::from_pairs(5, 6, pairs).unwrap();
        let ry_yt = user_history_sums(&r, y.as_tensor())
            .unwrap()
            .matmul_t(y.as_tensor())
            .unwrap();
        let b = y.as_tensor().matmul_t(y.as_tensor()).unwrap();
        let r_dense = Tensor2D::from_fn(5, 6, |u, i| if r.contains(u, i) { 1.0 } else { 0.0 });
        let r_b = r_dense.matmul(&b).unwrap();
        for (a, b) in ry_yt.data().iter().zip(r_b.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn scores_are_cosines() {
        let y = unit_rows(3, 4, 5);
        let (r, _) = InteractionMatrix::from_pairs(1, 3, [(0, 1)]).unwrap();
        let u = build_user_embeddings(&r, &y).unwrap();
        let s = score_items(&u, &y).unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-6);

        let e = ItemEmbeddingMatrix::new(Tensor2D::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let (r, _) = InteractionMatrix::from_pairs(1, 2, [(0, 0)]).unwrap();
        let s = score_items(&build_user_embeddings(&r, &e).unwrap(), &e).unwrap();
        assert_eq!(s.get(0, 1), 0.0);

        let y = unit_rows(50, 8, 6);
        let (r, _) = InteractionMatrix::from_pairs(3, 50, [(0, 1), (0, 7), (1, 3), (2, 9), (2, 10)]).unwrap();
        let s = score_items(&build_user_embeddings(&r, &y).unwrap(), &y).unwrap();
        assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let other = unit_rows(3, 5, 7);
        assert!(score_items(&build_user_embeddings(&r, &y).unwrap(), &other).is_err());
    }

    #[test]
    fn top_k_examples() {
        let none = HashSet::new();
        let ids = |v: Vec<(usize, f32)>| v.into_iter().map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(ids(top_k(&[0.1, 0.9, 0.5], 2, &none).unwrap()), vec![1, 2]);
        assert_eq!(ids(top_k(&[0.5, 0.5], 1, &none).unwrap()), vec![0]);
        let ex: HashSet<usize> = [1].into_iter().collect();
        assert_eq!(ids(top_k(&[0.1, 0.9, 0.5], 1, &ex).unwrap()), vec![2]);
        assert!(top_k(&[0.1], 0, &none).is_err());
        assert_eq!(ids(top_k(&[0.3, 0.3, 0.3, 0.9], 10, &none).unwrap()), vec![3, 0, 1, 2]);
    }
}
