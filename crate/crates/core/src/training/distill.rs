//! Distillation over item-item similarities.
//!
//! For each item `c` of the distillation set, the student's cosine
//! similarities to the other items are trained towards the teacher's
//! similarity distribution `entmax(z_T / ω₀)` with the Fenchel-Young loss at
//! temperature `ω` applied to `z_S / ω₀`.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

use crate::compute::{Scalar, Tensor2D};
use crate::entmax::{entmax_into, fy_loss_scaled, Alpha};
use crate::error::{Error, Result};
use crate::eval::SparsityStats;
use crate::model::InteractionMatrix;

use super::batches::PositivePairBatch;

/// Distillation item set `𝒞`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistillBatch {
    /// Distinct items in first-appearance order.
    pub items: Vec<usize>,
    /// Sampled users whose positives make up `items`.
    pub users: Vec<usize>,
    /// For each item, the sampled users it was drawn for.
    pub provenance: Vec<Vec<usize>>,
}

/// Samples up to `users_per_batch` users of `batch` that have at least
/// `positives_per_user` training items, then that many distinct positives
/// for each.
pub fn build_distill_batch<R: Rng>(
    batch: &PositivePairBatch,
    train: &InteractionMatrix,
    users_per_batch: usize,
    positives_per_user: usize,
    rng: &mut R,
) -> Result<DistillBatch> {
    if positives_per_user < 2 {
        return Err(Error::InvalidArgument(format!(
            "positives_per_user must be at least 2, got {positives_per_user}"
        )));
    }
    let eligible: Vec<usize> = batch
        .users()
        .into_iter()
        .filter(|&u| train.items_of(u).len() >= positives_per_user)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Training(format!(
            "no batch user has {positives_per_user} training positives"
        )));
    }
    let n_users = users_per_batch.min(eligible.len());
    let users: Vec<usize> = index::sample(rng, eligible.len(), n_users)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    let mut items = Vec::new();
    let mut provenance: Vec<Vec<usize>> = Vec::new();
    let mut pos: HashMap<usize, usize> = HashMap::new();
    for &u in &users {
        let hist = train.items_of(u);
        for k in index::sample(rng, hist.len(), positives_per_user) {
            let i = hist[k] as usize;
            let p = *pos.entry(i).or_insert_with(|| {
                items.push(i);
                provenance.push(Vec::new());
                items.len() - 1
            });
            provenance[p].push(u);
        }
    }
    Ok(DistillBatch {
        items,
        users,
        provenance,
    })
}

pub struct DistillOutput<T: Scalar> {
    /// Mean loss over the set, unweighted.
    pub loss: f64,
    /// Gradient of `weight · loss` with respect to the student rows.
    pub grad_student: Tensor2D<T>,
    pub target_sparsity: SparsityStats,
    pub student_sparsity: SparsityStats,
}

/// Student and teacher rows must be unit norm and aligned. No gradient is
/// produced for the teacher.
pub fn distill_objective<T: Scalar>(
    student: &Tensor2D<T>,
    teacher: &Tensor2D<T>,
    alpha: Alpha,
    omega: f64,
    omega0: f64,
    weight: f64,
) -> Result<DistillOutput<T>> {
    let n = student.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "distillation needs at least 2 items, got {n}"
        )));
    }
    if teacher.rows() != n {
        return Err(Error::LengthMismatch(n, teacher.rows()));
    }
    for t in [omega, omega0] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidTemperature(t));
        }
    }
    let zs = student.matmul_t(student)?;
    let zt = teacher.matmul_t(teacher)?;
    let scale_s = 1.0 / (omega0 * omega);
    let g_scale = weight / n as f64;
    let m = n - 1;
    let (mut w, mut wt, mut target, mut p) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut g = Tensor2D::<T>::zeros(n, n);
    let mut target_sparsity = SparsityStats::default();
    let mut student_sparsity = SparsityStats::default();
    let mut total = 0.0;
    for c in 0..n {
        let others = (0..n).filter(|&k| k != c);
        for (slot, k) in others.enumerate() {
            w[slot] = zs.get(c, k).as_f64() * scale_s;
            wt[slot] = zt.get(c, k).as_f64() / omega0;
        }
        entmax_into(&wt, alpha, &mut target);
        total += fy_loss_scaled(&w, &target, alpha, &mut p);
        target_sparsity.observe(&target);
        student_sparsity.observe(&p);
        let row = g.row_mut(c);
        for (slot, k) in (0..n).filter(|&k| k != c).enumerate() {
            row[k] = T::from_f64((p[slot] - target[slot]) * scale_s * g_scale);
        }
    }
    // z_S = S Sᵀ, so dS = (G + Gᵀ) S.
    let sym = Tensor2D::from_fn(n, n, |a, b| g.get(a, b) + g.get(b, a));
    let grad_student = sym.matmul(student)?;
    Ok(DistillOutput {
        loss: total / n as f64,
        grad_student,
        target_sparsity,
        student_sparsity,
    })
}

/// `distill + λ · sem`.
pub fn total_loss(distill: f64, sem: f64, lambda: f64) -> f64 {
    distill + lambda * sem
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::compute::ops::l2_normalize_rowwise;
    use crate::training::batches::PositivePair;

    fn unit(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        l2_normalize_rowwise(&Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))).0
    }

    fn batch(users: &[usize]) -> PositivePairBatch {
        PositivePairBatch {
            pairs: users
                .iter()
                .map(|&user| PositivePair { user, item: 0, history: vec![] })
                .collect(),
        }
    }

    #[test]
    fn disjoint_and_overlapping_histories() {
        let (r, _) = InteractionMatrix::from_pairs(2, 6, [(0, 0), (0, 1), (1, 2), (1, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = build_distill_batch(&batch(&[0, 1]), &r, 2, 2, &mut rng).unwrap();
        assert_eq!(c.items.len(), 4);

        let (r, _) = InteractionMatrix::from_pairs(2, 6, [(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap();
        let c = build_distill_batch(&batch(&[0, 1]), &r, 2, 2, &mut rng).unwrap();
        assert_eq!(c.items.len(), 3);
        let shared = c.items.iter().position(|&i| i == 1).unwrap();
        assert_eq!(c.provenance[shared].len(), 2);
    }

    #[test]
    fn seeded_and_checked() {
        let (r, _) = InteractionMatrix::from_pairs(3, 9, (0..3).flat_map(|u| (0..5).map(move |i| (u, u + i)))).unwrap();
        let b = batch(&[0, 1, 2]);
        let a = build_distill_batch(&b, &r, 2, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = build_distill_batch(&b, &r, 2, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, c);
        assert!(build_distill_batch(&b, &r, 2, 6, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
        assert!(build_distill_batch(&b, &r, 2, 1, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn student_equal_to_teacher_has_zero_loss() {
        let t = unit(7, 5, 2);
        for alpha in [Alpha::SOFTMAX, Alpha::ENTMAX15, Alpha::SPARSEMAX] {
            let out = distill_objective(&t, &t, alpha, 1.0, 1.0, 1.0).unwrap();
            assert!(out.loss.abs() < 1e-9, "{alpha:?}: {}", out.loss);
            assert!(out.grad_student.data().iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn sparsemax_targets_are_sparse() {
        let t = unit(10, 6, 3);
        let s = unit(10, 4, 4);
        let out = distill_objective(&s, &t, Alpha::SPARSEMAX, 0.5, 0.5, 1.0).unwrap();
        assert!(out.target_sparsity.fraction().unwrap() < 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = unit(5, 4, 5);
        let s = unit(5, 3, 6);
        for alpha in [Alpha::SOFTMAX, Alpha::ENTMAX15, Alpha::SPARSEMAX] {
            let out = distill_objective(&s, &t, alpha, 0.7, 0.7, 1.0).unwrap();
            let h = 1e-6;
            for idx in 0..s.data().len() {
                let mut a = s.clone();
                a.data_mut()[idx] += h;
                let mut b = s.clone();
                b.data_mut()[idx] -= h;
                let fa = distill_objective(&a, &t, alpha, 0.7, 0.7, 1.0).unwrap().loss;
                let fb = distill_objective(&b, &t, alpha, 0.7, 0.7, 1.0).unwrap().loss;
                let fd = (fa - fb) / (2.0 * h);
                assert!((fd - out.grad_student.data()[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(0.3, 0.7, 0.0), 0.3);
        assert_eq!(total_loss(0.0, 0.7, 1.0), 0.7);
        let a = total_loss(0.3, 0.7, 2.0) - total_loss(0.3, 0.7, 1.0);
        let b = total_loss(0.3, 0.7, 3.0) - total_loss(0.3, 0.7, 2.0);
        assert!((a - b).abs() < 1e-15);
    }
}
