//! Sampled entmax (SEM) objective with in-batch negatives.
//!
//! For pair `j = (u, i)` the user vector `U_j` is the normalized sum of the
//! encoded history items, the logits are `z_j = U_j · Y_Bᵀ` over the batch
//! items, and the loss is the Fenchel-Young loss of
//! `entmax(z_j / (τ₀ τ))` against the indicator of column `j`.

use crate::compute::{Scalar, Tensor2D};
use crate::encoder::Encoder;
use crate::entmax::{fy_loss_one_hot, Alpha};
use crate::error::{Error, Result};
use crate::eval::SparsityStats;

use super::batches::{BatchLayout, PositivePairBatch};
use super::config::TrainConfig;

pub struct SemOutput<T: Scalar> {
    /// Mean loss over pairs with a nonempty history, unweighted.
    pub loss: f64,
    /// Gradient of `weight · loss` with respect to the layout rows.
    pub grad_y: Tensor2D<T>,
    /// Gradient of `weight · loss` with respect to the cosine logits,
    /// `n_pairs × n_pairs`. Rows of skipped pairs are zero.
    pub grad_logits: Tensor2D<T>,
    /// Pairs without history items; they still serve as negatives.
    pub skipped: usize,
    pub sparsity: SparsityStats,
}

/// Loss and gradients given unit-norm embeddings `y` of `layout.items`.
pub fn sem_objective<T: Scalar>(
    y: &Tensor2D<T>,
    layout: &BatchLayout,
    alpha: Alpha,
    tau: f64,
    tau0: f64,
    weight: f64,
) -> Result<SemOutput<T>> {
    let n = layout.targets.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "sampled loss needs at least 2 pairs for in-batch negatives, got {n}"
        )));
    }
    if y.rows() != layout.items.len() {
        return Err(Error::shape(
            "sem_loss",
            format!("{} embedding rows for {} layout items", y.rows(), layout.items.len()),
        ));
    }
    for t in [tau, tau0] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidTemperature(t));
        }
    }
    let d = y.cols();
    let yb = y.gather_rows(&layout.targets);

    let mut users = Tensor2D::<T>::zeros(n, d);
    let mut norms = vec![T::zero(); n];
    for (j, hist) in layout.histories.iter().enumerate() {
        let row = users.row_mut(j);
        for &h in hist {
            for (o, &v) in row.iter_mut().zip(y.row(h)) {
                *o += v;
            }
        }
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        norms[j] = norm;
    }
    let active: Vec<bool> = norms.iter().map(|&v| v > T::zero()).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    let skipped = n - n_active;

    let z = users.matmul_t(&yb)?;
    let scale = 1.0 / (tau0 * tau);
    let mut grad_logits = Tensor2D::<T>::zeros(n, n);
    let mut sparsity = SparsityStats::default();
    let mut total = 0.0;
    let mut w = vec![0.0; n];
    let mut p = vec![0.0; n];
    let g_scale = if n_active > 0 { weight / n_active as f64 } else { 0.0 };
    for j in (0..n).filter(|&j| active[j]) {
        for (wk, zk) in w.iter_mut().zip(z.row(j)) {
            *wk = zk.as_f64() * scale;
        }
        total += fy_loss_one_hot(&w, j, alpha, &mut p);
        sparsity.observe(&p);
        p[j] -= 1.0;
        for (g, &pk) in grad_logits.row_mut(j).iter_mut().zip(&p) {
            // Exact zeros stay zero, which the products below skip.
            *g = T::from_f64(pk * scale * g_scale);
        }
    }
    let loss = if n_active > 0 { total / n_active as f64 } else { 0.0 };

    let g_items = grad_logits.t_matmul(&users)?;
    let g_users = grad_logits.matmul(&yb)?;
    let mut grad_y = Tensor2D::<T>::zeros(y.rows(), d);
    for (j, &t) in layout.targets.iter().enumerate() {
        for (o, &g) in grad_y.row_mut(t).iter_mut().zip(g_items.row(j)) {
            *o += g;
        }
    }
    let mut g_sum = vec![T::zero(); d];
    for j in (0..n).filter(|&j| active[j]) {
        let u = users.row(j);
        let gu = g_users.row(j);
        let proj = crate::compute::tensor::dot(u, gu);
        for c in 0..d {
            g_sum[c] = (gu[c] - u[c] * proj) / norms[j];
        }
        for &h in &layout.histories[j] {
            for (o, &g) in grad_y.row_mut(h).iter_mut().zip(&g_sum) {
                *o += g;
            }
        }
    }
    Ok(SemOutput {
        loss,
        grad_y,
        grad_logits,
        skipped,
        sparsity,
    })
}

/// Encodes the batch in training mode, evaluates the SEM loss, and
/// accumulates parameter gradients into the encoder. `inputs` are the
/// normalized per-mode features of all items.
pub fn sem_loss<T: Scalar>(
    batch: &PositivePairBatch,
    encoder: &mut Encoder<T>,
    inputs: &[Tensor2D<f32>],
    config: &TrainConfig,
) -> Result<SemOutput<T>> {
    let layout = BatchLayout::new(batch);
    let x: Vec<Tensor2D<T>> = inputs.iter().map(|m| m.gather_rows(&layout.items).cast()).collect();
    let (out, cache) = encoder.forward_train(&x)?;
    let obj = sem_objective(
        out.embeddings.as_tensor(),
        &layout,
        config.alpha,
        config.tau,
        config.tau0(),
        1.0,
    )?;
    encoder.backward(&cache, &obj.grad_y)?;
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::compute::ops::l2_normalize_rowwise;
    use crate::entmax::{fy_loss, LogitVector, ProbabilityVector};

    fn layout(n_items: usize, pairs: &[(usize, &[usize])]) -> BatchLayout {
        BatchLayout {
            items: (0..n_items).collect(),
            targets: pairs.iter().map(|p| p.0).collect(),
            histories: pairs.iter().map(|p| p.1.to_vec()).collect(),
            extra: vec![],
        }
    }

    fn unit(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        l2_normalize_rowwise(&Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))).0
    }

    #[test]
    fn identical_items_give_uniform_prediction() {
        let y = Tensor2D::from_fn(4, 3, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let l = layout(4, &[(0, &[1]), (1, &[2]), (2, &[3])]);
        for alpha in [Alpha::SOFTMAX, Alpha::ENTMAX15, Alpha::SPARSEMAX] {
            let out = sem_objective(&y, &l, alpha, 0.5, 0.5, 1.0).unwrap();
            let z = LogitVector::new(vec![1.0; 3]).unwrap();
            let expect = fy_loss(&z, &ProbabilityVector::one_hot(3, 0).unwrap(), alpha, 0.25).unwrap();
            assert!((out.loss - expect).abs() < 1e-12);
            assert_eq!(out.sparsity.fraction(), Some(1.0));
        }
    }

    #[test]
    fn skipped_pairs_are_counted() {
        let y = unit(3, 4, 1);
        let l = layout(3, &[(0, &[1]), (1, &[]), (2, &[0])]);
        let out = sem_objective(&y, &l, Alpha::SPARSEMAX, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(out.skipped, 1);
        assert!(out.grad_logits.row(1).iter().all(|&g| g == 0.0));
        assert!(sem_objective(&y, &layout(3, &[(0, &[1])]), Alpha::SOFTMAX, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let l = layout(6, &[(0, &[1, 2]), (3, &[4]), (5, &[0, 3]), (2, &[5])]);
        for alpha in [Alpha::SOFTMAX, Alpha::ENTMAX15, Alpha::new(1.3).unwrap(), Alpha::SPARSEMAX] {
            let y = unit(6, 5, 7);
            let out = sem_objective(&y, &l, alpha, 0.4, 0.4, 1.0).unwrap();
            let h = 1e-6;
            for idx in 0..y.data().len() {
                let mut a = y.clone();
                a.data_mut()[idx] += h;
                let mut b = y.clone();
                b.data_mut()[idx] -= h;
                // Perturbed rows are not unit norm; the objective only uses
                // them through dot products, matching the analytic gradient.
                let fa = sem_objective(&a, &l, alpha, 0.4, 0.4, 1.0).unwrap().loss;
                let fb = sem_objective(&b, &l, alpha, 0.4, 0.4, 1.0).unwrap().loss;
                let fd = (fa - fb) / (2.0 * h);
                assert!(
                    (fd - out.grad_y.data()[idx]).abs() < 1e-6,
                    "alpha {alpha:?} idx {idx}: fd {fd} vs {}",
                    out.grad_y.data()[idx]
                );
            }
        }
    }
}
