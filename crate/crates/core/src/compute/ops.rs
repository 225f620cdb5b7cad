//! Forward and backward rules for the closed set of operations the encoder
//! uses. Each backward takes the upstream gradient of the op's output and
//! returns gradients for its inputs (and parameters, where it has any).

use super::tensor::{dot, Scalar, Tensor2D};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: in × out`, `b: 1 × out`.
pub fn linear<T: Scalar>(x: &Tensor2D<T>, w: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    let mut y = x.matmul(w)?;
    let bias = b.row(0);
    for r in 0..y.rows() {
        for (v, &bv) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bv;
        }
    }
    Ok(y)
}

pub struct LinearGrads<T: Scalar> {
    pub x: Tensor2D<T>,
    pub w: Tensor2D<T>,
    pub b: Tensor2D<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    grad_y: &Tensor2D<T>,
) -> Result<LinearGrads<T>> {
    let gx = grad_y.matmul_t(w)?;
    let gw = x.t_matmul(grad_y)?;
    let gb = Tensor2D::from_vec(1, grad_y.cols(), grad_y.column_sums())?;
    Ok(LinearGrads { x: gx, w: gw, b: gb })
}

pub fn relu<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `grad_y` through where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor2D<T>, grad_y: &Tensor2D<T>) -> Tensor2D<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor2D::from_vec(x.rows(), x.cols(), data).expect("shape preserved")
}

/// Saved activations of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub x_hat: Tensor2D<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch norm over rows. Updates the running statistics in
/// place (momentum 0.1, unbiased variance) and returns the normalized output.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor2D<T>,
    gamma: &Tensor2D<T>,
    beta: &Tensor2D<T>,
    running_mean: &mut Tensor2D<T>,
    running_var: &mut Tensor2D<T>,
) -> Result<(Tensor2D<T>, BatchNormCache<T>)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_bn_params(x, gamma, beta)?;
    let c = x.cols();
    let nf = T::from_f64(n as f64);
    let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / nf).collect();
    let mut var = vec![T::zero(); c];
    for r in 0..n {
        for ((v, &xv), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *v += (xv - m) * (xv - m);
        }
    }
    var.iter_mut().for_each(|v| *v = *v / nf);
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

    let mut x_hat = Tensor2D::zeros(n, c);
    let mut y = Tensor2D::zeros(n, c);
    for r in 0..n {
        for j in 0..c {
            let xh = (x.get(r, j) - mean[j]) * inv_std[j];
            x_hat.set(r, j, xh);
            y.set(r, j, gamma.get(0, j) * xh + beta.get(0, j));
        }
    }

    let mom = T::from_f64(BN_MOMENTUM);
    let unbias = nf / T::from_f64((n - 1) as f64);
    for j in 0..c {
        let rm = running_mean.get(0, j);
        running_mean.set(0, j, (T::one() - mom) * rm + mom * mean[j]);
        let rv = running_var.get(0, j);
        running_var.set(0, j, (T::one() - mom) * rv + mom * var[j] * unbias);
    }
    Ok((y, BatchNormCache { x_hat, inv_std }))
}

/// Eval-mode batch norm: a fixed affine map given the running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor2D<T>,
    gamma: &Tensor2D<T>,
    beta: &Tensor2D<T>,
    running_mean: &Tensor2D<T>,
    running_var: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    check_bn_params(x, gamma, beta)?;
    let eps = T::from_f64(BN_EPS);
    let scale: Vec<T> = (0..x.cols())
        .map(|j| gamma.get(0, j) / (running_var.get(0, j) + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..x.cols())
        .map(|j| beta.get(0, j) - running_mean.get(0, j) * scale[j])
        .collect();
    let mut y = x.clone();
    for r in 0..y.rows() {
        for ((v, &s), &b) in y.row_mut(r).iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + b;
        }
    }
    Ok(y)
}

fn check_bn_params<T: Scalar>(x: &Tensor2D<T>, gamma: &Tensor2D<T>, beta: &Tensor2D<T>) -> Result<()> {
    if gamma.shape() != (1, x.cols()) || beta.shape() != (1, x.cols()) {
        return Err(Error::shape(
            "batch_norm",
            format!("input {:?} with gamma {:?}", x.shape(), gamma.shape()),
        ));
    }
    Ok(())
}

pub struct BatchNormGrads<T: Scalar> {
    pub x: Tensor2D<T>,
    pub gamma: Tensor2D<T>,
    pub beta: Tensor2D<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor2D<T>,
    grad_y: &Tensor2D<T>,
) -> BatchNormGrads<T> {
    let (n, c) = grad_y.shape();
    let nf = T::from_f64(n as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for r in 0..n {
        for j in 0..c {
            let g = grad_y.get(r, j);
            g_beta[j] += g;
            g_gamma[j] += g * cache.x_hat.get(r, j);
        }
    }
    // dx = γ/σ · (g - mean(g) - x̂ · mean(g x̂))
    let mut gx = Tensor2D::zeros(n, c);
    for r in 0..n {
        for j in 0..c {
            let g = grad_y.get(r, j);
            let v = gamma.get(0, j)
                * cache.inv_std[j]
                * (g - g_beta[j] / nf - cache.x_hat.get(r, j) * g_gamma[j] / nf);
            gx.set(r, j, v);
        }
    }
    BatchNormGrads {
        x: gx,
        gamma: Tensor2D::from_vec(1, c, g_gamma).expect("shape"),
        beta: Tensor2D::from_vec(1, c, g_beta).expect("shape"),
    }
}

pub fn softmax_rowwise<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    y
}

/// Backward of row-wise softmax given its output `y`.
pub fn softmax_rowwise_backward<T: Scalar>(y: &Tensor2D<T>, grad_y: &Tensor2D<T>) -> Tensor2D<T> {
    let mut gx = Tensor2D::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = grad_y.row(r);
        let inner = dot(yr, gr);
        for ((o, &yv), &g) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (g - inner);
        }
    }
    gx
}

/// Row-wise L2 normalization. Returns the output and the row norms; all-zero
/// rows stay zero.
pub fn l2_normalize_rowwise<T: Scalar>(x: &Tensor2D<T>) -> (Tensor2D<T>, Vec<T>) {
    let norms = x.row_norms();
    let mut y = x.clone();
    for (r, &n) in norms.iter().enumerate() {
        if n > T::zero() {
            let inv = n.recip();
            y.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
    }
    (y, norms)
}

/// `g/‖x‖ - x (xᵀg)/‖x‖³` per row; zero for zero rows.
pub fn l2_normalize_rowwise_backward<T: Scalar>(
    x: &Tensor2D<T>,
    norms: &[T],
    grad_y: &Tensor2D<T>,
) -> Tensor2D<T> {
    let mut gx = Tensor2D::zeros(x.rows(), x.cols());
    for (r, &n) in norms.iter().enumerate() {
        if n <= T::zero() {
            continue;
        }
        let xr = x.row(r);
        let gr = grad_y.row(r);
        let xg = dot(xr, gr);
        let inv = n.recip();
        let inv3 = inv * inv * inv;
        for ((o, &xv), &g) in gx.row_mut(r).iter_mut().zip(xr).zip(gr) {
            *o = g * inv - xv * xg * inv3;
        }
    }
    gx
}

pub fn concat_columns<T: Scalar>(parts: &[Tensor2D<T>]) -> Result<Tensor2D<T>> {
    let rows = parts.first().map_or(0, Tensor2D::rows);
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::shape("concat_columns", "row counts differ"));
    }
    let cols: usize = parts.iter().map(Tensor2D::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor2D::from_vec(rows, cols, data)
}

/// Splits a concatenated gradient back into per-part gradients.
pub fn concat_columns_backward<T: Scalar>(widths: &[usize], grad_y: &Tensor2D<T>) -> Vec<Tensor2D<T>> {
    let mut out: Vec<Tensor2D<T>> = widths
        .iter()
        .map(|&w| Tensor2D::zeros(grad_y.rows(), w))
        .collect();
    for r in 0..grad_y.rows() {
        let mut offset = 0;
        let row = grad_y.row(r);
        for (part, &w) in out.iter_mut().zip(widths) {
            part.row_mut(r).copy_from_slice(&row[offset..offset + w]);
            offset += w;
        }
    }
    out
}

/// `y_r = Σ_m weights[r, m] · parts[m]_r`.
pub fn weighted_sum<T: Scalar>(parts: &[Tensor2D<T>], weights: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("weighted_sum", "no parts"))?;
    if weights.cols() != parts.len()
        || weights.rows() != first.rows()
        || parts.iter().any(|p| p.shape() != first.shape())
    {
        return Err(Error::shape("weighted_sum", "inconsistent shapes"));
    }
    let mut y = Tensor2D::zeros(first.rows(), first.cols());
    for r in 0..y.rows() {
        for (m, p) in parts.iter().enumerate() {
            let a = weights.get(r, m);
            for (o, &v) in y.row_mut(r).iter_mut().zip(p.row(r)) {
                *o += a * v;
            }
        }
    }
    Ok(y)
}

/// Returns (per-part gradients, weight gradient).
pub fn weighted_sum_backward<T: Scalar>(
    parts: &[Tensor2D<T>],
    weights: &Tensor2D<T>,
    grad_y: &Tensor2D<T>,
) -> (Vec<Tensor2D<T>>, Tensor2D<T>) {
    let mut g_parts = Vec::with_capacity(parts.len());
    let mut g_w = Tensor2D::zeros(weights.rows(), weights.cols());
    for (m, p) in parts.iter().enumerate() {
        let mut gp = Tensor2D::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let a = weights.get(r, m);
            let g = grad_y.row(r);
            for (o, &gv) in gp.row_mut(r).iter_mut().zip(g) {
                *o = a * gv;
            }
            g_w.set(r, m, dot(p.row(r), g));
        }
        g_parts.push(gp);
    }
    (g_parts, g_w)
}

/// Gradients of `a · b`: returns (grad_a, grad_b).
pub fn matmul_backward<T: Scalar>(
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
    grad_y: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    Ok((grad_y.matmul_t(b)?, a.t_matmul(grad_y)?))
}

/// Cached pieces of [`cosine_similarity_matrix`].
pub struct CosineCache<T: Scalar> {
    pub a_hat: Tensor2D<T>,
    pub a_norms: Vec<T>,
    pub b_hat: Tensor2D<T>,
    pub b_norms: Vec<T>,
}

/// `S[i, j] = cos(a_i, b_j)`.
pub fn cosine_similarity_matrix<T: Scalar>(
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, CosineCache<T>)> {
    let (a_hat, a_norms) = l2_normalize_rowwise(a);
    let (b_hat, b_norms) = l2_normalize_rowwise(b);
    let s = a_hat.matmul_t(&b_hat)?;
    Ok((
        s,
        CosineCache {
            a_hat,
            a_norms,
            b_hat,
            b_norms,
        },
    ))
}

pub fn cosine_similarity_matrix_backward<T: Scalar>(
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
    cache: &CosineCache<T>,
    grad_s: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    let g_a_hat = grad_s.matmul(&cache.b_hat)?;
    let g_b_hat = grad_s.t_matmul(&cache.a_hat)?;
    Ok((
        l2_normalize_rowwise_backward(a, &cache.a_norms, &g_a_hat),
        l2_normalize_rowwise_backward(b, &cache.b_norms, &g_b_hat),
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D<f64> {
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f(x) = Σ w ⊙ op(x)` against the analytic
    /// backward with upstream gradient `w`.
    fn check_grad(
        x: &Tensor2D<f64>,
        w: &Tensor2D<f64>,
        op: impl Fn(&Tensor2D<f64>) -> Tensor2D<f64>,
        analytic: &Tensor2D<f64>,
    ) {
        let h = 1e-6;
        let f = |t: &Tensor2D<f64>| -> f64 { dot(op(t).data(), w.data()) };
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "entry {i}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor2D::<f32>::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let (y, norms) = l2_normalize_rowwise(&x);
        assert_eq!(y.data(), &[0.6, 0.8]);
        assert_eq!(norms, vec![5.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let x = Tensor2D::<f32>::from_vec(1, 4, vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let g = Tensor2D::<f32>::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn batch_norm_needs_two_rows() {
        let x = Tensor2D::<f32>::zeros(1, 3);
        let g = Tensor2D::filled(1, 3, 1.0);
        let b = Tensor2D::zeros(1, 3);
        let mut rm = Tensor2D::zeros(1, 3);
        let mut rv = Tensor2D::filled(1, 3, 1.0);
        assert!(matches!(
            batch_norm_train(&x, &g, &b, &mut rm, &mut rv),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = random(1, 3, &mut rng);
        let beta = random(1, 3, &mut rng);
        let rm = random(1, 3, &mut rng);
        let rv = Tensor2D::from_vec(1, 3, vec![0.5, 1.5, 2.0]).unwrap();
        let x = random(4, 3, &mut rng);
        let y1 = batch_norm_eval(&x, &gamma, &beta, &rm, &rv).unwrap();
        let y2 = batch_norm_eval(&x, &gamma, &beta, &rm, &rv).unwrap();
        assert_eq!(y1, y2);
        // f(2x) - f(x) = f(x) - f(0)
        let x2 = x.map(|v| 2.0 * v);
        let zero = Tensor2D::zeros(4, 3);
        let f2 = batch_norm_eval(&x2, &gamma, &beta, &rm, &rv).unwrap();
        let f0 = batch_norm_eval(&zero, &gamma, &beta, &rm, &rv).unwrap();
        for i in 0..12 {
            let lhs = f2.data()[i] - y1.data()[i];
            let rhs = y1.data()[i] - f0.data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rules_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = rng.random_range(2..7);
            let c = rng.random_range(1..6);
            let x = random(n, c, &mut rng);
            let w = random(n, c, &mut rng);

            let g = relu_backward(&x, &w);
            check_grad(&x, &w, |t| relu(t), &g);

            let y = softmax_rowwise(&x);
            check_grad(&x, &w, |t| softmax_rowwise(t), &softmax_rowwise_backward(&y, &w));

            let (_, norms) = l2_normalize_rowwise(&x);
            check_grad(
                &x,
                &w,
                |t| l2_normalize_rowwise(t).0,
                &l2_normalize_rowwise_backward(&x, &norms, &w),
            );

            let gamma = random(1, c, &mut rng);
            let beta = random(1, c, &mut rng);
            let bn = |t: &Tensor2D<f64>| {
                let mut rm = Tensor2D::zeros(1, c);
                let mut rv = Tensor2D::filled(1, c, 1.0);
                batch_norm_train(t, &gamma, &beta, &mut rm, &mut rv).unwrap().0
            };
            let mut rm = Tensor2D::zeros(1, c);
            let mut rv = Tensor2D::filled(1, c, 1.0);
            let (_, cache) = batch_norm_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
            let grads = batch_norm_backward(&cache, &gamma, &w);
            check_grad(&x, &w, bn, &grads.x);

            let k = rng.random_range(1..5);
            let wt = random(c, k, &mut rng);
            let b = random(1, k, &mut rng);
            let up = random(n, k, &mut rng);
            let lg = linear_backward(&x, &wt, &up).unwrap();
            check_grad(&x, &up, |t| linear(t, &wt, &b).unwrap(), &lg.x);
            check_grad(&wt, &up, |t| linear(&x, t, &b).unwrap(), &lg.w);
            check_grad(&b, &up, |t| linear(&x, &wt, t).unwrap(), &lg.b);

            let other = random(k, c, &mut rng);
            let up = random(n, k, &mut rng);
            let (_, cc) = cosine_similarity_matrix(&x, &other).unwrap();
            let (ga, gb) = cosine_similarity_matrix_backward(&x, &other, &cc, &up).unwrap();
            check_grad(&x, &up, |t| cosine_similarity_matrix(t, &other).unwrap().0, &ga);
            check_grad(&other, &up, |t| cosine_similarity_matrix(&x, t).unwrap().0, &gb);

            let rhs = random(c, k, &mut rng);
            let (ga, gb) = matmul_backward(&x, &rhs, &up).unwrap();
            check_grad(&x, &up, |t| t.matmul(&rhs).unwrap(), &ga);
            check_grad(&rhs, &up, |t| x.matmul(t).unwrap(), &gb);

            let parts = vec![random(n, c, &mut rng), random(n, c, &mut rng)];
            let weights = random(n, 2, &mut rng);
            let (gp, gw) = weighted_sum_backward(&parts, &weights, &w);
            check_grad(&weights, &w, |t| weighted_sum(&parts, t).unwrap(), &gw);
            check_grad(
                &parts[1],
                &w,
                |t| weighted_sum(&[parts[0].clone(), t.clone()], &weights).unwrap(),
                &gp[1],
            );

            let cat = concat_columns(&parts).unwrap();
            let back = concat_columns_backward(&[c, c], &cat);
            assert_eq!(back, parts);
        }
    }
}
