//! Finite-difference gradient checking for parameter stores.

use super::params::{ParamKind, ParamStore};
use super::tensor::{Scalar, Tensor2D};
use crate::error::{Error, Result};

/// Central differences of `loss` with respect to every trainable tensor of
/// the store returned by `store`. Buffers are skipped. Each entry is
/// perturbed in place and restored.
pub fn numeric_gradients<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    h: f64,
) -> Result<Vec<(String, Tensor2D<f64>)>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let targets: Vec<(usize, String, (usize, usize))> = store(model)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(i, p)| (i, p.name.clone(), p.value.shape()))
        .collect();
    let mut out = Vec::with_capacity(targets.len());
    for (idx, name, (rows, cols)) in targets {
        let mut grad = Tensor2D::zeros(rows, cols);
        for j in 0..rows * cols {
            let orig = entry(store(model), idx, j);
            set_entry(store(model), idx, j, orig + h);
            let up = loss(model)?;
            set_entry(store(model), idx, j, orig - h);
            let down = loss(model)?;
            set_entry(store(model), idx, j, orig);
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push((name, grad));
    }
    Ok(out)
}

fn entry(store: &mut ParamStore<f64>, idx: usize, j: usize) -> f64 {
    store.iter_mut().nth(idx).expect("index from enumeration").value.data()[j]
}

fn set_entry(store: &mut ParamStore<f64>, idx: usize, j: usize, v: f64) {
    store.iter_mut().nth(idx).expect("index from enumeration").value.data_mut()[j] = v;
}

/// Normwise comparison of one tensor's analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖₂`.
    pub abs_err: f64,
    /// `abs_err / max(‖analytic‖, ‖numeric‖)`, or 0 when both vanish.
    pub rel_err: f64,
}

impl GradCheck {
    /// Passes on relative error, or on absolute error below `abs_floor` for
    /// tensors whose true gradient is (structurally) zero, such as linear
    /// biases feeding a training-mode batch norm.
    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.rel_err < rel_tol || self.abs_err < abs_floor
    }
}

/// Pairs the accumulated gradients of `analytic` with `numeric` by name.
pub fn compare<T: Scalar>(analytic: &ParamStore<T>, numeric: &[(String, Tensor2D<f64>)]) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(numeric.len());
    for (name, num) in numeric {
        let id = analytic
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let a = analytic.grad(id);
        if a.shape() != num.shape() {
            return Err(Error::shape("compare", format!("{name}: {:?} vs {:?}", a.shape(), num.shape())));
        }
        let (mut da, mut dn, mut diff) = (0.0, 0.0, 0.0);
        for (x, &y) in a.data().iter().zip(num.data()) {
            let x = x.as_f64();
            da += x * x;
            dn += y * y;
            diff += (x - y) * (x - y);
        }
        let (an, nn, abs_err) = (da.sqrt(), dn.sqrt(), diff.sqrt());
        let denom = an.max(nn);
        out.push(GradCheck {
            name: name.clone(),
            analytic_norm: an,
            numeric_norm: nn,
            abs_err,
            rel_err: if denom > 0.0 { abs_err / denom } else { 0.0 },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor2D::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        store.add("running", ParamKind::Buffer, Tensor2D::zeros(1, 1));
        // f(w) = Σ w², ∇f = 2w.
        let loss = |s: &mut ParamStore<f64>| Ok(s.value(w).data().iter().map(|x| x * x).sum());
        let num = numeric_gradients(&mut store, |s| s, loss, 1e-5).unwrap();
        assert_eq!(num.len(), 1);
        let expect = [2.0, -4.0, 1.0];
        for (g, e) in num[0].1.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-8);
        }
        store.accumulate(w, &Tensor2D::from_vec(1, 3, expect.to_vec()).unwrap()).unwrap();
        let checks = compare(&store, &num).unwrap();
        assert!(checks[0].rel_err < 1e-8 && checks[0].passes(1e-6, 0.0));
    }
}
