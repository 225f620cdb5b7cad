use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor2D};
use crate::error::{Error, Result};

/// Role of a stored tensor. Only `Weight` tensors receive weight decay;
/// `Buffer` tensors (batch-norm running statistics) are never optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
    m: Tensor2D<T>,
    v: Tensor2D<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Named parameters with gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor2D<T>) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D<T> {
        &self.params[id.0].grad
    }

    /// Adds `g` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2D<T>) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces a tensor by name, checking its shape.
    pub fn assign(&mut self, name: &str, value: Tensor2D<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Copy of the store in another precision. Moments and gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.kind, p.value.cast());
        }
        out.step = self.step;
        out
    }

    /// One bias-corrected Adam update. L2 regularization is added to the
    /// gradient of `Weight` tensors before the moment update.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(cfg.eps);
        for p in &mut self.params {
            if p.kind == ParamKind::Buffer {
                continue;
            }
            let wd = if p.kind == ParamKind::Weight {
                T::from_f64(cfg.weight_decay)
            } else {
                T::zero()
            };
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let ms = p.m.data_mut();
            let vs = p.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i] + wd * values[i];
                ms[i] = b1 * ms[i] + one_b1 * g;
                vs[i] = b2 * vs[i] + one_b2 * g * g;
                let denom = vs[i].sqrt() * inv_bc2_sqrt + eps;
                values[i] -= step_size * ms[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", ParamKind::Weight, Tensor2D::filled(1, 1, v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.7);
        s.adam_step(0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).get(0, 0), 0.7);
    }

    #[test]
    fn first_step_hand_computed() {
        let (mut s, id) = scalar_store(1.0);
        s.accumulate(id, &Tensor2D::filled(1, 1, 1.0)).unwrap();
        s.adam_step(0.1, &AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1, so p = 1 - 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(id).get(0, 0) - expected).abs() < 1e-12);
        assert!((s.value(id).get(0, 0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only_on_weights() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", ParamKind::Weight, Tensor2D::filled(1, 1, 1.0));
        let b = s.add("b", ParamKind::Bias, Tensor2D::filled(1, 1, 1.0));
        let buf = s.add("rm", ParamKind::Buffer, Tensor2D::filled(1, 1, 1.0));
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        s.adam_step(0.1, &cfg).unwrap();
        assert!(s.value(w).get(0, 0) < 1.0);
        assert_eq!(s.value(b).get(0, 0), 1.0);
        assert_eq!(s.value(buf).get(0, 0), 1.0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (mut s, _) = scalar_store(1.0);
        assert!(s.adam_step(0.0, &AdamConfig::default()).is_err());
        assert!(s.adam_step(-1.0, &AdamConfig::default()).is_err());
    }

    #[test]
    fn identical_updates_are_deterministic() {
        let mk = || {
            let mut s = ParamStore::<f32>::new();
            let id = s.add("w", ParamKind::Weight, Tensor2D::from_fn(3, 2, |r, c| (r * 2 + c) as f32 * 0.1));
            (s, id)
        };
        let (mut a, ia) = mk();
        let (mut b, ib) = mk();
        for k in 0..5 {
            let g = Tensor2D::from_fn(3, 2, |r, c| ((r + c + k) as f32).sin());
            a.accumulate(ia, &g).unwrap();
            b.accumulate(ib, &g).unwrap();
            a.adam_step(0.01, &AdamConfig::default()).unwrap();
            b.adam_step(0.01, &AdamConfig::default()).unwrap();
            a.zero_grad();
            b.zero_grad();
        }
        assert_eq!(a.value(ia), b.value(ib));
        assert_eq!(a.step(), 5);
    }
}
