use rand::Rng;

use super::ops;
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::{Scalar, Tensor2D};
use super::Mode;
use crate::error::Result;

/// Affine layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform fan-in (He) initialization for the weight, zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = Tensor2D::from_fn(in_dim, out_dim, |_, _| {
            T::from_f64(rng.random_range(-bound..bound))
        });
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let b = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor2D::zeros(1, out_dim));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        ops::linear(x, store.value(self.w), store.value(self.b))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor2D<T>,
        grad_y: &Tensor2D<T>,
    ) -> Result<Tensor2D<T>> {
        let g = ops::linear_backward(x, store.value(self.w), grad_y)?;
        store.accumulate(self.w, &g.w)?;
        store.accumulate(self.b, &g.b)?;
        Ok(g.x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor2D::filled(1, dim, T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor2D::zeros(1, dim)),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor2D::zeros(1, dim),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor2D::filled(1, dim, T::one()),
            ),
        }
    }

    pub fn forward_train<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor2D<T>,
    ) -> Result<(Tensor2D<T>, ops::BatchNormCache<T>)> {
        let mut rm = store.value(self.running_mean).clone();
        let mut rv = store.value(self.running_var).clone();
        let out = ops::batch_norm_train(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            &mut rm,
            &mut rv,
        )?;
        *store.value_mut(self.running_mean) = rm;
        *store.value_mut(self.running_var) = rv;
        Ok(out)
    }

    pub fn forward_eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        ops::batch_norm_eval(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            store.value(self.running_mean),
            store.value(self.running_var),
        )
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor2D<T>,
        mode: Mode,
    ) -> Result<(Tensor2D<T>, Option<ops::BatchNormCache<T>>)> {
        match mode {
            Mode::Train => self.forward_train(store, x).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.forward_eval(store, x).map(|y| (y, None)),
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ops::BatchNormCache<T>,
        grad_y: &Tensor2D<T>,
    ) -> Result<Tensor2D<T>> {
        let g = ops::batch_norm_backward(cache, store.value(self.gamma), grad_y);
        store.accumulate(self.gamma, &g.gamma)?;
        store.accumulate(self.beta, &g.beta)?;
        Ok(g.x)
    }
}
