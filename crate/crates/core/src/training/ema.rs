use crate::compute::Tensor2D;
use crate::error::{Error, Result};

/// Per-item exponential moving average of teacher output rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaBuffer {
    rows: Tensor2D<f32>,
    seen: Vec<bool>,
    decay: f64,
}

impl EmaBuffer {
    pub fn new(n_items: usize, dim: usize, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("decay must be in [0, 1], got {decay}")));
        }
        Ok(EmaBuffer {
            rows: Tensor2D::zeros(n_items, dim),
            seen: vec![false; n_items],
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn is_initialized(&self, item: usize) -> bool {
        self.seen[item]
    }

    pub fn rows(&self, items: &[usize]) -> Tensor2D<f32> {
        self.rows.gather_rows(items)
    }

    pub fn as_tensor(&self) -> &Tensor2D<f32> {
        &self.rows
    }

    /// `buf ← β buf + (1 − β) t`, then renormalize. The first update of an
    /// item copies `t`.
    pub fn update(&mut self, items: &[usize], teacher: &Tensor2D<f32>) -> Result<()> {
        if teacher.rows() != items.len() || teacher.cols() != self.rows.cols() {
            return Err(Error::shape(
                "ema_update",
                format!(
                    "{:?} teacher rows for {} items of width {}",
                    teacher.shape(),
                    items.len(),
                    self.rows.cols()
                ),
            ));
        }
        let b = self.decay as f32;
        for (r, &i) in items.iter().enumerate() {
            let t = teacher.row(r);
            let row = self.rows.row_mut(i);
            if !self.seen[i] {
                row.copy_from_slice(t);
                self.seen[i] = true;
                continue;
            }
            if b == 1.0 {
                continue;
            }
            for (o, &v) in row.iter_mut().zip(t) {
                *o = b * *o + (1.0 - b) * v;
            }
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`EmaBuffer::update`].
pub fn ema_update(buffer: &mut EmaBuffer, items: &[usize], teacher: &Tensor2D<f32>) -> Result<()> {
    buffer.update(items, teacher)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> Tensor2D<f32> {
        Tensor2D::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn decay_one_keeps_buffer() {
        let mut b = EmaBuffer::new(2, 2, 1.0).unwrap();
        b.update(&[0], &row(&[1.0, 0.0])).unwrap();
        b.update(&[0], &row(&[0.0, 1.0])).unwrap();
        assert_eq!(b.rows(&[0]).data(), &[1.0, 0.0]);
        assert!(!b.is_initialized(1));
    }

    #[test]
    fn decay_zero_replaces() {
        let mut b = EmaBuffer::new(2, 2, 0.0).unwrap();
        b.update(&[1], &row(&[1.0, 0.0])).unwrap();
        b.update(&[1], &row(&[0.0, 1.0])).unwrap();
        assert_eq!(b.rows(&[1]).data(), &[0.0, 1.0]);
        assert_eq!(b.rows(&[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_teacher_is_a_fixed_point() {
        let t = row(&[0.6, 0.8]);
        let mut b = EmaBuffer::new(1, 2, 0.99).unwrap();
        for _ in 0..3 {
            b.update(&[0], &t).unwrap();
        }
        for (a, e) in b.rows(&[0]).data().iter().zip(t.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn blends_and_renormalizes() {
        let mut b = EmaBuffer::new(1, 2, 0.5).unwrap();
        b.update(&[0], &row(&[1.0, 0.0])).unwrap();
        b.update(&[0], &row(&[0.0, 1.0])).unwrap();
        let r = b.rows(&[0]);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((r.get(0, 0) - s).abs() < 1e-6 && (r.get(0, 1) - s).abs() < 1e-6);
        assert!(EmaBuffer::new(1, 1, 1.5).is_err());
    }
}
