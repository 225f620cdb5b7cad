//! Multimodal content encoder and the teacher-to-student projection head.
//!
//! Per mode `m`: `h_m = ReLU(BN(x_m W_m + b_m))`. The hidden vectors are
//! concatenated and passed through a two-layer perceptron with a softmax over
//! modes, giving attention weights `a`. The fused vector `Σ_m a_m h_m` goes
//! through a final linear layer and is L2-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::ops::{self, BatchNormCache};
use crate::compute::{BatchNorm, Linear, Mode, ParamStore, Scalar, Tensor2D};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 192;
pub const DEFAULT_OUTPUT_DIM: usize = 64;
pub const DEFAULT_TEACHER_DIM: usize = 384;

const UNIT_NORM_TOL: f64 = 1e-5;
/// Rows encoded per chunk in eval mode.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(mode_dims: Vec<usize>) -> Self {
        EncoderConfig {
            mode_dims,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            output_dim: DEFAULT_OUTPUT_DIM,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_dims.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one mode".into()));
        }
        if self.mode_dims.contains(&0) || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn check_unit_rows<T: Scalar>(t: &Tensor2D<T>) -> Result<()> {
    for (r, n) in t.row_norms().into_iter().enumerate() {
        if (n.as_f64() - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidArgument(format!(
                "row {r} has norm {}, expected 1",
                n.as_f64()
            )));
        }
    }
    Ok(())
}

/// Encoded content: one unit-norm row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddingMatrix<T: Scalar = f32>(Tensor2D<T>);

impl<T: Scalar> ItemEmbeddingMatrix<T> {
    pub fn new(t: Tensor2D<T>) -> Result<Self> {
        check_unit_rows(&t)?;
        Ok(ItemEmbeddingMatrix(t))
    }

    /// Normalizes every row.
    pub fn from_unnormalized(t: &Tensor2D<T>) -> Result<Self> {
        let (y, norms) = ops::l2_normalize_rowwise(t);
        if let Some(r) = norms.iter().position(|n| *n <= T::zero()) {
            return Err(Error::InvalidArgument(format!("row {r} is all zeros")));
        }
        Ok(ItemEmbeddingMatrix(y))
    }

    pub fn as_tensor(&self) -> &Tensor2D<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor2D<T> {
        self.0
    }

    pub fn n_items(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn gather(&self, items: &[usize]) -> Self {
        ItemEmbeddingMatrix(self.0.gather_rows(items))
    }
}

/// Per-item distribution over modes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T: Scalar = f32>(Tensor2D<T>);

impl<T: Scalar> AttentionWeights<T> {
    pub fn as_tensor(&self) -> &Tensor2D<T> {
        &self.0
    }
}

pub struct EncoderOutput<T: Scalar> {
    pub embeddings: ItemEmbeddingMatrix<T>,
    pub attention: AttentionWeights<T>,
}

/// Activations saved by a training-mode forward pass.
pub struct EncoderCache<T: Scalar> {
    inputs: Vec<Tensor2D<T>>,
    bn: Vec<BatchNormCache<T>>,
    pre_relu: Vec<Tensor2D<T>>,
    fuse: FuseCache<T>,
}

struct FuseCache<T: Scalar> {
    hidden: Vec<Tensor2D<T>>,
    concat: Tensor2D<T>,
    att_pre: Tensor2D<T>,
    att_act: Tensor2D<T>,
    attention: Tensor2D<T>,
    fused: Tensor2D<T>,
    out_pre: Tensor2D<T>,
    out_norms: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar = f32> {
    config: EncoderConfig,
    store: ParamStore<T>,
    mode_layers: Vec<(Linear, BatchNorm)>,
    att_hidden: Linear,
    att_out: Linear,
    out: Linear,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let m = config.mode_dims.len();
        let mode_layers = config
            .mode_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let lin = Linear::new(&mut store, &format!("mode{i}.linear"), d, h, &mut rng);
                let bn = BatchNorm::new(&mut store, &format!("mode{i}.bn"), h);
                (lin, bn)
            })
            .collect();
        let att_hidden = Linear::new(&mut store, "attention.hidden", m * h, h, &mut rng);
        let att_out = Linear::new(&mut store, "attention.out", h, m, &mut rng);
        let out = Linear::new(&mut store, "output", h, config.output_dim, &mut rng);
        Ok(Encoder {
            config,
            store,
            mode_layers,
            att_hidden,
            att_out,
            out,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            store: self.store.cast(),
            mode_layers: self.mode_layers.clone(),
            att_hidden: self.att_hidden,
            att_out: self.att_out,
            out: self.out,
        }
    }

    fn check_inputs(&self, inputs: &[Tensor2D<T>]) -> Result<usize> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("no input modes".into()));
        }
        if inputs.len() != self.config.mode_dims.len() {
            return Err(Error::shape(
                "encode",
                format!("{} modes given, encoder has {}", inputs.len(), self.config.mode_dims.len()),
            ));
        }
        let rows = inputs[0].rows();
        for (i, (x, &d)) in inputs.iter().zip(&self.config.mode_dims).enumerate() {
            if x.rows() != rows {
                return Err(Error::shape(
                    "encode",
                    format!("mode {i} has {} rows, mode 0 has {rows}", x.rows()),
                ));
            }
            if x.cols() != d {
                return Err(Error::shape(
                    "encode",
                    format!("mode {i} has {} columns, expected {d}", x.cols()),
                ));
            }
        }
        Ok(rows)
    }

    /// Encodes per-mode feature rows. Training mode uses batch statistics
    /// and updates the running ones; eval mode is a pure function.
    pub fn encode(&mut self, inputs: &[Tensor2D<T>], mode: Mode) -> Result<EncoderOutput<T>> {
        match mode {
            Mode::Train => self.forward_train(inputs).map(|(o, _)| o),
            Mode::Eval => self.encode_eval(inputs),
        }
    }

    pub fn encode_eval(&self, inputs: &[Tensor2D<T>]) -> Result<EncoderOutput<T>> {
        let rows = self.check_inputs(inputs)?;
        if rows <= EVAL_CHUNK {
            return self.encode_eval_chunk(inputs);
        }
        let mut y = Vec::with_capacity(rows * self.config.output_dim);
        let mut a = Vec::with_capacity(rows * inputs.len());
        let mut start = 0;
        while start < rows {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(rows)).collect();
            let chunk: Vec<Tensor2D<T>> = inputs.iter().map(|x| x.gather_rows(&idx)).collect();
            let out = self.encode_eval_chunk(&chunk)?;
            y.extend_from_slice(out.embeddings.as_tensor().data());
            a.extend_from_slice(out.attention.as_tensor().data());
            start += EVAL_CHUNK;
        }
        Ok(EncoderOutput {
            embeddings: ItemEmbeddingMatrix(Tensor2D::from_vec(rows, self.config.output_dim, y)?),
            attention: AttentionWeights(Tensor2D::from_vec(rows, inputs.len(), a)?),
        })
    }

    fn encode_eval_chunk(&self, inputs: &[Tensor2D<T>]) -> Result<EncoderOutput<T>> {
        let mut hidden = Vec::with_capacity(inputs.len());
        for (x, (lin, bn)) in inputs.iter().zip(&self.mode_layers) {
            let z = lin.forward(&self.store, x)?;
            let z = bn.forward_eval(&self.store, &z)?;
            hidden.push(ops::relu(&z));
        }
        let (out, _) = self.fuse(hidden)?;
        Ok(out)
    }

    pub fn forward_train(&mut self, inputs: &[Tensor2D<T>]) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.check_inputs(inputs)?;
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut bn_caches = Vec::with_capacity(inputs.len());
        let mut pre_relu = Vec::with_capacity(inputs.len());
        for (x, (lin, bn)) in inputs.iter().zip(self.mode_layers.clone()) {
            let z = lin.forward(&self.store, x)?;
            let (z, cache) = bn.forward_train(&mut self.store, &z)?;
            hidden.push(ops::relu(&z));
            pre_relu.push(z);
            bn_caches.push(cache);
        }
        let (out, fuse) = self.fuse(hidden)?;
        Ok((
            out,
            EncoderCache {
                inputs: inputs.to_vec(),
                bn: bn_caches,
                pre_relu,
                fuse,
            },
        ))
    }

    fn fuse(&self, hidden: Vec<Tensor2D<T>>) -> Result<(EncoderOutput<T>, FuseCache<T>)> {
        let concat = ops::concat_columns(&hidden)?;
        let att_pre = self.att_hidden.forward(&self.store, &concat)?;
        let att_act = ops::relu(&att_pre);
        let att_logits = self.att_out.forward(&self.store, &att_act)?;
        let attention = ops::softmax_rowwise(&att_logits);
        let fused = ops::weighted_sum(&hidden, &attention)?;
        let out_pre = self.out.forward(&self.store, &fused)?;
        let (y, out_norms) = ops::l2_normalize_rowwise(&out_pre);
        Ok((
            EncoderOutput {
                embeddings: ItemEmbeddingMatrix(y),
                attention: AttentionWeights(attention.clone()),
            },
            FuseCache {
                hidden,
                concat,
                att_pre,
                att_act,
                attention,
                fused,
                out_pre,
                out_norms,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradient of the loss with
    /// respect to the normalized output rows.
    pub fn backward(&mut self, cache: &EncoderCache<T>, grad_y: &Tensor2D<T>) -> Result<()> {
        let f = &cache.fuse;
        let g_out_pre = ops::l2_normalize_rowwise_backward(&f.out_pre, &f.out_norms, grad_y);
        let g_fused = self.out.backward(&mut self.store, &f.fused, &g_out_pre)?;
        let (mut g_hidden, g_att) = ops::weighted_sum_backward(&f.hidden, &f.attention, &g_fused);
        let g_att_logits = ops::softmax_rowwise_backward(&f.attention, &g_att);
        let g_att_act = self.att_out.backward(&mut self.store, &f.att_act, &g_att_logits)?;
        let g_att_pre = ops::relu_backward(&f.att_pre, &g_att_act);
        let g_concat = self.att_hidden.backward(&mut self.store, &f.concat, &g_att_pre)?;
        let widths = vec![self.config.hidden_dim; self.mode_layers.len()];
        for (gh, extra) in g_hidden.iter_mut().zip(ops::concat_columns_backward(&widths, &g_concat)) {
            gh.add_assign(&extra)?;
        }
        for (i, (lin, bn)) in self.mode_layers.clone().into_iter().enumerate() {
            let g_bn_out = ops::relu_backward(&cache.pre_relu[i], &g_hidden[i]);
            let g_lin_out = bn.backward(&mut self.store, &cache.bn[i], &g_bn_out)?;
            // Input features are constants; only parameter gradients matter.
            let g = ops::linear_backward(&cache.inputs[i], self.store.value(lin.w), &g_lin_out)?;
            self.store.accumulate(lin.w, &g.w)?;
            self.store.accumulate(lin.b, &g.b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

/// Two-layer perceptron with hidden ReLU mapping teacher embeddings to the
/// student dimension, followed by row-wise L2 normalization.
#[derive(Clone, Debug)]
pub struct Projection<T: Scalar = f32> {
    config: ProjectionConfig,
    store: ParamStore<T>,
    hidden: Linear,
    out: Linear,
}

pub struct ProjectionCache<T: Scalar> {
    input: Tensor2D<T>,
    pre_relu: Tensor2D<T>,
    act: Tensor2D<T>,
    out_pre: Tensor2D<T>,
    norms: Vec<T>,
}

impl<T: Scalar> Projection<T> {
    pub fn new(config: ProjectionConfig) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.output_dim == 0 {
            return Err(Error::InvalidArgument("projection dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "projection.hidden", config.input_dim, config.hidden_dim, &mut rng);
        let out = Linear::new(&mut store, "projection.out", config.hidden_dim, config.output_dim, &mut rng);
        Ok(Projection {
            config,
            store,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> Projection<U> {
        Projection {
            config: self.config.clone(),
            store: self.store.cast(),
            hidden: self.hidden,
            out: self.out,
        }
    }

    /// Projects teacher rows `|I| × d_T` to unit-norm `|I| × d` rows.
    pub fn forward(&self, teacher: &Tensor2D<T>) -> Result<(ItemEmbeddingMatrix<T>, ProjectionCache<T>)> {
        if teacher.cols() != self.config.input_dim {
            return Err(Error::shape(
                "teacher_projection",
                format!("input has {} columns, expected {}", teacher.cols(), self.config.input_dim),
            ));
        }
        let pre_relu = self.hidden.forward(&self.store, teacher)?;
        let act = ops::relu(&pre_relu);
        let out_pre = self.out.forward(&self.store, &act)?;
        let (y, norms) = ops::l2_normalize_rowwise(&out_pre);
        Ok((
            ItemEmbeddingMatrix(y),
            ProjectionCache {
                input: teacher.clone(),
                pre_relu,
                act,
                out_pre,
                norms,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ProjectionCache<T>, grad_y: &Tensor2D<T>) -> Result<()> {
        let g_out_pre = ops::l2_normalize_rowwise_backward(&cache.out_pre, &cache.norms, grad_y);
        let g_act = self.out.backward(&mut self.store, &cache.act, &g_out_pre)?;
        let g_pre = ops::relu_backward(&cache.pre_relu, &g_act);
        let g = ops::linear_backward(&cache.input, self.store.value(self.hidden.w), &g_pre)?;
        self.store.accumulate(self.hidden.w, &g.w)?;
        self.store.accumulate(self.hidden.b, &g.b)?;
        Ok(())
    }
}

/// Teacher-to-student projection as a free function.
pub fn teacher_projection<T: Scalar>(
    projection: &Projection<T>,
    teacher: &Tensor2D<T>,
) -> Result<ItemEmbeddingMatrix<T>> {
    projection.forward(teacher).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random_inputs(dims: &[usize], rows: usize, seed: u64) -> Vec<Tensor2D<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dims.iter()
            .map(|&d| Tensor2D::from_fn(rows, d, |_, _| rng.random_range(-1.0f32..1.0)))
            .collect()
    }

    fn small_config(dims: Vec<usize>) -> EncoderConfig {
        EncoderConfig {
            mode_dims: dims,
            hidden_dim: 8,
            output_dim: 4,
            seed: 5,
        }
    }

    #[test]
    fn single_mode_attention_is_one() {
        let mut enc = Encoder::<f32>::new(small_config(vec![6])).unwrap();
        let x = random_inputs(&[6], 5, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let out = enc.encode(&x, mode).unwrap();
            assert!(out.attention.as_tensor().data().iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn outputs_are_unit_norm_and_attention_is_distribution() {
        let mut enc = Encoder::<f32>::new(small_config(vec![6, 3, 5])).unwrap();
        let x = random_inputs(&[6, 3, 5], 7, 2);
        for mode in [Mode::Train, Mode::Eval] {
            let out = enc.encode(&x, mode).unwrap();
            ItemEmbeddingMatrix::new(out.embeddings.as_tensor().clone()).unwrap();
            let a = out.attention.as_tensor();
            for r in 0..a.rows() {
                assert!(a.row(r).iter().all(|&v| v >= 0.0));
                assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_items_encode_identically() {
        let mut enc = Encoder::<f32>::new(small_config(vec![4, 4])).unwrap();
        let mut x = random_inputs(&[4, 4], 4, 3);
        for m in &mut x {
            let row = m.row(0).to_vec();
            m.row_mut(2).copy_from_slice(&row);
        }
        for mode in [Mode::Train, Mode::Eval] {
            let y = enc.encode(&x, mode).unwrap().embeddings;
            assert_eq!(y.as_tensor().row(0), y.as_tensor().row(2));
        }
    }

    #[test]
    fn eval_is_pure() {
        let enc = Encoder::<f32>::new(small_config(vec![4, 2])).unwrap();
        let x = random_inputs(&[4, 2], 3, 4);
        let a = enc.encode_eval(&x).unwrap().embeddings;
        let b = enc.encode_eval(&x).unwrap().embeddings;
        assert_eq!(a, b);
    }

    #[test]
    fn input_validation() {
        let mut enc = Encoder::<f32>::new(small_config(vec![4, 2])).unwrap();
        let mut x = random_inputs(&[4, 2], 3, 4);
        assert!(enc.encode(&x[..1], Mode::Eval).is_err());
        assert!(enc.encode(&[], Mode::Eval).is_err());
        x[1] = Tensor2D::zeros(2, 2);
        assert!(enc.encode(&x, Mode::Eval).is_err());
        let one = random_inputs(&[4, 2], 1, 4);
        assert!(matches!(enc.encode(&one, Mode::Train), Err(Error::BatchTooSmall(1))));
        assert!(Encoder::<f32>::new(small_config(vec![])).is_err());
    }

    #[test]
    fn projection_rows_unit_and_deterministic() {
        let proj = Projection::<f32>::new(ProjectionConfig {
            input_dim: 12,
            hidden_dim: 6,
            output_dim: 3,
            seed: 9,
        })
        .unwrap();
        let mut t = random_inputs(&[12], 5, 8).remove(0);
        let row = t.row(1).to_vec();
        t.row_mut(4).copy_from_slice(&row);
        let y = teacher_projection(&proj, &t).unwrap();
        ItemEmbeddingMatrix::new(y.as_tensor().clone()).unwrap();
        assert_eq!(y.as_tensor().row(1), y.as_tensor().row(4));
        assert!(teacher_projection(&proj, &Tensor2D::zeros(2, 11)).is_err());
    }
}
