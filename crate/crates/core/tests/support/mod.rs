//! Gradient-check scenarios shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semco::compute::gradcheck::{compare, numeric_gradients, GradCheck};
use semco::compute::ops::l2_normalize_rowwise;
use semco::compute::Tensor2D;
use semco::encoder::{Encoder, EncoderConfig, Projection, ProjectionConfig};
use semco::training::{
    sem_loss, student_step, BatchLayout, DistillConfig, DistillMode, PositivePair, PositivePairBatch, TrainConfig,
};
use semco::Alpha;

pub const MODE_DIMS: [usize; 2] = [6, 5];
pub const N_ITEMS: usize = 12;
pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;

pub fn random_features(seed: u64) -> Vec<Tensor2D<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MODE_DIMS
        .iter()
        .map(|&d| Tensor2D::from_fn(N_ITEMS, d, |_, _| rng.random_range(-1.0f32..1.0)))
        .collect()
}

/// Four positive pairs over `N_ITEMS` items; one user has no other history.
pub fn four_pair_batch() -> PositivePairBatch {
    let pair = |user, item, history: &[usize]| PositivePair {
        user,
        item,
        history: history.to_vec(),
    };
    PositivePairBatch {
        pairs: vec![
            pair(0, 0, &[3, 4, 5]),
            pair(1, 1, &[6, 7]),
            pair(2, 2, &[8]),
            pair(0, 3, &[0, 4, 5]),
        ],
    }
}

pub fn train_config(alpha: Alpha, tau: f64) -> TrainConfig {
    TrainConfig {
        hidden_dim: 7,
        output_dim: 4,
        seed: 3,
        ..TrainConfig::new(alpha, tau)
    }
}

fn encoder(cfg: &TrainConfig) -> Encoder<f32> {
    Encoder::new(EncoderConfig {
        mode_dims: MODE_DIMS.to_vec(),
        hidden_dim: cfg.hidden_dim,
        output_dim: cfg.output_dim,
        seed: cfg.seed,
    })
    .unwrap()
}

/// Analytic 32-bit encoder gradients of the SEM loss against 64-bit central
/// differences of the same loss.
pub fn encoder_sem_check(alpha: Alpha, tau: f64) -> Vec<GradCheck> {
    let cfg = train_config(alpha, tau);
    let inputs = random_features(11);
    let batch = four_pair_batch();
    let mut enc = encoder(&cfg);
    enc.params_mut().zero_grad();
    sem_loss(&batch, &mut enc, &inputs, &cfg).unwrap();
    let mut enc64 = enc.cast::<f64>();
    let numeric = numeric_gradients(
        &mut enc64,
        |e| e.params_mut(),
        |e| sem_loss(&batch, e, &inputs, &cfg).map(|o| o.loss),
        FD_STEP,
    )
    .unwrap();
    compare(enc.params(), &numeric).unwrap()
}

/// Projection gradients of `λ·sem + distill`, with the batch items plus a
/// disjoint distillation set of four items.
pub fn projection_distill_check(alpha: Alpha, tau: f64, omega: f64) -> Vec<GradCheck> {
    let mut cfg = train_config(alpha, tau);
    let d = DistillConfig {
        lambda: 0.7,
        ..DistillConfig::new(DistillMode::Offline, omega)
    };
    cfg.distill = Some(d.clone());
    let batch = four_pair_batch();
    let layout = BatchLayout::with_extra(&batch, &[9, 10, 11, 1]);
    let teacher_dim = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| {
        l2_normalize_rowwise(&Tensor2D::from_fn(layout.items.len(), teacher_dim, |_, _| {
            rng.random_range(-1.0f32..1.0)
        }))
        .0
    };
    let student_in = unit(&mut rng);
    let teacher_out = unit(&mut rng);
    let mut proj = Projection::<f32>::new(ProjectionConfig {
        input_dim: teacher_dim,
        hidden_dim: cfg.hidden_dim,
        output_dim: cfg.output_dim,
        seed: 1,
    })
    .unwrap();
    student_step(&mut proj, &layout, &student_in, &teacher_out, &cfg, &d).unwrap();
    let (x64, t64) = (student_in.cast::<f64>(), teacher_out.cast::<f64>());
    let mut proj64 = proj.cast::<f64>();
    let numeric = numeric_gradients(
        &mut proj64,
        |p| p.params_mut(),
        |p| {
            student_step(p, &layout, &x64, &t64, &cfg, &d).map(|s| d.lambda * s.sem + s.distill)
        },
        FD_STEP,
    )
    .unwrap();
    compare(proj.params(), &numeric).unwrap()
}

/// Encoder gradients of the distillation loss alone against fixed teacher
/// rows, the path used when the student is the encoder itself.
pub fn encoder_distill_check(alpha: Alpha, omega: f64) -> Vec<GradCheck> {
    let cfg = train_config(alpha, 0.5);
    let inputs = random_features(13);
    let items: Vec<usize> = (0..6).collect();
    let x: Vec<Tensor2D<f32>> = inputs.iter().map(|m| m.gather_rows(&items)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let teacher = l2_normalize_rowwise(&Tensor2D::from_fn(items.len(), 8, |_, _| rng.random_range(-1.0f32..1.0))).0;
    let omega0 = DistillConfig::new(DistillMode::Online, omega).omega0(alpha);
    let mut enc = encoder(&cfg);
    enc.params_mut().zero_grad();
    let (out, cache) = enc.forward_train(&x).unwrap();
    let obj = semco::training::distill_objective(out.embeddings.as_tensor(), &teacher, alpha, omega, omega0, 1.0).unwrap();
    enc.backward(&cache, &obj.grad_student).unwrap();

    let x64: Vec<Tensor2D<f64>> = x.iter().map(|m| m.cast()).collect();
    let t64 = teacher.cast::<f64>();
    let mut enc64 = enc.cast::<f64>();
    let numeric = numeric_gradients(
        &mut enc64,
        |e| e.params_mut(),
        |e| {
            let (o, _) = e.forward_train(&x64)?;
            semco::training::distill_objective(o.embeddings.as_tensor(), &t64, alpha, omega, omega0, 1.0).map(|d| d.loss)
        },
        FD_STEP,
    )
    .unwrap();
    compare(enc.params(), &numeric).unwrap()
}

/// Absolute floor for tensors with a structurally zero gradient: a small
/// fraction of the largest tensor gradient in the check.
pub fn abs_floor(checks: &[GradCheck]) -> f64 {
    let scale = checks.iter().map(|c| c.numeric_norm).fold(0.0, f64::max);
    REL_TOL * 1e-2 * scale
}

/// Worst relative error among tensors that are not structurally zero, and
/// the names of failing tensors.
pub fn summarize(checks: &[GradCheck]) -> (f64, Vec<String>) {
    let floor = abs_floor(checks);
    let worst = checks
        .iter()
        .filter(|c| c.numeric_norm >= floor)
        .map(|c| c.rel_err)
        .fold(0.0, f64::max);
    let failing = checks
        .iter()
        .filter(|c| !c.passes(REL_TOL, floor))
        .map(|c| format!("{} (rel {:.2e}, abs {:.2e})", c.name, c.rel_err, c.abs_err))
        .collect();
    (worst, failing)
}

/// Plain sampled-softmax cross-entropy with in-batch negatives, written
/// from scratch: for each pair with history, `logsumexp(s) - s_target`
/// where `s_k = <u, y_k> / tau` over the batch targets.
pub fn sampled_softmax_reference(y: &Tensor2D<f64>, layout: &BatchLayout, tau: f64) -> f64 {
    let d = y.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (j, hist) in layout.histories.iter().enumerate() {
        let mut u = vec![0.0f64; d];
        for &h in hist {
            for c in 0..d {
                u[c] += y.get(h, c);
            }
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let s: Vec<f64> = layout
            .targets
            .iter()
            .map(|&t| (0..d).map(|c| u[c] / norm * y.get(t, c)).sum::<f64>() / tau)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[j];
        count += 1;
    }
    total / count as f64
}

/// Random unit rows for the items of `layout`.
pub fn random_unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor2D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    l2_normalize_rowwise(&Tensor2D::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0))).0
}
