use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::compute::{AdamConfig, Checkpoint, LrSchedule, ParamStore, Scalar, Tensor2D};
use crate::data::{ColdSplit, Dataset};
use crate::encoder::{Encoder, EncoderConfig, ItemEmbeddingMatrix, Projection, ProjectionConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingScorer, SparsityStats};

use super::batches::{make_batches, BatchLayout, PositivePairBatch};
use super::config::{DistillConfig, TrainConfig, Variant};
use super::distill::{build_distill_batch, distill_objective, total_loss};
use super::ema::EmaBuffer;
use super::sem::{sem_loss, sem_objective};

const BATCH_STREAM: u64 = 1;
const DISTILL_STREAM: u64 = 2;
const VAL_K: usize = 20;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step (the student's, when distilling).
    pub lr: f64,
    pub loss_sem: f64,
    pub loss_distill: Option<f64>,
    pub loss_total: f64,
    /// Online only: the teacher's own SEM loss.
    pub teacher_loss: Option<f64>,
    pub val_ndcg20: f64,
    /// Fraction of nonzero entries of the SEM prediction rows.
    pub sem_nonzero_fraction: f64,
    pub distill_target_nonzero_fraction: Option<f64>,
    pub distill_student_nonzero_fraction: Option<f64>,
    pub skipped_pairs: usize,
    pub steps: usize,
}

/// A trained content model: an encoder, optionally followed by a student
/// projection of its outputs.
#[derive(Clone, Debug)]
pub struct ContentModel {
    pub encoder: Encoder<f32>,
    pub projection: Option<Projection<f32>>,
}

impl ContentModel {
    pub fn base(encoder: Encoder<f32>) -> Self {
        ContentModel {
            encoder,
            projection: None,
        }
    }

    /// Unit-norm embeddings for every row of `inputs`.
    pub fn item_embeddings(&self, inputs: &[Tensor2D<f32>]) -> Result<ItemEmbeddingMatrix<f32>> {
        let y = self.encoder.encode_eval(inputs)?.embeddings;
        match &self.projection {
            None => Ok(y),
            Some(p) => Ok(p.forward(y.as_tensor())?.0),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.projection {
            None => self.encoder.output_dim(),
            Some(p) => p.config().output_dim,
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = json!({
            "encoder": self.encoder.config(),
            "projection": self.projection.as_ref().map(|p| p.config()),
            "run": extra,
        });
        let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![("encoder/", self.encoder.params())];
        if let Some(p) = &self.projection {
            stores.push(("student/", p.params()));
        }
        Checkpoint::from_stores(meta, stores)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: Default::default(),
            msg,
        };
        let enc_cfg: EncoderConfig = serde_json::from_value(ckpt.meta["encoder"].clone())
            .map_err(|e| bad(format!("encoder config: {e}")))?;
        let mut encoder = Encoder::new(enc_cfg)?;
        ckpt.restore_into("encoder/", encoder.params_mut())?;
        let projection = match &ckpt.meta["projection"] {
            serde_json::Value::Null => None,
            v => {
                let cfg: ProjectionConfig =
                    serde_json::from_value(v.clone()).map_err(|e| bad(format!("projection config: {e}")))?;
                let mut p = Projection::new(cfg)?;
                ckpt.restore_into("student/", p.params_mut())?;
                Some(p)
            }
        };
        Ok(ContentModel {
            encoder,
            projection,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

pub struct FitResult {
    /// Model from the epoch with the best validation NDCG@20.
    pub model: ContentModel,
    pub best_epoch: usize,
    pub best_val_ndcg20: f64,
    pub log: Vec<EpochRecord>,
    /// Offline only: the teacher trained first.
    pub teacher: Option<Box<FitResult>>,
}

/// Cold validation NDCG@20 of `model`.
pub fn validation_ndcg(model: &ContentModel, dataset: &Dataset, split: &ColdSplit) -> Result<f64> {
    let y = model.item_embeddings(dataset.inputs())?;
    let report = evaluate(
        &EmbeddingScorer::new(y),
        &split.warm_train,
        &split.cold_val,
        &split.cold_val_items,
        VAL_K,
    )?;
    Ok(report.ndcg_at_k)
}

#[derive(Default)]
struct EpochAccum {
    sem: f64,
    distill: f64,
    total: f64,
    teacher: f64,
    steps: usize,
    skipped: usize,
    sem_sparsity: SparsityStats,
    target_sparsity: SparsityStats,
    student_sparsity: SparsityStats,
    lr: f64,
}

impl EpochAccum {
    fn record(self, epoch: usize, val: f64, variant: Variant) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let distilled = variant != Variant::Base;
        EpochRecord {
            epoch,
            lr: self.lr,
            loss_sem: self.sem / n,
            loss_distill: distilled.then(|| self.distill / n),
            loss_total: self.total / n,
            teacher_loss: (variant == Variant::Online).then(|| self.teacher / n),
            val_ndcg20: val,
            sem_nonzero_fraction: self.sem_sparsity.fraction().unwrap_or(0.0),
            distill_target_nonzero_fraction: distilled.then(|| self.target_sparsity.fraction().unwrap_or(0.0)),
            distill_student_nonzero_fraction: distilled.then(|| self.student_sparsity.fraction().unwrap_or(0.0)),
            skipped_pairs: self.skipped,
            steps: self.steps,
        }
    }
}

fn check_loss(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training(format!("{what} loss became {loss}")));
    }
    Ok(())
}

fn adam(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    }
}

/// Tracks the best epoch by validation NDCG@20; ties keep the earlier one.
struct Selector {
    best: Option<(usize, f64, ContentModel)>,
}

impl Selector {
    fn offer(&mut self, epoch: usize, val: f64, model: impl FnOnce() -> ContentModel) {
        if self.best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            self.best = Some((epoch, val, model()));
        }
    }
}

/// Trains according to `config.variant()`. `on_epoch` sees each record as
/// soon as it is produced.
pub fn fit(
    dataset: &Dataset,
    split: &ColdSplit,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    match config.variant() {
        Variant::Base => train_base(dataset, split, config, on_epoch),
        Variant::Offline => {
            let teacher_cfg = config.teacher_config().expect("distill config present");
            let teacher = train_base(dataset, split, &teacher_cfg, &mut |_| {})?;
            let mut res = fit_with_teacher(dataset, split, config, &teacher.model, on_epoch)?;
            res.teacher = Some(Box::new(teacher));
            Ok(res)
        }
        Variant::Online => train_online(dataset, split, config, on_epoch),
    }
}

fn encoder_for(dataset: &Dataset, config: &TrainConfig) -> Result<Encoder<f32>> {
    Encoder::new(EncoderConfig {
        mode_dims: dataset.mode_dims(),
        hidden_dim: config.hidden_dim,
        output_dim: config.output_dim,
        seed: config.seed,
    })
}

fn epoch_batches(
    split: &ColdSplit,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PositivePairBatch>> {
    let batches = make_batches(&split.warm_train, config.batch_size, config.history_cap, rng)?;
    if batches.is_empty() {
        return Err(Error::Training("training set yields no batch of two pairs".into()));
    }
    Ok(batches)
}

fn train_base(
    dataset: &Dataset,
    split: &ColdSplit,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    let mut encoder = encoder_for(dataset, config)?;
    let schedule = LrSchedule::cosine(config.base_lr, config.epochs);
    let opt = adam(config);
    let mut rng = rng_stream(config.seed, BATCH_STREAM);
    let mut selector = Selector { best: None };
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(split, config, &mut rng)?;
        let spe = batches.len();
        let mut acc = EpochAccum::default();
        for batch in &batches {
            let lr = schedule.lr_at(step, spe);
            encoder.params_mut().zero_grad();
            let out = sem_loss(batch, &mut encoder, dataset.inputs(), config)?;
            check_loss(out.loss, "SEM")?;
            if lr > 0.0 {
                encoder.params_mut().adam_step(lr, &opt)?;
            }
            acc.sem += out.loss;
            acc.total += out.loss;
            acc.skipped += out.skipped;
            acc.sem_sparsity.merge(out.sparsity);
            acc.lr = lr;
            acc.steps += 1;
            step += 1;
        }
        let model = ContentModel::base(encoder.clone());
        let val = validation_ndcg(&model, dataset, split)?;
        let rec = acc.record(epoch, val, Variant::Base);
        log::info!("epoch {epoch}: sem {:.5} val ndcg@20 {val:.4}", rec.loss_sem);
        on_epoch(&rec);
        log.push(rec);
        selector.offer(epoch, val, || model);
    }
    finish(selector, log, None)
}

fn finish(selector: Selector, log: Vec<EpochRecord>, teacher: Option<Box<FitResult>>) -> Result<FitResult> {
    let (best_epoch, best_val_ndcg20, model) = selector
        .best
        .ok_or_else(|| Error::Training("no epoch completed".into()))?;
    Ok(FitResult {
        model,
        best_epoch,
        best_val_ndcg20,
        log,
        teacher,
    })
}

/// Losses and statistics of one student step.
#[derive(Clone, Debug)]
pub struct StudentStep {
    pub sem: f64,
    pub distill: f64,
    pub skipped: usize,
    pub sem_sparsity: SparsityStats,
    pub target_sparsity: SparsityStats,
    pub student_sparsity: SparsityStats,
}

/// Student forward/backward on one batch: `λ · sem + distill`, the latter
/// over `layout.extra`. `student_in` and `teacher_out` hold rows for
/// `layout.items`. Gradients replace those stored in `projection`.
pub fn student_step<T: Scalar>(
    projection: &mut Projection<T>,
    layout: &BatchLayout,
    student_in: &Tensor2D<T>,
    teacher_out: &Tensor2D<T>,
    config: &TrainConfig,
    d: &DistillConfig,
) -> Result<StudentStep> {
    let (ys, cache) = projection.forward(student_in)?;
    let sem = sem_objective(ys.as_tensor(), layout, config.alpha, config.tau, config.tau0(), d.lambda)?;
    let dist = distill_objective(
        &ys.as_tensor().gather_rows(&layout.extra),
        &teacher_out.gather_rows(&layout.extra),
        config.alpha,
        d.omega,
        d.omega0(config.alpha),
        1.0,
    )?;
    let mut grad = sem.grad_y;
    for (k, &row) in layout.extra.iter().enumerate() {
        for (o, &g) in grad.row_mut(row).iter_mut().zip(dist.grad_student.row(k)) {
            *o += g;
        }
    }
    projection.params_mut().zero_grad();
    projection.backward(&cache, &grad)?;
    Ok(StudentStep {
        sem: sem.loss,
        distill: dist.loss,
        skipped: sem.skipped,
        sem_sparsity: sem.sparsity,
        target_sparsity: dist.target_sparsity,
        student_sparsity: dist.student_sparsity,
    })
}

impl EpochAccum {
    fn add_student(&mut self, s: &StudentStep, lambda: f64) {
        self.sem += s.sem;
        self.distill += s.distill;
        self.total += total_loss(s.distill, s.sem, lambda);
        self.skipped += s.skipped;
        self.sem_sparsity.merge(s.sem_sparsity);
        self.target_sparsity.merge(s.target_sparsity);
        self.student_sparsity.merge(s.student_sparsity);
    }
}

fn projection_for(config: &TrainConfig, teacher_dim: usize) -> Result<Projection<f32>> {
    Projection::new(ProjectionConfig {
        input_dim: teacher_dim,
        hidden_dim: config.hidden_dim,
        output_dim: config.output_dim,
        seed: config.seed,
    })
}

/// Offline distillation into a projection of the frozen `teacher`'s outputs.
pub fn fit_with_teacher(
    dataset: &Dataset,
    split: &ColdSplit,
    config: &TrainConfig,
    teacher: &ContentModel,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    let d = config
        .distill
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("offline distillation needs a distill section".into()))?;
    if teacher.projection.is_some() {
        return Err(Error::InvalidArgument("teacher must be a plain encoder".into()));
    }
    let teacher_all = teacher.encoder.encode_eval(dataset.inputs())?.embeddings.into_tensor();
    let mut projection = projection_for(config, teacher_all.cols())?;
    let schedule = LrSchedule::cosine(config.base_lr, config.epochs);
    let opt = adam(config);
    let mut rng = rng_stream(config.seed, BATCH_STREAM);
    let mut drng = rng_stream(config.seed, DISTILL_STREAM);
    let users_per = d.users_per_batch(config.batch_size);
    let mut selector = Selector { best: None };
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(split, config, &mut rng)?;
        let spe = batches.len();
        let mut acc = EpochAccum::default();
        for batch in &batches {
            let lr = schedule.lr_at(step, spe);
            let c = build_distill_batch(batch, &split.warm_train, users_per, d.positives_per_user, &mut drng)?;
            let layout = BatchLayout::with_extra(batch, &c.items);
            let x = teacher_all.gather_rows(&layout.items);
            let s = student_step(&mut projection, &layout, &x, &x, config, d)?;
            check_loss(total_loss(s.distill, s.sem, d.lambda), "student")?;
            if lr > 0.0 {
                projection.params_mut().adam_step(lr, &opt)?;
            }
            acc.add_student(&s, d.lambda);
            acc.lr = lr;
            acc.steps += 1;
            step += 1;
        }
        let model = ContentModel {
            encoder: teacher.encoder.clone(),
            projection: Some(projection.clone()),
        };
        let val = validation_ndcg(&model, dataset, split)?;
        let rec = acc.record(epoch, val, Variant::Offline);
        log::info!("epoch {epoch}: total {:.5} val ndcg@20 {val:.4}", rec.loss_total);
        on_epoch(&rec);
        log.push(rec);
        selector.offer(epoch, val, || model);
    }
    finish(selector, log, None)
}

/// Teacher and student trained together. Each step updates the teacher on
/// its SEM loss, refreshes the EMA buffer of teacher outputs for the step's
/// items, and updates the student projection of the buffer on the total
/// loss with targets from the current teacher.
fn train_online(
    dataset: &Dataset,
    split: &ColdSplit,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    let d = config.distill.as_ref().expect("distill config present");
    let teacher_cfg = config.teacher_config().expect("distill config present");
    let mut teacher = encoder_for(dataset, &teacher_cfg)?;
    let mut projection = projection_for(config, teacher.output_dim())?;
    let mut ema = EmaBuffer::new(dataset.n_items(), teacher.output_dim(), d.ema_decay)?;
    let teacher_schedule = LrSchedule::cosine(teacher_cfg.base_lr, config.epochs);
    let teacher_opt = adam(&teacher_cfg);
    let opt = adam(config);
    let mut rng = rng_stream(config.seed, BATCH_STREAM);
    let mut drng = rng_stream(config.seed, DISTILL_STREAM);
    let users_per = d.users_per_batch(config.batch_size);
    let mut selector = Selector { best: None };
    let mut log = Vec::with_capacity(config.epochs);
    let mut schedule = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(split, config, &mut rng)?;
        let spe = batches.len();
        let schedule =
            *schedule.get_or_insert_with(|| LrSchedule::warmup_cosine(config.base_lr, config.epochs, d.warmup_epochs * spe));
        let mut acc = EpochAccum::default();
        for batch in &batches {
            let t_lr = teacher_schedule.lr_at(step, spe);
            teacher.params_mut().zero_grad();
            let t_out = sem_loss(batch, &mut teacher, dataset.inputs(), &teacher_cfg)?;
            check_loss(t_out.loss, "teacher")?;
            if t_lr > 0.0 {
                teacher.params_mut().adam_step(t_lr, &teacher_opt)?;
            }

            let c = build_distill_batch(batch, &split.warm_train, users_per, d.positives_per_user, &mut drng)?;
            let layout = BatchLayout::with_extra(batch, &c.items);
            let t_rows = teacher
                .encode_eval(&dataset.gather_inputs(&layout.items))?
                .embeddings
                .into_tensor();
            ema.update(&layout.items, &t_rows)?;
            let x = ema.rows(&layout.items);
            let s = student_step(&mut projection, &layout, &x, &t_rows, config, d)?;
            check_loss(total_loss(s.distill, s.sem, d.lambda), "student")?;
            let lr = schedule.lr_at(step, spe);
            if lr > 0.0 {
                projection.params_mut().adam_step(lr, &opt)?;
            }
            acc.add_student(&s, d.lambda);
            acc.teacher += t_out.loss;
            acc.lr = lr;
            acc.steps += 1;
            step += 1;
        }
        let model = ContentModel {
            encoder: teacher.clone(),
            projection: Some(projection.clone()),
        };
        let val = validation_ndcg(&model, dataset, split)?;
        let rec = acc.record(epoch, val, Variant::Online);
        log::info!("epoch {epoch}: total {:.5} val ndcg@20 {val:.4}", rec.loss_total);
        on_epoch(&rec);
        log.push(rec);
        selector.offer(epoch, val, || model);
    }
    finish(selector, log, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_cold_split, SplitParams, SynthConfig};
    use crate::entmax::Alpha;

    fn tiny() -> (Dataset, ColdSplit) {
        let ds = generate_synthetic(&SynthConfig {
            n_users: 60,
            n_items: 50,
            n_topics: 4,
            mode_dims: vec![8, 6],
            interactions_per_user: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = make_cold_split(&ds, &SplitParams::default()).unwrap();
        (ds, split)
    }

    fn small_config(alpha: Alpha) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            epochs: 3,
            hidden_dim: 16,
            output_dim: 8,
            ..TrainConfig::new(alpha, 0.3)
        }
    }

    #[test]
    fn selection_returns_best_epoch() {
        let (ds, split) = tiny();
        let res = fit(&ds, &split, &small_config(Alpha::SPARSEMAX), &mut |_| {}).unwrap();
        let best = res.log.iter().map(|r| r.val_ndcg20).fold(f64::MIN, f64::max);
        assert_eq!(res.best_val_ndcg20, best);
        assert_eq!(res.log[res.best_epoch - 1].val_ndcg20, best);
        assert_eq!(validation_ndcg(&res.model, &ds, &split).unwrap(), best);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, split) = tiny();
        let mut cfg = small_config(Alpha::ENTMAX15);
        cfg.epochs = 1;
        cfg.distill = Some(DistillConfig {
            teacher_dims: (12, 10),
            ..DistillConfig::new(super::super::DistillMode::Online, 0.5)
        });
        let res = fit(&ds, &split, &cfg, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        res.model.save(&p, json!({"note": 1})).unwrap();
        let back = ContentModel::load(&p).unwrap();
        assert_eq!(
            back.item_embeddings(ds.inputs()).unwrap(),
            res.model.item_embeddings(ds.inputs()).unwrap()
        );
    }
}
