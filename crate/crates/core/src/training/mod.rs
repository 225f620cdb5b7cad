//! Training: batch construction, the sampled entmax objective, distillation,
//! and the epoch loops that tie them to the encoder.

mod batches;
mod config;
mod distill;
mod ema;
mod fit;
mod sem;

pub use batches::{make_batches, BatchLayout, PositivePair, PositivePairBatch};
pub use config::{DistillConfig, DistillMode, TrainConfig, Variant};
pub use distill::{build_distill_batch, distill_objective, total_loss, DistillBatch, DistillOutput};
pub use ema::{ema_update, EmaBuffer};
pub use fit::{fit, fit_with_teacher, student_step, validation_ndcg, ContentModel, EpochRecord, FitResult, StudentStep};
pub use sem::{sem_loss, sem_objective, SemOutput};
