//! Minimal differentiable compute layer: tensors, a fixed set of operations
//! with hand-derived backward rules, layers built from them, Adam, and
//! learning-rate schedules.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Linear};
pub use params::{AdamConfig, ParamId, ParamKind, ParamStore};
pub use schedule::{LrSchedule, ScheduleKind};
pub use tensor::{Scalar, Tensor2D};

/// Forward mode for layers whose behaviour differs between training and
/// inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
