use serde::{Deserialize, Serialize};

use crate::encoder::{DEFAULT_HIDDEN_DIM, DEFAULT_OUTPUT_DIM, DEFAULT_TEACHER_DIM};
use crate::entmax::Alpha;
use crate::error::{Error, Result};

fn default_batch_size() -> usize {
    2048
}
fn default_epochs() -> usize {
    15
}
fn default_lr() -> f64 {
    0.001
}
fn default_history_cap() -> usize {
    50
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN_DIM
}
fn default_output() -> usize {
    DEFAULT_OUTPUT_DIM
}

/// Optimization settings for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: Alpha,
    pub tau: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Maximum number of history items used to build a user vector.
    #[serde(default = "default_history_cap")]
    pub history_cap: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_output")]
    pub output_dim: usize,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
}

impl TrainConfig {
    pub fn new(alpha: Alpha, tau: f64) -> Self {
        TrainConfig {
            alpha,
            tau,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            base_lr: default_lr(),
            weight_decay: 0.0,
            seed: 0,
            history_cap: default_history_cap(),
            hidden_dim: default_hidden(),
            output_dim: default_output(),
            distill: None,
        }
    }

    /// Logit pre-scale: 1 for softmax, `tau` otherwise.
    pub fn tau0(&self) -> f64 {
        if self.alpha.is_softmax() {
            1.0
        } else {
            self.tau
        }
    }

    pub fn variant(&self) -> Variant {
        match &self.distill {
            None => Variant::Base,
            Some(d) if d.mode == DistillMode::Offline => Variant::Offline,
            Some(_) => Variant::Online,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.history_cap == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return bad("history_cap and model dimensions must be positive".into());
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    /// The teacher's own configuration: same objective family, teacher
    /// dimensions, no distillation.
    pub fn teacher_config(&self) -> Option<TrainConfig> {
        let d = self.distill.as_ref()?;
        Some(TrainConfig {
            tau: d.teacher_tau.unwrap_or(self.tau),
            epochs: d.teacher_epochs.unwrap_or(self.epochs),
            hidden_dim: d.teacher_dims.0,
            output_dim: d.teacher_dims.1,
            distill: None,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Offline,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Offline,
    Online,
}

fn default_ppu() -> usize {
    4
}
fn default_ema() -> f64 {
    0.99
}
fn default_teacher_dims() -> (usize, usize) {
    (DEFAULT_TEACHER_DIM, DEFAULT_TEACHER_DIM)
}
fn default_one() -> f64 {
    1.0
}
fn default_warmup() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Distillation temperature.
    pub omega: f64,
    /// Overrides the default pre-scale (1 for softmax, `omega` otherwise).
    #[serde(default)]
    pub omega0: Option<f64>,
    /// Weight of the student's own SEM loss.
    #[serde(default = "default_one")]
    pub lambda: f64,
    #[serde(default = "default_ppu")]
    pub positives_per_user: usize,
    /// Defaults to `batch_size / 8`.
    #[serde(default)]
    pub users_per_distill_batch: Option<usize>,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Teacher `(hidden, output)` dimensions.
    #[serde(default = "default_teacher_dims")]
    pub teacher_dims: (usize, usize),
    #[serde(default)]
    pub teacher_tau: Option<f64>,
    #[serde(default)]
    pub teacher_epochs: Option<usize>,
    /// Online student learning-rate warmup, in epochs.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
}

impl DistillConfig {
    pub fn new(mode: DistillMode, omega: f64) -> Self {
        DistillConfig {
            mode,
            omega,
            omega0: None,
            lambda: 1.0,
            positives_per_user: default_ppu(),
            users_per_distill_batch: None,
            ema_decay: default_ema(),
            teacher_dims: default_teacher_dims(),
            teacher_tau: None,
            teacher_epochs: None,
            warmup_epochs: default_warmup(),
        }
    }

    pub fn omega0(&self, alpha: Alpha) -> f64 {
        match self.omega0 {
            Some(w) => w,
            None if alpha.is_softmax() => 1.0,
            None => self.omega,
        }
    }

    pub fn users_per_batch(&self, batch_size: usize) -> usize {
        self.users_per_distill_batch.unwrap_or((batch_size / 8).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidTemperature(self.omega));
        }
        if let Some(w) = self.omega0 {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidTemperature(w));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.positives_per_user < 2 {
            return bad(format!(
                "positives_per_user must be at least 2, got {}",
                self.positives_per_user
            ));
        }
        if self.users_per_distill_batch == Some(0) {
            return bad("users_per_distill_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if self.teacher_dims.0 == 0 || self.teacher_dims.1 == 0 {
            return bad("teacher dimensions must be positive".into());
        }
        if let Some(t) = self.teacher_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        if self.teacher_epochs == Some(0) {
            return bad("teacher_epochs must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau0_rule() {
        assert_eq!(TrainConfig::new(Alpha::SOFTMAX, 0.2).tau0(), 1.0);
        assert_eq!(TrainConfig::new(Alpha::SPARSEMAX, 0.2).tau0(), 0.2);
        let d = DistillConfig::new(DistillMode::Online, 0.5);
        assert_eq!(d.omega0(Alpha::SOFTMAX), 1.0);
        assert_eq!(d.omega0(Alpha::ENTMAX15), 0.5);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::new(Alpha::SOFTMAX, 0.0);
        assert!(c.validate().is_err());
        c.tau = 0.1;
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.batch_size = 4;
        c.distill = Some(DistillConfig {
            positives_per_user: 1,
            ..DistillConfig::new(DistillMode::Offline, 1.0)
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let ok = r#"{"alpha": 2.0, "tau": 0.3}"#;
        let c: TrainConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(c.batch_size, 2048);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alpha": 2.0, "tau": 0.3, "x": 1}"#).is_err());
    }
}
