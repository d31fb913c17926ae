//! Annealing policies for the regularizer weight β.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Monotonic,
    Cyclical,
}

/// β-annealing policy.
///
/// Defaults (`cycles = 4`, `ramp_ratio = 0.5`, `beta_max = 1.0`) are taken
/// from common cyclical-annealing practice; treat them as tunable
/// assumptions rather than known-good values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    pub total_steps: u64,
    #[serde(default = "default_cycles")]
    pub cycles: u64,
    #[serde(default = "default_ramp_ratio")]
    pub ramp_ratio: f64,
}

fn default_beta_max() -> f64 {
    1.0
}
fn default_cycles() -> u64 {
    4
}
fn default_ramp_ratio() -> f64 {
    0.5
}

impl ScheduleConfig {
    pub fn cyclical(total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cyclical,
            beta_max: default_beta_max(),
            total_steps,
            cycles: default_cycles(),
            ramp_ratio: default_ramp_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_max) {
            return Err(Error::config(format!(
                "beta_max must lie in [0, 1], got {}",
                self.beta_max
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        if self.cycles == 0 {
            return Err(Error::config("cycles must be at least 1"));
        }
        if !(self.ramp_ratio > 0.0 && self.ramp_ratio <= 1.0) {
            return Err(Error::config(format!(
                "ramp_ratio must lie in (0, 1], got {}",
                self.ramp_ratio
            )));
        }
        Ok(())
    }
}

/// A validated schedule. Construction is the only place configs can fail.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    cfg: ScheduleConfig,
}

impl Schedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    fn ramp(&self, progress: f64) -> f64 {
        self.cfg.beta_max * (progress / self.cfg.ramp_ratio).min(1.0)
    }

    /// β for a global update step. Steps past the end hold the last value.
    pub fn beta_at(&self, step: u64) -> f64 {
        let total = self.cfg.total_steps;
        let step = step.min(total - 1);
        match self.cfg.kind {
            ScheduleKind::Constant => self.cfg.beta_max,
            ScheduleKind::Monotonic => self.ramp(step as f64 / total as f64),
            ScheduleKind::Cyclical => {
                let period = total.div_ceil(self.cfg.cycles);
                self.ramp((step % period) as f64 / period as f64)
            }
        }
    }

    /// `step,beta` rows for every step of the schedule.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,beta\n");
        for step in 0..self.cfg.total_steps {
            out.push_str(&format!("{step},{}\n", self.beta_at(step)));
        }
        out
    }
}

/// Convenience wrapper over [`Schedule::beta_at`].
pub fn beta_at(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    Ok(Schedule::new(cfg.clone())?.beta_at(step))
}
