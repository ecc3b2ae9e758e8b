use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total active rank over time: `b_init` until `warmup_steps`, cubic decay
/// to `b_target` at `final_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    b_init: usize,
    b_target: usize,
    warmup_steps: usize,
    final_steps: usize,
}

impl BudgetSchedule {
    pub fn new(b_init: usize, b_target: usize, warmup_steps: usize, final_steps: usize) -> Result<Self> {
        if final_steps <= warmup_steps {
            return Err(Error::Config(format!(
                "budget schedule needs final_steps > warmup_steps (got {final_steps} <= {warmup_steps})"
            )));
        }
        if b_target > b_init {
            return Err(Error::Config(format!(
                "target budget {b_target} exceeds initial budget {b_init}"
            )));
        }
        Ok(Self {
            b_init,
            b_target,
            warmup_steps,
            final_steps,
        })
    }

    /// Budget of `r_init` and `r_target` per adapter, pooled over `n` adapters.
    pub fn pooled(n: usize, r_init: usize, r_target: usize, warmup_steps: usize, final_steps: usize) -> Result<Self> {
        Self::new(n * r_init, n * r_target, warmup_steps, final_steps)
    }

    pub fn b_init(&self) -> usize {
        self.b_init
    }

    pub fn b_target(&self) -> usize {
        self.b_target
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn final_steps(&self) -> usize {
        self.final_steps
    }

    pub fn budget_at(&self, step: usize) -> usize {
        if step < self.warmup_steps {
            return self.b_init;
        }
        if step >= self.final_steps {
            return self.b_target;
        }
        let u = (step - self.warmup_steps) as f64 / (self.final_steps - self.warmup_steps) as f64;
        let span = (self.b_init - self.b_target) as f64;
        let b = self.b_target as f64 + span * (1.0 - u).powi(3);
        (b.floor() as usize).clamp(self.b_target, self.b_init)
    }
}
