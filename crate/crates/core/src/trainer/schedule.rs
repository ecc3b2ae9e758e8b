use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearDecay,
    LinearWarmupCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    /// Used by the warmup-cosine schedule only.
    pub warmup_steps: usize,
}

impl ScheduleConfig {
    /// Multiplier in `[0, 1]`; steps past `total_steps` clamp to the final value.
    pub fn lr_multiplier(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let step = step.min(total);
        match self.kind {
            ScheduleKind::LinearDecay => 1.0 - step as f64 / total as f64,
            ScheduleKind::LinearWarmupCosine => {
                let warm = self.warmup_steps.min(total);
                if step < warm {
                    step as f64 / warm as f64
                } else if warm == total {
                    1.0
                } else {
                    let u = (step - warm) as f64 / (total - warm) as f64;
                    0.5 * (1.0 + (PI * u).cos())
                }
            }
        }
    }
}
