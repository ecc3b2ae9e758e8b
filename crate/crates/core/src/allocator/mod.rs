//! Adaptive rank allocation: sensitivity tracking, per-triplet importance,
//! a scheduled global rank budget and pruning of the least important
//! singular values across every SVD-form adapter.

mod budget;

pub use budget::BudgetSchedule;

use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterSet};
use crate::error::{Error, Result};
use crate::qformer::SublayerAddress;
use crate::scalar::Real;

pub const DEFAULT_BETA: f64 = 0.85;

/// How `s(w)` is formed from the tracked statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    /// `Ī(w)·Ū(w)`.
    #[default]
    Smoothed,
    /// Instantaneous `|w·g|` from the latest update.
    Raw,
}

#[derive(Clone, Debug, Default)]
struct Ema {
    raw: Vec<f64>,
    sens: Vec<f64>,
    unc: Vec<f64>,
}

impl Ema {
    fn new(n: usize) -> Self {
        Self {
            raw: vec![0.0; n],
            sens: vec![0.0; n],
            unc: vec![0.0; n],
        }
    }

    fn update<T: Real>(&mut self, w: &[T], g: &[T], beta_sens: f64, beta_unc: f64) {
        for k in 0..w.len() {
            let i = (w[k] * g[k]).abs().as_f64();
            self.raw[k] = i;
            self.sens[k] = beta_sens * self.sens[k] + (1.0 - beta_sens) * i;
            self.unc[k] = beta_unc * self.unc[k] + (1.0 - beta_unc) * (i - self.sens[k]).abs();
        }
    }

    fn s(&self, k: usize, mode: SensitivityMode) -> f64 {
        match mode {
            SensitivityMode::Smoothed => self.sens[k] * self.unc[k],
            SensitivityMode::Raw => self.raw[k],
        }
    }
}

/// Per-element statistics for one adapter's `B`, `E`, `A`.
#[derive(Clone, Debug)]
pub struct TripletStats {
    b: Ema,
    e: Ema,
    a: Ema,
}

/// Exponential moving averages of `I = |w·∂L/∂w|` (smoothed sensitivity
/// `Ī`) and of `|I − Ī|` (uncertainty `Ū`) for every SVD-form factor entry.
#[derive(Clone, Debug)]
pub struct SensitivityEstimator {
    pub beta_sens: f64,
    pub beta_unc: f64,
    pub mode: SensitivityMode,
    stats: Vec<Option<TripletStats>>,
    step: usize,
}

impl SensitivityEstimator {
    pub fn new<T: Real>(set: &AdapterSet<T>, beta_sens: f64, beta_unc: f64, mode: SensitivityMode) -> Self {
        let stats = set
            .adapters()
            .iter()
            .map(|a| {
                a.as_adalora().map(|t| TripletStats {
                    b: Ema::new(t.b.tensor.numel()),
                    e: Ema::new(t.e.tensor.numel()),
                    a: Ema::new(t.a.tensor.numel()),
                })
            })
            .collect();
        Self {
            beta_sens,
            beta_unc,
            mode,
            stats,
            step: 0,
        }
    }

    pub fn with_defaults<T: Real>(set: &AdapterSet<T>) -> Self {
        Self::new(set, DEFAULT_BETA, DEFAULT_BETA, SensitivityMode::Smoothed)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Folds the current weights and gradients into the averages.
    pub fn update<T: Real>(&mut self, set: &AdapterSet<T>) -> Result<()> {
        if set.len() != self.stats.len() {
            return Err(Error::State(format!(
                "estimator tracks {} adapters, set has {}",
                self.stats.len(),
                set.len()
            )));
        }
        for (adapter, stats) in set.adapters().iter().zip(&mut self.stats) {
            let (Some(t), Some(st)) = (adapter.as_adalora(), stats.as_mut()) else {
                continue;
            };
            for (p, ema) in [(&t.b, &mut st.b), (&t.e, &mut st.e), (&t.a, &mut st.a)] {
                let g = p.tensor.grad().ok_or_else(|| {
                    Error::State(format!(
                        "no gradient for {}; run backward before updating sensitivities",
                        p.name
                    ))
                })?;
                ema.update(p.tensor.data(), g, self.beta_sens, self.beta_unc);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// `s(·)` of every element of adapter `i`'s factors as `(B, E, A)`.
    pub fn sensitivities(&self, i: usize) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let st = self.stats.get(i)?.as_ref()?;
        let all = |e: &Ema| (0..e.raw.len()).map(|k| e.s(k, self.mode)).collect();
        Some((all(&st.b), all(&st.e), all(&st.a)))
    }
}

/// `S_i = s(E_i) + mean_j s(B_ji) + mean_j s(A_ij)`.
///
/// `s_b` is `d1 × r` row-major and `s_a` is `r × d2`.
pub fn triplet_scores(s_b: &[f64], s_e: &[f64], s_a: &[f64], active: &[bool]) -> Vec<f64> {
    let r = s_e.len();
    let d1 = s_b.len() / r;
    let d2 = s_a.len() / r;
    (0..r)
        .map(|i| {
            if !active[i] {
                return f64::NEG_INFINITY;
            }
            let b: f64 = (0..d1).map(|j| s_b[j * r + i]).sum::<f64>() / d1 as f64;
            let a: f64 = s_a[i * d2..(i + 1) * d2].iter().sum::<f64>() / d2 as f64;
            s_e[i] + b + a
        })
        .collect()
}

/// Scores of every triplet, per adapter (empty for non-SVD adapters).
/// Pruned indices score `-∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub step: usize,
    pub scores: Vec<Vec<f64>>,
}

pub fn importance_scores<T: Real>(set: &AdapterSet<T>, est: &SensitivityEstimator) -> ImportanceState {
    let scores = set
        .adapters()
        .iter()
        .enumerate()
        .map(|(i, a)| match (a.as_adalora(), est.sensitivities(i)) {
            (Some(t), Some((b, e, av))) => triplet_scores(&b, &e, &av, &t.active),
            _ => Vec::new(),
        })
        .collect();
    ImportanceState {
        step: est.step(),
        scores,
    }
}

/// One deactivated singular value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub address: SublayerAddress,
    pub index: usize,
    pub score: f64,
    pub budget: usize,
}

/// Active triplets ordered for pruning: ascending score, then adapter
/// order, then index.
pub fn prune_order(importance: &ImportanceState) -> Vec<(usize, usize, f64)> {
    let mut cands: Vec<(usize, usize, f64)> = importance
        .scores
        .iter()
        .enumerate()
        .flat_map(|(a, s)| s.iter().enumerate().map(move |(i, &v)| (a, i, v)))
        .filter(|&(_, _, v)| v != f64::NEG_INFINITY)
        .collect();
    cands.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    cands
}

/// Deactivates the globally lowest-scored triplets until the total active
/// rank equals `budget`.
pub fn prune_to_budget<T: Real>(
    set: &mut AdapterSet<T>,
    importance: &ImportanceState,
    budget: i64,
    step: usize,
) -> Result<Vec<PruneEvent>> {
    if budget < 0 {
        return Err(Error::Config(format!("negative rank budget {budget}")));
    }
    let budget = budget as usize;
    let active = svd_active_total(set);
    if budget > active {
        warn!("budget {budget} exceeds active rank {active}; nothing to prune");
        return Ok(Vec::new());
    }
    let mut events = Vec::with_capacity(active - budget);
    for (a, i, score) in prune_order(importance).into_iter().take(active - budget) {
        let adapter = &mut set.adapters_mut()[a];
        let address = adapter.target();
        if let Some(t) = adapter.as_adalora_mut() {
            t.deactivate(i);
            events.push(PruneEvent {
                step,
                address,
                index: i,
                score,
                budget,
            });
        }
    }
    Ok(events)
}

/// Active rank summed over SVD-form adapters.
pub fn svd_active_total<T: Real>(set: &AdapterSet<T>) -> usize {
    set.adapters()
        .iter()
        .filter_map(Adapter::as_adalora)
        .map(|t| t.active_rank())
        .sum()
}

/// Sensitivity tracking plus scheduled pruning for one run.
#[derive(Clone, Debug)]
pub struct Allocator {
    pub estimator: SensitivityEstimator,
    pub schedule: BudgetSchedule,
    /// Prune every `interval` optimizer steps.
    pub interval: usize,
    pub events: Vec<PruneEvent>,
}

impl Allocator {
    pub fn new(estimator: SensitivityEstimator, schedule: BudgetSchedule, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("pruning interval must be positive".into()));
        }
        Ok(Self {
            estimator,
            schedule,
            interval,
            events: Vec::new(),
        })
    }

    /// Call once after every optimizer step (before gradients are zeroed);
    /// `step` counts completed optimizer steps from 1.
    pub fn step<T: Real>(&mut self, set: &mut AdapterSet<T>, step: usize) -> Result<Allocation> {
        let out = allocation_step(set, &mut self.estimator, &self.schedule, step, self.interval)?;
        self.events.extend(out.events.iter().cloned());
        Ok(out)
    }
}

/// Result of one allocation step.
#[derive(Clone, Debug, Default)]
pub struct Allocation {
    /// Scores used for pruning, present on pruning steps.
    pub importance: Option<ImportanceState>,
    pub events: Vec<PruneEvent>,
}

/// Updates sensitivities; every `interval` steps also scores and prunes to
/// `budget_at(step)`.
pub fn allocation_step<T: Real>(
    set: &mut AdapterSet<T>,
    est: &mut SensitivityEstimator,
    schedule: &BudgetSchedule,
    step: usize,
    interval: usize,
) -> Result<Allocation> {
    est.update(set)?;
    if interval == 0 || step % interval != 0 {
        return Ok(Allocation::default());
    }
    let importance = importance_scores(set, est);
    let events = prune_to_budget(set, &importance, schedule.budget_at(step) as i64, step)?;
    Ok(Allocation {
        importance: Some(importance),
        events,
    })
}

pub fn write_prune_log(mut w: impl Write, events: &[PruneEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("prune log", e))?;
    }
    Ok(())
}

pub fn read_prune_log(r: impl BufRead) -> Result<Vec<PruneEvent>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("prune log", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("prune log line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
