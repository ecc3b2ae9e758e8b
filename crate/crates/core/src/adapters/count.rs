use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_adapter, AdapterKind, AdapterSet, AdapterTargetSpec};
use crate::error::Result;
use crate::qformer::{enumerate_target_matrices, linear_dims, parameter_layout, QFormer, QFormerConfig, SublayerGroup};
use crate::scalar::Real;

/// Adapter configuration to count without instantiating a model.
#[derive(Clone, Debug)]
pub struct AdapterPlan {
    pub kind: AdapterKind,
    pub spec: AdapterTargetSpec,
    pub rank: usize,
}

/// Trainable-parameter accounting against full Q-Former fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Q-Former base elements, query embeddings included, head excluded.
    pub base_total: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// Trainable adapter elements per sublayer group (empty without adapters).
    pub by_group: BTreeMap<SublayerGroup, usize>,
}

impl ParamCount {
    fn new(base_total: usize, trainable: usize, by_group: BTreeMap<SublayerGroup, usize>) -> Self {
        Self {
            base_total,
            trainable,
            fraction: trainable as f64 / base_total as f64,
            by_group,
        }
    }
}

/// Base element count from the architecture formula alone.
pub fn closed_form_base_count(c: &QFormerConfig) -> usize {
    let d = c.hidden_dim;
    let linear = |out: usize, inp: usize| out * inp + out;
    let norm = 2 * d;
    let self_attn = 4 * linear(d, d) + norm;
    let cross_attn = 2 * linear(d, d) + 2 * linear(d, c.image_dim) + norm;
    let ffn = linear(c.ffn_dim, d) + linear(d, c.ffn_dim) + norm;
    let n_cross = (1..=c.num_layers).filter(|&l| c.has_cross_attention(l)).count();
    let embeddings = (c.num_queries + c.vocab_size + c.max_text_len.max(1)) * d + norm;
    embeddings + c.num_layers * (self_attn + ffn) + n_cross * cross_attn
}

/// Per-target element count: `r(d+k)` for LoRA, `r(d1+d2) + r` for AdaLoRA.
pub fn adapter_size(kind: AdapterKind, (d_out, d_in): (usize, usize), rank: usize) -> usize {
    match kind {
        AdapterKind::Lora => rank * (d_out + d_in),
        AdapterKind::AdaLora => rank * (d_out + d_in) + rank,
    }
}

/// Closed-form count. Without a plan the whole base trains (fraction 1).
pub fn count_params(config: &QFormerConfig, plan: Option<&AdapterPlan>) -> ParamCount {
    let base = closed_form_base_count(config);
    let Some(plan) = plan else {
        return ParamCount::new(base, base, BTreeMap::new());
    };
    let mut by_group = BTreeMap::new();
    for addr in enumerate_target_matrices(config, &plan.spec) {
        let n = adapter_size(plan.kind, linear_dims(config, addr), plan.rank);
        *by_group.entry(addr.group()).or_insert(0) += n;
    }
    ParamCount::new(base, by_group.values().sum(), by_group)
}

/// Count by walking the tensors of an instantiated model and adapter set,
/// honoring each tensor's trainable flag. The classification head is
/// excluded.
pub fn brute_force_count<T: Real>(model: &QFormer<T>, set: Option<&AdapterSet<T>>) -> ParamCount {
    let base: usize = model.params().iter().map(|p| p.tensor.numel()).sum();
    let base_trainable: usize = model.params().iter().map(|p| p.trainable_count()).sum();
    let mut by_group = BTreeMap::new();
    if let Some(set) = set {
        for a in set.adapters() {
            let n: usize = a.factors().iter().map(|p| p.trainable_count()).sum();
            *by_group.entry(a.target().group()).or_insert(0) += n;
        }
    }
    let trainable = base_trainable + by_group.values().sum::<usize>();
    ParamCount::new(base, trainable, by_group)
}

/// Enumeration without allocating base weights: sums the parameter layout
/// and instantiates each planned adapter. Suitable at full scale.
pub fn enumerated_count(config: &QFormerConfig, plan: &AdapterPlan) -> Result<ParamCount> {
    let base = parameter_layout(config).iter().map(|s| s.numel()).sum();
    let mut by_group = BTreeMap::new();
    for addr in enumerate_target_matrices(config, &plan.spec) {
        let a = build_adapter::<f32>(plan.kind, addr, linear_dims(config, addr), plan.rank, 0)?;
        let n: usize = a.factors().iter().map(|p| p.tensor.numel()).sum();
        *by_group.entry(addr.group()).or_insert(0) += n;
    }
    Ok(ParamCount::new(base, by_group.values().sum(), by_group))
}
