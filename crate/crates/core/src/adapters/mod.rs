//! LoRA (`ΔW = BA`) and AdaLoRA (`ΔW = B·diag(E)·A`) parametrizations for
//! any addressed linear map of the Q-Former.
//!
//! Weights follow the `out × in` convention: a base map computes
//! `x·Wᵀ + bias`, `B` is `out × r` and `A` is `r × in`.

mod count;
mod spec;

pub use count::{
    adapter_size, brute_force_count, closed_form_base_count, count_params, enumerated_count,
    AdapterPlan, ParamCount,
};
pub use spec::{AdapterTargetSpec, FfnMatrices, TargetGroup, PRESETS};

use std::collections::HashMap;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamKey};
use crate::qformer::{enumerate_target_matrices, linear_dims, QFormer, SublayerAddress};
use crate::scalar::Real;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Standard deviation of the Gaussian adapter factor initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    #[serde(rename = "adalora")]
    AdaLora,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::AdaLora => "adalora",
        }
    }

    /// Largest admissible rank for a `d_out × d_in` target.
    ///
    /// LoRA keeps `r ≤ min(d, k) / 2`; an SVD-form triplet can hold at most
    /// `min(d1, d2)` singular values.
    pub fn max_rank(self, d_out: usize, d_in: usize) -> usize {
        match self {
            Self::Lora => d_out.min(d_in) / 2,
            Self::AdaLora => d_out.min(d_in),
        }
    }

    fn warn_rank(self, d_out: usize, d_in: usize) -> usize {
        match self {
            Self::Lora => d_out.min(d_in) / 4,
            Self::AdaLora => d_out.min(d_in) / 2,
        }
    }
}

/// `x·Wᵀ + bias`.
pub fn base_linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = g.matmul_t(x, w)?;
    g.add_bias(y, bias)
}

/// `x·Wᵀ + bias + scaling·(x·Aᵀ)·Bᵀ`, never materializing `BA`.
pub fn lora_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Var,
    b: Var,
    a: Var,
    scaling: T,
) -> Result<Var> {
    let base = base_linear(g, x, w, bias)?;
    let down = g.matmul_t(x, a)?;
    let mut delta = g.matmul_t(down, b)?;
    if scaling != T::one() {
        delta = g.scale(delta, scaling);
    }
    g.add(base, delta)
}

/// `x·Wᵀ + bias + (x·Aᵀ)·diag(E)·Bᵀ`.
pub fn adalora_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Var,
    b: Var,
    e: Var,
    a: Var,
) -> Result<Var> {
    let base = base_linear(g, x, w, bias)?;
    let down = g.matmul_t(x, a)?;
    let gated = g.mul_cols(down, e)?;
    let delta = g.matmul_t(gated, b)?;
    g.add(base, delta)
}

/// Low-rank update `ΔW = scaling · B·A`.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    pub target: SublayerAddress,
    /// `d_out × r`, zero at initialization.
    pub b: Param<T>,
    /// `r × d_in`.
    pub a: Param<T>,
    pub rank: usize,
    pub scaling: T,
}

/// SVD-form update `ΔW = B·diag(E)·A` with prunable singular values.
#[derive(Clone, Debug)]
pub struct AdaLoraAdapter<T> {
    pub target: SublayerAddress,
    /// `d1 × r_init` (left singular vectors).
    pub b: Param<T>,
    /// `r_init` singular values.
    pub e: Param<T>,
    /// `r_init × d2` (right singular vectors).
    pub a: Param<T>,
    pub active: Vec<bool>,
    pub r_init: usize,
}

impl<T: Real> AdaLoraAdapter<T> {
    pub fn d1(&self) -> usize {
        self.b.tensor.shape()[0]
    }

    pub fn d2(&self) -> usize {
        self.a.tensor.shape()[1]
    }

    pub fn active_rank(&self) -> usize {
        self.active.iter().filter(|&&m| m).count()
    }

    /// Prunes triplet `i`: zeroes `E_i`, clears its mask bit and freezes the
    /// matching column of `B` and row of `A`. Returns false if already pruned.
    pub fn deactivate(&mut self, i: usize) -> bool {
        if !self.active[i] {
            return false;
        }
        self.active[i] = false;
        self.e.tensor.data_mut()[i] = T::zero();
        let r = self.r_init;
        let (d1, d2) = (self.d1(), self.d2());
        self.e.update_mask.get_or_insert_with(|| vec![true; r])[i] = false;
        let bm = self.b.update_mask.get_or_insert_with(|| vec![true; d1 * r]);
        for row in 0..d1 {
            bm[row * r + i] = false;
        }
        let am = self.a.update_mask.get_or_insert_with(|| vec![true; r * d2]);
        for col in 0..d2 {
            am[i * d2 + col] = false;
        }
        true
    }
}

/// One adapter of either kind.
#[derive(Clone, Debug)]
pub enum Adapter<T> {
    Lora(LoraAdapter<T>),
    AdaLora(AdaLoraAdapter<T>),
}

impl<T: Real> Adapter<T> {
    pub fn target(&self) -> SublayerAddress {
        match self {
            Self::Lora(a) => a.target,
            Self::AdaLora(a) => a.target,
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Self::Lora(_) => AdapterKind::Lora,
            Self::AdaLora(_) => AdapterKind::AdaLora,
        }
    }

    /// Configured rank (`r` for LoRA, `r_init` for AdaLoRA).
    pub fn rank(&self) -> usize {
        match self {
            Self::Lora(a) => a.rank,
            Self::AdaLora(a) => a.r_init,
        }
    }

    pub fn active_rank(&self) -> usize {
        match self {
            Self::Lora(a) => a.rank,
            Self::AdaLora(a) => a.active_rank(),
        }
    }

    /// Factor tensors in serialization order (`B, A` or `B, E, A`).
    pub fn factors(&self) -> Vec<&Param<T>> {
        match self {
            Self::Lora(a) => vec![&a.b, &a.a],
            Self::AdaLora(a) => vec![&a.b, &a.e, &a.a],
        }
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Self::Lora(a) => vec![&mut a.b, &mut a.a],
            Self::AdaLora(a) => vec![&mut a.b, &mut a.e, &mut a.a],
        }
    }

    fn factor_mut(&mut self, slot: usize) -> Option<&mut Param<T>> {
        match (self, slot) {
            (Self::Lora(a), 0) => Some(&mut a.b),
            (Self::Lora(a), 1) => Some(&mut a.a),
            (Self::AdaLora(a), 0) => Some(&mut a.b),
            (Self::AdaLora(a), 1) => Some(&mut a.e),
            (Self::AdaLora(a), 2) => Some(&mut a.a),
            _ => None,
        }
    }

    pub fn as_adalora(&self) -> Option<&AdaLoraAdapter<T>> {
        match self {
            Self::AdaLora(a) => Some(a),
            Self::Lora(_) => None,
        }
    }

    pub fn as_adalora_mut(&mut self) -> Option<&mut AdaLoraAdapter<T>> {
        match self {
            Self::AdaLora(a) => Some(a),
            Self::Lora(_) => None,
        }
    }

    /// Dense update `ΔW` (`d_out × d_in`).
    pub fn delta(&self) -> Result<Tensor<T>> {
        match self {
            Self::Lora(a) => {
                let mut ba = a.b.tensor.matmul(&a.a.tensor)?;
                for v in ba.data_mut() {
                    *v = *v * a.scaling;
                }
                Ok(ba)
            }
            Self::AdaLora(a) => {
                let (d1, r) = a.b.tensor.dims2()?;
                let e = a.e.tensor.data();
                let scaled_b =
                    Tensor::from_fn(&[d1, r], |i| a.b.tensor.data()[i] * e[i % r]);
                scaled_b.matmul(&a.a.tensor)
            }
        }
    }

    /// `W + ΔW` as a new tensor; `w` is left untouched.
    pub fn merge(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let delta = self.delta()?;
        if delta.shape() != w.shape() {
            return Err(Error::Shape(format!(
                "adapter update {:?} does not match weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        let data = w.data().iter().zip(delta.data()).map(|(x, d)| *x + *d).collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

fn gaussian<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Fresh adapter for a `d_out × d_in` target.
///
/// LoRA: `A ~ N(0, 0.02²)`, `B = 0`. AdaLoRA: `B, A ~ N(0, 0.02²)`, `E = 0`,
/// every triplet active. Either way the adapted map starts equal to the base.
pub fn init_adapter<T: Real>(
    kind: AdapterKind,
    target: SublayerAddress,
    dims: (usize, usize),
    rank: usize,
    seed: u64,
) -> Result<Adapter<T>> {
    if rank > kind.warn_rank(dims.0, dims.1) {
        warn!(
            "{} rank {rank} on {target} ({}×{}) is not small relative to the matrix",
            kind.as_str(),
            dims.0,
            dims.1
        );
    }
    build_adapter(kind, target, dims, rank, seed)
}

pub(crate) fn build_adapter<T: Real>(
    kind: AdapterKind,
    target: SublayerAddress,
    (d_out, d_in): (usize, usize),
    rank: usize,
    seed: u64,
) -> Result<Adapter<T>> {
    if rank == 0 {
        return Err(Error::Config(format!("rank must be positive for {target}")));
    }
    let max = kind.max_rank(d_out, d_in);
    if rank > max {
        return Err(Error::Config(format!(
            "{} rank {rank} too large for {target} ({d_out}×{d_in}, max {max})",
            kind.as_str()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |f: &str| format!("{target}.{}.{f}", kind.as_str());
    Ok(match kind {
        AdapterKind::Lora => Adapter::Lora(LoraAdapter {
            target,
            a: Param::new(name("A"), gaussian(&[rank, d_in], &mut rng), true),
            b: Param::new(name("B"), Tensor::zeros(&[d_out, rank]), true),
            rank,
            scaling: T::one(),
        }),
        AdapterKind::AdaLora => Adapter::AdaLora(AdaLoraAdapter {
            target,
            b: Param::new(name("B"), gaussian(&[d_out, rank], &mut rng), true),
            e: Param::new(name("E"), Tensor::zeros(&[rank]), true),
            a: Param::new(name("A"), gaussian(&[rank, d_in], &mut rng), true),
            active: vec![true; rank],
            r_init: rank,
        }),
    })
}

/// Adapters attached to one model, in enumeration (serialization) order.
#[derive(Clone, Debug)]
pub struct AdapterSet<T> {
    kind: AdapterKind,
    adapters: Vec<Adapter<T>>,
    index: HashMap<SublayerAddress, usize>,
}

/// Factor slots per adapter in the [`ParamKey::Adapter`] numbering.
const SLOTS: usize = 3;

fn adapter_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<T: Real> AdapterSet<T> {
    pub fn new(kind: AdapterKind) -> Self {
        Self {
            kind,
            adapters: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Attaches one adapter per enumerated target and freezes the base model.
    pub fn attach(
        model: &mut QFormer<T>,
        spec: &AdapterTargetSpec,
        kind: AdapterKind,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut set = Self::new(kind);
        set.add_targets(model, spec, rank, seed)?;
        Ok(set)
    }

    /// Adds adapters for every target of `spec`; errors if any target
    /// already has one.
    pub fn add_targets(
        &mut self,
        model: &mut QFormer<T>,
        spec: &AdapterTargetSpec,
        rank: usize,
        seed: u64,
    ) -> Result<()> {
        let targets = enumerate_target_matrices(model.config(), spec);
        let mut fresh = Vec::with_capacity(targets.len());
        let mut large = Vec::new();
        for addr in targets {
            if self.index.contains_key(&addr) {
                return Err(Error::Config(format!("{addr} already has an adapter")));
            }
            let dims = linear_dims(model.config(), addr);
            if rank > self.kind.warn_rank(dims.0, dims.1) {
                large.push(addr);
            }
            let i = self.adapters.len() + fresh.len();
            fresh.push(build_adapter(self.kind, addr, dims, rank, adapter_seed(seed, i))?);
        }
        if let Some(first) = large.first() {
            warn!(
                "{} rank {rank} is not small relative to {} of {} targets (first: {first})",
                self.kind.as_str(),
                large.len(),
                fresh.len()
            );
        }
        for a in fresh {
            self.insert(a)?;
        }
        model.set_base_trainable(false);
        Ok(())
    }

    pub fn insert(&mut self, adapter: Adapter<T>) -> Result<()> {
        if adapter.kind() != self.kind {
            return Err(Error::Config(format!(
                "cannot mix {} adapter into a {} set",
                adapter.kind().as_str(),
                self.kind.as_str()
            )));
        }
        let addr = adapter.target();
        if self.index.contains_key(&addr) {
            return Err(Error::Config(format!("{addr} already has an adapter")));
        }
        self.index.insert(addr, self.adapters.len());
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[Adapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter<T>] {
        &mut self.adapters
    }

    pub fn get(&self, addr: SublayerAddress) -> Option<usize> {
        self.index.get(&addr).copied()
    }

    pub fn adapter(&self, i: usize) -> &Adapter<T> {
        &self.adapters[i]
    }

    /// Sets the LoRA scaling factor on every LoRA adapter.
    pub fn set_scaling(&mut self, scaling: T) {
        for a in &mut self.adapters {
            if let Adapter::Lora(l) = a {
                l.scaling = scaling;
            }
        }
    }

    pub fn total_active_rank(&self) -> usize {
        self.adapters.iter().map(Adapter::active_rank).sum()
    }

    pub fn key(adapter: usize, slot: usize) -> ParamKey {
        ParamKey::Adapter(adapter * SLOTS + slot)
    }

    pub fn keyed_params(&self) -> impl Iterator<Item = (ParamKey, &Param<T>)> {
        self.adapters.iter().enumerate().flat_map(|(i, a)| {
            a.factors()
                .into_iter()
                .enumerate()
                .map(move |(s, p)| (Self::key(i, s), p))
        })
    }

    pub fn keyed_params_mut(&mut self) -> impl Iterator<Item = (ParamKey, &mut Param<T>)> {
        self.adapters.iter_mut().enumerate().flat_map(|(i, a)| {
            a.factors_mut()
                .into_iter()
                .enumerate()
                .map(move |(s, p)| (Self::key(i, s), p))
        })
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Param<T>> {
        match key {
            ParamKey::Adapter(k) => self.adapters.get_mut(k / SLOTS)?.factor_mut(k % SLOTS),
            _ => None,
        }
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        self.keyed_params().map(|(k, _)| k).collect()
    }

    /// Adapted linear map for adapter `i`, binding its factors on `g`.
    pub fn adapted_linear(
        &self,
        g: &mut Graph<T>,
        i: usize,
        x: Var,
        w: Var,
        bias: Var,
    ) -> Result<Var> {
        let bind = |g: &mut Graph<T>, slot: usize, p: &Param<T>| {
            g.bind(Self::key(i, slot), &p.tensor, p.trainable)
        };
        match &self.adapters[i] {
            Adapter::Lora(a) => {
                let b = bind(g, 0, &a.b);
                let av = bind(g, 1, &a.a);
                lora_forward(g, x, w, bias, b, av, a.scaling)
            }
            Adapter::AdaLora(a) => {
                let b = bind(g, 0, &a.b);
                let e = bind(g, 1, &a.e);
                let av = bind(g, 2, &a.a);
                adalora_forward(g, x, w, bias, b, e, av)
            }
        }
    }

    /// Mean over AdaLoRA adapters of `‖BᵀB − I‖² + ‖AAᵀ − I‖²`.
    /// `None` for LoRA sets.
    pub fn orthogonality_penalty(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        let mut terms = Vec::new();
        for (i, adapter) in self.adapters.iter().enumerate() {
            let Adapter::AdaLora(a) = adapter else {
                continue;
            };
            let eye = g.constant(&Tensor::eye(a.r_init));
            let b = g.bind(Self::key(i, 0), &a.b.tensor, a.b.trainable);
            let av = g.bind(Self::key(i, 2), &a.a.tensor, a.a.trainable);
            let bt = g.transpose(b)?;
            let btb = g.matmul(bt, b)?;
            let aat = g.matmul_t(av, av)?;
            for cov in [btb, aat] {
                let diff = g.sub(cov, eye)?;
                let sq = g.mul(diff, diff)?;
                terms.push(g.sum(sq));
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let n = T::from_usize_lossy(terms.len() / 2);
        Ok(Some(g.scale(total, T::one() / n)))
    }

    /// Adds gradients of every bound, trainable adapter factor.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for &(key, var) in g.bound_params() {
            if let (Some(p), Some(gr)) = (self.param_mut(key), grads.get(var)) {
                if p.trainable {
                    p.tensor.accumulate_grad(gr)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.keyed_params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Trainable adapter elements (full factor sizes, pruned or not).
    pub fn trainable_count(&self) -> usize {
        self.keyed_params().map(|(_, p)| p.trainable_count()).sum()
    }

    /// Copy of `model` whose adapted weights are replaced by `W + ΔW`.
    pub fn merge_into(&self, model: &QFormer<T>) -> Result<QFormer<T>> {
        let mut merged = model.clone();
        for a in &self.adapters {
            let w = model.linear_weight(a.target())?;
            merged.set_linear_weight(a.target(), a.merge(w)?)?;
        }
        Ok(merged)
    }
}
