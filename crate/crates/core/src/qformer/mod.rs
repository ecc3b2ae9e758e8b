//! Miniature Q-Former: learnable queries, joint query/text self-attention,
//! cross-attention to image features on selected layers, and an FFN.

mod address;
mod config;
mod model;

pub use address::{Matrix, SublayerAddress, SublayerGroup};
pub use config::{odd_layers, QFormerConfig};
pub use model::{
    attention, linear_dims, parameter_layout, ForwardOutput, ModelInputs, ParamRole, ParamSpec,
    QFormer,
};

use crate::adapters::{AdapterSet, AdapterTargetSpec, FfnMatrices, TargetGroup};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Graph, Var};

/// Linear maps selected by `spec`, in layer-ascending order.
///
/// Per layer: self-attention `{q, v}`, cross-attention `{q, k, v, o}` (only on
/// cross-attention layers), FFN `{up, down}`.
pub fn enumerate_target_matrices(
    config: &QFormerConfig,
    spec: &AdapterTargetSpec,
) -> Vec<SublayerAddress> {
    let mut out = Vec::new();
    for layer in 1..=config.num_layers {
        let mut push = |group, m| out.push(SublayerAddress::unchecked(layer, group, m));
        if spec.contains(TargetGroup::SelfAttnQv) {
            push(SublayerGroup::SelfAttn, Matrix::Q);
            push(SublayerGroup::SelfAttn, Matrix::V);
        }
        if spec.contains(TargetGroup::CrossAttnQkvo) && config.has_cross_attention(layer) {
            for m in [Matrix::Q, Matrix::K, Matrix::V, Matrix::O] {
                push(SublayerGroup::CrossAttn, m);
            }
        }
        if spec.contains(TargetGroup::Ffn) {
            match spec.ffn_matrices() {
                FfnMatrices::Both => {
                    push(SublayerGroup::Ffn, Matrix::Up);
                    push(SublayerGroup::Ffn, Matrix::Down);
                }
                FfnMatrices::Up => push(SublayerGroup::Ffn, Matrix::Up),
                FfnMatrices::Down => push(SublayerGroup::Ffn, Matrix::Down),
            }
        }
    }
    out
}

/// Logits for a batch, one row per example (`batch × num_classes`).
pub fn batch_logits<T: Real>(
    g: &mut Graph<T>,
    model: &QFormer<T>,
    adapters: Option<&AdapterSet<T>>,
    batch: &[&ModelInputs<T>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let rows = batch
        .iter()
        .map(|x| model.logits(g, x, adapters))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

#[cfg(test)]
mod tests;
