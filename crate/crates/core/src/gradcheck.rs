//! Finite-difference verification of the model's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{AdapterKind, AdapterSet, AdapterTargetSpec};
use crate::error::Result;
use crate::params::ParamKey;
use crate::qformer::{batch_logits, ModelInputs, QFormer, QFormerConfig};
use crate::tensor::{max_relative_error, Graph};

/// Relative-error floor in the denominator.
pub const FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Elements whose analytic and numeric derivatives are both below this are
/// treated as zero rather than compared relatively. Attention key biases
/// shift every score in a row equally, so their true gradient is 0 and both
/// sides are pure roundoff (numeric about `ε·|loss|/h`).
pub const ZERO_GRAD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// Over elements with a resolvable gradient.
    pub max_rel_err: f64,
    /// Elements where both derivatives fall under [`ZERO_GRAD_TOLERANCE`].
    pub zero_elements: usize,
}

impl ParamCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tolerance))
    }
}

/// Cross-entropy over `batch`, plus the orthogonality penalty times
/// `orth_coef` when adapters are SVD-form.
pub fn loss_value(
    model: &QFormer<f64>,
    adapters: Option<&AdapterSet<f64>>,
    batch: &[(ModelInputs<f64>, usize)],
    orth_coef: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = build_loss(&mut g, model, adapters, batch, orth_coef)?;
    Ok(g.scalar_value(loss))
}

fn build_loss(
    g: &mut Graph<f64>,
    model: &QFormer<f64>,
    adapters: Option<&AdapterSet<f64>>,
    batch: &[(ModelInputs<f64>, usize)],
    orth_coef: f64,
) -> Result<crate::tensor::Var> {
    let inputs: Vec<_> = batch.iter().map(|(x, _)| x).collect();
    let labels: Vec<_> = batch.iter().map(|(_, y)| *y).collect();
    let logits = batch_logits(g, model, adapters, &inputs)?;
    let mut loss = g.cross_entropy(logits, &labels)?;
    if orth_coef != 0.0 {
        if let Some(pen) = adapters.map(|s| s.orthogonality_penalty(g)).transpose()?.flatten() {
            let pen = g.scale(pen, orth_coef);
            loss = g.add(loss, pen)?;
        }
    }
    Ok(loss)
}

/// Compares backward() against central differences for every trainable
/// tensor of `model` and `adapters`.
pub fn check_model(
    model: &QFormer<f64>,
    adapters: Option<&AdapterSet<f64>>,
    batch: &[(ModelInputs<f64>, usize)],
    orth_coef: f64,
) -> Result<GradcheckReport> {
    let mut g = Graph::new();
    let loss = build_loss(&mut g, model, adapters, batch, orth_coef)?;
    let grads = g.backward(loss)?;

    let mut keys: Vec<(ParamKey, String)> = model
        .keyed_params()
        .filter(|(_, p)| p.trainable)
        .map(|(k, p)| (k, p.name.clone()))
        .collect();
    if let Some(set) = adapters {
        keys.extend(
            set.keyed_params()
                .filter(|(_, p)| p.trainable)
                .map(|(k, p)| (k, p.name.clone())),
        );
    }

    let mut model = model.clone();
    let mut set = adapters.cloned();
    let mut params = Vec::with_capacity(keys.len());
    for (key, name) in keys {
        let analytic = match g.binding(key).and_then(|v| grads.get(v)) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; tensor_of(&mut model, &mut set, key).numel()],
        };
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = tensor_of(&mut model, &mut set, key).data()[i];
            tensor_of(&mut model, &mut set, key).data_mut()[i] = orig + STEP;
            let plus = loss_value(&model, set.as_ref(), batch, orth_coef)?;
            tensor_of(&mut model, &mut set, key).data_mut()[i] = orig - STEP;
            let minus = loss_value(&model, set.as_ref(), batch, orth_coef)?;
            tensor_of(&mut model, &mut set, key).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        let (a, n_): (Vec<f64>, Vec<f64>) = analytic
            .iter()
            .zip(&numeric)
            .filter(|(a, n)| a.abs().max(n.abs()) >= ZERO_GRAD_TOLERANCE)
            .unzip();
        params.push(ParamCheck {
            name,
            numel: n,
            zero_elements: n - a.len(),
            max_rel_err: max_relative_error(&a, &n_, FLOOR),
        });
    }
    Ok(GradcheckReport {
        params,
        tolerance: TOLERANCE,
    })
}

fn tensor_of<'a>(
    model: &'a mut QFormer<f64>,
    set: &'a mut Option<AdapterSet<f64>>,
    key: ParamKey,
) -> &'a mut crate::tensor::Tensor<f64> {
    let p = match key {
        ParamKey::Adapter(_) => set.as_mut().and_then(|s| s.param_mut(key)),
        _ => model.param_mut(key),
    };
    &mut p.expect("key enumerated from this model").tensor
}

/// Checks every trainable parameter of `config` with LoRA and with SVD-form
/// adapters on all targets. Weights are drawn at a larger scale than usual
/// and adapter factors are randomized so no gradient is trivially zero.
pub fn suite(config: &QFormerConfig, rank: usize, seed: u64) -> Result<Vec<(AdapterKind, GradcheckReport)>> {
    let mut cfg = config.clone();
    cfg.init_std = cfg.init_std.max(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in [AdapterKind::Lora, AdapterKind::AdaLora] {
        let mut model = QFormer::<f64>::new(cfg.clone(), rng.random())?;
        let mut set = AdapterSet::attach(&mut model, &AdapterTargetSpec::all(), kind, rank, rng.random())?;
        for key in set.keys() {
            for v in set.param_mut(key).expect("own key").tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let batch = (0..2)
            .map(|i| {
                let n_img = 1 + i;
                let feats = (0..n_img * cfg.image_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let text = (0..cfg.max_text_len.min(2)).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
                Ok((ModelInputs::new(n_img, cfg.image_dim, feats, text)?, i % cfg.num_classes))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((kind, check_model(&model, Some(&set), &batch, 0.1)?));
    }
    Ok(out)
}
