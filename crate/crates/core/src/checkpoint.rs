//! JSON checkpoints of a model and its adapters.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {
//!   "format": "qformer-peft-checkpoint", "version": 1,
//!   "config": { ...model config... },
//!   "tensors": [ { "name": "L03.cross_attn.k.weight", "shape": [d, k],
//!                  "trainable": false, "data": [row-major values] }, ... ],
//!   "adapters": null | { "kind": "lora" | "adalora", "adapters": [
//!       { "target": "L03.cross_attn.k", "rank": r, "scaling": 1.0 | null,
//!         "mask": [true, ...] | null,
//!         "factors": [ {"name": "b", ...}, {"name": "e", ...}, {"name": "a", ...} ] } ] }
//! }
//! ```
//!
//! Values are written as `f64` with shortest round-trip formatting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{build_adapter, Adapter, AdapterKind, AdapterSet};
use crate::error::{Error, Result};
use crate::params::Param;
use crate::qformer::{linear_dims, QFormer, QFormerConfig, SublayerAddress};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FORMAT: &str = "qformer-peft-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

impl TensorRecord {
    fn capture<T: Real>(name: &str, p: &Param<T>) -> Self {
        Self {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            data: p.tensor.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn restore_into<T: Real>(&self, p: &mut Param<T>) -> Result<()> {
        if self.shape != p.tensor.shape() {
            return Err(Error::Shape(format!(
                "{}: checkpoint shape {:?}, model expects {:?}",
                self.name,
                self.shape,
                p.tensor.shape()
            )));
        }
        let data = self.data.iter().map(|&v| T::lit(v)).collect();
        p.tensor = Tensor::new(self.shape.clone(), data)?;
        p.trainable = self.trainable;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub target: SublayerAddress,
    pub rank: usize,
    pub scaling: Option<f64>,
    /// Active singular values (SVD form only).
    pub mask: Option<Vec<bool>>,
    pub factors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSetRecord {
    pub kind: AdapterKind,
    pub adapters: Vec<AdapterRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: QFormerConfig,
    pub tensors: Vec<TensorRecord>,
    pub adapters: Option<AdapterSetRecord>,
}

fn slot_names(kind: AdapterKind) -> &'static [&'static str] {
    match kind {
        AdapterKind::Lora => &["b", "a"],
        AdapterKind::AdaLora => &["b", "e", "a"],
    }
}

impl Checkpoint {
    pub fn capture<T: Real>(model: &QFormer<T>, adapters: Option<&AdapterSet<T>>) -> Self {
        let tensors = model
            .params()
            .iter()
            .chain(model.head_params())
            .map(|p| TensorRecord::capture(&p.name, p))
            .collect();
        let adapters = adapters.map(|set| AdapterSetRecord {
            kind: set.kind(),
            adapters: set
                .adapters()
                .iter()
                .map(|a| AdapterRecord {
                    target: a.target(),
                    rank: a.rank(),
                    scaling: match a {
                        Adapter::Lora(l) => Some(l.scaling.as_f64()),
                        Adapter::AdaLora(_) => None,
                    },
                    mask: a.as_adalora().map(|t| t.active.clone()),
                    factors: slot_names(a.kind())
                        .iter()
                        .zip(a.factors())
                        .map(|(n, p)| TensorRecord::capture(n, p))
                        .collect(),
                })
                .collect(),
        });
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            tensors,
            adapters,
        }
    }

    pub fn restore<T: Real>(&self) -> Result<(QFormer<T>, Option<AdapterSet<T>>)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = QFormer::<T>::new(self.config.clone(), 0)?;
        let expected = model.params().len() + model.head_params().len();
        if self.tensors.len() != expected {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, model has {expected}",
                self.tensors.len()
            )));
        }
        for rec in &self.tensors {
            let p = model
                .param_by_name_mut(&rec.name)
                .ok_or_else(|| Error::Parse(format!("unknown tensor {}", rec.name)))?;
            rec.restore_into(p)?;
        }
        let adapters = match &self.adapters {
            None => None,
            Some(set_rec) => Some(restore_adapters(&self.config, set_rec)?),
        };
        Ok((model, adapters))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn restore_adapters<T: Real>(config: &QFormerConfig, rec: &AdapterSetRecord) -> Result<AdapterSet<T>> {
    let mut set = AdapterSet::new(rec.kind);
    for a in &rec.adapters {
        a.target.validate(config)?;
        let mut adapter = build_adapter::<T>(rec.kind, a.target, linear_dims(config, a.target), a.rank, 0)?;
        match (&mut adapter, &a.mask) {
            (Adapter::AdaLora(t), Some(mask)) => {
                if mask.len() != a.rank {
                    return Err(Error::Parse(format!("{}: mask length {}", a.target, mask.len())));
                }
                for (i, _) in mask.iter().enumerate().filter(|(_, m)| !**m) {
                    t.deactivate(i);
                }
            }
            (Adapter::Lora(l), None) => l.scaling = T::lit(a.scaling.unwrap_or(1.0)),
            _ => return Err(Error::Parse(format!("{}: mask does not match adapter kind", a.target))),
        }
        let names = slot_names(rec.kind);
        if a.factors.len() != names.len() {
            return Err(Error::Parse(format!("{}: expected {} factors", a.target, names.len())));
        }
        for ((f, p), name) in a.factors.iter().zip(adapter.factors_mut()).zip(names) {
            if f.name != *name {
                return Err(Error::Parse(format!("{}: expected factor {name}, found {}", a.target, f.name)));
            }
            f.restore_into(p)?;
        }
        set.insert(adapter)?;
    }
    Ok(set)
}
