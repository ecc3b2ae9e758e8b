use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Groups of linear maps that adapters can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetGroup {
    /// Self-attention `q` and `v`.
    SelfAttnQv,
    /// Cross-attention `q`, `k`, `v`, `o`.
    CrossAttnQkvo,
    /// Feed-forward projections.
    Ffn,
}

/// Which FFN projections an `Ffn` target covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnMatrices {
    #[default]
    Both,
    Up,
    Down,
}

/// Set of targeted sublayer groups. Named presets: `ffn`, `attn`,
/// `self-attn`, `cross-attn`, `all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterTargetSpec {
    groups: BTreeSet<TargetGroup>,
    ffn_matrices: FfnMatrices,
}

pub const PRESETS: [&str; 5] = ["ffn", "attn", "self-attn", "cross-attn", "all"];

impl AdapterTargetSpec {
    pub fn new(groups: impl IntoIterator<Item = TargetGroup>) -> Self {
        Self {
            groups: groups.into_iter().collect(),
            ffn_matrices: FfnMatrices::Both,
        }
    }

    pub fn all() -> Self {
        Self::new([
            TargetGroup::SelfAttnQv,
            TargetGroup::CrossAttnQkvo,
            TargetGroup::Ffn,
        ])
    }

    pub fn with_ffn_matrices(mut self, which: FfnMatrices) -> Self {
        self.ffn_matrices = which;
        self
    }

    pub fn contains(&self, group: TargetGroup) -> bool {
        self.groups.contains(&group)
    }

    pub fn groups(&self) -> &BTreeSet<TargetGroup> {
        &self.groups
    }

    pub fn ffn_matrices(&self) -> FfnMatrices {
        self.ffn_matrices
    }

    pub fn preset(name: &str) -> Result<Self> {
        use TargetGroup::*;
        let groups: &[TargetGroup] = match name {
            "ffn" => &[Ffn],
            "attn" => &[SelfAttnQv, CrossAttnQkvo],
            "self-attn" => &[SelfAttnQv],
            "cross-attn" => &[CrossAttnQkvo],
            "all" => &[SelfAttnQv, CrossAttnQkvo, Ffn],
            other => {
                return Err(Error::Config(format!(
                    "unknown adapter target preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(Self::new(groups.iter().copied()))
    }

    /// Preset name when the group set matches one.
    pub fn preset_name(&self) -> Option<&'static str> {
        PRESETS
            .iter()
            .find(|p| Self::preset(p).is_ok_and(|s| s.groups == self.groups))
            .copied()
    }
}

impl FromStr for AdapterTargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s)
    }
}

impl fmt::Display for AdapterTargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(p) => f.write_str(p),
            None => write!(f, "{:?}", self.groups),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        use TargetGroup::*;
        assert_eq!(
            AdapterTargetSpec::preset("attn").unwrap().groups,
            [SelfAttnQv, CrossAttnQkvo].into_iter().collect()
        );
        for p in PRESETS {
            let spec: AdapterTargetSpec = p.parse().unwrap();
            assert_eq!(spec.to_string(), p);
        }
        assert!(AdapterTargetSpec::preset("mlp").is_err());
    }
}
