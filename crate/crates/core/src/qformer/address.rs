use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::QFormerConfig;
use crate::error::{Error, Result};

/// Sublayer family within one Q-Former layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SublayerGroup {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl SublayerGroup {
    pub const ALL: [SublayerGroup; 3] = [Self::SelfAttn, Self::CrossAttn, Self::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelfAttn => "self_attn",
            Self::CrossAttn => "cross_attn",
            Self::Ffn => "ffn",
        }
    }

    pub fn matrices(self) -> &'static [Matrix] {
        match self {
            Self::SelfAttn | Self::CrossAttn => &[Matrix::Q, Matrix::K, Matrix::V, Matrix::O],
            Self::Ffn => &[Matrix::Up, Matrix::Down],
        }
    }
}

/// One linear map inside a sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Matrix {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Matrix {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

/// Address of one adaptable linear map, e.g. `L03.cross_attn.k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SublayerAddress {
    layer: usize,
    group: SublayerGroup,
    matrix: Matrix,
}

impl SublayerAddress {
    /// Validated constructor; cross-attention addresses must name a layer
    /// that actually has cross-attention.
    pub fn new(
        config: &QFormerConfig,
        layer: usize,
        group: SublayerGroup,
        matrix: Matrix,
    ) -> Result<Self> {
        if layer == 0 || layer > config.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 1..={}",
                config.num_layers
            )));
        }
        if !group.matrices().contains(&matrix) {
            return Err(Error::Config(format!(
                "{} has no {} matrix",
                group.as_str(),
                matrix.as_str()
            )));
        }
        if group == SublayerGroup::CrossAttn && !config.has_cross_attention(layer) {
            return Err(Error::Config(format!("layer {layer} has no cross-attention")));
        }
        Ok(Self {
            layer,
            group,
            matrix,
        })
    }

    pub(crate) fn unchecked(layer: usize, group: SublayerGroup, matrix: Matrix) -> Self {
        Self {
            layer,
            group,
            matrix,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn group(&self) -> SublayerGroup {
        self.group
    }

    pub fn matrix(&self) -> Matrix {
        self.matrix
    }

    /// Checks the address against a model configuration.
    pub fn validate(&self, config: &QFormerConfig) -> Result<()> {
        Self::new(config, self.layer, self.group, self.matrix).map(|_| ())
    }
}

impl fmt::Display for SublayerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L{:02}.{}.{}",
            self.layer,
            self.group.as_str(),
            self.matrix.as_str()
        )
    }
}

impl FromStr for SublayerAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed sublayer address {s:?}"));
        let mut parts = s.split('.');
        let layer = parts
            .next()
            .and_then(|p| p.strip_prefix('L'))
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(bad)?;
        let group = match parts.next() {
            Some("self_attn") => SublayerGroup::SelfAttn,
            Some("cross_attn") => SublayerGroup::CrossAttn,
            Some("ffn") => SublayerGroup::Ffn,
            _ => return Err(bad()),
        };
        let matrix = match parts.next() {
            Some("q") => Matrix::Q,
            Some("k") => Matrix::K,
            Some("v") => Matrix::V,
            Some("o") => Matrix::O,
            Some("up") => Matrix::Up,
            Some("down") => Matrix::Down,
            _ => return Err(bad()),
        };
        if parts.next().is_some() || layer == 0 || !group.matrices().contains(&matrix) {
            return Err(bad());
        }
        Ok(Self::unchecked(layer, group, matrix))
    }
}

impl Serialize for SublayerAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SublayerAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_parse() {
        let a = SublayerAddress::unchecked(3, SublayerGroup::CrossAttn, Matrix::K);
        assert_eq!(a.to_string(), "L03.cross_attn.k");
        assert_eq!("L03.cross_attn.k".parse::<SublayerAddress>().unwrap(), a);
        assert!("L03.ffn.q".parse::<SublayerAddress>().is_err());
        assert!("L00.ffn.up".parse::<SublayerAddress>().is_err());
        assert!("3.ffn.up".parse::<SublayerAddress>().is_err());
    }

    #[test]
    fn cross_attention_on_even_layer_is_rejected() {
        let config = QFormerConfig::default();
        assert!(SublayerAddress::new(&config, 1, SublayerGroup::CrossAttn, Matrix::Q).is_ok());
        assert!(matches!(
            SublayerAddress::new(&config, 2, SublayerGroup::CrossAttn, Matrix::Q),
            Err(Error::Config(_))
        ));
        assert!(SublayerAddress::new(&config, 13, SublayerGroup::Ffn, Matrix::Up).is_err());
    }

    #[test]
    fn ordering_is_layer_major() {
        let a = SublayerAddress::unchecked(1, SublayerGroup::Ffn, Matrix::Down);
        let b = SublayerAddress::unchecked(2, SublayerGroup::SelfAttn, Matrix::Q);
        assert!(a < b);
    }
}
