use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and initialization of a miniature Q-Former.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_queries: usize,
    pub image_dim: usize,
    pub ffn_dim: usize,
    /// 1-indexed layers carrying cross-attention to the image features.
    pub cross_attention_layers: BTreeSet<usize>,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub layer_norm_eps: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

/// Odd 1-indexed layers: `{1, 3, 5, ...}`.
pub fn odd_layers(num_layers: usize) -> BTreeSet<usize> {
    (1..=num_layers).filter(|l| l % 2 == 1).collect()
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 16,
            num_heads: 2,
            num_queries: 32,
            image_dim: 16,
            ffn_dim: 32,
            cross_attention_layers: odd_layers(12),
            max_text_len: 8,
            vocab_size: 32,
            num_classes: 4,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl QFormerConfig {
    /// Small config with cross-attention on the odd layers.
    pub fn tiny(num_layers: usize, hidden_dim: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads,
            num_queries: 4,
            image_dim: hidden_dim,
            ffn_dim: 2 * hidden_dim,
            cross_attention_layers: odd_layers(num_layers),
            ..Self::default()
        }
    }

    /// InstructBLIP-sized dimensions (BERT-base layers, ViT-g image features).
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            num_queries: 32,
            image_dim: 1408,
            ffn_dim: 3072,
            cross_attention_layers: odd_layers(12),
            max_text_len: 512,
            vocab_size: 30522,
            num_classes: 4,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn with_cross_attention(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.cross_attention_layers = layers.into_iter().collect();
        self
    }

    pub fn has_cross_attention(&self, layer: usize) -> bool {
        self.cross_attention_layers.contains(&layer)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_queries", self.num_queries),
            ("image_dim", self.image_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim < 2 {
            return Err(Error::Config("hidden_dim must be at least 2".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if let Some(bad) = self
            .cross_attention_layers
            .iter()
            .find(|&&l| l == 0 || l > self.num_layers)
        {
            return Err(Error::Config(format!(
                "cross-attention layer {bad} outside 1..={}",
                self.num_layers
            )));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("layer_norm_eps must be > 0 and init_std >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_cross_attention_on_odd_layers() {
        let c = QFormerConfig::default();
        assert_eq!(c.num_layers, 12);
        assert_eq!(c.num_queries, 32);
        let expected: BTreeSet<usize> = [1, 3, 5, 7, 9, 11].into_iter().collect();
        assert_eq!(c.cross_attention_layers, expected);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_layers() {
        let mut c = QFormerConfig::tiny(2, 16, 3);
        assert!(c.validate().is_err());
        c.num_heads = 2;
        c.cross_attention_layers.insert(3);
        assert!(c.validate().is_err());
    }
}
