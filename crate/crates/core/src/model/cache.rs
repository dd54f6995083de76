use super::{Modality, ModelConfig};
use crate::error::{shape_err, Result};

/// Cached entries of one layer, one element per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheLayer {
    /// `n_kv_heads·d_latent` per token, group-major.
    pub latents: Vec<Vec<f64>>,
    /// `n_kv_heads·d_rope` per token, stored after rotation.
    pub rope_keys: Vec<Vec<f64>>,
}

/// Latent KV cache of an MLA stack.
///
/// Entries are append-only; the modality tag of each token decides which
/// up-projection decodes its latent.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub n_kv_heads: usize,
    pub d_latent: usize,
    pub d_rope: usize,
    /// Nominal bits per stored element (for accounting).
    pub storage_bits: u32,
    pub tags: Vec<Modality>,
    pub layers: Vec<CacheLayer>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_kv_heads: cfg.n_kv_heads,
            d_latent: cfg.d_latent,
            d_rope: cfg.d_rope,
            storage_bits: 16,
            tags: Vec::new(),
            layers: vec![CacheLayer::default(); cfg.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Total stored elements across layers (latents plus rope keys).
    pub fn element_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.latents.iter().chain(&l.rope_keys))
            .map(Vec::len)
            .sum()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_kv_heads != cfg.n_kv_heads
            || self.d_latent != cfg.d_latent
            || self.d_rope != cfg.d_rope
            || self.layers.len() != cfg.n_layers
        {
            return Err(shape_err(format!(
                "cache ({} layers, {} kv heads, d_latent {}, d_rope {}) does not match config ({}, {}, {}, {})",
                self.layers.len(),
                self.n_kv_heads,
                self.d_latent,
                self.d_rope,
                cfg.n_layers,
                cfg.n_kv_heads,
                cfg.d_latent,
                cfg.d_rope
            )));
        }
        let n = self.tags.len();
        let latent_len = self.n_kv_heads * self.d_latent;
        let rope_len = self.n_kv_heads * self.d_rope;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.latents.len() != n || layer.rope_keys.len() != n {
                return Err(shape_err(format!("cache layer {l} holds a different token count")));
            }
            if layer.latents.iter().any(|v| v.len() != latent_len)
                || layer.rope_keys.iter().any(|v| v.len() != rope_len)
            {
                return Err(shape_err(format!("cache layer {l} has malformed entries")));
            }
        }
        Ok(())
    }
}
