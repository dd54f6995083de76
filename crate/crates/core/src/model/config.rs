use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{RopeKind, RopeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Query heads.
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub rope_kind: RopeKind,
    pub rope_base: f64,
    /// Dimensions per head that keep rotary encoding after conversion.
    pub d_rope: usize,
    /// Latent width per kv head.
    pub d_latent: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.d_model == 0 {
            return bad("layer, head and model dimensions must be positive".into());
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_head == 0 || !self.d_head.is_multiple_of(2) {
            return bad(format!("d_head {} must be even", self.d_head));
        }
        if self.d_rope == 0 || self.d_rope > self.d_head || !self.d_rope.is_multiple_of(2) {
            return bad(format!(
                "d_rope {} must be even and in (0, d_head = {}]",
                self.d_rope, self.d_head
            ));
        }
        if self.d_latent == 0 || self.d_latent > self.up_rows() {
            return bad(format!(
                "d_latent {} must be in (0, 2*d_head - d_rope = {}]",
                self.d_latent,
                self.up_rows()
            ));
        }
        RopeSpec::new(self.rope_kind, self.rope_base, self.d_head)?;
        Ok(())
    }

    pub fn rope_spec(&self) -> RopeSpec {
        RopeSpec {
            kind: self.rope_kind,
            base: self.rope_base,
            d_head: self.d_head,
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Kv head serving query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn n_subspaces(&self) -> usize {
        self.d_head / 2
    }

    /// Retained subspaces per kv group.
    pub fn n_retained(&self) -> usize {
        self.d_rope / 2
    }

    pub fn d_nope(&self) -> usize {
        self.d_head - self.d_rope
    }

    /// Rows of each up-projection: `k_nope` rows followed by `v` rows.
    pub fn up_rows(&self) -> usize {
        2 * self.d_head - self.d_rope
    }

    /// Same model with the conversion targets replaced.
    pub fn with_targets(&self, d_rope: usize, d_latent: usize) -> Self {
        Self {
            d_rope,
            d_latent,
            ..*self
        }
    }

    /// Targets for a lossless conversion: every subspace kept, latent as
    /// wide as the value projection can use.
    pub fn full_rank(&self) -> Self {
        self.with_targets(self.d_head, self.d_head.min(self.d_model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 32,
            d_head: 16,
            rope_kind: RopeKind::Mrope,
            rope_base: 10000.0,
            d_rope: 4,
            d_latent: 8,
        }
    }

    #[test]
    fn accepts_valid() {
        base().validate().unwrap();
        assert_eq!(base().kv_head_of(3), 1);
        assert_eq!(base().up_rows(), 28);
    }

    #[test]
    fn rejects_invalid() {
        for cfg in [
            ModelConfig { n_kv_heads: 3, ..base() },
            ModelConfig { d_rope: 3, ..base() },
            ModelConfig { d_rope: 18, ..base() },
            ModelConfig { d_latent: 29, ..base() },
            ModelConfig { d_latent: 0, ..base() },
            ModelConfig { d_head: 8, d_rope: 4, ..base() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
