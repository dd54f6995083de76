use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Modality, ModalityPair, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numerics::Matrix;
use crate::selection::LayerSelection;

/// Projections of one MHA/GQA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `n_heads·d_head × d_model`
    pub w_q: Matrix,
    /// `n_kv_heads·d_head × d_model`
    pub w_k: Matrix,
    /// `n_kv_heads·d_head × d_model`
    pub w_v: Matrix,
    /// `d_model × n_heads·d_head`
    pub w_o: Matrix,
}

impl AttentionWeights {
    /// Gaussian init with `1/sqrt(fan_in)` scale.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut gen = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let q = cfg.n_heads * cfg.d_head;
        let kv = cfg.n_kv_heads * cfg.d_head;
        Self {
            w_q: gen(q, cfg.d_model),
            w_k: gen(kv, cfg.d_model),
            w_v: gen(kv, cfg.d_model),
            w_o: gen(cfg.d_model, q),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let q = cfg.n_heads * cfg.d_head;
        let kv = cfg.n_kv_heads * cfg.d_head;
        for (name, m, want) in [
            ("w_q", &self.w_q, (q, cfg.d_model)),
            ("w_k", &self.w_k, (kv, cfg.d_model)),
            ("w_v", &self.w_v, (kv, cfg.d_model)),
            ("w_o", &self.w_o, (cfg.d_model, q)),
        ] {
            if m.shape() != want {
                return Err(shape_err(format!("{name} is {:?}, expected {:?}", m.shape(), want)));
            }
        }
        Ok(())
    }
}

/// One converted MLA layer.
///
/// `w_q` rows are in rope-first order per head (see
/// [`LayerSelection::dim_order`]). Each kv group `g` owns a factor pair per
/// modality; `w_up` stacks the `k_nope` rows on top of the `v` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaLayerWeights {
    pub selection: LayerSelection,
    /// `n_heads·d_head × d_model`, rope dims first within each head.
    pub w_q: Matrix,
    /// `n_kv_heads·d_rope × d_model`, retained rows of the original `w_k`.
    pub k_rope_rows: Matrix,
    /// Per modality, per kv group: `d_latent × d_model`.
    pub w_down: ModalityPair<Vec<Matrix>>,
    /// Per modality, per kv group: `(2·d_head − d_rope) × d_latent`.
    pub w_up: ModalityPair<Vec<Matrix>>,
    /// `d_model × n_heads·d_head`, copied from the source layer.
    pub w_o: Matrix,
    /// Set when calibration had no tokens of this modality and its factors
    /// were copied from the other one.
    pub fallback: Option<Modality>,
}

impl MlaLayerWeights {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.selection.validate(cfg.n_kv_heads, cfg.n_subspaces(), cfg.n_retained())?;
        let q = cfg.n_heads * cfg.d_head;
        let checks = [
            ("w_q", self.w_q.shape(), (q, cfg.d_model)),
            ("k_rope_rows", self.k_rope_rows.shape(), (cfg.n_kv_heads * cfg.d_rope, cfg.d_model)),
            ("w_o", self.w_o.shape(), (cfg.d_model, q)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(shape_err(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        for m in Modality::ALL {
            let downs = self.w_down.get(m);
            let ups = self.w_up.get(m);
            if downs.len() != cfg.n_kv_heads || ups.len() != cfg.n_kv_heads {
                return Err(shape_err(format!("{} factor count != n_kv_heads", m.name())));
            }
            for (g, (d, u)) in downs.iter().zip(ups).enumerate() {
                if d.shape() != (cfg.d_latent, cfg.d_model) || u.shape() != (cfg.up_rows(), cfg.d_latent) {
                    return Err(shape_err(format!(
                        "{} group {g}: w_down {:?}, w_up {:?} for d_latent {}",
                        m.name(),
                        d.shape(),
                        u.shape(),
                        cfg.d_latent
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy with every matrix rounded to `f32`, the checkpoint storage type.
    pub fn round_to_f32(&self) -> Self {
        let round_all = |v: &Vec<Matrix>| v.iter().map(Matrix::round_to_f32).collect::<Vec<_>>();
        Self {
            selection: self.selection.clone(),
            w_q: self.w_q.round_to_f32(),
            k_rope_rows: self.k_rope_rows.round_to_f32(),
            w_down: self.w_down.map(|_, v| round_all(v)),
            w_up: self.w_up.map(|_, v| round_all(v)),
            w_o: self.w_o.round_to_f32(),
            fallback: self.fallback,
        }
    }
}
