use super::attention::forward_gqa_with_freqs;
use super::{AttentionWeights, ForwardPass, ModelConfig, TokenSequence};
use crate::error::{shape_err, Result};
use crate::numerics::Matrix;
use crate::selection::{LayerSelection, SubspaceSelection};

/// GQA stack where only the selected subspaces keep their rotation.
///
/// `w_q` and `w_k` are stored rope-first: within each head the retained
/// chunks come first, so a rotation over the leading `d_rope` dims with the
/// selected frequencies reproduces partial RoPE in the original layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialRopeModel {
    pub cfg: ModelConfig,
    pub layers: Vec<AttentionWeights>,
    pub selection: SubspaceSelection,
}

/// Reorder the rows of every `d_head` block of `w`; block `b` uses `order(b)`.
pub(crate) fn permute_blocks(w: &Matrix, d_head: usize, order: impl Fn(usize) -> Vec<usize>) -> Matrix {
    let n_blocks = w.rows() / d_head;
    let idx: Vec<usize> = (0..n_blocks)
        .flat_map(|b| order(b).into_iter().map(move |r| b * d_head + r))
        .collect();
    w.select_rows(&idx)
}

/// Permute `w_q` and `w_k` of one layer into rope-first order.
pub(crate) fn permute_layer(cfg: &ModelConfig, w: &AttentionWeights, sel: &LayerSelection) -> AttentionWeights {
    let n_sub = cfg.n_subspaces();
    AttentionWeights {
        w_q: permute_blocks(&w.w_q, cfg.d_head, |h| sel.dim_order(cfg.kv_head_of(h), n_sub)),
        w_k: permute_blocks(&w.w_k, cfg.d_head, |g| sel.dim_order(g, n_sub)),
        w_v: w.w_v.clone(),
        w_o: w.w_o.clone(),
    }
}

impl PartialRopeModel {
    /// Build from weights in the original layout; `cfg.d_rope` fixes how many
    /// subspaces each selection keeps.
    pub fn from_original(cfg: &ModelConfig, layers: &[AttentionWeights], selection: SubspaceSelection) -> Result<Self> {
        cfg.validate()?;
        if layers.len() != cfg.n_layers || selection.layers.len() != cfg.n_layers {
            return Err(shape_err(format!(
                "{} layers and {} selections for a {}-layer config",
                layers.len(),
                selection.layers.len(),
                cfg.n_layers
            )));
        }
        let mut permuted = Vec::with_capacity(layers.len());
        for (l, (w, sel)) in layers.iter().zip(&selection.layers).enumerate() {
            w.validate(cfg).map_err(|e| e.in_layer(l))?;
            sel.validate(cfg.n_kv_heads, cfg.n_subspaces(), cfg.n_retained())
                .map_err(|e| e.in_layer(l))?;
            permuted.push(permute_layer(cfg, w, sel));
        }
        Ok(Self {
            cfg: *cfg,
            layers: permuted,
            selection,
        })
    }

    /// Weights with `w_q` and `w_k` moved back to the original dim order.
    pub fn original_layout(&self) -> Vec<AttentionWeights> {
        let cfg = &self.cfg;
        let n_sub = cfg.n_subspaces();
        let inverse = |order: Vec<usize>| {
            let mut inv = vec![0; order.len()];
            for (i, o) in order.into_iter().enumerate() {
                inv[o] = i;
            }
            inv
        };
        self.layers
            .iter()
            .zip(&self.selection.layers)
            .map(|(w, sel)| AttentionWeights {
                w_q: permute_blocks(&w.w_q, cfg.d_head, |h| inverse(sel.dim_order(cfg.kv_head_of(h), n_sub))),
                w_k: permute_blocks(&w.w_k, cfg.d_head, |g| inverse(sel.dim_order(g, n_sub))),
                w_v: w.w_v.clone(),
                w_o: w.w_o.clone(),
            })
            .collect()
    }

    /// Per-layer, per-group rotation frequencies.
    pub(crate) fn freqs(&self) -> Vec<Vec<Vec<usize>>> {
        self.selection.layers.iter().map(|s| s.groups.clone()).collect()
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardPass> {
        forward_gqa_with_freqs(&self.cfg, &self.layers, &self.freqs(), seq).map(|(p, _)| p)
    }
}
