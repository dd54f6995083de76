use super::attention::{attend, check_sequence, project_heads, rotate_columns};
use super::{CacheLayer, KvCache, MlaLayerWeights, Modality, ModelConfig, TokenSequence};
use crate::error::{shape_err, Result};
use crate::numerics::Matrix;
use crate::rope::Position;

/// Intermediate values of one MLA layer over the new tokens.
#[derive(Clone, Debug)]
pub(crate) struct MlaTape {
    pub x: Matrix,
    /// Rotated queries per head, rope dims first.
    pub q: Vec<Matrix>,
    /// Effective keys `[rot(k_rope); k_nope]` per kv group, over all cached tokens.
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Latents per kv group, `d_latent × n_total`.
    pub latents: Vec<Matrix>,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
    pub out: Matrix,
}

/// Output of an MLA forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaForward {
    /// Residual stream after the last layer, new tokens only.
    pub output: Matrix,
    pub layer_outputs: Vec<Matrix>,
    /// `attn[layer][head]`, `n_new × n_total`.
    pub attn: Vec<Vec<Matrix>>,
    pub cache: KvCache,
}

/// Run one MLA layer on `x` (new tokens), appending their entries to `cache`.
///
/// `tags` covers every token the layer can see: cached ones first, then new.
pub(crate) fn mla_layer(
    cfg: &ModelConfig,
    w: &MlaLayerWeights,
    x: &Matrix,
    positions: &[Position],
    tags: &[Modality],
    cache: &mut CacheLayer,
) -> Result<MlaTape> {
    let spec = cfg.rope_spec();
    let n_new = x.cols();
    let n_old = cache.latents.len();
    let n_total = n_old + n_new;
    if tags.len() != n_total {
        return Err(shape_err(format!("{} tags for {n_total} tokens", tags.len())));
    }
    let (d_lat, d_rope, d_nope, d_head) = (cfg.d_latent, cfg.d_rope, cfg.d_nope(), cfg.d_head);
    let freqs = &w.selection.groups;

    for j in 0..n_new {
        let xj = x.col(j);
        let m = tags[n_old + j];
        let mut latent = Vec::with_capacity(cfg.n_kv_heads * d_lat);
        let mut rope = Vec::with_capacity(cfg.n_kv_heads * d_rope);
        for g in 0..cfg.n_kv_heads {
            latent.extend(w.w_down.get(m)[g].matvec(&xj));
            let mut kr = w.k_rope_rows.row_block(g * d_rope, d_rope).matvec(&xj);
            spec.rotate_chunks(&mut kr, positions[j], &freqs[g], false);
            rope.extend(kr);
        }
        cache.latents.push(latent);
        cache.rope_keys.push(rope);
    }

    let mut k = Vec::with_capacity(cfg.n_kv_heads);
    let mut v = Vec::with_capacity(cfg.n_kv_heads);
    let mut latents = Vec::with_capacity(cfg.n_kv_heads);
    for g in 0..cfg.n_kv_heads {
        let mut kg = Matrix::zeros(d_head, n_total);
        let mut vg = Matrix::zeros(d_head, n_total);
        let mut lg = Matrix::zeros(d_lat, n_total);
        for (j, &m) in tags.iter().enumerate() {
            let c = &cache.latents[j][g * d_lat..(g + 1) * d_lat];
            lg.set_col(j, c);
            let up = w.w_up.get(m)[g].matvec(c);
            let rope = &cache.rope_keys[j][g * d_rope..(g + 1) * d_rope];
            for r in 0..d_rope {
                kg[(r, j)] = rope[r];
            }
            for r in 0..d_nope {
                kg[(d_rope + r, j)] = up[r];
            }
            for r in 0..d_head {
                vg[(r, j)] = up[d_nope + r];
            }
        }
        k.push(kg);
        v.push(vg);
        latents.push(lg);
    }

    let mut q = project_heads(&w.w_q, cfg.n_heads, d_head, x);
    for (h, qh) in q.iter_mut().enumerate() {
        rotate_columns(&spec, qh, positions, &freqs[cfg.kv_head_of(h)], false);
    }
    let (probs, concat, out) = attend(cfg, &q, &k, &v, &w.w_o)?;
    Ok(MlaTape {
        x: x.clone(),
        q,
        k,
        v,
        latents,
        probs,
        concat,
        out,
    })
}

/// Output of one MLA layer on `x` with an empty cache.
pub(crate) fn mla_layer_once(cfg: &ModelConfig, w: &MlaLayerWeights, x: &Matrix, seq: &TokenSequence) -> Result<Matrix> {
    let mut cache = CacheLayer::default();
    mla_layer(cfg, w, x, &seq.positions, &seq.modality, &mut cache).map(|t| t.out)
}

pub(crate) fn forward_mla_with_tapes(
    cfg: &ModelConfig,
    layers: &[MlaLayerWeights],
    seq: &TokenSequence,
    mut cache: KvCache,
) -> Result<(MlaForward, Vec<MlaTape>)> {
    cfg.validate()?;
    check_sequence(cfg, seq)?;
    if layers.len() != cfg.n_layers {
        return Err(shape_err(format!("{} layers given, config has {}", layers.len(), cfg.n_layers)));
    }
    cache.check(cfg)?;
    for (l, w) in layers.iter().enumerate() {
        w.validate(cfg).map_err(|e| e.in_layer(l))?;
    }
    cache.tags.extend_from_slice(&seq.modality);
    let mut h = seq.embeddings.clone();
    let mut layer_outputs = Vec::with_capacity(layers.len());
    let mut attn = Vec::with_capacity(layers.len());
    let mut tapes = Vec::with_capacity(layers.len());
    for (l, w) in layers.iter().enumerate() {
        let tape = mla_layer(cfg, w, &h, &seq.positions, &cache.tags, &mut cache.layers[l])
            .map_err(|e| e.in_layer(l))?;
        h.add_assign(&tape.out);
        layer_outputs.push(tape.out.clone());
        attn.push(tape.probs.clone());
        tapes.push(tape);
    }
    let pass = MlaForward {
        output: h,
        layer_outputs,
        attn,
        cache,
    };
    Ok((pass, tapes))
}

/// MLA forward over `seq`, attending to everything already in `cache`.
///
/// New tokens are appended to the returned cache; existing entries are left
/// as they were. Positions in `seq` are absolute, so a decode step passes the
/// positions that follow the cached prefix.
pub fn forward_mla(
    cfg: &ModelConfig,
    layers: &[MlaLayerWeights],
    seq: &TokenSequence,
    cache: KvCache,
) -> Result<MlaForward> {
    forward_mla_with_tapes(cfg, layers, seq, cache).map(|(f, _)| f)
}
