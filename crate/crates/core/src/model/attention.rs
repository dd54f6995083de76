use super::{AttentionWeights, ModelConfig, TokenSequence};
use crate::error::{shape_err, Result};
use crate::numerics::{softmax_rows, Matrix};
use crate::rope::{Position, RopeSpec};

/// Intermediate values of one attention layer, kept for backprop.
#[derive(Clone, Debug)]
pub(crate) struct LayerTape {
    /// Layer input, `d_model × n_q`.
    pub x: Matrix,
    /// Rotated queries per head, `d_head × n_q`.
    pub q: Vec<Matrix>,
    /// Rotated keys per kv head, `d_head × n_k`.
    pub k: Vec<Matrix>,
    /// Values per kv head, `d_head × n_k`.
    pub v: Vec<Matrix>,
    /// Attention weights per head, `n_q × n_k`.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs, `n_heads·d_head × n_q`.
    pub concat: Matrix,
    /// `d_model × n_q`.
    pub out: Matrix,
}

/// Result of a full-sequence forward pass through the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    /// Final residual stream, `d_model × n`.
    pub output: Matrix,
    /// Input to each layer (the residual stream before it).
    pub layer_inputs: Vec<Matrix>,
    /// Attention output of each layer.
    pub layer_outputs: Vec<Matrix>,
    /// `attn[layer][head]`, `n × n` row-stochastic.
    pub attn: Vec<Vec<Matrix>>,
}

/// Split `w` into `n_blocks` row blocks of `d_head` rows and apply each to `x`.
pub(crate) fn project_heads(w: &Matrix, n_blocks: usize, d_head: usize, x: &Matrix) -> Vec<Matrix> {
    (0..n_blocks)
        .map(|b| w.row_block(b * d_head, d_head).matmul(x))
        .collect()
}

/// Rotate the leading chunks of every column (one token per column).
pub(crate) fn rotate_columns(spec: &RopeSpec, m: &mut Matrix, positions: &[Position], freqs: &[usize], inverse: bool) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(cols, positions.len());
    let mut buf = vec![0.0; rows];
    for (j, &pos) in positions.iter().enumerate() {
        for (r, b) in buf.iter_mut().enumerate() {
            *b = m[(r, j)];
        }
        spec.rotate_chunks(&mut buf, pos, freqs, inverse);
        for (r, b) in buf.iter().enumerate() {
            m[(r, j)] = *b;
        }
    }
}

/// Scaled dot-product attention with a causal mask aligned to the last key.
///
/// Returns `(probs per head, concatenated head outputs, w_o · concat)`.
pub(crate) fn attend(
    cfg: &ModelConfig,
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    w_o: &Matrix,
) -> Result<(Vec<Matrix>, Matrix, Matrix)> {
    let n_q = q.first().map_or(0, Matrix::cols);
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut concat = Matrix::zeros(cfg.n_heads * cfg.d_head, n_q);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for (h, qh) in q.iter().enumerate() {
        let g = cfg.kv_head_of(h);
        let scores = qh.t_matmul(&k[g]).scale(scale);
        let p = softmax_rows(&scores, true)?;
        let head_out = v[g].matmul_t(&p);
        concat.set_row_block(h * cfg.d_head, &head_out);
        probs.push(p);
    }
    let out = w_o.matmul(&concat);
    Ok((probs, concat, out))
}

/// One GQA layer whose q/k head slices rotate their leading chunks at
/// `freqs[g]` (full RoPE in the original layout is `freqs[g] = 0..d_head/2`).
pub(crate) fn gqa_layer(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    freqs: &[Vec<usize>],
    x: &Matrix,
    positions: &[Position],
) -> Result<LayerTape> {
    let spec = cfg.rope_spec();
    let mut q = project_heads(&w.w_q, cfg.n_heads, cfg.d_head, x);
    let mut k = project_heads(&w.w_k, cfg.n_kv_heads, cfg.d_head, x);
    let v = project_heads(&w.w_v, cfg.n_kv_heads, cfg.d_head, x);
    for (h, qh) in q.iter_mut().enumerate() {
        rotate_columns(&spec, qh, positions, &freqs[cfg.kv_head_of(h)], false);
    }
    for (g, kg) in k.iter_mut().enumerate() {
        rotate_columns(&spec, kg, positions, &freqs[g], false);
    }
    let (probs, concat, out) = attend(cfg, &q, &k, &v, &w.w_o)?;
    Ok(LayerTape {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        concat,
        out,
    })
}

/// Output of one layer with full RoPE, original layout.
pub(crate) fn gqa_layer_full(cfg: &ModelConfig, w: &AttentionWeights, x: &Matrix, positions: &[Position]) -> Result<Matrix> {
    let all: Vec<usize> = (0..cfg.n_subspaces()).collect();
    let freqs = vec![all; cfg.n_kv_heads];
    gqa_layer(cfg, w, &freqs, x, positions).map(|t| t.out)
}

pub(crate) fn check_sequence(cfg: &ModelConfig, seq: &TokenSequence) -> Result<()> {
    if seq.d_model() != cfg.d_model {
        return Err(shape_err(format!(
            "sequence embeddings have {} rows, model expects d_model = {}",
            seq.d_model(),
            cfg.d_model
        )));
    }
    Ok(())
}

/// Run a GQA stack with per-layer, per-group rotation frequencies.
pub(crate) fn forward_gqa_with_freqs(
    cfg: &ModelConfig,
    layers: &[AttentionWeights],
    freqs: &[Vec<Vec<usize>>],
    seq: &TokenSequence,
) -> Result<(ForwardPass, Vec<LayerTape>)> {
    check_sequence(cfg, seq)?;
    if layers.len() != cfg.n_layers {
        return Err(shape_err(format!("{} layers given, config has {}", layers.len(), cfg.n_layers)));
    }
    let mut h = seq.embeddings.clone();
    let mut pass = ForwardPass {
        output: Matrix::zeros(0, 0),
        layer_inputs: Vec::with_capacity(layers.len()),
        layer_outputs: Vec::with_capacity(layers.len()),
        attn: Vec::with_capacity(layers.len()),
    };
    let mut tapes = Vec::with_capacity(layers.len());
    for (l, w) in layers.iter().enumerate() {
        w.validate(cfg).map_err(|e| e.in_layer(l))?;
        let tape = gqa_layer(cfg, w, &freqs[l], &h, &seq.positions).map_err(|e| e.in_layer(l))?;
        pass.layer_inputs.push(h.clone());
        h.add_assign(&tape.out);
        pass.layer_outputs.push(tape.out.clone());
        pass.attn.push(tape.probs.clone());
        tapes.push(tape);
    }
    pass.output = h;
    Ok((pass, tapes))
}

pub(crate) fn full_freqs(cfg: &ModelConfig) -> Vec<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..cfg.n_subspaces()).collect();
    vec![vec![all; cfg.n_kv_heads]; cfg.n_layers]
}

/// Causal MHA/GQA forward with full RoPE on every subspace.
///
/// Query head `i` reads kv head `i / (n_heads / n_kv_heads)`; scores are
/// scaled by `1/sqrt(d_head)`.
pub fn forward_mha_gqa(cfg: &ModelConfig, layers: &[AttentionWeights], seq: &TokenSequence) -> Result<ForwardPass> {
    cfg.validate()?;
    forward_gqa_with_freqs(cfg, layers, &full_freqs(cfg), seq).map(|(p, _)| p)
}
