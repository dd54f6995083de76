use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{Gradients, ParamClass, Student, TrainMask};
use crate::error::{shape_err, Error, Result};
use crate::model::{
    forward_gqa_with_freqs, forward_mla_with_tapes, rotate_columns, KvCache, LayerTape, MlaLayerWeights, MlaTape,
    Modality, ModelConfig, TokenSequence,
};
use crate::numerics::Matrix;
use crate::rope::Position;

struct CoreGrads {
    w_o: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
}

/// Backprop through `out = W_o · concat_h(V_g P_hᵀ)`, `P_h = softmax(Q_hᵀ K_g / √d)`.
/// Returns gradients for `W_o` and the rotated q/k and the values.
#[allow(clippy::too_many_arguments)]
fn core_backward(
    cfg: &ModelConfig,
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    probs: &[Matrix],
    concat: &Matrix,
    w_o: &Matrix,
    dout: &Matrix,
) -> CoreGrads {
    let d = cfg.d_head;
    let scale = 1.0 / (d as f64).sqrt();
    let d_w_o = dout.matmul_t(concat);
    let dconcat = w_o.t_matmul(dout);
    let mut dq = Vec::with_capacity(cfg.n_heads);
    let mut dk: Vec<Matrix> = k.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut dv: Vec<Matrix> = v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for (h, p) in probs.iter().enumerate() {
        let g = cfg.kv_head_of(h);
        let d_head_out = dconcat.row_block(h * d, d);
        let dp = d_head_out.t_matmul(&v[g]);
        dv[g].add_assign(&d_head_out.matmul(p));
        let mut ds = Matrix::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            let (pr, dpr) = (p.row(i), dp.row(i));
            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (o, (a, b)) in ds.row_mut(i).iter_mut().zip(pr.iter().zip(dpr)) {
                *o = a * (b - inner);
            }
        }
        dq.push(k[g].matmul_t(&ds).scale(scale));
        dk[g].axpy(scale, &q[h].matmul(&ds));
    }
    CoreGrads {
        w_o: d_w_o,
        q: dq,
        k: dk,
        v: dv,
    }
}

fn stack(blocks: &[Matrix]) -> Matrix {
    Matrix::vstack(&blocks.iter().collect::<Vec<_>>()).expect("blocks share a column count")
}

fn unrotate_queries(cfg: &ModelConfig, dq: &mut [Matrix], positions: &[Position], freqs: &[Vec<usize>]) {
    let spec = cfg.rope_spec();
    for (h, m) in dq.iter_mut().enumerate() {
        rotate_columns(&spec, m, positions, &freqs[cfg.kv_head_of(h)], true);
    }
}

/// Returns `(dL/dx, gradients by class)` for one partial-RoPE layer.
fn partial_layer_backward(
    cfg: &ModelConfig,
    w: &crate::model::AttentionWeights,
    tape: &LayerTape,
    freqs: &[Vec<usize>],
    positions: &[Position],
    dout: &Matrix,
) -> (Matrix, BTreeMap<ParamClass, Vec<Matrix>>) {
    let spec = cfg.rope_spec();
    let mut cg = core_backward(cfg, &tape.q, &tape.k, &tape.v, &tape.probs, &tape.concat, &w.w_o, dout);
    unrotate_queries(cfg, &mut cg.q, positions, freqs);
    for (g, m) in cg.k.iter_mut().enumerate() {
        rotate_columns(&spec, m, positions, &freqs[g], true);
    }
    let dq = stack(&cg.q);
    let dk = stack(&cg.k);
    let dv = stack(&cg.v);
    let mut dx = w.w_q.t_matmul(&dq);
    dx.add_assign(&w.w_k.t_matmul(&dk));
    dx.add_assign(&w.w_v.t_matmul(&dv));
    let mut grads = BTreeMap::new();
    grads.insert(ParamClass::WQ, vec![dq.matmul_t(&tape.x)]);
    grads.insert(ParamClass::WK, vec![dk.matmul_t(&tape.x)]);
    grads.insert(ParamClass::WV, vec![dv.matmul_t(&tape.x)]);
    grads.insert(ParamClass::WO, vec![cg.w_o]);
    (dx, grads)
}

fn mla_layer_backward(
    cfg: &ModelConfig,
    w: &MlaLayerWeights,
    tape: &MlaTape,
    seq: &TokenSequence,
    dout: &Matrix,
) -> (Matrix, BTreeMap<ParamClass, Vec<Matrix>>) {
    let spec = cfg.rope_spec();
    let freqs = &w.selection.groups;
    let (d_rope, d_nope, d_lat) = (cfg.d_rope, cfg.d_nope(), cfg.d_latent);
    let x = &tape.x;
    let mut cg = core_backward(cfg, &tape.q, &tape.k, &tape.v, &tape.probs, &tape.concat, &w.w_o, dout);
    unrotate_queries(cfg, &mut cg.q, &seq.positions, freqs);
    let dq = stack(&cg.q);
    let mut dx = w.w_q.t_matmul(&dq);

    let mut d_rope_rows = Matrix::zeros(cfg.n_kv_heads * d_rope, cfg.d_model);
    let mut d_down: Vec<Vec<Matrix>> = vec![Vec::new(), Vec::new()];
    let mut d_up: Vec<Vec<Matrix>> = vec![Vec::new(), Vec::new()];
    let cols: Vec<Vec<usize>> = Modality::ALL
        .iter()
        .map(|&m| (0..seq.len()).filter(|&j| seq.modality[j] == m).collect())
        .collect();
    for g in 0..cfg.n_kv_heads {
        let mut dkr = cg.k[g].row_block(0, d_rope);
        rotate_columns(&spec, &mut dkr, &seq.positions, &freqs[g], true);
        let kr = w.k_rope_rows.row_block(g * d_rope, d_rope);
        d_rope_rows.set_row_block(g * d_rope, &dkr.matmul_t(x));
        dx.add_assign(&kr.t_matmul(&dkr));

        let dknope = cg.k[g].row_block(d_rope, d_nope);
        let dup = Matrix::vstack(&[&dknope, &cg.v[g]]).expect("same token count");
        for (mi, &m) in Modality::ALL.iter().enumerate() {
            let up = &w.w_up.get(m)[g];
            let down = &w.w_down.get(m)[g];
            let idx = &cols[mi];
            if idx.is_empty() {
                d_up[mi].push(Matrix::zeros(up.rows(), d_lat));
                d_down[mi].push(Matrix::zeros(d_lat, cfg.d_model));
                continue;
            }
            let dup_m = dup.select_cols(idx);
            let lat_m = tape.latents[g].select_cols(idx);
            let x_m = x.select_cols(idx);
            d_up[mi].push(dup_m.matmul_t(&lat_m));
            let dlat = up.t_matmul(&dup_m);
            d_down[mi].push(dlat.matmul_t(&x_m));
            let dx_m = down.t_matmul(&dlat);
            for (c, &j) in idx.iter().enumerate() {
                for r in 0..cfg.d_model {
                    dx[(r, j)] += dx_m[(r, c)];
                }
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert(ParamClass::WQ, vec![dq.matmul_t(x)]);
    grads.insert(ParamClass::WO, vec![cg.w_o]);
    grads.insert(ParamClass::KRopeRows, vec![d_rope_rows]);
    let [dv_down, dt_down]: [Vec<Matrix>; 2] = d_down.try_into().expect("two modalities");
    let [dv_up, dt_up]: [Vec<Matrix>; 2] = d_up.try_into().expect("two modalities");
    grads.insert(ParamClass::WDown, dv_down.into_iter().chain(dt_down).collect());
    grads.insert(ParamClass::WUp, dv_up.into_iter().chain(dt_up).collect());
    (dx, grads)
}

enum Tapes {
    Partial(Vec<LayerTape>),
    Mla(Vec<MlaTape>),
}

/// Squared error per layer and unmasked gradients for one sequence, with
/// the loss normalized by `elems`.
fn sequence_grads(
    student: &Student,
    target: &[Matrix],
    seq: &TokenSequence,
    elems: f64,
) -> Result<(f64, Vec<BTreeMap<ParamClass, Vec<Matrix>>>)> {
    let cfg = student.cfg();
    let (outputs, tapes) = match student {
        Student::PartialRope(m) => {
            let freqs: Vec<Vec<Vec<usize>>> = m.selection.layers.iter().map(|s| s.groups.clone()).collect();
            let (pass, tapes) = forward_gqa_with_freqs(cfg, &m.layers, &freqs, seq)?;
            (pass.layer_outputs, Tapes::Partial(tapes))
        }
        Student::Mla { cfg, layers } => {
            let (pass, tapes) = forward_mla_with_tapes(cfg, layers, seq, KvCache::new(cfg))?;
            (pass.layer_outputs, Tapes::Mla(tapes))
        }
    };
    let mut sq = 0.0;
    let mut g_next = Matrix::zeros(cfg.d_model, seq.len());
    let mut grads = vec![BTreeMap::new(); cfg.n_layers];
    for l in (0..cfg.n_layers).rev() {
        if target[l].shape() != outputs[l].shape() {
            return Err(shape_err(format!(
                "layer {l} target is {:?}, output is {:?}",
                target[l].shape(),
                outputs[l].shape()
            )));
        }
        let diff = outputs[l].sub(&target[l]);
        sq += diff.frobenius_norm_sq();
        let mut dout = g_next.clone();
        dout.axpy(2.0 / elems, &diff);
        let (dx, gl) = match (&tapes, student) {
            (Tapes::Partial(t), Student::PartialRope(m)) => partial_layer_backward(
                cfg,
                &m.layers[l],
                &t[l],
                &m.selection.layers[l].groups,
                &seq.positions,
                &dout,
            ),
            (Tapes::Mla(t), Student::Mla { layers, .. }) => mla_layer_backward(cfg, &layers[l], &t[l], seq, &dout),
            _ => unreachable!("tapes follow the student kind"),
        };
        g_next.add_assign(&dx);
        grads[l] = gl;
    }
    Ok((sq / elems, grads))
}

/// Layerwise output-matching loss and its gradient on the masked classes.
///
/// `targets[s][l]` is the original model's attention output of layer `l` on
/// `batch[s]`. Classes outside the mask get no entry in the result.
pub fn loss_and_grads(
    student: &Student,
    targets: &[Vec<Matrix>],
    batch: &[TokenSequence],
    mask: &TrainMask,
) -> Result<(f64, Gradients)> {
    student.check_mask(mask)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if targets.len() != batch.len() || targets.iter().any(|t| t.len() != student.cfg().n_layers) {
        return Err(shape_err("targets do not match batch and layer count"));
    }
    let elems: usize = batch.iter().map(|s| s.len() * s.d_model()).sum();
    let per_seq: Vec<(f64, Vec<BTreeMap<ParamClass, Vec<Matrix>>>)> = batch
        .par_iter()
        .zip(targets)
        .map(|(s, t)| sequence_grads(student, t, s, elems as f64))
        .collect::<Result<_>>()?;

    let n_layers = student.cfg().n_layers;
    let mut loss = 0.0;
    let mut acc: Vec<BTreeMap<ParamClass, Vec<Matrix>>> = vec![BTreeMap::new(); n_layers];
    for (sq, grads) in per_seq {
        loss += sq;
        for (l, gl) in grads.into_iter().enumerate() {
            for (class, ms) in gl {
                if !mask.allows(class) {
                    continue;
                }
                match acc[l].get_mut(&class) {
                    Some(existing) => {
                        for (e, m) in existing.iter_mut().zip(&ms) {
                            e.add_assign(m);
                        }
                    }
                    None => {
                        acc[l].insert(class, ms);
                    }
                }
            }
        }
    }
    Ok((loss, Gradients { layers: acc }))
}
