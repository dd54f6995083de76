//! Choosing which rotary subspaces keep their rotation.
//!
//! Two scores are available per (layer, head, subspace): the product of
//! query and key chunk norms, and the KL divergence between the attention
//! distribution and the one obtained with that subspace zeroed. Head scores
//! are averaged within each kv group and the top `d_rope/2` subspaces kept.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_mha_gqa, project_heads, rotate_columns, AttentionWeights, ModelConfig, TokenSequence};
use crate::numerics::{kl_divergence, norm2, softmax_rows, Matrix};
use crate::rope::Position;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TwoNorm,
    Mkl,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::TwoNorm => "two_norm",
            Strategy::Mkl => "mkl",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2norm" | "two_norm" => Ok(Strategy::TwoNorm),
            "mkl" => Ok(Strategy::Mkl),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Retained subspaces of one layer, one ascending index list per kv group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub groups: Vec<Vec<usize>>,
}

impl LayerSelection {
    /// Every subspace retained in every group.
    pub fn full(n_kv_heads: usize, n_subspaces: usize) -> Self {
        Self {
            groups: vec![(0..n_subspaces).collect(); n_kv_heads],
        }
    }

    pub fn validate(&self, n_kv_heads: usize, n_subspaces: usize, n_retained: usize) -> Result<()> {
        if self.groups.len() != n_kv_heads {
            return Err(Error::InvalidArgument(format!(
                "selection has {} groups, expected {n_kv_heads}",
                self.groups.len()
            )));
        }
        for (g, s) in self.groups.iter().enumerate() {
            if s.len() != n_retained {
                return Err(Error::InvalidArgument(format!(
                    "group {g} retains {} subspaces, expected {n_retained}",
                    s.len()
                )));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&k| k >= n_subspaces) {
                return Err(Error::InvalidArgument(format!(
                    "group {g} indices {s:?} must be ascending, unique and below {n_subspaces}"
                )));
            }
        }
        Ok(())
    }

    /// Chunk order for group `g`: retained chunks first, then the rest, each
    /// ascending.
    pub fn chunk_order(&self, g: usize, n_subspaces: usize) -> Vec<usize> {
        let kept = &self.groups[g];
        let mut order = kept.clone();
        order.extend((0..n_subspaces).filter(|k| !kept.contains(k)));
        order
    }

    /// Dimension permutation for group `g`: row `i` of the permuted head is
    /// row `dim_order[i]` of the original.
    pub fn dim_order(&self, g: usize, n_subspaces: usize) -> Vec<usize> {
        self.chunk_order(g, n_subspaces)
            .into_iter()
            .flat_map(|k| [2 * k, 2 * k + 1])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceSelection {
    pub strategy: Strategy,
    pub layers: Vec<LayerSelection>,
}

/// Per (layer, head, subspace) sensitivity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub strategy: Strategy,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_subspaces: usize,
    scores: Vec<f64>,
}

impl SensitivityMap {
    pub fn new(strategy: Strategy, n_layers: usize, n_heads: usize, n_subspaces: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_layers * n_heads * n_subspaces {
            return Err(Error::Shape(format!(
                "{} scores for {n_layers}x{n_heads}x{n_subspaces}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument("scores must be finite and nonnegative".into()));
        }
        Ok(Self {
            strategy,
            n_layers,
            n_heads,
            n_subspaces,
            scores,
        })
    }

    pub fn get(&self, layer: usize, head: usize, k: usize) -> f64 {
        self.scores[(layer * self.n_heads + head) * self.n_subspaces + k]
    }

    /// Scores of one head, indexed by subspace.
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.n_heads + head) * self.n_subspaces;
        &self.scores[start..start + self.n_subspaces]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Rows `layer,head,k,score`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "k", "score"])?;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for k in 0..self.n_subspaces {
                    w.write_record([
                        l.to_string(),
                        h.to_string(),
                        k.to_string(),
                        format!("{:.12e}", self.get(l, h, k)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Layer inputs of the original model for every calibration sequence,
/// indexed `[sequence][layer]`.
pub(crate) fn teacher_inputs(cfg: &ModelConfig, layers: &[AttentionWeights], calib: &[TokenSequence]) -> Result<Vec<Vec<Matrix>>> {
    calib
        .iter()
        .map(|s| forward_mha_gqa(cfg, layers, s).map(|p| p.layer_inputs))
        .collect()
}

fn check_batch(cfg: &ModelConfig, layers: &[AttentionWeights], calib: &[TokenSequence]) -> Result<()> {
    cfg.validate()?;
    if calib.is_empty() || calib.iter().all(TokenSequence::is_empty) {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    if layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!("{} layers for a {}-layer config", layers.len(), cfg.n_layers)));
    }
    Ok(())
}

fn chunk_norm(m: &Matrix, k: usize, j: usize) -> f64 {
    norm2(&[m[(2 * k, j)], m[(2 * k + 1, j)]])
}

/// Mean over calibration tokens of `‖q^[2k,2k+1]‖·‖k^[2k,2k+1]‖`, on
/// unrotated projections of each layer's input in the original model.
pub fn score_two_norm(cfg: &ModelConfig, layers: &[AttentionWeights], calib: &[TokenSequence]) -> Result<SensitivityMap> {
    check_batch(cfg, layers, calib)?;
    let inputs = teacher_inputs(cfg, layers, calib)?;
    two_norm_from_inputs(cfg, layers, &inputs)
}

pub(crate) fn two_norm_from_inputs(cfg: &ModelConfig, layers: &[AttentionWeights], inputs: &[Vec<Matrix>]) -> Result<SensitivityMap> {
    let n_sub = cfg.n_subspaces();
    let n_tokens: usize = inputs.iter().map(|s| s[0].cols()).sum();
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    let per_layer: Vec<Vec<f64>> = (0..cfg.n_layers)
        .into_par_iter()
        .map(|l| {
            let w = &layers[l];
            let mut acc = vec![0.0; cfg.n_heads * n_sub];
            for seq_inputs in inputs {
                let x = &seq_inputs[l];
                let q = project_heads(&w.w_q, cfg.n_heads, cfg.d_head, x);
                let k = project_heads(&w.w_k, cfg.n_kv_heads, cfg.d_head, x);
                for (h, qh) in q.iter().enumerate() {
                    let kg = &k[cfg.kv_head_of(h)];
                    for s in 0..n_sub {
                        let mut sum = 0.0;
                        for j in 0..x.cols() {
                            sum += chunk_norm(qh, s, j) * chunk_norm(kg, s, j);
                        }
                        acc[h * n_sub + s] += sum;
                    }
                }
            }
            acc.iter().map(|a| a / n_tokens as f64).collect()
        })
        .collect();
    SensitivityMap::new(Strategy::TwoNorm, cfg.n_layers, cfg.n_heads, n_sub, per_layer.concat())
}

/// Mean row-wise `KL(P_full ‖ P_masked)` where `P_masked` zeroes subspace
/// `k` of the query and key projections before rotation.
///
/// Each sequence contributes the mean over its query rows; sequences are
/// then averaged with equal weight.
pub fn score_mkl(cfg: &ModelConfig, layers: &[AttentionWeights], calib: &[TokenSequence]) -> Result<SensitivityMap> {
    check_batch(cfg, layers, calib)?;
    if let Some(s) = calib.iter().find(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "MKL scoring needs sequences of at least 2 tokens, got {}",
            s.len()
        )));
    }
    let inputs = teacher_inputs(cfg, layers, calib)?;
    let positions: Vec<&[Position]> = calib.iter().map(|s| s.positions.as_slice()).collect();
    mkl_from_inputs(cfg, layers, &inputs, &positions)
}

pub(crate) fn mkl_from_inputs(
    cfg: &ModelConfig,
    layers: &[AttentionWeights],
    inputs: &[Vec<Matrix>],
    positions: &[&[Position]],
) -> Result<SensitivityMap> {
    let spec = cfg.rope_spec();
    let n_sub = cfg.n_subspaces();
    let all: Vec<usize> = (0..n_sub).collect();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let per_layer: Vec<Result<Vec<f64>>> = (0..cfg.n_layers)
        .into_par_iter()
        .map(|l| {
            let w = &layers[l];
            let mut acc = vec![0.0; cfg.n_heads * n_sub];
            for (seq_inputs, pos) in inputs.iter().zip(positions) {
                let x = &seq_inputs[l];
                let n = x.cols();
                let mut q = project_heads(&w.w_q, cfg.n_heads, cfg.d_head, x);
                let mut k = project_heads(&w.w_k, cfg.n_kv_heads, cfg.d_head, x);
                for m in q.iter_mut().chain(k.iter_mut()) {
                    rotate_columns(&spec, m, pos, &all, false);
                }
                for (h, qh) in q.iter().enumerate() {
                    let kg = &k[cfg.kv_head_of(h)];
                    let full = qh.t_matmul(kg).scale(scale);
                    let p_full = softmax_rows(&full, true)?;
                    for s in 0..n_sub {
                        let mut masked = full.clone();
                        for i in 0..n {
                            for j in 0..=i {
                                let c = qh[(2 * s, i)] * kg[(2 * s, j)] + qh[(2 * s + 1, i)] * kg[(2 * s + 1, j)];
                                masked[(i, j)] -= c * scale;
                            }
                        }
                        let p_masked = softmax_rows(&masked, true)?;
                        let mut row_sum = 0.0;
                        for i in 0..n {
                            row_sum += kl_divergence(&p_full.row(i)[..=i], &p_masked.row(i)[..=i])?;
                        }
                        acc[h * n_sub + s] += row_sum / n as f64;
                    }
                }
            }
            Ok(acc.iter().map(|a| a / inputs.len() as f64).collect())
        })
        .collect();
    let scores = per_layer.into_iter().collect::<Result<Vec<_>>>()?.concat();
    SensitivityMap::new(Strategy::Mkl, cfg.n_layers, cfg.n_heads, n_sub, scores)
}

/// Indices of the `r` largest scores, ties to the lower index, returned
/// ascending.
pub fn top_r(scores: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = idx[..r].to_vec();
    kept.sort_unstable();
    kept
}

/// Average head scores within each kv group and keep the top `d_rope/2`.
pub fn select_top_r(map: &SensitivityMap, cfg: &ModelConfig) -> Result<SubspaceSelection> {
    let r = cfg.n_retained();
    let n_sub = cfg.n_subspaces();
    if r == 0 || r > n_sub {
        return Err(Error::InvalidArgument(format!("r = {r} outside [1, {n_sub}]")));
    }
    if map.n_layers != cfg.n_layers || map.n_heads != cfg.n_heads || map.n_subspaces != n_sub {
        return Err(Error::Shape(format!(
            "sensitivity map is {}x{}x{}, config needs {}x{}x{}",
            map.n_layers, map.n_heads, map.n_subspaces, cfg.n_layers, cfg.n_heads, n_sub
        )));
    }
    let gs = cfg.group_size();
    let layers = (0..cfg.n_layers)
        .map(|l| LayerSelection {
            groups: (0..cfg.n_kv_heads)
                .map(|g| {
                    let mean: Vec<f64> = (0..n_sub)
                        .map(|k| (0..gs).map(|i| map.get(l, g * gs + i, k)).sum::<f64>() / gs as f64)
                        .collect();
                    top_r(&mean, r)
                })
                .collect(),
        })
        .collect();
    Ok(SubspaceSelection {
        strategy: map.strategy,
        layers,
    })
}
