//! MHA/GQA to MLA conversion.
//!
//! Per layer: pick the retained rotary subspaces, move them to the front of
//! every q/k head, keep the retained key rows as they are, and replace the
//! remaining key rows plus the value rows with per-modality low-rank factors
//! fitted on the original model's activations.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::cachekit::{self, Baseline};
use crate::error::{Error, Result};
use crate::mdsvd::{md_svd, theorem1_report, LossEntry, LossReport};
use crate::model::{
    forward_mha_gqa, forward_mla, gqa_layer_full, mla_layer_once, permute_layer, AttentionWeights, KvCache,
    MlaLayerWeights, Modality, ModalityPair, ModelConfig, PartialRopeModel, TokenSequence,
};
use crate::numerics::{norm2, Matrix};
use crate::selection::{
    mkl_from_inputs, select_top_r, teacher_inputs, two_norm_from_inputs, LayerSelection, SensitivityMap, Strategy,
    SubspaceSelection,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvertOptions {
    pub strategy: Strategy,
    pub ridge: f64,
    /// Accept calibration data with a single modality; the missing
    /// modality's factors are then fitted on the present one.
    pub allow_fallback: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::TwoNorm,
            ridge: crate::mdsvd::DEFAULT_RIDGE,
            allow_fallback: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    /// Retained subspaces per kv group.
    pub retained: Vec<Vec<usize>>,
    /// Truncation loss per modality, summed over kv groups.
    pub loss_sq: ModalityPair<f64>,
    /// Cached elements per token for this layer, before and after.
    pub cache_before: usize,
    pub cache_after: usize,
    /// Max per-token relative difference between the original layer output
    /// and a full-rank MLA conversion of it, on the calibration inputs.
    pub residual: f64,
    pub fallback: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionReport {
    pub strategy: Strategy,
    pub layers: Vec<LayerReport>,
}

impl ConversionReport {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer",
            "strategy",
            "retained",
            "loss_visual",
            "loss_text",
            "cache_before",
            "cache_after",
            "residual",
            "fallback",
        ])?;
        for l in &self.layers {
            let retained = l
                .retained
                .iter()
                .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join("|");
            w.write_record([
                l.layer.to_string(),
                self.strategy.to_string(),
                retained,
                format!("{:.12e}", l.loss_sq.visual),
                format!("{:.12e}", l.loss_sq.text),
                l.cache_before.to_string(),
                l.cache_after.to_string(),
                format!("{:.6e}", l.residual),
                l.fallback.map_or("", Modality::name).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("strategy: {}\n", self.strategy);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer {}: retained {:?}, loss visual {:.6e}, loss text {:.6e}, cache {} -> {} elements/token, full-rank residual {:.3e}{}",
                l.layer,
                l.retained,
                l.loss_sq.visual,
                l.loss_sq.text,
                l.cache_before,
                l.cache_after,
                l.residual,
                l.fallback
                    .map(|m| format!(", {} factors fitted on the other modality", m.name()))
                    .unwrap_or_default()
            );
        }
        s
    }
}

/// A converted model together with what produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    pub cfg: ModelConfig,
    pub layers: Vec<MlaLayerWeights>,
    pub selection: SubspaceSelection,
    pub scores: SensitivityMap,
    pub report: ConversionReport,
}

/// Activations of `layer` for tokens of modality `m`, sequences in order.
fn modality_columns(inputs: &[Vec<Matrix>], calib: &[TokenSequence], layer: usize, m: Modality) -> Matrix {
    let d = inputs.first().map_or(0, |s| s[layer].rows());
    let mut cols = Vec::new();
    for (seq_inputs, seq) in inputs.iter().zip(calib) {
        let x = &seq_inputs[layer];
        for (j, &tag) in seq.modality.iter().enumerate() {
            if tag == m {
                cols.push(x.col(j));
            }
        }
    }
    let mut out = Matrix::zeros(d, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_col(j, c);
    }
    out
}

/// Build one MLA layer from an original layer and its selection.
fn convert_layer(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    sel: &LayerSelection,
    x: &ModalityPair<Matrix>,
    ridge: f64,
) -> Result<(MlaLayerWeights, ModalityPair<f64>)> {
    let p = permute_layer(cfg, w, sel);
    let (d_head, d_rope) = (cfg.d_head, cfg.d_rope);
    let rope_idx: Vec<usize> = (0..cfg.n_kv_heads)
        .flat_map(|g| (0..d_rope).map(move |r| g * d_head + r))
        .collect();
    let k_rope_rows = p.w_k.select_rows(&rope_idx);
    let mut w_down = ModalityPair::new(Vec::new(), Vec::new());
    let mut w_up = ModalityPair::new(Vec::new(), Vec::new());
    let mut losses = ModalityPair::new(0.0, 0.0);
    let mut fallback = None;
    for g in 0..cfg.n_kv_heads {
        let nope = p.w_k.row_block(g * d_head + d_rope, d_head - d_rope);
        let v = p.w_v.row_block(g * d_head, d_head);
        let stacked = Matrix::vstack(&[&nope, &v])?;
        let r = md_svd(&stacked, &x.visual, &x.text, cfg.d_latent, cfg.d_latent, ridge)?;
        fallback = r.fallback;
        for m in Modality::ALL {
            let f = r.factors.get(m);
            w_down.get_mut(m).push(f.w_down.clone());
            w_up.get_mut(m).push(f.w_up.clone());
            *losses.get_mut(m) += f.loss_sq;
        }
    }
    let out = MlaLayerWeights {
        selection: sel.clone(),
        w_q: p.w_q,
        k_rope_rows,
        w_down,
        w_up,
        w_o: w.w_o.clone(),
        fallback,
    };
    Ok((out, losses))
}

/// Max over tokens of `‖a_j − b_j‖ / ‖b_j‖` (columns are tokens).
pub fn max_relative_column_diff(a: &Matrix, b: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..b.cols() {
        let (ca, cb) = (a.col(j), b.col(j));
        let diff: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
        let denom = norm2(&cb).max(f64::MIN_POSITIVE);
        worst = worst.max(norm2(&diff) / denom);
    }
    worst
}

/// Largest per-token relative difference between the final outputs of the
/// original stack and a converted one over `seqs`.
pub fn output_residual(
    cfg: &ModelConfig,
    original: &[AttentionWeights],
    mla_cfg: &ModelConfig,
    mla: &[MlaLayerWeights],
    seqs: &[TokenSequence],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in seqs {
        let a = forward_mha_gqa(cfg, original, s)?;
        let b = forward_mla(mla_cfg, mla, s, KvCache::new(mla_cfg))?;
        worst = worst.max(max_relative_column_diff(&b.output, &a.output));
    }
    Ok(worst)
}

/// Convert every layer of `layers` to MLA with the targets in `cfg`
/// (`d_rope`, `d_latent`).
///
/// Calibration activations are the layer inputs of the original model.
pub fn convert(cfg: &ModelConfig, layers: &[AttentionWeights], calib: &[TokenSequence], opts: ConvertOptions) -> Result<Conversion> {
    cfg.validate()?;
    if layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!("{} layers for a {}-layer config", layers.len(), cfg.n_layers)));
    }
    if cfg.d_latent > cfg.d_model {
        return Err(Error::Config(format!(
            "d_latent {} exceeds d_model {}; the factor rank cannot be that large",
            cfg.d_latent, cfg.d_model
        )));
    }
    if calib.is_empty() || calib.iter().all(TokenSequence::is_empty) {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    let n_visual: usize = calib.iter().map(|s| s.count(Modality::Visual)).sum();
    let n_text: usize = calib.iter().map(|s| s.count(Modality::Text)).sum();
    if !opts.allow_fallback && (n_visual == 0 || n_text == 0) {
        return Err(Error::InvalidArgument(format!(
            "calibration has {n_visual} visual and {n_text} text tokens; both modalities are required"
        )));
    }

    let inputs = teacher_inputs(cfg, layers, calib)?;
    let scores = match opts.strategy {
        Strategy::TwoNorm => two_norm_from_inputs(cfg, layers, &inputs)?,
        Strategy::Mkl => {
            if let Some(s) = calib.iter().find(|s| s.len() < 2) {
                return Err(Error::InvalidArgument(format!(
                    "MKL scoring needs sequences of at least 2 tokens, got {}",
                    s.len()
                )));
            }
            let positions: Vec<_> = calib.iter().map(|s| s.positions.as_slice()).collect();
            mkl_from_inputs(cfg, layers, &inputs, &positions)?
        }
    };
    let selection = select_top_r(&scores, cfg)?;
    let (out_layers, reports) = build_layers(cfg, layers, &selection, &inputs, calib, opts.ridge)?;
    Ok(Conversion {
        cfg: *cfg,
        layers: out_layers,
        selection,
        scores,
        report: ConversionReport {
            strategy: opts.strategy,
            layers: reports,
        },
    })
}

/// Convert each layer with a fixed selection, fitting factors on `inputs`
/// (`[sequence][layer]`).
fn build_layers(
    cfg: &ModelConfig,
    layers: &[AttentionWeights],
    selection: &SubspaceSelection,
    inputs: &[Vec<Matrix>],
    calib: &[TokenSequence],
    ridge: f64,
) -> Result<(Vec<MlaLayerWeights>, Vec<LayerReport>)> {
    let full_cfg = cfg.full_rank();
    let full_sel = LayerSelection::full(cfg.n_kv_heads, cfg.n_subspaces());
    let per_token_before = cachekit::baseline_elements(cfg, Baseline::Gqa) / cfg.n_layers;
    let per_token_after = cachekit::mla_elements(cfg) / cfg.n_layers;

    let converted: Vec<Result<(MlaLayerWeights, LayerReport)>> = (0..cfg.n_layers)
        .into_par_iter()
        .map(|l| {
            let run = || -> Result<(MlaLayerWeights, LayerReport)> {
                let x = ModalityPair::new(
                    modality_columns(inputs, calib, l, Modality::Visual),
                    modality_columns(inputs, calib, l, Modality::Text),
                );
                let (mla, loss_sq) = convert_layer(cfg, &layers[l], &selection.layers[l], &x, ridge)?;
                let (full, _) = convert_layer(&full_cfg, &layers[l], &full_sel, &x, ridge)?;
                let mut residual: f64 = 0.0;
                for (seq_inputs, seq) in inputs.iter().zip(calib) {
                    let xin = &seq_inputs[l];
                    let reference = gqa_layer_full(cfg, &layers[l], xin, &seq.positions)?;
                    let got = mla_layer_once(&full_cfg, &full, xin, seq)?;
                    residual = residual.max(max_relative_column_diff(&got, &reference));
                }
                let report = LayerReport {
                    layer: l,
                    retained: selection.layers[l].groups.clone(),
                    loss_sq,
                    cache_before: per_token_before,
                    cache_after: per_token_after,
                    residual,
                    fallback: mla.fallback,
                };
                Ok((mla, report))
            };
            run().map_err(|e| e.in_layer(l))
        })
        .collect();

    let mut out_layers = Vec::with_capacity(cfg.n_layers);
    let mut reports = Vec::with_capacity(cfg.n_layers);
    for r in converted {
        let (w, rep) = r?;
        out_layers.push(w);
        reports.push(rep);
    }
    Ok((out_layers, reports))
}

/// Convert a partial-RoPE model, keeping its selection and fitting the
/// factors on its own layer inputs.
pub fn convert_partial(
    model: &PartialRopeModel,
    calib: &[TokenSequence],
    ridge: f64,
) -> Result<(Vec<MlaLayerWeights>, ConversionReport)> {
    let cfg = &model.cfg;
    if calib.is_empty() {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    let inputs: Vec<Vec<Matrix>> = calib
        .iter()
        .map(|s| model.forward(s).map(|p| p.layer_inputs))
        .collect::<Result<_>>()?;
    let original = model.original_layout();
    let (layers, reports) = build_layers(cfg, &original, &model.selection, &inputs, calib, ridge)?;
    Ok((
        layers,
        ConversionReport {
            strategy: model.selection.strategy,
            layers: reports,
        },
    ))
}

/// Joint versus split truncation loss of every layer's stacked key/value
/// projection `[w_k; w_v]` at `rank`, on the original model's activations.
pub fn loss_report(
    cfg: &ModelConfig,
    layers: &[AttentionWeights],
    calib: &[TokenSequence],
    rank: usize,
    ridge: f64,
) -> Result<LossReport> {
    cfg.validate()?;
    if layers.len() != cfg.n_layers {
        return Err(Error::Shape(format!("{} layers for a {}-layer config", layers.len(), cfg.n_layers)));
    }
    let inputs = teacher_inputs(cfg, layers, calib)?;
    let rows: Vec<Result<(usize, LossEntry)>> = (0..cfg.n_layers)
        .into_par_iter()
        .map(|l| {
            let w = Matrix::vstack(&[&layers[l].w_k, &layers[l].w_v])?;
            let xv = modality_columns(&inputs, calib, l, Modality::Visual);
            let xt = modality_columns(&inputs, calib, l, Modality::Text);
            theorem1_report(&w, &xv, &xt, rank, ridge)
                .map(|e| (l, e))
                .map_err(|e| e.in_layer(l))
        })
        .collect();
    Ok(LossReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
