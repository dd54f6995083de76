//! Activation-whitened low-rank factorization, one factor pair per modality.
//!
//! For a weight `W` and calibration activations `X`, the factorization
//! minimizes `‖W X − W_up W_down X‖_F²` at a given rank by whitening with the
//! activation covariance before truncating.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::model::{Modality, ModalityPair};
use crate::numerics::{svd, svd_psd, Matrix};

/// Default relative ridge added to the covariance diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Columns per covariance accumulation chunk. Fixed so results do not depend
/// on thread count or batch layout.
const COV_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationResult {
    /// `rows(w) × rank`
    pub w_up: Matrix,
    /// `rank × d_model`
    pub w_down: Matrix,
    pub rank: usize,
    /// `‖W X − W_up W_down X‖_F²` evaluated on the calibration activations.
    pub loss_sq: f64,
    /// `Σ_{i > rank} σ_i(D)²`.
    pub loss_sq_closed_form: f64,
    /// Singular values of the whitened weight past `rank`.
    pub discarded_spectrum: Vec<f64>,
}

/// `X Xᵀ`, accumulated over fixed column chunks in order.
pub fn covariance(x: &Matrix) -> Matrix {
    let d = x.rows();
    let mut s = Matrix::zeros(d, d);
    let mut start = 0;
    while start < x.cols() {
        let len = COV_CHUNK.min(x.cols() - start);
        let chunk = x.col_block(start, len);
        s.add_assign(&chunk.matmul_t(&chunk));
        start += len;
    }
    // Symmetrize away rounding so the eigensolver sees an exactly symmetric input.
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = m;
            s[(j, i)] = m;
        }
    }
    s
}

/// Whitened truncated SVD of `w` on activations `x` (`d_model × n`).
///
/// `S = X Xᵀ + ridge·(tr S / d)·I = U_s Σ_s U_sᵀ`, `D = W U_s Σ_s^{1/2}`,
/// `D ≈ U_d Σ_d V_dᵀ` at `rank`; then `W_up = U_d Σ_d^{1/2}` and
/// `W_down = Σ_d^{1/2} V_dᵀ Σ_s^{-1/2} U_sᵀ`. Eigenvalues of `S` at or below
/// `d · ε · λ_max` are treated as zero in `Σ_s^{-1/2}`.
pub fn whitened_factorize(w: &Matrix, x: &Matrix, rank: usize, ridge: f64) -> Result<FactorizationResult> {
    let d = x.rows();
    if w.cols() != d {
        return Err(shape_err(format!(
            "weight has {} columns, activations have {d} rows",
            w.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::InvalidArgument("activations have no columns".into()));
    }
    if rank == 0 || rank > w.rows().min(d) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside [1, {}]",
            w.rows().min(d)
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be finite and >= 0")));
    }

    let mut s = covariance(x);
    let shift = ridge * s.trace() / d as f64;
    for i in 0..d {
        s[(i, i)] += shift;
    }
    let eig = svd_psd(&s)?;
    let lambda_max = eig.sigma.first().copied().unwrap_or(0.0);
    let tol = d as f64 * f64::EPSILON * lambda_max;
    let sqrt_s: Vec<f64> = eig.sigma.iter().map(|l| l.sqrt()).collect();
    let inv_sqrt_s: Vec<f64> = eig
        .sigma
        .iter()
        .map(|&l| if l > tol { 1.0 / l.sqrt() } else { 0.0 })
        .collect();

    let dmat = w.matmul(&eig.u.scale_cols(&sqrt_s));
    let dsvd = svd(&dmat)?;
    let kept = dsvd.truncate(rank);
    let sqrt_d: Vec<f64> = kept.sigma.iter().map(|s| s.sqrt()).collect();
    let w_up = kept.u.scale_cols(&sqrt_d);
    let w_down = kept
        .vt
        .scale_rows(&sqrt_d)
        .scale_cols(&inv_sqrt_s)
        .matmul_t(&eig.u);

    let discarded_spectrum = dsvd.sigma[rank..].to_vec();
    let loss_sq_closed_form = discarded_spectrum.iter().map(|s| s * s).sum();
    let residual = w.sub(&w_up.matmul(&w_down));
    let loss_sq = residual.matmul(x).frobenius_norm_sq();
    Ok(FactorizationResult {
        w_up,
        w_down,
        rank,
        loss_sq,
        loss_sq_closed_form,
        discarded_spectrum,
    })
}

/// Per-modality factorizations of one shared weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MdSvdResult {
    pub factors: ModalityPair<FactorizationResult>,
    /// Modality whose factors were fitted on the other modality's
    /// activations because it had none of its own.
    pub fallback: Option<Modality>,
}

/// Factorize `w` separately on visual and text activations.
///
/// If one modality has no tokens its slot is fitted on the other modality's
/// activations and flagged in `fallback`.
pub fn md_svd(w: &Matrix, x_visual: &Matrix, x_text: &Matrix, r_visual: usize, r_text: usize, ridge: f64) -> Result<MdSvdResult> {
    let (has_v, has_t) = (x_visual.cols() > 0, x_text.cols() > 0);
    let (xv, xt, fallback) = match (has_v, has_t) {
        (true, true) => (x_visual, x_text, None),
        (false, true) => (x_text, x_text, Some(Modality::Visual)),
        (true, false) => (x_visual, x_visual, Some(Modality::Text)),
        (false, false) => {
            return Err(Error::InvalidArgument("both modalities have empty activations".into()));
        }
    };
    Ok(MdSvdResult {
        factors: ModalityPair::new(
            whitened_factorize(w, xv, r_visual, ridge)?,
            whitened_factorize(w, xt, r_text, ridge)?,
        ),
        fallback,
    })
}

/// Joint versus split truncation losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEntry {
    pub loss_joint: f64,
    pub loss_visual: f64,
    pub loss_text: f64,
    /// `(loss_visual + loss_text) / loss_joint`; 1 when the joint loss is zero.
    pub ratio: f64,
}

impl LossEntry {
    pub fn new(loss_joint: f64, loss_visual: f64, loss_text: f64) -> Self {
        let ratio = if loss_joint == 0.0 {
            if loss_visual + loss_text == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            (loss_visual + loss_text) / loss_joint
        };
        Self {
            loss_joint,
            loss_visual,
            loss_text,
            ratio,
        }
    }

    /// Split losses never exceed the joint loss beyond `1e-9` relative.
    pub fn split_not_worse(&self) -> bool {
        self.ratio <= 1.0 + 1e-9
    }
}

/// Losses of a single weight: one joint factorization on the concatenated
/// activations versus one per modality, all at `rank`.
///
/// Losses below `1e-20·‖W X‖_F²` are rounding noise of an exact fit and are
/// reported as zero.
pub fn theorem1_report(w: &Matrix, x_visual: &Matrix, x_text: &Matrix, rank: usize, ridge: f64) -> Result<LossEntry> {
    if x_visual.cols() == 0 || x_text.cols() == 0 {
        return Err(Error::InvalidArgument(
            "joint-versus-split comparison needs tokens of both modalities".into(),
        ));
    }
    let x_joint = Matrix::hstack(&[x_visual, x_text])?;
    let joint = whitened_factorize(w, &x_joint, rank, ridge)?;
    let split = md_svd(w, x_visual, x_text, rank, rank, ridge)?;
    let noise = 1e-20 * w.matmul(&x_joint).frobenius_norm_sq();
    let clean = |l: f64| if l <= noise { 0.0 } else { l };
    Ok(LossEntry::new(
        clean(joint.loss_sq),
        clean(split.factors.visual.loss_sq),
        clean(split.factors.text.loss_sq),
    ))
}

/// Per-layer loss table, one row per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rows: Vec<(usize, LossEntry)>,
}

impl LossReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "loss_joint", "loss_visual", "loss_text", "ratio"])?;
        for (layer, e) in &self.rows {
            w.write_record([
                layer.to_string(),
                format!("{:.12e}", e.loss_joint),
                format!("{:.12e}", e.loss_visual),
                format!("{:.12e}", e.loss_text),
                format!("{:.9}", e.ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::Format(format!("loss row has {} columns, expected 5", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number {:?}", &rec[i])))
            };
            let layer = rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad layer index {:?}", &rec[0])))?;
            rows.push((
                layer,
                LossEntry {
                    loss_joint: num(1)?,
                    loss_visual: num(2)?,
                    loss_text: num(3)?,
                    ratio: num(4)?,
                },
            ));
        }
        Ok(Self { rows })
    }
}
