use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Floor applied to `q` entries that would otherwise zero out a KL term.
pub const KL_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// Row-wise softmax with max subtraction.
///
/// With `causal_mask`, entry `(i, j)` is masked when `j > i + (cols - rows)`,
/// so a square matrix gets the usual lower-triangular mask and a block of
/// new queries against a longer key history lines up on the right edge.
pub fn softmax_rows(scores: &Matrix, causal_mask: bool) -> Result<Matrix> {
    let (rows, cols) = scores.shape();
    if !scores.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if causal_mask && cols < rows {
        return Err(shape_err(format!(
            "causal softmax needs cols >= rows, got {rows}x{cols}"
        )));
    }
    let offset = cols.saturating_sub(rows);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let visible = if causal_mask { r + offset + 1 } else { cols };
        if visible == 0 {
            return Err(Error::InvalidArgument(format!("row {r} is fully masked")));
        }
        let row = &scores.row(r)[..visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &s) in out_row.iter_mut().zip(row) {
            *o = (s - max).exp();
            sum += *o;
        }
        for o in &mut out_row[..visible] {
            *o /= sum;
        }
    }
    Ok(out)
}

/// `KL(p ‖ q) = Σ p ln(p / q)` over entries with `p > 0`.
///
/// Entries of `q` below [`KL_FLOOR`] where `p > 0` are raised to the floor
/// and `q` is renormalized before the sum.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err(format!(
            "kl_divergence lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    if p == q {
        return Ok(0.0);
    }
    let needs_floor = p.iter().zip(q).any(|(&pi, &qi)| pi > 0.0 && qi < KL_FLOOR);
    let floored: Vec<f64>;
    let q = if needs_floor {
        let raised: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(&pi, &qi)| if pi > 0.0 { qi.max(KL_FLOOR) } else { qi })
            .collect();
        let total: f64 = raised.iter().sum();
        floored = raised.into_iter().map(|v| v / total).collect();
        &floored[..]
    } else {
        q
    };
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(kl.max(0.0))
}

fn check_simplex(v: &[f64], name: &str) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} has a negative or non-finite entry {bad}"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}
