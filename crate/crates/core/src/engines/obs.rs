//! Dense optimal-brain-surgeon route: explicit inverse Hessian, shrunk by one
//! row and column after every quantized column. Cubic per column, so it only
//! serves as the reference the Cholesky engines are checked against.

use super::{LayerBundle, ScaleSource};
use crate::error::{Error, Result};
use crate::linalg::{dense_inverse, iterative_inverse_update, HessianState};
use crate::matrix::DenseMatrix;
use crate::quantizer::{fit_scales, quantize_value, QuantGrid, QuantizedLayer};

fn check_pivot(w_row: &[f64], hinv: &DenseMatrix, q: usize) -> Result<f64> {
    if !hinv.is_square() || hinv.rows() != w_row.len() || q >= w_row.len() {
        return Err(Error::dims(
            "obs step",
            format!("square inverse of size {} and q < {}", w_row.len(), w_row.len()),
            format!("{:?}, q = {q}", hinv.shape()),
        ));
    }
    let hqq = hinv[(q, q)];
    if !(hqq > 0.0) {
        return Err(Error::NonPositiveDiagonal { index: q, value: hqq });
    }
    Ok(hqq)
}

/// Compensation for removing weight `q`: `δw = -(w_q / [H⁻¹]_qq) [H⁻¹]_q,:`.
pub fn obs_prune_step(w_row: &[f64], hinv: &DenseMatrix, q: usize) -> Result<Vec<f64>> {
    let hqq = check_pivot(w_row, hinv, q)?;
    let f = w_row[q] / hqq;
    Ok(hinv.row(q).iter().map(|h| -f * h).collect())
}

/// Compensation for rounding weight `q` to `deq_q`:
/// `δw = -((w_q - ŵ_q) / [H⁻¹]_qq) [H⁻¹]_q,:`.
pub fn obc_quant_step(w_row: &[f64], hinv: &DenseMatrix, q: usize, deq_q: f64) -> Result<Vec<f64>> {
    let hqq = check_pivot(w_row, hinv, q)?;
    let f = (w_row[q] - deq_q) / hqq;
    Ok(hinv.row(q).iter().map(|h| -f * h).collect())
}

/// Full left-to-right pass over a damped Hessian using the dense inverse
/// and the one-step removal rule.
pub fn obc_pass(
    layer: &mut LayerBundle,
    damped: &HessianState,
    grid: &QuantGrid,
    scale_source: ScaleSource,
) -> Result<QuantizedLayer> {
    if !damped.is_damped() {
        return Err(Error::HessianState("obc_pass requires a damped state"));
    }
    let (d_out, d_in) = (layer.d_out(), layer.d_in());
    if damped.dim() != d_in {
        return Err(Error::dims("obc_pass Hessian", d_in, damped.dim()));
    }
    let group_len = grid.group_len(d_in);
    let n_groups = grid.n_groups(d_in);
    let mut out = QuantizedLayer::new(d_out, d_in, *grid);
    let mut hinv = dense_inverse(damped.matrix())?;
    let (lat, original) = layer.parts_mut();

    for q in 0..d_in {
        let g = q / group_len;
        if q % group_len == 0 {
            let g_end = (q + group_len).min(d_in);
            for r in 0..d_out {
                let src = match scale_source {
                    ScaleSource::Latent => &lat.row(r)[q..g_end],
                    ScaleSource::Original => &original.row(r)[q..g_end],
                };
                out.scales_mut()[r * n_groups + g] = fit_scales(src, grid);
            }
        }
        for r in 0..d_out {
            let gs = out.scales()[r * n_groups + g];
            let row = lat.row_mut(r);
            let (code, deq) = quantize_value(row[q], &gs, grid);
            out.codes_mut()[r * d_in + q] = code;
            // the live inverse covers columns q.. only; local index 0 is q
            let delta = obc_quant_step(&row[q..], &hinv, 0, deq)?;
            for (w, d) in row[q..].iter_mut().zip(delta) {
                *w += d;
            }
        }
        if q + 1 < d_in {
            hinv = iterative_inverse_update(&hinv, 0)?;
        }
    }
    Ok(out)
}
