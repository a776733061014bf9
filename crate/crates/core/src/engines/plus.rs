use super::LayerBundle;
use crate::error::{Error, Result};
use crate::linalg::{HessianState, InvCholFactor};
use crate::matrix::{DenseMatrix, MatMut, MatRef};

/// `H[q, q+1..] · H[q+1.., q+1..]⁻¹` as a row vector of length `dim - q - 1`.
pub(crate) fn plus_direction(h: &DenseMatrix, factor: &InvCholFactor, q: usize) -> Vec<f64> {
    let d = factor.dim();
    let n = d - q - 1;
    let mut v = vec![0.0; n];
    if n == 0 {
        return v;
    }
    let hrow = &h.row(q)[q + 1..];
    let mut out = MatMut::new(&mut v, 1, n, n);
    factor.apply_inverse_block(q + 1..d, MatRef::row_major(hrow, 1, n), 1.0, &mut out);
    v
}

/// Cross term `W[:, q] · H[q, q+1..] · H[q+1.., q+1..]⁻¹` for the columns after `q`.
///
/// `H[q, :]` stands in for `X[q, :] Xᵀ`; the factor of two dropped from `H`
/// cancels against the inverse.
pub fn foem_plus_term(
    layer: &LayerBundle,
    hessian: &HessianState,
    factor: &InvCholFactor,
    q: usize,
) -> Result<DenseMatrix> {
    let d = layer.d_in();
    if hessian.dim() != d || factor.dim() != d {
        return Err(Error::dims("foem_plus_term", d, format!("H {} / T {}", hessian.dim(), factor.dim())));
    }
    if q >= d {
        return Err(Error::dims("foem_plus_term column", format!("q < {d}"), q));
    }
    let v = plus_direction(&hessian.undamped(), factor, q);
    let w = layer.latent();
    Ok(DenseMatrix::from_fn(layer.d_out(), v.len(), |r, c| w[(r, q)] * v[c]))
}
