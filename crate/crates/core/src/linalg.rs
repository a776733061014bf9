//! Dense symmetric linear algebra for layer-wise calibration.
//!
//! The central object is [`InvCholFactor`]: the upper-triangular `T` with
//! `TᵀT = (H + λI)⁻¹`. Its trailing blocks give the inverses of trailing
//! principal submatrices of `H` directly:
//! `T[q+1.., q+1..]ᵀ T[q+1.., q+1..] = H[q+1.., q+1..]⁻¹`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::matrix::{gemm, DenseMatrix, MatMut, MatRef};

const BLOCK: usize = 64;

/// Accumulated input covariance `H = Σ X Xᵀ` of one layer.
///
/// The factor 2 of the row-wise loss Hessian is left out. The second-order
/// compensation is invariant to rescaling `H`; the first-order term is not,
/// so dropping the 2 amounts to halving β.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    h: DenseMatrix,
    n_samples: u64,
    damped: bool,
    lambda: f64,
}

/// Outcome of [`HessianState::dampen`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Damping {
    pub lambda: f64,
    /// Set when `ratio > 0` but the diagonal mean is zero, so nothing was
    /// added and `H` may still be singular.
    pub singular_risk: bool,
}

impl HessianState {
    pub fn new(dim: usize) -> Self {
        HessianState {
            h: DenseMatrix::zeros(dim, dim),
            n_samples: 0,
            damped: false,
            lambda: 0.0,
        }
    }

    /// Wraps a precomputed symmetric matrix (for example one loaded from disk).
    pub fn from_matrix(h: DenseMatrix, n_samples: u64) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::dims("HessianState::from_matrix", "square matrix", format!("{:?}", h.shape())));
        }
        let mut state = HessianState {
            h,
            n_samples,
            damped: false,
            lambda: 0.0,
        };
        state.symmetrize();
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.h
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.h
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn is_damped(&self) -> bool {
        self.damped
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `H += X Xᵀ` for `X` of shape `dim × n_tokens`.
    pub fn accumulate(&mut self, x: &DenseMatrix) -> Result<()> {
        if self.damped {
            return Err(Error::HessianState("cannot accumulate after damping"));
        }
        if x.rows() != self.dim() {
            return Err(Error::dims("accumulate", format!("{} rows", self.dim()), format!("{} rows", x.rows())));
        }
        let d = self.dim();
        gemm(1.0, x.view(), x.view().t(), 1.0, self.h.sub_mut(0..d, 0..d));
        self.symmetrize();
        self.n_samples += x.cols() as u64;
        Ok(())
    }

    /// Merges another undamped state of the same dimension.
    pub fn merge(&mut self, other: &HessianState) -> Result<()> {
        if self.damped || other.damped {
            return Err(Error::HessianState("cannot merge damped states"));
        }
        if other.dim() != self.dim() {
            return Err(Error::dims("merge", self.dim(), other.dim()));
        }
        for (a, b) in self.h.as_mut_slice().iter_mut().zip(other.h.as_slice()) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// Adds `λ = ratio · mean(diag H)` to the diagonal and marks the state damped.
    pub fn dampen(&mut self, ratio: f64) -> Result<Damping> {
        if !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(Error::Config(format!("damping ratio must be finite and >= 0, got {ratio}")));
        }
        if self.n_samples == 0 {
            return Err(Error::HessianState("no samples accumulated"));
        }
        if self.damped {
            return Err(Error::HessianState("already damped"));
        }
        let d = self.dim();
        let mean = if d == 0 {
            0.0
        } else {
            self.h.diag().iter().sum::<f64>() / d as f64
        };
        let lambda = ratio * mean;
        for i in 0..d {
            self.h[(i, i)] += lambda;
        }
        self.damped = true;
        self.lambda = lambda;
        Ok(Damping {
            lambda,
            singular_risk: ratio > 0.0 && mean == 0.0,
        })
    }

    /// The undamped matrix: `H - λI`.
    pub fn undamped(&self) -> DenseMatrix {
        let mut h = self.h.clone();
        if self.damped {
            for i in 0..self.dim() {
                h[(i, i)] -= self.lambda;
            }
        }
        h
    }

    /// Multiplies `H` by `c > 0` (used to check scale invariance).
    pub fn rescaled(&self, c: f64) -> HessianState {
        HessianState {
            h: self.h.scaled(c),
            n_samples: self.n_samples,
            damped: self.damped,
            lambda: self.lambda * c,
        }
    }

    fn symmetrize(&mut self) {
        let d = self.dim();
        for r in 0..d {
            for c in r + 1..d {
                self.h[(c, r)] = self.h[(r, c)];
            }
        }
    }
}

/// Upper-triangular `T` with `TᵀT = (H + λI)⁻¹`, stored dense.
#[derive(Debug, Clone, PartialEq)]
pub struct InvCholFactor {
    t: DenseMatrix,
}

impl InvCholFactor {
    /// Wraps an upper-triangular matrix with a positive diagonal.
    pub fn from_upper(t: DenseMatrix) -> Result<Self> {
        if !t.is_square() {
            return Err(Error::dims("InvCholFactor", "square", format!("{:?}", t.shape())));
        }
        for i in 0..t.rows() {
            if !(t[(i, i)] > 0.0) {
                return Err(Error::NonPositiveDiagonal { index: i, value: t[(i, i)] });
            }
        }
        Ok(InvCholFactor { t })
    }

    pub fn dim(&self) -> usize {
        self.t.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.t
    }

    #[inline]
    pub fn diag(&self, j: usize) -> f64 {
        self.t[(j, j)]
    }

    pub fn view(&self) -> MatRef<'_> {
        self.t.view()
    }

    /// Inverse of the trailing principal submatrix `H[q+1.., q+1..]`.
    ///
    /// `q = dim - 1` yields the empty matrix.
    pub fn recover_inverse_submatrix(&self, q: usize) -> Result<DenseMatrix> {
        let d = self.dim();
        if q >= d {
            return Err(Error::dims("recover_inverse_submatrix", format!("q < {d}"), q));
        }
        Ok(self.trailing_inverse(q + 1))
    }

    /// `T[s.., s..]ᵀ T[s.., s..]`, the inverse of `H[s.., s..]`.
    pub fn trailing_inverse(&self, start: usize) -> DenseMatrix {
        let d = self.dim();
        let n = d - start.min(d);
        let tail = self.t.sub(start..d, start..d);
        let mut out = DenseMatrix::zeros(n, n);
        gemm(1.0, tail.t(), tail, 0.0, out.sub_mut(0..n, 0..n));
        out
    }

    /// `out += alpha · D · T[r, r]ᵀ T[r, r]` for the index range `r`,
    /// evaluated as `(D T[r, r]ᵀ) T[r, r]` with both products restricted to
    /// the triangle so the square matrix is never formed. When `r` runs to
    /// the end this is `D · H[r, r]⁻¹`. `D` and `out` are `rows × r.len()`.
    pub fn apply_inverse_block(&self, range: Range<usize>, d: MatRef<'_>, alpha: f64, out: &mut MatMut<'_>) {
        assert!(range.start <= range.end && range.end <= self.dim());
        let n = range.len();
        assert_eq!(d.cols(), n, "apply_inverse_block: D columns");
        assert_eq!(out.cols(), n, "apply_inverse_block: output columns");
        assert_eq!(d.rows(), out.rows(), "apply_inverse_block: rows");
        let rows = d.rows();
        if n == 0 || rows == 0 {
            return;
        }
        let tail = self.t.sub(range.clone(), range);
        let mut y = DenseMatrix::zeros(rows, n);
        let mut c0 = 0;
        while c0 < n {
            let c1 = (c0 + BLOCK).min(n);
            gemm(
                1.0,
                d.sub(0..rows, c0..n),
                tail.sub(c0..c1, c0..n).t(),
                0.0,
                y.sub_mut(0..rows, c0..c1),
            );
            c0 = c1;
        }
        let mut c0 = 0;
        while c0 < n {
            let c1 = (c0 + BLOCK).min(n);
            gemm(
                alpha,
                y.sub(0..rows, 0..c1),
                tail.sub(0..c1, c0..c1),
                1.0,
                out.sub_cols(c0..c1),
            );
            c0 = c1;
        }
    }
}

/// Factors the damped Hessian into the upper inverse-Cholesky factor.
///
/// With `J` the index reversal, `J H J = C Cᵀ` (C lower) gives
/// `H = (J C J)(J C J)ᵀ` with `J C J` upper, hence `T = J C⁻¹ J` is upper
/// and `TᵀT = H⁻¹`.
pub fn inverse_cholesky(state: &HessianState) -> Result<InvCholFactor> {
    if !state.is_damped() {
        return Err(Error::HessianState("inverse_cholesky requires a damped state"));
    }
    let d = state.dim();
    let h = state.matrix();
    let mut rev = DenseMatrix::from_fn(d, d, |r, c| h[(d - 1 - r, d - 1 - c)]);
    cholesky_in_place(&mut rev).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value } => Error::NotPositiveDefinite { pivot: d - 1 - pivot, value },
        other => other,
    })?;
    let inv = invert_lower(&rev);
    let t = DenseMatrix::from_fn(d, d, |r, c| inv[(d - 1 - r, d - 1 - c)]);
    Ok(InvCholFactor { t })
}

/// Lower Cholesky factor `C` of a symmetric positive-definite matrix, `A = C Cᵀ`.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::dims("cholesky", "square", format!("{:?}", a.shape())));
    }
    let mut c = a.clone();
    cholesky_in_place(&mut c)?;
    Ok(c)
}

/// Blocked left-looking factorization; reads the lower triangle, zeroes the upper.
fn cholesky_in_place(a: &mut DenseMatrix) -> Result<()> {
    let n = a.rows();
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + BLOCK).min(n);
        if k0 > 0 {
            // A[k0.., k0..k1] -= L[k0.., ..k0] L[k0..k1, ..k0]ᵀ
            let left = a.block(k0..n, 0..k0);
            let top = a.block(k0..k1, 0..k0);
            gemm(-1.0, left.view(), top.view().t(), 1.0, a.sub_mut(k0..n, k0..k1));
        }
        // diagonal block, unblocked
        for j in k0..k1 {
            let mut djj = a[(j, j)];
            for k in k0..j {
                djj -= a[(j, k)] * a[(j, k)];
            }
            if !(djj > 0.0) || !djj.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: djj });
            }
            let ljj = djj.sqrt();
            a[(j, j)] = ljj;
            for i in j + 1..k1 {
                let mut s = a[(i, j)];
                for k in k0..j {
                    s -= a[(i, k)] * a[(j, k)];
                }
                a[(i, j)] = s / ljj;
            }
        }
        // panel below: A[k1.., k0..k1] <- A[k1.., k0..k1] L_kkᵀ⁻¹
        for i in k1..n {
            for j in k0..k1 {
                let mut s = a[(i, j)];
                for k in k0..j {
                    s -= a[(i, k)] * a[(j, k)];
                }
                a[(i, j)] = s / a[(j, j)];
            }
        }
        k0 = k1;
    }
    for r in 0..n {
        for c in r + 1..n {
            a[(r, c)] = 0.0;
        }
    }
    Ok(())
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn invert_lower(l: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut x = DenseMatrix::zeros(n, n);
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + BLOCK).min(n);
        // diagonal block by forward substitution
        for j in i0..i1 {
            x[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..i1 {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = -s / l[(i, i)];
            }
        }
        if i0 > 0 {
            // X[i, ..i0] = -X_ii (L[i, ..i0] X[..i0, ..i0])
            let mut s = DenseMatrix::zeros(i1 - i0, i0);
            gemm(1.0, l.sub(i0..i1, 0..i0), x.sub(0..i0, 0..i0), 0.0, s.sub_mut(0..i1 - i0, 0..i0));
            let xii = x.block(i0..i1, i0..i1);
            gemm(-1.0, xii.view(), s.view(), 0.0, x.sub_mut(i0..i1, 0..i0));
        }
        i0 = i1;
    }
    x
}

/// Inverse of an SPD matrix by Gauss-Jordan elimination with partial pivoting.
///
/// Shares nothing with the Cholesky route; the reference engine and the
/// verification suite use it as the independent dense path.
pub fn dense_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::dims("dense_inverse", "square", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = DenseMatrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[(x, col)].abs().total_cmp(&m[(y, col)].abs()))
            .unwrap_or(col);
        let p = m[(pivot, col)];
        if p == 0.0 || !p.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: col, value: p });
        }
        if pivot != col {
            for c in 0..n {
                let (u, v) = (m[(col, c)], m[(pivot, c)]);
                m[(col, c)] = v;
                m[(pivot, c)] = u;
                let (u, v) = (inv[(col, c)], inv[(pivot, c)]);
                inv[(col, c)] = v;
                inv[(pivot, c)] = u;
            }
        }
        let scale = 1.0 / m[(col, col)];
        for c in 0..n {
            m[(col, c)] *= scale;
            inv[(col, c)] *= scale;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[(r, c)] -= f * m[(col, c)];
                inv[(r, c)] -= f * inv[(col, c)];
            }
        }
    }
    Ok(inv)
}

/// OBC removal rule: `(A - A[:,p] A[p,:] / A[p,p])` with row and column `p` dropped.
pub fn iterative_inverse_update(hinv: &DenseMatrix, p: usize) -> Result<DenseMatrix> {
    let n = hinv.rows();
    if !hinv.is_square() || p >= n {
        return Err(Error::dims("iterative_inverse_update", format!("square with p < {}", hinv.rows()), p));
    }
    let app = hinv[(p, p)];
    if !(app > 0.0) {
        return Err(Error::NonPositiveDiagonal { index: p, value: app });
    }
    let keep = |i: usize| if i < p { i } else { i + 1 };
    Ok(DenseMatrix::from_fn(n - 1, n - 1, |r, c| {
        let (r, c) = (keep(r), keep(c));
        hinv[(r, c)] - hinv[(r, p)] * hinv[(p, c)] / app
    }))
}
