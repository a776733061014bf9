//! Naive dense reference routines, independent of the library's linear algebra.
#![allow(dead_code, clippy::needless_range_loop)]

use foem_core::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| normal(r)).collect()).collect()
}

pub fn to_dense(m: &Mat) -> DenseMatrix {
    DenseMatrix::from_rows(m)
}

pub fn from_dense(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                c[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

pub fn sub(a: &Mat, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
    a[rows].iter().map(|r| r[cols.clone()].to_vec()).collect()
}

/// Gauss-Jordan with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        assert!(piv != 0.0, "singular matrix");
        for v in &mut m[c] {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn frob(a: &Mat) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    let d: Mat = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    frob(&d) / frob(b).max(f64::MIN_POSITIVE)
}

/// Correlated SPD matrix `X Xᵀ / n + damp · I` from a seeded draw.
pub fn spd(d: usize, seed: u64, damp: f64) -> Mat {
    let mut r = rng(seed);
    let mix = gaussian(&mut r, d, d);
    let g = gaussian(&mut r, d, 3 * d);
    let x = matmul(&mix, &g);
    let mut h = matmul(&x, &transpose(&x));
    for (i, row) in h.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= (3 * d) as f64;
        }
        row[i] += damp;
    }
    h
}

/// Minimizes `g δᵀ + ½ δ H δᵀ` subject to `δ[k] = c` via the bordered system.
pub fn kkt(h: &Mat, g: &[f64], k: usize, c: f64) -> Vec<f64> {
    let m = h.len();
    let mut a = vec![vec![0.0; m + 1]; m + 1];
    for i in 0..m {
        a[i][..m].copy_from_slice(&h[i]);
    }
    a[k][m] = 1.0;
    a[m][k] = 1.0;
    let inv = inverse(&a);
    let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
    rhs.push(c);
    (0..m).map(|i| inv[i].iter().zip(&rhs).map(|(x, y)| x * y).sum()).collect()
}

/// Symmetric round-to-nearest-even onto `[-qmax, qmax] · scale`.
pub fn sym_round(w: f64, scale: f64, qmax: i32) -> (i32, f64) {
    let c = (w / scale).round_ties_even().clamp(-qmax as f64, qmax as f64) as i32;
    (c, c as f64 * scale)
}

/// Whole-row symmetric scale as absmax / qmax, with the all-zero fallback.
pub fn sym_scale(values: &[f64], qmax: i32) -> f64 {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / qmax as f64
    }
}

/// Column-by-column OBC with an explicit inverse and the one-step removal
/// rule, whole-row symmetric scales fitted from the original weights.
pub fn obc_reference(w: &Mat, h: &Mat, bits: u8) -> (Vec<Vec<i32>>, Mat) {
    let qmax = (1i32 << (bits - 1)) - 1;
    let (rows, d) = (w.len(), h.len());
    let scales: Vec<f64> = w.iter().map(|r| sym_scale(r, qmax)).collect();
    let mut lat = w.clone();
    let mut codes = vec![vec![0; d]; rows];
    let mut hinv = inverse(h);
    for q in 0..d {
        for r in 0..rows {
            let (c, deq) = sym_round(lat[r][q], scales[r], qmax);
            codes[r][q] = c;
            let f = (lat[r][q] - deq) / hinv[0][0];
            for k in 0..d - q {
                lat[r][q + k] -= f * hinv[0][k];
            }
        }
        // drop row/column 0 of the live inverse
        let n = hinv.len();
        hinv = (1..n)
            .map(|i| (1..n).map(|j| hinv[i][j] - hinv[i][0] * hinv[0][j] / hinv[0][0]).collect())
            .collect();
    }
    (codes, lat)
}
