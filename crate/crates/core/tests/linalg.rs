mod common;

use common::*;
use foem_core::linalg::{cholesky, dense_inverse, inverse_cholesky, invert_lower, iterative_inverse_update, HessianState};
use foem_core::{DenseMatrix, Error};

fn damped(h: &Mat) -> HessianState {
    let mut s = HessianState::from_matrix(to_dense(h), 1).unwrap();
    s.dampen(0.0).unwrap();
    s
}

#[test]
fn factor_recovers_every_trailing_inverse() {
    let d = 64;
    let h = spd(d, 1, 0.01);
    let t = inverse_cholesky(&damped(&h)).unwrap();
    for q in 0..d - 1 {
        let got = from_dense(&t.recover_inverse_submatrix(q).unwrap());
        let expect = inverse(&sub(&h, q + 1..d, q + 1..d));
        let err = rel_diff(&got, &expect);
        assert!(err <= 1e-8, "q = {q}: {err}");
    }
    assert_eq!(t.recover_inverse_submatrix(d - 1).unwrap().shape(), (0, 0));
    assert!(t.recover_inverse_submatrix(d).is_err());
}

#[test]
fn removal_rule_tracks_the_factor() {
    let d = 32;
    let h = spd(d, 2, 0.01);
    let t = inverse_cholesky(&damped(&h)).unwrap();
    let mut live = to_dense(&inverse(&h));
    for q in 0..d - 1 {
        live = iterative_inverse_update(&live, 0).unwrap();
        let err = live.rel_frobenius_diff(&t.recover_inverse_submatrix(q).unwrap());
        assert!(err <= 1e-7, "q = {q}: {err}");
    }
}

#[test]
fn factor_is_upper_and_squares_to_the_inverse() {
    let d = 20;
    let h = spd(d, 3, 0.1);
    let t = from_dense(inverse_cholesky(&damped(&h)).unwrap().matrix());
    for (r, row) in t.iter().enumerate() {
        assert!(row[r] > 0.0);
        assert!(row[..r].iter().all(|&v| v == 0.0));
    }
    assert!(rel_diff(&matmul(&transpose(&t), &t), &inverse(&h)) < 1e-10);
}

#[test]
fn cholesky_and_inverses_match_naive() {
    let h = spd(24, 4, 0.05);
    let c = cholesky(&to_dense(&h)).unwrap();
    let cm = from_dense(&c);
    assert!(rel_diff(&matmul(&cm, &transpose(&cm)), &h) < 1e-13);
    let li = from_dense(&invert_lower(&c));
    assert!(rel_diff(&matmul(&cm, &li), &identity(24)) < 1e-12);
    let inv = from_dense(&dense_inverse(&to_dense(&h)).unwrap());
    assert!(rel_diff(&inv, &inverse(&h)) < 1e-10);
}

#[test]
fn singular_hessian_is_rejected_until_damped() {
    // rank one
    let v = [1.0, 2.0, -1.0, 0.5];
    let h = DenseMatrix::from_fn(4, 4, |r, c| v[r] * v[c]);
    let mut s = HessianState::from_matrix(h, 1).unwrap();
    assert!(matches!(inverse_cholesky(&s), Err(Error::HessianState(_))));
    let mut zero_damp = s.clone();
    zero_damp.dampen(0.0).unwrap();
    let e = inverse_cholesky(&zero_damp).unwrap_err();
    assert!(e.is_numerical(), "{e}");
    let damping = s.dampen(0.01).unwrap();
    assert!((s.lambda() - 0.01 * (1.0 + 4.0 + 1.0 + 0.25) / 4.0).abs() < 1e-15, "{damping:?}");
    inverse_cholesky(&s).unwrap();
    assert!(s.dampen(0.01).is_err());
}

#[test]
fn accumulation_is_additive_and_order_free() {
    let mut r = rng(5);
    let a = gaussian(&mut r, 6, 10);
    let b = gaussian(&mut r, 6, 7);
    let mut ab = HessianState::new(6);
    ab.accumulate(&to_dense(&a)).unwrap();
    ab.accumulate(&to_dense(&b)).unwrap();
    let mut hb = HessianState::new(6);
    hb.accumulate(&to_dense(&b)).unwrap();
    let mut ha = HessianState::new(6);
    ha.accumulate(&to_dense(&a)).unwrap();
    hb.merge(&ha).unwrap();
    assert_eq!(ab.n_samples(), 17);
    assert_eq!(hb.n_samples(), 17);
    assert!(ab.matrix().rel_frobenius_diff(hb.matrix()) < 1e-15);
    let explicit = add(&matmul(&a, &transpose(&a)), &matmul(&b, &transpose(&b)));
    assert!(rel_diff(&from_dense(ab.matrix()), &explicit) < 1e-14);
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}
