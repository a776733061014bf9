mod common;

use common::*;
use foem_core::calib::{
    accumulate_shards, activation_layers, activation_names, exact_proxy_gradient, generate_synthetic,
    gradient_alignment, mixing_matrix, SyntheticSpec,
};
use foem_core::engines::LayerBundle;
use foem_core::report::proxy_loss;
use foem_core::tensorio::{ElementKind, TensorFile};
use foem_core::{DenseMatrix, HessianState};

fn loss(w: &Mat, orig: &Mat, x: &Mat) -> f64 {
    let d: Mat = w.iter().zip(orig).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect();
    frob(&matmul(&d, x)).powi(2)
}

#[test]
fn exact_gradient_matches_central_differences() {
    let (rows, d, n) = (5, 8, 20);
    let mut r = rng(1);
    let x = gaussian(&mut r, d, n);
    let orig = gaussian(&mut r, rows, d);
    let w: Mat = orig.iter().map(|row| row.iter().map(|v| v + 0.3 * normal(&mut r)).collect()).collect();
    let mut h = HessianState::new(d);
    h.accumulate(&to_dense(&x)).unwrap();
    let layer = LayerBundle::from_parts(to_dense(&w), to_dense(&orig)).unwrap();
    let g = from_dense(&exact_proxy_gradient(&layer, &h).unwrap());
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..rows {
        for j in 0..d {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i][j] += step;
            m[i][j] -= step;
            let fd = (loss(&p, &orig, &x) - loss(&m, &orig, &x)) / (2.0 * step);
            worst = worst.max((fd - g[i][j]).abs() / g[i][j].abs().max(1.0));
        }
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn proxy_loss_matches_explicit_activations() {
    let mut r = rng(2);
    let x = gaussian(&mut r, 6, 15);
    let orig = gaussian(&mut r, 4, 6);
    let deq = gaussian(&mut r, 4, 6);
    let h = matmul(&x, &transpose(&x));
    let got = proxy_loss(&to_dense(&deq), &to_dense(&orig), &to_dense(&h)).unwrap();
    let expect = loss(&deq, &orig, &x);
    assert!((got - expect).abs() <= 1e-10 * expect);
    assert_eq!(proxy_loss(&to_dense(&orig), &to_dense(&orig), &to_dense(&h)).unwrap(), 0.0);
}

#[test]
fn synthetic_covariance_converges() {
    let d = 16;
    let spec = SyntheticSpec {
        d_in: d,
        n_tokens: 100 * d,
        rho: 0.8,
        seed: 3,
    };
    let x = generate_synthetic(&spec).unwrap();
    assert_eq!(x.shape(), (d, 100 * d));
    let a = mixing_matrix(&spec).unwrap();
    let aat = a.matmul(&a.transpose()).unwrap();
    let mut h = HessianState::new(d);
    h.accumulate(&x).unwrap();
    let cov = h.matrix().scaled(1.0 / spec.n_tokens as f64);
    let err = cov.sub_matrix(&aat).frobenius_norm() / aat.frobenius_norm();
    assert!(err < 0.15, "{err}");
    assert_eq!(generate_synthetic(&spec).unwrap(), x);
}

#[test]
fn synthetic_spectrum_decays_with_floor() {
    let spec = SyntheticSpec {
        d_in: 40,
        n_tokens: 1,
        rho: 0.5,
        seed: 0,
    };
    let s = spec.singular_values();
    assert_eq!(s[0], 1.0);
    assert_eq!(s[3], 0.125);
    assert_eq!(s[39], 1e-3);
    assert!(SyntheticSpec { rho: 1.0, ..spec }.validate().is_err());
    assert!(SyntheticSpec { n_tokens: 0, ..spec }.validate().is_err());
}

#[test]
fn scaled_drift_points_along_the_exact_gradient() {
    let d = 12;
    for seed in 0..100 {
        let mut r = rng(seed);
        let x = gaussian(&mut r, d, 4 * d);
        let mut h = HessianState::new(d);
        h.accumulate(&to_dense(&x)).unwrap();
        let orig = gaussian(&mut r, 3, d);
        let w: Mat = orig.iter().map(|row| row.iter().map(|v| v + 0.2 * normal(&mut r)).collect()).collect();
        let layer = LayerBundle::from_parts(to_dense(&w), to_dense(&orig)).unwrap();
        let diag = gradient_alignment(&layer, &h, 1e-3).unwrap();
        assert_eq!(diag.defined, 3);
        // D H Dᵀ ≥ 0 row by row, so the cosine of D with 2 D H is nonnegative
        assert!(diag.min_cosine.unwrap() > 0.0, "seed {seed}: {:?}", diag.cosines);
    }
}

#[test]
fn no_drift_leaves_cosine_undefined() {
    let layer = LayerBundle::new(DenseMatrix::identity(3));
    let h = HessianState::from_matrix(DenseMatrix::identity(3), 1).unwrap();
    let diag = gradient_alignment(&layer, &h, 1.0).unwrap();
    assert_eq!(diag.defined, 0);
    assert_eq!(diag.min_cosine, None);
}

#[test]
fn shards_accumulate_additively() {
    let mut r = rng(7);
    let a = to_dense(&gaussian(&mut r, 5, 9));
    let b = to_dense(&gaussian(&mut r, 5, 4));
    let c = to_dense(&gaussian(&mut r, 5, 6));
    let mut f1 = TensorFile::new();
    f1.insert_matrix("blk.0.input", &a, ElementKind::F64).unwrap();
    f1.insert_matrix("blk.0.input.10", &b, ElementKind::F64).unwrap();
    f1.insert_matrix("blk.1.input", &c, ElementKind::F64).unwrap();
    let mut f2 = TensorFile::new();
    f2.insert_matrix("blk.0.input.2", &c, ElementKind::F64).unwrap();

    assert_eq!(activation_layers(&f1), ["blk.0", "blk.1"]);
    assert_eq!(activation_names(&f1, "blk.0"), ["blk.0.input", "blk.0.input.10"]);

    let both = accumulate_shards(&[f1.clone(), f2.clone()], "blk.0").unwrap();
    let mut expect = HessianState::new(5);
    for x in [&a, &b, &c] {
        expect.accumulate(x).unwrap();
    }
    assert_eq!(both.n_samples(), 19);
    assert!(both.matrix().rel_frobenius_diff(expect.matrix()) < 1e-15);
    assert!(accumulate_shards(&[f2], "blk.1").is_err());
}
