//! Self-contained numerical checks at small dimensions.
//!
//! Each check compares an engine route against an independent dense
//! computation and reports the measured discrepancy next to its threshold.
//! Thresholds can be overridden by name, and [`Mutation`] deliberately breaks
//! the first-order sign so the optimality check can be seen to fail.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::calib::{exact_proxy_gradient, generate_synthetic, gradient_alignment, mixing_matrix, SyntheticSpec};
use crate::engines::{
    analytic_update, foem_column_step, gptq_column_step, obs_prune_step, run_engine, EngineConfig, EngineKind,
    FirstOrder, FirstOrderSign, LayerBundle,
};
use crate::error::{Error, Result};
use crate::linalg::{dense_inverse, inverse_cholesky, iterative_inverse_update, HessianState};
use crate::matrix::DenseMatrix;
use crate::quantizer::{fit_scales, QuantGrid};
use crate::report::proxy_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Passes when `measured <= threshold`.
    AtMost,
    /// Passes when `measured > threshold`.
    Above,
}

impl Relation {
    fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Relation::AtMost => measured <= threshold,
            Relation::Above => measured > threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::Above => ">",
        }
    }
}

/// Name, default threshold and relation of every check, in run order.
pub const CHECKS: &[(&str, f64, Relation)] = &[
    ("inverse_submatrix_identity", 1e-8, Relation::AtMost),
    ("iterative_inverse_route", 1e-7, Relation::AtMost),
    ("obs_prune_kkt", 1e-10, Relation::AtMost),
    ("lagrangian_optimality", 1e-8, Relation::AtMost),
    ("gptq_matches_obc", 1e-6, Relation::AtMost),
    ("beta_zero_reduction", 0.0, Relation::AtMost),
    ("block_size_invariance", 0.0, Relation::AtMost),
    ("identity_hessian_decoupling", 0.0, Relation::AtMost),
    ("first_order_step_dense", 1e-8, Relation::AtMost),
    ("proxy_loss_two_routes", 1e-10, Relation::AtMost),
    ("exact_gradient_finite_difference", 1e-6, Relation::AtMost),
    ("gradient_alignment_positive", 0.0, Relation::Above),
    ("covariance_convergence", 0.15, Relation::AtMost),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Evaluate the optimality check with the first-order sign reversed.
    FlipFirstOrderSign,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub overrides: BTreeMap<String, f64>,
    pub mutation: Option<Mutation>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub mutation: Option<Mutation>,
    pub checks: Vec<CheckResult>,
}

impl Verification {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<34} measured {:.3e} {} {:.1e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.relation.symbol(),
                c.threshold,
                c.detail
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Undamped `H = X Xᵀ` from correlated synthetic inputs.
fn hessian(d: usize, n_tokens: usize, seed: u64) -> Result<HessianState> {
    let x = generate_synthetic(&SyntheticSpec {
        d_in: d,
        n_tokens,
        rho: 0.9,
        seed,
    })?;
    let mut h = HessianState::new(d);
    h.accumulate(&x)?;
    Ok(h)
}

fn damped(h: &HessianState, ratio: f64) -> Result<HessianState> {
    let mut h = h.clone();
    h.dampen(ratio)?;
    Ok(h)
}

/// Minimizes `g δᵀ + ½ δ H δᵀ` subject to `δ_0 = c` by solving the KKT system.
fn kkt_solve(h: &DenseMatrix, g: &[f64], c: f64) -> Result<Vec<f64>> {
    let m = h.rows();
    let mut k = DenseMatrix::zeros(m + 1, m + 1);
    for r in 0..m {
        for col in 0..m {
            k[(r, col)] = h[(r, col)];
        }
    }
    k[(0, m)] = 1.0;
    k[(m, 0)] = 1.0;
    let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
    rhs.push(c);
    let kinv = dense_inverse(&k)?;
    Ok((0..m).map(|r| kinv.row(r).iter().zip(&rhs).map(|(a, b)| a * b).sum()).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn mismatches(a: &[i32], b: &[i32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

type Measured = (f64, String);

fn inverse_submatrix_identity(seed: u64) -> Result<Measured> {
    let d = 32;
    let h = damped(&hessian(d, 4 * d, seed)?, 0.01)?;
    let t = inverse_cholesky(&h)?;
    let mut worst = 0.0f64;
    for q in 0..d - 1 {
        let m = t.recover_inverse_submatrix(q)?;
        let prod = m.matmul(&h.matrix().block(q + 1..d, q + 1..d))?;
        worst = worst.max(prod.rel_frobenius_diff(&DenseMatrix::identity(d - q - 1)));
    }
    Ok((worst, format!("d = {d}, all q")))
}

fn iterative_inverse_route(seed: u64) -> Result<Measured> {
    let d = 32;
    let h = damped(&hessian(d, 4 * d, seed)?, 0.01)?;
    let t = inverse_cholesky(&h)?;
    let mut hinv = dense_inverse(h.matrix())?;
    let mut worst = 0.0f64;
    for q in 0..d - 1 {
        hinv = iterative_inverse_update(&hinv, 0)?;
        worst = worst.max(t.recover_inverse_submatrix(q)?.rel_frobenius_diff(&hinv));
    }
    Ok((worst, format!("d = {d}, all q")))
}

fn obs_prune_kkt(seed: u64) -> Result<Measured> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = gaussian(&mut r, 3, 6);
        let h = x.matmul(&x.transpose())?.add(&DenseMatrix::identity(3).scaled(0.1));
        let w: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
        let q = r.random_range(0..3);
        let delta = obs_prune_step(&w, &dense_inverse(&h)?, q)?;
        // move q to the front so the constraint sits on index 0
        let perm: Vec<usize> = std::iter::once(q).chain((0..3).filter(|&i| i != q)).collect();
        let hp = DenseMatrix::from_fn(3, 3, |a, b| h[(perm[a], perm[b])]);
        let kkt = kkt_solve(&hp, &[0.0; 3], -w[q])?;
        let dp: Vec<f64> = perm.iter().map(|&i| delta[i]).collect();
        worst = worst.max(max_abs_diff(&dp, &kkt) / max_abs(&kkt).max(f64::MIN_POSITIVE));
    }
    Ok((worst, "3x3, 20 instances".into()))
}

fn lagrangian_optimality(seed: u64, mutation: Option<Mutation>) -> Result<Measured> {
    let d = 8;
    let beta = 0.5;
    let sign = match mutation {
        Some(Mutation::FlipFirstOrderSign) => FirstOrderSign::PlusAlg1,
        None => FirstOrderSign::MinusEq17,
    };
    let mut worst = 0.0f64;
    for s in 0..50 {
        let mut r = rng(seed.wrapping_add(s));
        let x = gaussian(&mut r, d, 2 * d);
        let mut hs = HessianState::from_matrix(x.matmul(&x.transpose())?.scaled(1.0 / (2 * d) as f64), 2 * d as u64)?;
        hs.dampen(0.01)?;
        let h = hs.matrix();
        let t = inverse_cholesky(&hs)?;
        let orig: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let w: Vec<f64> = orig.iter().map(|v| v + 0.3 * normal(&mut r)).collect();
        let q = r.random_range(0..d - 1);
        let deq = (w[q] * 4.0).round() / 4.0 + 0.01;
        let delta = analytic_update(&w, &orig, &t, q, deq, Some(FirstOrder { beta, sign }))?;
        let g: Vec<f64> = (q..d).map(|i| beta * (w[i] - orig[i])).collect();
        let kkt = kkt_solve(&h.block(q..d, q..d), &g, deq - w[q])?;
        worst = worst.max(max_abs_diff(&delta, &kkt) / max_abs(&kkt).max(f64::MIN_POSITIVE));
    }
    let how = match mutation {
        Some(_) => "50 seeds, d = 8, sign flipped",
        None => "50 seeds, d = 8",
    };
    Ok((worst, how.into()))
}

fn layer(d_out: usize, d_in: usize, seed: u64) -> DenseMatrix {
    gaussian(&mut rng(seed ^ 0x5eed), d_out, d_in)
}

fn config(engine: EngineKind, bits: u8, group: Option<usize>, block: usize) -> EngineConfig {
    EngineConfig {
        engine,
        bits,
        group_size: group,
        block_size: block,
        ..EngineConfig::default()
    }
}

fn gptq_matches_obc(seed: u64) -> Result<Measured> {
    let (d_out, d_in) = (16, 32);
    let h = hessian(d_in, 4 * d_in, seed)?;
    let w = layer(d_out, d_in, seed);
    let g = run_engine("v", &w, &h, &config(EngineKind::Gptq, 4, Some(8), 8))?;
    let o = run_engine("v", &w, &h, &config(EngineKind::ObsOracle, 4, Some(8), 8))?;
    let bad = mismatches(g.quantized.codes(), o.quantized.codes());
    if bad > 0.0 {
        return Ok((f64::INFINITY, format!("{bad} codes differ")));
    }
    Ok((g.latent.rel_frobenius_diff(&o.latent), "16x32, codes identical".into()))
}

fn beta_zero_reduction(seed: u64) -> Result<Measured> {
    let d = 32;
    let h = hessian(d, 4 * d, seed)?;
    let w = layer(d, d, seed);
    let mut worst = 0.0f64;
    for b in [1, 8, 32] {
        let g = run_engine("v", &w, &h, &config(EngineKind::Gptq, 3, Some(16), b))?;
        let f = run_engine("v", &w, &h, &EngineConfig { beta: 0.0, ..config(EngineKind::Foem, 3, Some(16), b) })?;
        worst = worst.max(mismatches(g.quantized.codes(), f.quantized.codes()));
    }
    Ok((worst, "code mismatches, B in {1, 8, 32}".into()))
}

fn block_size_invariance(seed: u64) -> Result<Measured> {
    let (d_out, d_in) = (16, 48);
    let h = hessian(d_in, 4 * d_in, seed)?;
    let w = layer(d_out, d_in, seed);
    let base = run_engine("v", &w, &h, &config(EngineKind::Gptq, 4, Some(16), 1))?;
    let mut worst = 0.0f64;
    for b in [7, 16, 48] {
        let o = run_engine("v", &w, &h, &config(EngineKind::Gptq, 4, Some(16), b))?;
        worst = worst.max(mismatches(base.quantized.codes(), o.quantized.codes()));
    }
    Ok((worst, "code mismatches vs B = 1".into()))
}

fn identity_hessian_decoupling(seed: u64) -> Result<Measured> {
    let d = 24;
    let h = HessianState::from_matrix(DenseMatrix::identity(d), 1)?;
    let w = layer(8, d, seed);
    let g = run_engine("v", &w, &h, &config(EngineKind::Gptq, 3, Some(8), 8))?;
    let r = run_engine("v", &w, &h, &config(EngineKind::Rtn, 3, Some(8), 8))?;
    Ok((mismatches(g.quantized.codes(), r.quantized.codes()), "code mismatches vs rtn".into()))
}

fn first_order_step_dense(seed: u64) -> Result<Measured> {
    let d = 16;
    let hs = damped(&hessian(d, 4 * d, seed)?, 0.01)?;
    let t = inverse_cholesky(&hs)?;
    let grid = QuantGrid::new(4, None, true)?;
    let orig = layer(d, d, seed);
    let mut r = rng(seed ^ 0xd1f7);
    let lat = orig.add(&gaussian(&mut r, d, d).scaled(0.05));
    let fo = FirstOrder {
        beta: 0.2,
        sign: FirstOrderSign::MinusEq17,
    };
    let mut worst = 0.0f64;
    for j in [3, 9] {
        let mut bundle = LayerBundle::from_parts(lat.clone(), orig.clone())?;
        let scales: Vec<_> = (0..d).map(|row| fit_scales(lat.row(row), &grid)).collect();
        let step = foem_column_step(&mut bundle, &t, &grid, &scales, j, 0..d, fo)?;
        let tm = t.matrix();
        let hinv = dense_inverse(&hs.matrix().block(j..d, j..d))?;
        for row in 0..d {
            let e = (lat[(row, j)] - step.deq_col[row]) / tm[(j, j)];
            let after: Vec<f64> = (j..d).map(|c| lat[(row, c)] - e * tm[(j, c)]).collect();
            let drift: Vec<f64> = (j..d).map(|c| after[c - j] - orig[(row, c)]).collect();
            for c in 0..d - j {
                let term: f64 = (0..d - j).map(|k| drift[k] * hinv[(k, c)]).sum();
                let expect = after[c] - fo.beta * term - lat[(row, j + c)];
                worst = worst.max((step.delta_w[(row, c)] - expect).abs() / expect.abs().max(1e-3));
            }
        }
    }
    Ok((worst, "16x16, single block, j in {3, 9}".into()))
}

fn proxy_loss_two_routes(seed: u64) -> Result<Measured> {
    let d = 8;
    let mut r = rng(seed);
    let x = gaussian(&mut r, d, 3 * d);
    let orig = gaussian(&mut r, d, d);
    let deq = orig.add(&gaussian(&mut r, d, d).scaled(0.1));
    let direct = deq.sub_matrix(&orig).matmul(&x)?.frobenius_norm().powi(2);
    let trace = proxy_loss(&deq, &orig, &x.matmul(&x.transpose())?)?;
    Ok(((trace - direct).abs() / direct, "8x8 with explicit X".into()))
}

fn exact_gradient_finite_difference(seed: u64) -> Result<Measured> {
    let d = 8;
    let mut r = rng(seed);
    let x = gaussian(&mut r, d, 2 * d);
    let h = x.matmul(&x.transpose())?;
    let hs = HessianState::from_matrix(h.clone(), 2 * d as u64)?;
    let orig = gaussian(&mut r, d, d);
    let lat = orig.add(&gaussian(&mut r, d, d).scaled(0.1));
    let exact = exact_proxy_gradient(&LayerBundle::from_parts(lat.clone(), orig.clone())?, &hs)?;
    let step = 1e-5;
    let fd = DenseMatrix::from_fn(d, d, |a, b| {
        let mut p = lat.clone();
        p[(a, b)] += step;
        let mut m = lat.clone();
        m[(a, b)] -= step;
        let lp = proxy_loss(&p, &orig, &h).expect("shapes agree");
        let lm = proxy_loss(&m, &orig, &h).expect("shapes agree");
        (lp - lm) / (2.0 * step)
    });
    Ok((fd.rel_frobenius_diff(&exact), "8x8, central step 1e-5".into()))
}

fn gradient_alignment_positive(seed: u64) -> Result<Measured> {
    let d = 16;
    let mut worst = f64::INFINITY;
    for s in 0..20 {
        let hs = hessian(d, 4 * d, seed.wrapping_add(s))?;
        let t = inverse_cholesky(&damped(&hs, 0.01)?)?;
        let grid = QuantGrid::new(3, None, true)?;
        let w = layer(d, d, seed.wrapping_add(s));
        let scales: Vec<_> = (0..d).map(|row| fit_scales(w.row(row), &grid)).collect();
        let mut bundle = LayerBundle::new(w);
        for j in 0..d / 2 {
            gptq_column_step(&mut bundle, &t, &grid, &scales, j, d)?;
        }
        let diag = gradient_alignment(&bundle, &hs, 3e-4)?;
        if let Some(m) = diag.min_cosine {
            worst = worst.min(m);
        }
    }
    Ok((worst, "min cosine, 20 mid-quantization states".into()))
}

fn covariance_convergence(seed: u64) -> Result<Measured> {
    let d = 16;
    let spec = SyntheticSpec {
        d_in: d,
        n_tokens: 100 * d,
        rho: 0.9,
        seed,
    };
    let x = generate_synthetic(&spec)?;
    let cov = x.matmul(&x.transpose())?.scaled(1.0 / spec.n_tokens as f64);
    let a = mixing_matrix(&spec)?;
    let aat = a.matmul(&a.transpose())?;
    Ok((cov.rel_frobenius_diff(&aat), format!("d = {d}, n = 100 d")))
}

/// Runs every check. Unknown override names are rejected.
pub fn run_verification(opts: &VerifyOptions) -> Result<Verification> {
    for name in opts.overrides.keys() {
        if !CHECKS.iter().any(|(n, _, _)| n == name) {
            return Err(Error::Config(format!("unknown check `{name}`")));
        }
    }
    let seed = opts.seed;
    let mut checks = Vec::with_capacity(CHECKS.len());
    for &(name, default, relation) in CHECKS {
        let outcome = match name {
            "inverse_submatrix_identity" => inverse_submatrix_identity(seed),
            "iterative_inverse_route" => iterative_inverse_route(seed),
            "obs_prune_kkt" => obs_prune_kkt(seed),
            "lagrangian_optimality" => lagrangian_optimality(seed, opts.mutation),
            "gptq_matches_obc" => gptq_matches_obc(seed),
            "beta_zero_reduction" => beta_zero_reduction(seed),
            "block_size_invariance" => block_size_invariance(seed),
            "identity_hessian_decoupling" => identity_hessian_decoupling(seed),
            "first_order_step_dense" => first_order_step_dense(seed),
            "proxy_loss_two_routes" => proxy_loss_two_routes(seed),
            "exact_gradient_finite_difference" => exact_gradient_finite_difference(seed),
            "gradient_alignment_positive" => gradient_alignment_positive(seed),
            "covariance_convergence" => covariance_convergence(seed),
            _ => unreachable!("check table and dispatch agree"),
        };
        let threshold = opts.overrides.get(name).copied().unwrap_or(default);
        let (measured, detail) = match outcome {
            Ok(m) => m,
            Err(e) => (f64::NAN, format!("error: {e}")),
        };
        checks.push(CheckResult {
            name: name.to_string(),
            measured,
            threshold,
            relation,
            passed: relation.holds(measured, threshold),
            detail,
        });
    }
    Ok(Verification {
        mutation: opts.mutation,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_run_passes() {
        let v = run_verification(&VerifyOptions::default()).unwrap();
        assert!(v.all_passed(), "{v}");
        assert_eq!(v.checks.len(), CHECKS.len());
    }

    #[test]
    fn sign_flip_breaks_only_optimality() {
        let v = run_verification(&VerifyOptions {
            mutation: Some(Mutation::FlipFirstOrderSign),
            ..Default::default()
        })
        .unwrap();
        let failed: Vec<&str> = v.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["lagrangian_optimality"], "{v}");
    }

    #[test]
    fn overrides_change_thresholds() {
        let mut overrides = BTreeMap::new();
        overrides.insert("covariance_convergence".to_string(), 1e-12);
        let v = run_verification(&VerifyOptions {
            overrides,
            ..Default::default()
        })
        .unwrap();
        let c = v.check("covariance_convergence").unwrap();
        assert_eq!(c.threshold, 1e-12);
        assert!(!c.passed);
        assert!(v.to_string().contains("1.0e-12"));

        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), 1.0);
        assert!(run_verification(&VerifyOptions {
            overrides: bad,
            ..Default::default()
        })
        .is_err());
    }
}
