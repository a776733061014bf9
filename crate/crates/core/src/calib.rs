//! Calibration data: synthetic correlated activations, Hessian accumulation
//! from activation shards, and diagnostics comparing the drift-based gradient
//! approximation with the exact proxy-loss gradient.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engines::LayerBundle;
use crate::error::{Error, Result};
use crate::linalg::HessianState;
use crate::matrix::{gemm, DenseMatrix};
use crate::tensorio::TensorFile;

/// Smallest singular value of the mixing matrix.
pub const SINGULAR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d_in: usize,
    pub n_tokens: usize,
    /// Singular values of the mixing matrix decay as `rho^k`.
    pub rho: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.d_in == 0 {
            return Err(Error::Config("synthetic spec needs d_in >= 1 and n_tokens >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    pub fn singular_values(&self) -> Vec<f64> {
        (0..self.d_in)
            .map(|k| self.rho.powi(k as i32).max(SINGULAR_FLOOR))
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal matrix from modified Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DenseMatrix {
    // rows of `q` are the columns being orthonormalized
    let mut q = gaussian(rng, d, d);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let (head, tail) = q.as_mut_slice().split_at_mut(i * d);
            for (a, b) in tail[..d].iter_mut().zip(&head[j * d..(j + 1) * d]) {
                *a -= dot * b;
            }
        }
        let norm = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    q.transpose()
}

fn mixing_with_rng(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let u = random_orthogonal(rng, spec.d_in);
    let s = spec.singular_values();
    DenseMatrix::from_fn(spec.d_in, spec.d_in, |r, c| u[(r, c)] * s[c])
}

/// The mixing matrix `A = U Σ` that [`generate_synthetic`] uses for `spec`.
pub fn mixing_matrix(spec: &SyntheticSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(mixing_with_rng(spec, &mut rng))
}

/// `X = A G` (d_in × n_tokens) with `G` standard normal; deterministic in the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = mixing_with_rng(spec, &mut rng);
    let g = gaussian(&mut rng, spec.d_in, spec.n_tokens);
    a.matmul(&g)
}

/// `β (W - 𝕎)`.
pub fn approx_gradient(layer: &LayerBundle, beta: f64) -> DenseMatrix {
    layer.drift().scaled(beta)
}

/// `2 (W - 𝕎) H` over the undamped Hessian: the gradient of `‖(W - 𝕎) X‖²_F`.
pub fn exact_proxy_gradient(layer: &LayerBundle, hessian: &HessianState) -> Result<DenseMatrix> {
    let d = layer.d_in();
    if hessian.dim() != d {
        return Err(Error::dims("exact_proxy_gradient", d, hessian.dim()));
    }
    let drift = layer.drift();
    let h = hessian.undamped();
    let rows = drift.rows();
    let mut out = DenseMatrix::zeros(rows, d);
    gemm(2.0, drift.view(), h.view(), 0.0, out.sub_mut(0..rows, 0..d));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDiagnostics {
    /// Per-row cosine; `None` where the row has no drift in `columns`.
    pub cosines: Vec<Option<f64>>,
    /// Per-row `‖approx‖ / ‖exact‖`, `None` alongside undefined cosines.
    pub magnitude_ratios: Vec<Option<f64>>,
    pub columns: Range<usize>,
    pub defined: usize,
    pub min_cosine: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub mean_magnitude_ratio: Option<f64>,
}

pub fn gradient_alignment(layer: &LayerBundle, hessian: &HessianState, beta: f64) -> Result<GradientDiagnostics> {
    gradient_alignment_in(layer, hessian, beta, 0..layer.d_in())
}

/// Same as [`gradient_alignment`] but compares rows only over `columns`.
pub fn gradient_alignment_in(
    layer: &LayerBundle,
    hessian: &HessianState,
    beta: f64,
    columns: Range<usize>,
) -> Result<GradientDiagnostics> {
    if columns.end > layer.d_in() || columns.start > columns.end {
        return Err(Error::dims("gradient_alignment columns", format!("within 0..{}", layer.d_in()), format!("{columns:?}")));
    }
    let approx = approx_gradient(layer, beta);
    let exact = exact_proxy_gradient(layer, hessian)?;
    let drift = layer.drift();
    let mut cosines = Vec::with_capacity(layer.d_out());
    let mut ratios = Vec::with_capacity(layer.d_out());
    for r in 0..layer.d_out() {
        let c = columns.clone();
        if drift.row(r)[c.clone()].iter().all(|&v| v == 0.0) {
            cosines.push(None);
            ratios.push(None);
            continue;
        }
        let (a, e) = (&approx.row(r)[c.clone()], &exact.row(r)[c]);
        let dot: f64 = a.iter().zip(e).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || ne == 0.0 {
            cosines.push(None);
            ratios.push(None);
            continue;
        }
        cosines.push(Some((dot / (na * ne)).clamp(-1.0, 1.0)));
        ratios.push(Some(na / ne));
    }
    let defined: Vec<f64> = cosines.iter().flatten().copied().collect();
    let ratio_vals: Vec<f64> = ratios.iter().flatten().copied().collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(GradientDiagnostics {
        defined: defined.len(),
        min_cosine: defined.iter().copied().reduce(f64::min),
        mean_cosine: mean(&defined),
        mean_magnitude_ratio: mean(&ratio_vals),
        cosines,
        magnitude_ratios: ratios,
        columns,
    })
}

/// Shard index of `name` if it is an activation tensor of `layer`:
/// `<layer>.input` is shard 0 of its file, `<layer>.input.<k>` is shard `k`.
fn shard_index(name: &str, layer: &str) -> Option<u64> {
    let rest = name.strip_prefix(layer)?.strip_prefix(".input")?;
    if rest.is_empty() {
        return Some(0);
    }
    rest.strip_prefix('.')?.parse().ok()
}

/// Names of `layer`'s activation tensors in `file`, in shard order.
pub fn activation_names(file: &TensorFile, layer: &str) -> Vec<String> {
    let mut found: Vec<(u64, String)> = file
        .names()
        .filter_map(|n| shard_index(n, layer).map(|k| (k, n.to_string())))
        .collect();
    found.sort();
    found.into_iter().map(|(_, n)| n).collect()
}

/// Layers that have at least one activation tensor in `file`.
pub fn activation_layers(file: &TensorFile) -> Vec<String> {
    let mut layers: Vec<String> = file
        .names()
        .filter_map(|n| {
            let idx = n.rfind(".input")?;
            let layer = &n[..idx];
            shard_index(n, layer).map(|_| layer.to_string())
        })
        .collect();
    layers.sort();
    layers.dedup();
    layers
}

/// Accumulates `H` for `layer` from its shards across `files`, in file
/// order then shard order.
pub fn accumulate_shards(files: &[TensorFile], layer: &str) -> Result<HessianState> {
    let mut state: Option<HessianState> = None;
    for f in files {
        for name in activation_names(f, layer) {
            let x = f.load_tensor(&name)?;
            let s = state.get_or_insert_with(|| HessianState::new(x.rows()));
            if x.rows() != s.dim() {
                return Err(Error::dims("activation shard rows (d_in)", s.dim(), format!("{} in `{name}`", x.rows())));
            }
            s.accumulate(&x)?;
        }
    }
    state.ok_or_else(|| Error::MissingTensor(format!("{layer}.input")))
}

pub fn load_shards(paths: &[impl AsRef<Path>]) -> Result<Vec<TensorFile>> {
    paths.iter().map(TensorFile::load).collect()
}
