//! Column-wise quantization engines.
//!
//! All engines walk the input channels left to right. After column `q` is
//! rounded, the still-unquantized latent weights absorb the rounding error
//! through the inverse Hessian (second-order compensation). The first-order
//! engine additionally treats the accumulated drift `W - W_orig` as a
//! gradient proxy `g = β (W - W_orig)` and subtracts `g · H_rest⁻¹`, where
//! `H_rest⁻¹` comes straight out of the trailing blocks of the inverse
//! Cholesky factor.

mod blocked;
mod obs;
mod plus;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use blocked::{foem_block_boundary, foem_column_step, gptq_column_step, BlockedPass};
pub use obs::{obc_pass, obc_quant_step, obs_prune_step};
pub use plus::foem_plus_term;

use crate::error::{Error, Result};
use crate::linalg::{inverse_cholesky, HessianState, InvCholFactor};
use crate::matrix::{DenseMatrix, MatMut, MatRef};
use crate::par::Exec;
use crate::quantizer::{rtn_quantize, QuantGrid, QuantizedLayer};
use crate::report::{proxy_loss, DriftStats, LayerReport};

/// One layer's latent weights and the frozen originals they started from.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBundle {
    latent: DenseMatrix,
    original: DenseMatrix,
}

impl LayerBundle {
    /// Latent and original weights both start as `weights`.
    pub fn new(weights: DenseMatrix) -> Self {
        LayerBundle {
            original: weights.clone(),
            latent: weights,
        }
    }

    /// A mid-calibration state, for inspecting individual steps.
    pub fn from_parts(latent: DenseMatrix, original: DenseMatrix) -> Result<Self> {
        if latent.shape() != original.shape() {
            return Err(Error::dims(
                "LayerBundle::from_parts",
                format!("{:?}", original.shape()),
                format!("{:?}", latent.shape()),
            ));
        }
        Ok(LayerBundle { latent, original })
    }

    pub fn d_out(&self) -> usize {
        self.latent.rows()
    }

    pub fn d_in(&self) -> usize {
        self.latent.cols()
    }

    pub fn latent(&self) -> &DenseMatrix {
        &self.latent
    }

    pub fn original(&self) -> &DenseMatrix {
        &self.original
    }

    /// `W - W_orig`.
    pub fn drift(&self) -> DenseMatrix {
        self.latent.sub_matrix(&self.original)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DenseMatrix, &DenseMatrix) {
        (&mut self.latent, &self.original)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Rtn,
    ObsOracle,
    Gptq,
    Foem,
    FoemPlus,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [
        EngineKind::Rtn,
        EngineKind::ObsOracle,
        EngineKind::Gptq,
        EngineKind::Foem,
        EngineKind::FoemPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Rtn => "rtn",
            EngineKind::ObsOracle => "obs_oracle",
            EngineKind::Gptq => "gptq",
            EngineKind::Foem => "foem",
            EngineKind::FoemPlus => "foem_plus",
        }
    }

    pub fn uses_first_order(self) -> bool {
        matches!(self, EngineKind::Foem | EngineKind::FoemPlus)
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown engine `{s}`")))
    }
}

/// Sign applied to the first-order term `β (W - W_orig) M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderSign {
    /// Subtract the term: descends the first-order model.
    #[default]
    MinusEq17,
    /// Add the term, as the blocked pseudocode is written.
    PlusAlg1,
}

impl FirstOrderSign {
    pub fn factor(self) -> f64 {
        match self {
            FirstOrderSign::MinusEq17 => -1.0,
            FirstOrderSign::PlusAlg1 => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FirstOrderSign::MinusEq17 => "minus_eq17",
            FirstOrderSign::PlusAlg1 => "plus_alg1",
        }
    }
}

impl FromStr for FirstOrderSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus_eq17" | "minus" => Ok(FirstOrderSign::MinusEq17),
            "plus_alg1" | "plus" => Ok(FirstOrderSign::PlusAlg1),
            _ => Err(Error::Config(format!("unknown first-order sign `{s}`"))),
        }
    }
}

/// Where group scales are fitted from when a group's first column is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    /// The compensated latent weights at that moment.
    #[default]
    Latent,
    /// The frozen original weights.
    Original,
}

/// First-order term parameters: `W += sign · β · (W - W_orig) · M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrder {
    pub beta: f64,
    pub sign: FirstOrderSign,
}

impl FirstOrder {
    pub(crate) fn alpha(&self) -> f64 {
        self.sign.factor() * self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub engine: EngineKind,
    pub bits: u8,
    /// Channels per scale group; `None` = whole row.
    pub group_size: Option<usize>,
    pub symmetric: bool,
    pub block_size: usize,
    pub beta: f64,
    pub damping: f64,
    pub first_order_sign: FirstOrderSign,
    pub scale_source: ScaleSource,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            engine: EngineKind::Foem,
            bits: 4,
            group_size: Some(128),
            symmetric: true,
            block_size: 128,
            beta: 3e-4,
            damping: 0.01,
            first_order_sign: FirstOrderSign::MinusEq17,
            scale_source: ScaleSource::Latent,
            exec: Exec::default(),
        }
    }
}

impl EngineConfig {
    pub fn with_engine(engine: EngineKind) -> Self {
        EngineConfig {
            engine,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.block_size == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::Config(format!(
                "damping ratio must be finite and >= 0, got {}",
                self.damping
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.bits, self.group_size, self.symmetric)
    }

    pub fn first_order(&self) -> Option<FirstOrder> {
        (self.engine.uses_first_order() && self.beta != 0.0).then_some(FirstOrder {
            beta: self.beta,
            sign: self.first_order_sign,
        })
    }

    /// Engine name, with the sign appended when it differs from the default.
    pub fn label(&self) -> String {
        if self.engine.uses_first_order() && self.first_order_sign != FirstOrderSign::default() {
            format!("{}:{}", self.engine, self.first_order_sign.name())
        } else {
            self.engine.to_string()
        }
    }
}

/// Single-row closed-form update for quantizing column `q` onto `deq_q`,
/// over the columns `q..`:
///
/// `δ = -((w_q - ŵ_q) / T_qq) T[q, q..] + sign · β · [0, g_R · T[R, R]ᵀ T[R, R]]`
///
/// with `R = q+1..` and `g_R = (w - w_orig)[R]` taken before the step. With
/// the default minus sign this is the minimizer of `g δᵀ + ½ δ H δᵀ` over
/// the remaining columns subject to `δ_q = ŵ_q - w_q`.
pub fn analytic_update(
    w_row: &[f64],
    orig_row: &[f64],
    factor: &InvCholFactor,
    q: usize,
    deq_q: f64,
    first_order: Option<FirstOrder>,
) -> Result<Vec<f64>> {
    let d = factor.dim();
    if w_row.len() != d || orig_row.len() != d || q >= d {
        return Err(Error::dims(
            "analytic_update",
            format!("rows of length {d} and q < {d}"),
            format!("{} / {}, q = {q}", w_row.len(), orig_row.len()),
        ));
    }
    let t = factor.matrix();
    let e = (w_row[q] - deq_q) / t[(q, q)];
    let mut delta: Vec<f64> = t.row(q)[q..].iter().map(|tk| -e * tk).collect();
    if let Some(fo) = first_order {
        let n = d - q - 1;
        if n > 0 {
            let g: Vec<f64> = w_row[q + 1..].iter().zip(&orig_row[q + 1..]).map(|(a, b)| a - b).collect();
            let mut out = MatMut::new(&mut delta[1..], 1, n, n);
            factor.apply_inverse_block(q + 1..d, MatRef::row_major(&g, 1, n), fo.alpha(), &mut out);
        }
    }
    Ok(delta)
}

/// Output of one column step.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStepResult {
    pub q_col: Vec<i32>,
    pub deq_col: Vec<f64>,
    /// Change of the latent weights on columns `j..end` (column `j` itself
    /// moves onto its dequantized value).
    pub delta_w: DenseMatrix,
}

/// Result of quantizing one layer.
#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub quantized: QuantizedLayer,
    pub report: LayerReport,
    /// Latent weights at the end of the pass.
    pub latent: DenseMatrix,
}

/// Quantizes one layer with the configured engine.
///
/// `hessian` is the undamped accumulated state; damping is applied to a copy
/// with `config.damping`. The proxy loss in the report uses the undamped `H`.
pub fn run_engine(
    name: &str,
    weights: &DenseMatrix,
    hessian: &HessianState,
    config: &EngineConfig,
) -> Result<EngineOutput> {
    config.validate()?;
    if hessian.dim() != weights.cols() {
        return Err(Error::dims(
            "run_engine: Hessian dimension",
            weights.cols(),
            hessian.dim(),
        ));
    }
    if let Some((row, col)) = weights.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    let grid = config.grid()?;
    let start = Instant::now();
    let (quantized, latent) = match config.engine {
        EngineKind::Rtn => (rtn_quantize(weights, &grid)?, weights.clone()),
        EngineKind::ObsOracle => {
            let damped = damped_copy(hessian, config.damping)?;
            let mut layer = LayerBundle::new(weights.clone());
            let q = obc_pass(&mut layer, &damped, &grid, config.scale_source)?;
            (q, layer.latent)
        }
        EngineKind::Gptq | EngineKind::Foem | EngineKind::FoemPlus => {
            let damped = damped_copy(hessian, config.damping)?;
            let factor = inverse_cholesky(&damped)?;
            let mut layer = LayerBundle::new(weights.clone());
            let undamped;
            let mut pass = BlockedPass::new(&mut layer, &factor, grid, config.block_size)
                .scale_source(config.scale_source)
                .exec(config.exec);
            if let Some(fo) = config.first_order() {
                pass = pass.first_order(fo);
            }
            if config.engine == EngineKind::FoemPlus {
                undamped = hessian.undamped();
                pass = pass.plus_term(&undamped);
            }
            let q = pass.run()?;
            (q, layer.latent)
        }
    };
    let wall = start.elapsed().as_secs_f64();

    let h = hessian.undamped();
    let deq = quantized.dequantize();
    let loss = proxy_loss(&deq, weights, &h)?;
    let rtn_loss = if config.engine == EngineKind::Rtn {
        loss
    } else {
        proxy_loss(&rtn_quantize(weights, &grid)?.dequantize(), weights, &h)?
    };
    let report = LayerReport {
        layer: name.to_string(),
        engine: config.label(),
        bits: config.bits,
        group_size: config.group_size,
        beta: if config.engine.uses_first_order() { config.beta } else { 0.0 },
        block_size: config.block_size,
        proxy_loss: loss,
        rtn_relative: relative_to(loss, rtn_loss),
        wall_time_s: wall,
        drift: DriftStats::between(&latent, weights),
    };
    Ok(EngineOutput {
        quantized,
        report,
        latent,
    })
}

fn damped_copy(hessian: &HessianState, ratio: f64) -> Result<HessianState> {
    if hessian.is_damped() {
        return Ok(hessian.clone());
    }
    let mut h = hessian.clone();
    h.dampen(ratio)?;
    Ok(h)
}

/// `loss / reference`, with 0/0 counted as a tie (1.0).
fn relative_to(loss: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        loss / reference
    } else if loss == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}
