//! Uniform integer grids with one scale per (row, input-channel group).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Integer grid definition.
///
/// Symmetric grids are balanced, `[-(2^(b-1) - 1), 2^(b-1) - 1]`, so that
/// negation maps the grid onto itself and code 0 is exactly 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantGrid {
    bits: u8,
    /// Input channels per scale group; `None` means one group per row.
    group_size: Option<usize>,
    symmetric: bool,
}

impl QuantGrid {
    pub fn new(bits: u8, group_size: Option<usize>, symmetric: bool) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Config(format!("bits must be in [2, 8], got {bits}")));
        }
        if group_size == Some(0) {
            return Err(Error::Config("group size must be >= 1".into()));
        }
        Ok(QuantGrid {
            bits,
            group_size,
            symmetric,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> Option<usize> {
        self.group_size
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn q_min(&self) -> i32 {
        if self.symmetric {
            -((1 << (self.bits - 1)) - 1)
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i32 {
        if self.symmetric {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    /// Channels per group for a row of length `d_in`.
    pub fn group_len(&self, d_in: usize) -> usize {
        self.group_size.unwrap_or(d_in).max(1)
    }

    pub fn n_groups(&self, d_in: usize) -> usize {
        d_in.div_ceil(self.group_len(d_in))
    }

    pub fn contains(&self, code: i32) -> bool {
        (self.q_min()..=self.q_max()).contains(&code)
    }
}

/// Scale and zero point of one (row, group).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScale {
    pub scale: f64,
    pub zero_point: i32,
}

impl GroupScale {
    #[inline]
    pub fn dequantize(&self, code: i32) -> f64 {
        (code - self.zero_point) as f64 * self.scale
    }
}

/// Fits a scale (and zero point) to the values of one group.
///
/// A group whose computed scale is zero gets scale 1.
pub fn fit_scales(values: &[f64], grid: &QuantGrid) -> GroupScale {
    if grid.symmetric {
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = max_abs / grid.q_max() as f64;
        GroupScale {
            scale: if scale > 0.0 { scale } else { 1.0 },
            zero_point: 0,
        }
    } else {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let scale = (hi - lo) / (grid.q_max() - grid.q_min()) as f64;
        if !(scale > 0.0) {
            // constant (or empty) group: a unit grid whose zero point lands on
            // the value when it is an integer
            let lo = if lo.is_finite() { lo } else { 0.0 };
            return GroupScale {
                scale: 1.0,
                zero_point: (-lo).round_ties_even() as i32,
            };
        }
        GroupScale {
            scale,
            zero_point: (-lo / scale).round_ties_even() as i32,
        }
    }
}

/// Rounds `w` onto the grid; returns the code and its dequantized value.
#[inline]
pub fn quantize_value(w: f64, gs: &GroupScale, grid: &QuantGrid) -> (i32, f64) {
    let raw = (w / gs.scale).round_ties_even() + gs.zero_point as f64;
    let code = raw.clamp(grid.q_min() as f64, grid.q_max() as f64) as i32;
    (code, gs.dequantize(code))
}

/// Integer codes plus per-(row, group) scales of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    d_out: usize,
    d_in: usize,
    grid: QuantGrid,
    codes: Vec<i32>,
    scales: Vec<GroupScale>,
}

impl QuantizedLayer {
    pub fn new(d_out: usize, d_in: usize, grid: QuantGrid) -> Self {
        let g = grid.n_groups(d_in);
        QuantizedLayer {
            d_out,
            d_in,
            grid,
            codes: vec![0; d_out * d_in],
            scales: vec![
                GroupScale {
                    scale: 1.0,
                    zero_point: 0
                };
                d_out * g
            ],
        }
    }

    /// Assembles a layer from raw parts, validating shapes and code ranges.
    pub fn from_parts(
        d_out: usize,
        d_in: usize,
        grid: QuantGrid,
        codes: Vec<i32>,
        scales: Vec<GroupScale>,
    ) -> Result<Self> {
        let g = grid.n_groups(d_in);
        if codes.len() != d_out * d_in {
            return Err(Error::InvalidLayer(format!(
                "{} codes for a {d_out}x{d_in} layer",
                codes.len()
            )));
        }
        if scales.len() != d_out * g {
            return Err(Error::InvalidLayer(format!(
                "{} scales for {d_out} rows x {g} groups",
                scales.len()
            )));
        }
        let layer = QuantizedLayer {
            d_out,
            d_in,
            grid,
            codes,
            scales,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.codes.iter().position(|&c| !self.grid.contains(c)) {
            return Err(Error::InvalidLayer(format!(
                "code {} at ({}, {}) outside [{}, {}]",
                self.codes[i],
                i / self.d_in.max(1),
                i % self.d_in.max(1),
                self.grid.q_min(),
                self.grid.q_max()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.scale > 0.0) || !s.scale.is_finite()) {
            return Err(Error::InvalidLayer(format!("non-positive scale {}", s.scale)));
        }
        if self.grid.symmetric && self.scales.iter().any(|s| s.zero_point != 0) {
            return Err(Error::InvalidLayer("nonzero zero point on a symmetric grid".into()));
        }
        Ok(())
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    pub fn n_groups(&self) -> usize {
        self.grid.n_groups(self.d_in)
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut [i32] {
        &mut self.codes
    }

    pub fn scales(&self) -> &[GroupScale] {
        &self.scales
    }

    pub fn scales_mut(&mut self) -> &mut [GroupScale] {
        &mut self.scales
    }

    pub fn parts_mut(&mut self) -> (&mut [i32], &mut [GroupScale]) {
        (&mut self.codes, &mut self.scales)
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i32 {
        self.codes[r * self.d_in + c]
    }

    #[inline]
    pub fn group_scale(&self, r: usize, c: usize) -> &GroupScale {
        let g = c / self.grid.group_len(self.d_in);
        &self.scales[r * self.n_groups() + g]
    }

    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.d_out, self.d_in, |r, c| {
            self.group_scale(r, c).dequantize(self.code(r, c))
        })
    }
}

/// Round-to-nearest with no cross-column compensation.
pub fn rtn_quantize(weights: &DenseMatrix, grid: &QuantGrid) -> Result<QuantizedLayer> {
    if let Some((row, col)) = weights.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    let (d_out, d_in) = weights.shape();
    let gl = grid.group_len(d_in);
    let ng = grid.n_groups(d_in);
    let mut q = QuantizedLayer::new(d_out, d_in, *grid);
    for r in 0..d_out {
        let row = weights.row(r);
        for g in 0..ng {
            let cols = g * gl..((g + 1) * gl).min(d_in);
            let gs = fit_scales(&row[cols.clone()], grid);
            q.scales[r * ng + g] = gs;
            for c in cols {
                q.codes[r * d_in + c] = quantize_value(row[c], &gs, grid).0;
            }
        }
    }
    Ok(q)
}
