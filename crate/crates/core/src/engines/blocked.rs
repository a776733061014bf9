//! Cholesky-factor engines with lazy block updates (GPTQ and first-order).
//!
//! Inside a block `[i, e)` every column step updates only the columns
//! `j..e`; the columns past the block receive the accumulated rounding
//! errors in one product at the block boundary. With a first-order term the
//! step additionally applies `sign · β · (W - W_orig)[:, j..e] · T[j..e, j..e]ᵀ T[j..e, j..e]`
//! and the boundary applies the same form on `e..`.

use std::ops::Range;

use super::{ColumnStepResult, FirstOrder, LayerBundle, ScaleSource};
use crate::error::{Error, Result};
use crate::linalg::InvCholFactor;
use crate::matrix::{gemm, DenseMatrix, MatMut, MatRef};
use crate::par::{row_chunks, run_chunks, Exec};
use crate::quantizer::{fit_scales, quantize_value, GroupScale, QuantGrid, QuantizedLayer};

use super::plus::plus_direction;

/// Column-step parameters shared by every row chunk.
struct StepCtx<'a> {
    factor: &'a InvCholFactor,
    original: &'a DenseMatrix,
    grid: QuantGrid,
    d_in: usize,
    n_groups: usize,
    group_len: usize,
    j: usize,
    block: Range<usize>,
    err_len: usize,
    fit: Option<ScaleSource>,
    first_order: Option<FirstOrder>,
    plus: Option<&'a [f64]>,
}

/// Quantizes column `j` for a chunk of rows starting at absolute row `r0`.
fn column_rows(
    ctx: &StepCtx<'_>,
    r0: usize,
    lat: &mut [f64],
    codes: &mut [i32],
    scales: &mut [GroupScale],
    err: &mut [f64],
) {
    let d_in = ctx.d_in;
    let n = lat.len() / d_in;
    let j = ctx.j;
    let (i, e) = (ctx.block.start, ctx.block.end);
    let t = ctx.factor.matrix();
    let gi = j / ctx.group_len;

    if let Some(source) = ctx.fit {
        let g_end = (j + ctx.group_len).min(d_in);
        let mut buf = vec![0.0; g_end - j];
        for r in 0..n {
            match source {
                ScaleSource::Original => buf.copy_from_slice(&ctx.original.row(r0 + r)[j..g_end]),
                ScaleSource::Latent => {
                    buf.copy_from_slice(&lat[r * d_in + j..r * d_in + g_end]);
                    // columns past the block still miss this block's lazy update
                    for c in e.max(j)..g_end {
                        let mut pending = 0.0;
                        for k in i..j {
                            pending += err[r * ctx.err_len + (k - i)] * t[(k, c)];
                        }
                        buf[c - j] -= pending;
                    }
                }
            }
            scales[r * ctx.n_groups + gi] = fit_scales(&buf, &ctx.grid);
        }
    }

    let tjj = t[(j, j)];
    let trow = &t.row(j)[j..e];
    let mut pre = if ctx.plus.is_some() { vec![0.0; n] } else { Vec::new() };
    for r in 0..n {
        let w = &mut lat[r * d_in..(r + 1) * d_in];
        let gs = scales[r * ctx.n_groups + gi];
        let (code, deq) = quantize_value(w[j], &gs, &ctx.grid);
        codes[r * d_in + j] = code;
        if let Some(p) = pre.get_mut(r) {
            *p = w[j];
        }
        let ej = (w[j] - deq) / tjj;
        err[r * ctx.err_len + (j - i)] = ej;
        for (wk, tk) in w[j..e].iter_mut().zip(trow) {
            *wk -= ej * tk;
        }
    }

    if let Some(fo) = ctx.first_order {
        let s = e - j;
        let drift = DenseMatrix::from_fn(n, s, |r, c| lat[r * d_in + j + c] - ctx.original[(r0 + r, j + c)]);
        let mut out = MatMut::new(&mut lat[j..], n, s, d_in);
        ctx.factor.apply_inverse_block(j..e, drift.view(), fo.alpha(), &mut out);
    }

    if let Some(v) = ctx.plus {
        for (r, wq) in pre.iter().enumerate() {
            let row = &mut lat[r * d_in + j + 1..(r + 1) * d_in];
            for (x, vk) in row.iter_mut().zip(v) {
                *x += wq * vk;
            }
        }
    }
}

/// Lazy cross-block update for a chunk of rows at the end of `block`.
fn boundary_rows(
    factor: &InvCholFactor,
    original: &DenseMatrix,
    block: &Range<usize>,
    first_order: Option<FirstOrder>,
    r0: usize,
    lat: &mut [f64],
    err: MatRef<'_>,
) {
    let d_in = factor.dim();
    let n = lat.len() / d_in;
    let (i, e) = (block.start, block.end);
    if e >= d_in || n == 0 {
        return;
    }
    let rest = d_in - e;
    let t = factor.matrix();
    let mut out = MatMut::new(&mut lat[e..], n, rest, d_in);
    gemm(-1.0, err.sub(0..n, 0..e - i), t.sub(i..e, e..d_in), 1.0, out.sub_cols(0..rest));
    if let Some(fo) = first_order {
        let drift = DenseMatrix::from_fn(n, rest, |r, c| out.at(r, c) - original[(r0 + r, e + c)]);
        factor.apply_inverse_block(e..d_in, drift.view(), fo.alpha(), &mut out);
    }
}

/// One GPTQ column step applied to columns `j..end`.
///
/// `scales[r]` is row `r`'s scale for the group containing `j`. With
/// `end = d_in` this is the unblocked update; inside a blocked pass `end` is
/// the block end.
pub fn gptq_column_step(
    layer: &mut LayerBundle,
    factor: &InvCholFactor,
    grid: &QuantGrid,
    scales: &[GroupScale],
    j: usize,
    end: usize,
) -> Result<ColumnStepResult> {
    single_step(layer, factor, grid, scales, j, j..end, None)
}

/// One first-order column step inside `block`: the GPTQ term on `j..block.end`,
/// then the first-order term on the same slice, evaluated on the updated
/// latent weights.
pub fn foem_column_step(
    layer: &mut LayerBundle,
    factor: &InvCholFactor,
    grid: &QuantGrid,
    scales: &[GroupScale],
    j: usize,
    block: Range<usize>,
    first_order: FirstOrder,
) -> Result<ColumnStepResult> {
    single_step(layer, factor, grid, scales, j, block, Some(first_order))
}

fn single_step(
    layer: &mut LayerBundle,
    factor: &InvCholFactor,
    grid: &QuantGrid,
    scales: &[GroupScale],
    j: usize,
    block: Range<usize>,
    first_order: Option<FirstOrder>,
) -> Result<ColumnStepResult> {
    let (d_out, d_in) = (layer.d_out(), layer.d_in());
    check_factor(factor, d_in)?;
    if !(block.start <= j && j < block.end && block.end <= d_in) {
        return Err(Error::dims("column step", format!("{block:?} containing j < {d_in}"), j));
    }
    if scales.len() != d_out {
        return Err(Error::dims("column step scales", d_out, scales.len()));
    }
    let n_groups = grid.n_groups(d_in);
    let group_len = grid.group_len(d_in);
    let mut all_scales = vec![GroupScale { scale: 1.0, zero_point: 0 }; d_out * n_groups];
    for (r, s) in scales.iter().enumerate() {
        all_scales[r * n_groups + j / group_len] = *s;
    }
    let mut codes = vec![0; d_out * d_in];
    let err_len = block.len();
    let mut err = vec![0.0; d_out * err_len];
    let before = layer.latent.block(0..d_out, j..block.end);
    let (lat, original) = layer.parts_mut();
    let ctx = StepCtx {
        factor,
        original,
        grid: *grid,
        d_in,
        n_groups,
        group_len,
        j,
        block: block.clone(),
        err_len,
        fit: None,
        first_order,
        plus: None,
    };
    column_rows(&ctx, 0, lat.as_mut_slice(), &mut codes, &mut all_scales, &mut err);
    let q_col: Vec<i32> = (0..d_out).map(|r| codes[r * d_in + j]).collect();
    let deq_col = q_col.iter().zip(scales).map(|(&c, s)| s.dequantize(c)).collect();
    let after = layer.latent.block(0..d_out, j..block.end);
    Ok(ColumnStepResult {
        q_col,
        deq_col,
        delta_w: after.sub_matrix(&before),
    })
}

/// Boundary update after `block` has been fully quantized.
///
/// `err` is `d_out × block.len()` and holds `(W[:, k] - Q[:, k]) / T[k, k]`
/// for each column `k` of the block.
pub fn foem_block_boundary(
    layer: &mut LayerBundle,
    factor: &InvCholFactor,
    block: Range<usize>,
    err: &DenseMatrix,
    first_order: Option<FirstOrder>,
) -> Result<()> {
    let (d_out, d_in) = (layer.d_out(), layer.d_in());
    check_factor(factor, d_in)?;
    if block.end > d_in || block.start > block.end {
        return Err(Error::dims("block boundary", format!("block within 0..{d_in}"), format!("{block:?}")));
    }
    if err.shape() != (d_out, block.len()) {
        return Err(Error::dims(
            "block boundary error buffer",
            format!("{:?}", (d_out, block.len())),
            format!("{:?}", err.shape()),
        ));
    }
    let (lat, original) = layer.parts_mut();
    boundary_rows(factor, original, &block, first_order, 0, lat.as_mut_slice(), err.view());
    Ok(())
}

fn check_factor(factor: &InvCholFactor, d_in: usize) -> Result<()> {
    if factor.dim() != d_in {
        return Err(Error::dims("inverse factor dimension", d_in, factor.dim()));
    }
    Ok(())
}

/// A full left-to-right pass with lazy block updates.
///
/// Without a first-order term this is GPTQ; with one it is the first-order
/// engine; with a plus matrix the extra cross term is added per column.
pub struct BlockedPass<'a> {
    layer: &'a mut LayerBundle,
    factor: &'a InvCholFactor,
    grid: QuantGrid,
    block_size: usize,
    scale_source: ScaleSource,
    exec: Exec,
    first_order: Option<FirstOrder>,
    plus_h: Option<&'a DenseMatrix>,
}

impl<'a> BlockedPass<'a> {
    pub fn new(layer: &'a mut LayerBundle, factor: &'a InvCholFactor, grid: QuantGrid, block_size: usize) -> Self {
        BlockedPass {
            layer,
            factor,
            grid,
            block_size,
            scale_source: ScaleSource::Latent,
            exec: Exec::default(),
            first_order: None,
            plus_h: None,
        }
    }

    pub fn scale_source(mut self, source: ScaleSource) -> Self {
        self.scale_source = source;
        self
    }

    pub fn exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn first_order(mut self, fo: FirstOrder) -> Self {
        self.first_order = Some(fo);
        self
    }

    /// Adds `W[:, q] · H[q, q+1..] · H[q+1.., q+1..]⁻¹` to the remaining columns
    /// after each column `q`.
    pub fn plus_term(mut self, h: &'a DenseMatrix) -> Self {
        self.plus_h = Some(h);
        self
    }

    pub fn run(self) -> Result<QuantizedLayer> {
        let (d_out, d_in) = (self.layer.d_out(), self.layer.d_in());
        check_factor(self.factor, d_in)?;
        if self.block_size == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        if let Some(h) = self.plus_h {
            if h.shape() != (d_in, d_in) {
                return Err(Error::dims("plus-term Hessian", d_in, format!("{:?}", h.shape())));
            }
        }
        let grid = self.grid;
        let mut out = QuantizedLayer::new(d_out, d_in, grid);
        if d_in == 0 {
            return Ok(out);
        }
        let n_groups = grid.n_groups(d_in);
        let group_len = grid.group_len(d_in);
        let bsz = self.block_size.min(d_in);
        let mut err = vec![0.0; d_out * bsz];
        let per = self.exec.rows_per_task(d_out, 8);
        let (lat, original) = self.layer.parts_mut();
        let mut plus_v = Vec::new();

        let mut i = 0;
        while i < d_in {
            let e = (i + bsz).min(d_in);
            for j in i..e {
                if let Some(h) = self.plus_h {
                    plus_v = plus_direction(h, self.factor, j);
                }
                let ctx = StepCtx {
                    factor: self.factor,
                    original,
                    grid,
                    d_in,
                    n_groups,
                    group_len,
                    j,
                    block: i..e,
                    err_len: bsz,
                    fit: (j % group_len == 0).then_some(self.scale_source),
                    first_order: self.first_order,
                    plus: self.plus_h.map(|_| plus_v.as_slice()),
                };
                let (codes, scales) = out.parts_mut();
                let items: Vec<_> = row_chunks(lat.as_mut_slice(), d_in, per)
                    .into_iter()
                    .zip(row_chunks(codes, d_in, per))
                    .zip(row_chunks(scales, n_groups, per))
                    .zip(row_chunks(&mut err, bsz, per))
                    .enumerate()
                    .collect();
                run_chunks(self.exec, items, |(k, (((l, c), s), er))| {
                    column_rows(&ctx, k * per, l, c, s, er)
                });
            }
            if e < d_in {
                let block = i..e;
                let items: Vec<_> = row_chunks(lat.as_mut_slice(), d_in, per)
                    .into_iter()
                    .zip(row_chunks(&mut err, bsz, per))
                    .enumerate()
                    .collect();
                let (factor, fo) = (self.factor, self.first_order);
                run_chunks(self.exec, items, |(k, (l, er))| {
                    let rows = er.len() / bsz;
                    boundary_rows(
                        factor,
                        original,
                        &block,
                        fo,
                        k * per,
                        l,
                        MatRef::row_major(er, rows, bsz),
                    )
                });
            }
            i = e;
        }
        Ok(out)
    }
}
