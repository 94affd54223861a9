//! Localized random projection: sliding application of a square kernel over
//! a feature map, the sparse-operator form of multiplying by a banded
//! Toeplitz matrix.
//!
//! `project` never materializes the matrix; `dense_oracle` builds it
//! explicitly so tests can check the fast path against a plain matrix-vector
//! product. Both use the same zero-padding, same-size-output convention and
//! accumulate taps in the same order, so they agree bit-for-bit away from
//! rounding pathologies.

use crate::error::{Error, Result};
use crate::kernel::ProjectionKernel;
use crate::map::FeatureMap;

/// Allocation cap for the explicit operator matrix, in matrix cells.
pub const DENSE_ORACLE_CELL_CAP: usize = 1 << 24;

/// Row-major dense matrix; only used to materialize projection operators for
/// verification.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.cols + col] = value;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: vector length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (r, out_v) in out.iter_mut().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (m, xv) in row.iter().zip(x) {
                acc += m * xv;
            }
            *out_v = acc;
        }
        Ok(out)
    }
}

fn check_geometry(input: &FeatureMap, kernel: &ProjectionKernel) -> Result<usize> {
    let side = kernel.side();
    if side % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel side {side} must be odd for centered application"
        )));
    }
    if input.height() < side || input.width() < side {
        return Err(Error::Shape(format!(
            "{}x{} input smaller than {side}x{side} kernel",
            input.height(),
            input.width()
        )));
    }
    Ok(side)
}

/// Applies the kernel as a sliding window with zero padding; the output has
/// the input's shape.
///
/// `out(y, x) = sum_{dy, dx} k[dy*s + dx] * in(y + dy - s/2, x + dx - s/2)`
/// with out-of-range input positions contributing zero.
pub fn project(input: &FeatureMap, kernel: &ProjectionKernel) -> Result<FeatureMap> {
    let side = check_geometry(input, kernel)?;
    let c = side / 2;
    let (h, w) = (input.height(), input.width());
    let mut out = FeatureMap::zeros(h, w);
    let k = kernel.coefficients();
    let src = input.values();
    let dst = out.values_mut();

    for oy in 0..h {
        let out_row = &mut dst[oy * w..(oy + 1) * w];
        for dy in 0..side {
            // input row iy = oy + dy - c, valid when in [0, h)
            if oy + dy < c || oy + dy >= h + c {
                continue;
            }
            let iy = oy + dy - c;
            let in_row = &src[iy * w..(iy + 1) * w];
            let k_row = &k[dy * side..(dy + 1) * side];
            for (dx, &kv) in k_row.iter().enumerate() {
                // input col ix = ox + dx - c, valid ox range below
                let ox_start = c.saturating_sub(dx);
                let ox_end = (w + c - dx).min(w);
                let in_off = ox_start + dx - c;
                let len = ox_end - ox_start;
                let outs = &mut out_row[ox_start..ox_end];
                let ins = &in_row[in_off..in_off + len];
                for (o, &iv) in outs.iter_mut().zip(ins) {
                    *o += kv * iv;
                }
            }
        }
    }
    Ok(out)
}

/// Materializes the projection operator as an `(h*w) x (h*w)` matrix such
/// that `flatten(project(x, kernel)) == dense_oracle(kernel, h, w) * flatten(x)`.
pub fn dense_oracle(kernel: &ProjectionKernel, height: usize, width: usize) -> Result<DenseMatrix> {
    let side = kernel.side();
    if side % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel side {side} must be odd for centered application"
        )));
    }
    if height < side || width < side {
        return Err(Error::Shape(format!(
            "{height}x{width} map smaller than {side}x{side} kernel"
        )));
    }
    let n = height * width;
    let cells = n
        .checked_mul(n)
        .ok_or(Error::OracleTooLarge { cells: usize::MAX, cap: DENSE_ORACLE_CELL_CAP })?;
    if cells > DENSE_ORACLE_CELL_CAP {
        return Err(Error::OracleTooLarge { cells, cap: DENSE_ORACLE_CELL_CAP });
    }

    let c = side / 2;
    let k = kernel.coefficients();
    let mut m = DenseMatrix::zeros(n, n);
    for oy in 0..height {
        for ox in 0..width {
            let row = oy * width + ox;
            for dy in 0..side {
                if oy + dy < c || oy + dy >= height + c {
                    continue;
                }
                let iy = oy + dy - c;
                for dx in 0..side {
                    if ox + dx < c || ox + dx >= width + c {
                        continue;
                    }
                    let ix = ox + dx - c;
                    m.set(row, iy * width + ix, k[dy * side + dx]);
                }
            }
        }
    }
    Ok(m)
}

/// Gradient of `sum(project(input) * upstream)` with respect to the kernel
/// taps only; the cheaper half of `project_backward` for layers whose input
/// gradient is discarded.
pub(crate) fn project_backward_coeffs(
    input: &FeatureMap,
    kernel: &ProjectionKernel,
    upstream_grad: &FeatureMap,
) -> Result<Vec<f64>> {
    let side = check_geometry(input, kernel)?;
    if !input.same_shape(upstream_grad) {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{} does not match input {}x{}",
            upstream_grad.height(),
            upstream_grad.width(),
            input.height(),
            input.width()
        )));
    }
    let c = side / 2;
    let (h, w) = (input.height(), input.width());
    let src = input.values();
    let up = upstream_grad.values();
    let mut grad_coeffs = vec![0.0; kernel.support()];

    for oy in 0..h {
        let up_row = &up[oy * w..(oy + 1) * w];
        for dy in 0..side {
            if oy + dy < c || oy + dy >= h + c {
                continue;
            }
            let iy = oy + dy - c;
            for dx in 0..side {
                let ox_start = c.saturating_sub(dx);
                let ox_end = (w + c - dx).min(w);
                let in_off = iy * w + ox_start + dx - c;
                let len = ox_end - ox_start;
                let ups = &up_row[ox_start..ox_end];
                let srcs = &src[in_off..in_off + len];
                let mut tap_acc = 0.0;
                for (&g, &s) in ups.iter().zip(srcs) {
                    tap_acc += g * s;
                }
                grad_coeffs[dy * side + dx] += tap_acc;
            }
        }
    }
    Ok(grad_coeffs)
}

/// Adjoint pass of `project`: routes an upstream gradient back to the input
/// map and accumulates the gradient with respect to each kernel tap.
///
/// `grad_coefficients[t]` is the sum over output positions of
/// `upstream(y, x) * in(patch position of tap t)`.
pub fn project_backward(
    input: &FeatureMap,
    kernel: &ProjectionKernel,
    upstream_grad: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>)> {
    let side = check_geometry(input, kernel)?;
    if !input.same_shape(upstream_grad) {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{} does not match input {}x{}",
            upstream_grad.height(),
            upstream_grad.width(),
            input.height(),
            input.width()
        )));
    }
    let c = side / 2;
    let (h, w) = (input.height(), input.width());
    let k = kernel.coefficients();
    let src = input.values();
    let up = upstream_grad.values();

    let mut grad_input = FeatureMap::zeros(h, w);
    let mut grad_coeffs = vec![0.0; kernel.support()];
    let gin = grad_input.values_mut();

    for oy in 0..h {
        let up_row = &up[oy * w..(oy + 1) * w];
        for dy in 0..side {
            if oy + dy < c || oy + dy >= h + c {
                continue;
            }
            let iy = oy + dy - c;
            for dx in 0..side {
                let tap = dy * side + dx;
                let kv = k[tap];
                let ox_start = c.saturating_sub(dx);
                let ox_end = (w + c - dx).min(w);
                let in_off = iy * w + ox_start + dx - c;
                let len = ox_end - ox_start;
                let ups = &up_row[ox_start..ox_end];
                let gins = &mut gin[in_off..in_off + len];
                let srcs = &src[in_off..in_off + len];
                let mut tap_acc = 0.0;
                for ((&g, gi), &s) in ups.iter().zip(gins).zip(srcs) {
                    *gi += kv * g;
                    tap_acc += g * s;
                }
                grad_coeffs[tap] += tap_acc;
            }
        }
    }
    Ok((grad_input, grad_coeffs))
}
