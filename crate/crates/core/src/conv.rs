//! 2D convolution kernels (same zero padding) with explicit gradients.
//!
//! Feature maps are `(channels, rows, cols)`, weights `(c_out, c_in, k, k)`
//! with odd `k`. Forward and both gradients are lowered to im2col + matmul so
//! the unrolled training loop stays CPU-friendly. The convolution is the
//! cross-correlation convention used by deep-learning frameworks.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{ModarError, Result};

/// Unfold `(c_in, h, w)` into `(c_in·k·k, h·w)` patch columns, zero padded.
pub fn im2col(u: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c_in, h, w) = u.dim();
    let pad = (k - 1) / 2;
    let mut cols = Array2::<f64>::zeros((c_in * k * k, h * w));
    for j in 0..c_in {
        for dy in 0..k {
            for dx in 0..k {
                let row = (j * k + dy) * k + dx;
                // source row index = y + dy - pad, valid range of y:
                let y_lo = pad.saturating_sub(dy);
                let y_hi = (h + pad - dy).min(h);
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad - dx).min(w);
                if y_lo >= y_hi || x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + dy - pad;
                    let src = u.slice(ndarray::s![j, sy, (x_lo + dx - pad)..(x_hi + dx - pad)]);
                    let mut dst = cols.slice_mut(ndarray::s![row, (y * w + x_lo)..(y * w + x_hi)]);
                    dst.assign(&src);
                }
            }
        }
    }
    cols
}

/// Fold `(c_in·k·k, h·w)` columns back onto `(c_in, h, w)` by scatter-add.
/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, c_in: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = (k - 1) / 2;
    let mut u = Array3::<f64>::zeros((c_in, h, w));
    for j in 0..c_in {
        for dy in 0..k {
            for dx in 0..k {
                let row = (j * k + dy) * k + dx;
                let y_lo = pad.saturating_sub(dy);
                let y_hi = (h + pad - dy).min(h);
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad - dx).min(w);
                if y_lo >= y_hi || x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + dy - pad;
                    let src = cols.slice(ndarray::s![row, (y * w + x_lo)..(y * w + x_hi)]);
                    let mut dst =
                        u.slice_mut(ndarray::s![j, sy, (x_lo + dx - pad)..(x_hi + dx - pad)]);
                    dst += &src;
                }
            }
        }
    }
    u
}

fn weight_matrix(w: &Array4<f64>) -> Array2<f64> {
    let (c_out, c_in, k, _) = w.dim();
    w.to_shape((c_out, c_in * k * k)).unwrap().to_owned()
}

/// Check input/weight compatibility for a same-padded conv.
pub fn check_shapes(u: &Array3<f64>, w: &Array4<f64>) -> Result<()> {
    let (c_in_u, _, _) = u.dim();
    let (_, c_in_w, k, k2) = w.dim();
    if k != k2 || k % 2 == 0 {
        return Err(ModarError::Shape(format!(
            "kernel must be square with odd size, got {k}x{k2}"
        )));
    }
    if c_in_u != c_in_w {
        return Err(ModarError::Shape(format!(
            "conv input has {c_in_u} channels, weight expects {c_in_w}"
        )));
    }
    Ok(())
}

/// Same-padded 2D convolution: `v[o] = Σ_j w[o,j] ⋆ u[j] (+ bias[o])`.
pub fn conv2d(u: &Array3<f64>, w: &Array4<f64>, bias: Option<&Array1<f64>>) -> Array3<f64> {
    let (_, h, width) = u.dim();
    let (c_out, _, k, _) = w.dim();
    let cols = im2col(u, k);
    let wm = weight_matrix(w);
    let mut vm = wm.dot(&cols); // (c_out, h*w)
    if let Some(b) = bias {
        for (mut row, &bo) in vm.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += bo;
        }
    }
    vm.into_shape_with_order((c_out, h, width)).unwrap()
}

/// Gradient of a scalar loss with respect to the conv input, given the
/// gradient `gv` with respect to the conv output.
pub fn conv2d_input_grad(gv: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
    let (c_out, h, width) = gv.dim();
    let (_, c_in, k, _) = w.dim();
    let gv_mat = gv.to_shape((c_out, h * width)).unwrap().to_owned();
    let wm = weight_matrix(w);
    let cols_g = wm.t().dot(&gv_mat); // (c_in·k·k, h·w)
    col2im(&cols_g, c_in, h, width, k)
}

/// Gradient with respect to the weights: `gw[o,j,dy,dx] = Σ_{y,x} gv[o,y,x]·u[j,y+dy-p,x+dx-p]`.
pub fn conv2d_weight_grad(gv: &Array3<f64>, u: &Array3<f64>, k: usize) -> Array4<f64> {
    let (c_out, h, width) = gv.dim();
    let (c_in, _, _) = u.dim();
    let cols = im2col(u, k);
    let gv_mat = gv.to_shape((c_out, h * width)).unwrap().to_owned();
    let gw_mat = gv_mat.dot(&cols.t()); // (c_out, c_in·k·k)
    gw_mat
        .into_shape_with_order((c_out, c_in, k, k))
        .unwrap()
}

/// Gradient with respect to the bias: per-output-channel sum of `gv`.
pub fn conv2d_bias_grad(gv: &Array3<f64>) -> Array1<f64> {
    let c_out = gv.dim().0;
    let mut g = Array1::<f64>::zeros(c_out);
    for (o, plane) in gv.axis_iter(Axis(0)).enumerate() {
        g[o] = plane.sum();
    }
    g
}
