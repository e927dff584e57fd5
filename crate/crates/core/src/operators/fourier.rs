//! Unitary 2D FFT on complex grids, plus centered/unshifted index mapping.
//!
//! Masks live on the centered grid (DC at `(rows/2, cols/2)`); the FFT works
//! in standard DFT order (DC at `(0, 0)`).

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Map a centered grid index to the unshifted DFT index.
pub fn uncenter(r: usize, c: usize, rows: usize, cols: usize) -> (usize, usize) {
    ((r + (rows + 1) / 2) % rows, (c + (cols + 1) / 2) % cols)
}

#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    fwd_rows: Arc<dyn Fft<f64>>,
    fwd_cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        Self {
            rows,
            cols,
            fwd_rows: planner.plan_fft_forward(cols),
            fwd_cols: planner.plan_fft_forward(rows),
            inv_rows: planner.plan_fft_inverse(cols),
            inv_cols: planner.plan_fft_inverse(rows),
        }
    }

    fn transform(
        &self,
        grid: &Array2<Complex64>,
        row_fft: &Arc<dyn Fft<f64>>,
        col_fft: &Arc<dyn Fft<f64>>,
    ) -> Array2<Complex64> {
        let mut out = grid.clone();
        // rows
        for mut row in out.rows_mut() {
            let buf = row.as_slice_mut().expect("row-major layout");
            row_fft.process(buf);
        }
        // columns, via a scratch buffer per column
        let mut col_buf = vec![Complex64::default(); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                col_buf[r] = out[[r, c]];
            }
            col_fft.process(&mut col_buf);
            for r in 0..self.rows {
                out[[r, c]] = col_buf[r];
            }
        }
        let scale = 1.0 / ((self.rows * self.cols) as f64).sqrt();
        out.mapv_inplace(|z| z * scale);
        out
    }

    /// Orthonormal forward DFT: `‖F x‖₂ = ‖x‖₂`.
    pub fn unitary_forward(&self, grid: &Array2<Complex64>) -> Array2<Complex64> {
        self.transform(grid, &self.fwd_rows, &self.fwd_cols)
    }

    /// Orthonormal inverse DFT (adjoint of [`Self::unitary_forward`]).
    pub fn unitary_inverse(&self, grid: &Array2<Complex64>) -> Array2<Complex64> {
        self.transform(grid, &self.inv_rows, &self.inv_cols)
    }
}
