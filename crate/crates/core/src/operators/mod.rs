//! The measurement model `y = Ax + η`.
//!
//! Supports two operator families: masked unitary Fourier sampling on a
//! Cartesian k-space grid (MRI-style) and frozen Gaussian random matrices
//! (compressive sensing of natural images). Both expose forward, adjoint,
//! and the data-fidelity gradient `Aᴴ(Ax − y)` for `g(x) = ½‖y − Ax‖²`.

mod fourier;
mod masks;
mod noise;

pub use masks::{make_mask, Pattern, SamplingMask, FRACTION_TOL};
pub use noise::{add_noise, NoiseSpec};

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{ModarError, Result};
use crate::Image;
use fourier::Fft2;

/// Real or complex measurement vectors. Complex vectors are treated as
/// vectors over ℝ^{2m} for inner products and norms.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurements {
    Real(Array1<f64>),
    Complex(Array1<Complex64>),
}

impl Measurements {
    pub fn len(&self) -> usize {
        match self {
            Measurements::Real(v) => v.len(),
            Measurements::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// ℓ2 norm in the real view.
    pub fn norm(&self) -> f64 {
        self.dot_real(self).sqrt()
    }

    /// Real inner product: `Re(aᴴb)` for complex, plain dot for real.
    pub fn dot_real(&self, other: &Measurements) -> f64 {
        match (self, other) {
            (Measurements::Real(a), Measurements::Real(b)) => a.dot(b),
            (Measurements::Complex(a), Measurements::Complex(b)) => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| x.re * y.re + x.im * y.im)
                .sum(),
            _ => f64::NAN,
        }
    }

    pub fn sub(&self, other: &Measurements) -> Result<Measurements> {
        match (self, other) {
            (Measurements::Real(a), Measurements::Real(b)) if a.len() == b.len() => {
                Ok(Measurements::Real(a - b))
            }
            (Measurements::Complex(a), Measurements::Complex(b)) if a.len() == b.len() => {
                Ok(Measurements::Complex(a - b))
            }
            _ => Err(ModarError::Shape(
                "measurement vectors differ in kind or length".into(),
            )),
        }
    }

    pub fn scale(&self, c: f64) -> Measurements {
        match self {
            Measurements::Real(v) => Measurements::Real(v * c),
            Measurements::Complex(v) => Measurements::Complex(v.mapv(|z| z * c)),
        }
    }

    pub fn add(&self, other: &Measurements) -> Result<Measurements> {
        self.sub(&other.scale(-1.0))
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Measurements::Real(v) => v.iter().all(|x| x.is_finite()),
            Measurements::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }
}

/// Which operator family `A` belongs to.
#[derive(Debug, Clone)]
pub enum OperatorKind {
    MaskedFourier { mask: SamplingMask },
    GaussianMatrix { m: usize, n: usize, seed: u64 },
}

/// A linear measurement map with apply/adjoint. Immutable after construction;
/// safe to share across threads.
#[derive(Clone)]
pub struct MeasurementOperator {
    kind: OperatorKind,
    input_shape: (usize, usize, usize), // (channels, rows, cols)
    /// Unshifted flat k-space indices of the sampled coefficients, in the
    /// row-major order of the centered mask.
    sample_indices: Vec<usize>,
    fft: Option<Fft2>,
    matrix: Option<Array2<f64>>,
}

impl std::fmt::Debug for MeasurementOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementOperator")
            .field("kind", &self.kind)
            .field("input_shape", &self.input_shape)
            .field("output_len", &self.output_len())
            .finish()
    }
}

impl MeasurementOperator {
    /// Masked unitary Fourier sampling. `channels` is 1 (real signal) or 2
    /// (complex signal carried as two real channels).
    pub fn masked_fourier(mask: SamplingMask, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 2 {
            return Err(ModarError::Config(format!(
                "masked_fourier supports 1 or 2 signal channels, got {channels}"
            )));
        }
        let (rows, cols) = mask.grid_shape;
        let mut sample_indices = Vec::with_capacity(mask.num_sampled());
        for r in 0..rows {
            for c in 0..cols {
                if mask.entries()[[r, c]] {
                    let (ur, uc) = fourier::uncenter(r, c, rows, cols);
                    sample_indices.push(ur * cols + uc);
                }
            }
        }
        Ok(Self {
            kind: OperatorKind::MaskedFourier { mask },
            input_shape: (channels, rows, cols),
            sample_indices,
            fft: Some(Fft2::new(rows, cols)),
            matrix: None,
        })
    }

    /// Frozen Gaussian matrix with i.i.d. N(0, 1/m) entries; `n` must equal
    /// the flattened input size `channels·rows·cols`.
    pub fn gaussian(m: usize, input_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let n = input_shape.0 * input_shape.1 * input_shape.2;
        if m == 0 || n == 0 {
            return Err(ModarError::Config("gaussian operator needs m, n ≥ 1".into()));
        }
        let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "gaussian-matrix", 0));
        let scale = (1.0 / m as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((m, n), || {
            // Box-Muller; two uniforms per normal keeps the stream simple.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
        });
        Ok(Self {
            kind: OperatorKind::GaussianMatrix { m, n, seed },
            input_shape,
            sample_indices: Vec::new(),
            fft: None,
            matrix: Some(matrix),
        })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    /// Number of measurements (complex coefficients count once).
    pub fn output_len(&self) -> usize {
        match &self.kind {
            OperatorKind::MaskedFourier { .. } => self.sample_indices.len(),
            OperatorKind::GaussianMatrix { m, .. } => *m,
        }
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.dim() != self.input_shape {
            return Err(ModarError::Shape(format!(
                "operator expects input {:?}, got {:?}",
                self.input_shape,
                x.dim()
            )));
        }
        Ok(())
    }

    fn check_output(&self, y: &Measurements) -> Result<()> {
        let kind_ok = matches!(
            (&self.kind, y),
            (OperatorKind::MaskedFourier { .. }, Measurements::Complex(_))
                | (OperatorKind::GaussianMatrix { .. }, Measurements::Real(_))
        );
        if !kind_ok || y.len() != self.output_len() {
            return Err(ModarError::Shape(format!(
                "operator produces {} measurements of matching kind, got {} of other kind",
                self.output_len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// `y = Ax`.
    pub fn apply_forward(&self, x: &Image) -> Result<Measurements> {
        self.check_input(x)?;
        match &self.kind {
            OperatorKind::MaskedFourier { .. } => {
                let grid = self.to_complex_grid(x);
                let spec = self.fft.as_ref().unwrap().unitary_forward(&grid);
                let flat = spec.as_slice().unwrap();
                let y = Array1::from_iter(self.sample_indices.iter().map(|&i| flat[i]));
                Ok(Measurements::Complex(y))
            }
            OperatorKind::GaussianMatrix { .. } => {
                let flat = x.to_shape(x.len()).unwrap().to_owned();
                Ok(Measurements::Real(self.matrix.as_ref().unwrap().dot(&flat)))
            }
        }
    }

    /// `x = Aᴴy` (real-linear adjoint with respect to the ℝ^{2m} view).
    pub fn apply_adjoint(&self, y: &Measurements) -> Result<Image> {
        self.check_output(y)?;
        match (&self.kind, y) {
            (OperatorKind::MaskedFourier { mask }, Measurements::Complex(v)) => {
                let (rows, cols) = mask.grid_shape;
                let mut spec = Array2::<Complex64>::zeros((rows, cols));
                {
                    let flat = spec.as_slice_mut().unwrap();
                    for (&i, &z) in self.sample_indices.iter().zip(v.iter()) {
                        flat[i] = z;
                    }
                }
                let grid = self.fft.as_ref().unwrap().unitary_inverse(&spec);
                Ok(self.from_complex_grid(&grid))
            }
            (OperatorKind::GaussianMatrix { .. }, Measurements::Real(v)) => {
                let flat = self.matrix.as_ref().unwrap().t().dot(v);
                Ok(flat
                    .into_shape_with_order(self.input_shape)
                    .expect("adjoint output reshapes to input shape"))
            }
            _ => unreachable!("check_output guards kind agreement"),
        }
    }

    /// Gradient of `g(x) = ½‖y − Ax‖²`, i.e. `Aᴴ(Ax − y)`.
    pub fn grad_data_fidelity(&self, x: &Image, y: &Measurements) -> Result<Image> {
        let ax = self.apply_forward(x)?;
        let r = ax.sub(y)?;
        self.apply_adjoint(&r)
    }

    /// Data-fidelity value `g(x) = ½‖y − Ax‖²`.
    pub fn data_fidelity(&self, x: &Image, y: &Measurements) -> Result<f64> {
        let r = self.apply_forward(x)?.sub(y)?;
        Ok(0.5 * r.dot_real(&r))
    }

    /// `AᴴA x` — the gram operator, used by the solver's reverse pass.
    pub fn gram_apply(&self, x: &Image) -> Result<Image> {
        let ax = self.apply_forward(x)?;
        self.apply_adjoint(&ax)
    }

    /// Power-iteration estimate of ‖A‖₂ (exact 1.0 for masked Fourier).
    pub fn operator_norm(&self, iters: usize, seed: u64) -> f64 {
        if matches!(self.kind, OperatorKind::MaskedFourier { .. }) {
            return 1.0;
        }
        let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "opnorm", 0));
        let mut x = Array3::from_shape_simple_fn(self.input_shape, || rng.gen_range(-1.0..1.0));
        let mut lambda = 0.0;
        for _ in 0..iters {
            let gx = self.gram_apply(&x).expect("shapes fixed by construction");
            lambda = (&gx * &gx).sum().sqrt();
            if lambda <= 0.0 {
                return 0.0;
            }
            x = gx / lambda;
        }
        lambda.sqrt()
    }

    fn to_complex_grid(&self, x: &Image) -> Array2<Complex64> {
        let (c, rows, cols) = self.input_shape;
        let mut grid = Array2::<Complex64>::zeros((rows, cols));
        for r in 0..rows {
            for col in 0..cols {
                grid[[r, col]] = if c == 1 {
                    Complex64::new(x[[0, r, col]], 0.0)
                } else {
                    Complex64::new(x[[0, r, col]], x[[1, r, col]])
                };
            }
        }
        grid
    }

    fn from_complex_grid(&self, grid: &Array2<Complex64>) -> Image {
        let (c, rows, cols) = self.input_shape;
        let mut x = Array3::<f64>::zeros((c, rows, cols));
        for r in 0..rows {
            for col in 0..cols {
                x[[0, r, col]] = grid[[r, col]].re;
                if c == 2 {
                    x[[1, r, col]] = grid[[r, col]].im;
                }
            }
        }
        x
    }
}
