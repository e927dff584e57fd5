//! Reconstruction of images from undersampled or noisy linear measurements
//! with an unrolled PnP-FISTA network, plus parameter-efficient domain
//! expansion through per-layer rank-one weight modulations.
//!
//! The crate is organized around the pipeline:
//!
//! * [`operators`] — the measurement model `y = Ax + η`: sampling masks,
//!   masked-Fourier and Gaussian-matrix operators, data-fidelity gradients,
//!   SNR-calibrated noise.
//! * [`prior`] — the artifact-removal operator `D(x) = x − α·f(x)` built on a
//!   DnCNN-style residual network with spectral normalization.
//! * [`modulation`] — rank-one factor quadruples per convolution layer, the
//!   modulated convolution, and the persistent multi-domain registry.
//! * [`solver`] — the unrolled iteration loop and its hand-written reverse
//!   pass (gradients with respect to weights and modulation factors).
//! * [`training`] — base training, frozen-backbone adaptation, and the
//!   full-tuning / channel-only / partial-layer baselines.
//! * [`evaluation`] — PSNR/SSIM, cross-domain evaluation matrices,
//!   layer-wise modulation-norm profiles, report emission.
//! * [`data`] — synthetic image families and directory ingestion with
//!   deterministic splits and manifests.
//! * [`config`] — the declarative run configuration shared with the CLI.

pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod modulation;
pub mod operators;
pub mod prior;
pub mod seeds;
pub mod solver;
pub mod training;

pub use error::{ModarError, Result};

/// Images are channel-first real arrays `(channels, rows, cols)`.
/// Complex-valued signals are carried as two real channels (re, im).
pub type Image = ndarray::Array3<f64>;
