//! SNR-calibrated additive Gaussian measurement noise.
//!
//! The noise realization is drawn once from the seed and then scaled so the
//! realized SNR `10·log10(‖y‖²/‖η‖²)` equals the target exactly; signal
//! power is the squared norm of the noiseless measurement vector.

use ndarray::Array1;
use num_complex::Complex64;
use rand::Rng;

use super::Measurements;
use crate::error::{ModarError, Result};

/// Additive-noise specification. `target_snr_db = None` disables noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub target_snr_db: Option<f64>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            target_snr_db: None,
            seed: 0,
        }
    }

    pub fn snr_db(db: f64, seed: u64) -> Self {
        NoiseSpec {
            target_snr_db: Some(db),
            seed,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Add Gaussian noise at the requested SNR (circularly symmetric complex
/// Gaussian for complex measurements). Returns `y` unchanged when no target
/// is set.
pub fn add_noise(y: &Measurements, spec: &NoiseSpec) -> Result<Measurements> {
    let target = match spec.target_snr_db {
        None => return Ok(y.clone()),
        Some(db) => db,
    };
    if !(0.0..=60.0).contains(&target) {
        return Err(ModarError::Noise(format!(
            "target SNR must lie in [0, 60] dB, got {target}"
        )));
    }
    if y.is_empty() {
        return Err(ModarError::Noise("empty measurement vector".into()));
    }
    let signal_norm = y.norm();
    if signal_norm == 0.0 {
        return Err(ModarError::Noise(
            "zero measurements with finite SNR requested".into(),
        ));
    }
    let mut rng = crate::seeds::rng(crate::seeds::derive(spec.seed, "noise", 0));
    let noise = match y {
        Measurements::Real(v) => {
            Measurements::Real(Array1::from_shape_simple_fn(v.len(), || normal(&mut rng)))
        }
        Measurements::Complex(v) => Measurements::Complex(Array1::from_shape_simple_fn(
            v.len(),
            || Complex64::new(normal(&mut rng), normal(&mut rng)),
        )),
    };
    // scale the drawn realization so the realized SNR hits the target
    let wanted_noise_norm = signal_norm * 10f64.powf(-target / 20.0);
    let scale = wanted_noise_norm / noise.norm();
    y.add(&noise.scale(scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn sample_y(n: usize, seed: u64) -> Measurements {
        let mut rng = crate::seeds::rng(seed);
        Measurements::Real(Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0)))
    }

    fn realized_snr(y: &Measurements, noisy: &Measurements) -> f64 {
        let eta = noisy.sub(y).unwrap();
        10.0 * (y.norm().powi(2) / eta.norm().powi(2)).log10()
    }

    #[test]
    fn none_returns_input_unchanged() {
        let y = sample_y(32, 1);
        let out = add_noise(&y, &NoiseSpec::none()).unwrap();
        assert_eq!(y, out);
    }

    #[test]
    fn realized_snr_matches_target() {
        let y = sample_y(64, 2);
        for target in [10.0, 20.0, 30.0] {
            let noisy = add_noise(&y, &NoiseSpec::snr_db(target, 5)).unwrap();
            let snr = realized_snr(&y, &noisy);
            assert!((snr - target).abs() <= 0.1, "target {target}: got {snr}");
        }
    }

    #[test]
    fn noise_norm_ratio_is_forced_by_snr_definition() {
        let y = sample_y(128, 3);
        let n10 = add_noise(&y, &NoiseSpec::snr_db(10.0, 7))
            .unwrap()
            .sub(&y)
            .unwrap()
            .norm();
        let n30 = add_noise(&y, &NoiseSpec::snr_db(30.0, 7))
            .unwrap()
            .sub(&y)
            .unwrap()
            .norm();
        assert!((n10 / n30 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn error_paths() {
        let zero = Measurements::Real(Array1::zeros(8));
        assert!(add_noise(&zero, &NoiseSpec::snr_db(20.0, 0)).is_err());
        let empty = Measurements::Real(Array1::zeros(0));
        assert!(add_noise(&empty, &NoiseSpec::snr_db(20.0, 0)).is_err());
        let y = sample_y(8, 1);
        assert!(add_noise(&y, &NoiseSpec::snr_db(90.0, 0)).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let y = sample_y(16, 4);
        let a = add_noise(&y, &NoiseSpec::snr_db(20.0, 11)).unwrap();
        let b = add_noise(&y, &NoiseSpec::snr_db(20.0, 11)).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&y, &NoiseSpec::snr_db(20.0, 12)).unwrap();
        assert_ne!(a, c);
    }
}
