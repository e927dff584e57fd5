//! k-space sampling mask generation.
//!
//! Masks are boolean grids in centered layout (DC at `(rows/2, cols/2)`).
//! Every stochastic pattern is deterministic given its seed, and generators
//! tune their free parameter so the sampled fraction lands within
//! [`FRACTION_TOL`] of the target `1/R`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

use crate::error::{ModarError, Result};

/// Tolerance on `|sampled_fraction − 1/R|` enforced at construction.
pub const FRACTION_TOL: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Radial,
    Cartesian,
    GaussianDensity,
    Spiral,
    Full,
}

impl FromStr for Pattern {
    type Err = ModarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(Pattern::Radial),
            "cartesian" => Ok(Pattern::Cartesian),
            "gaussian_density" | "gaussian" => Ok(Pattern::GaussianDensity),
            "spiral" => Ok(Pattern::Spiral),
            "full" => Ok(Pattern::Full),
            other => Err(ModarError::UnknownPattern(other.to_string())),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Pattern::Radial => "radial",
            Pattern::Cartesian => "cartesian",
            Pattern::GaussianDensity => "gaussian_density",
            Pattern::Spiral => "spiral",
            Pattern::Full => "full",
        };
        f.write_str(s)
    }
}

/// A boolean k-space sampling grid with its generating parameters.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    pub grid_shape: (usize, usize),
    pub pattern: Pattern,
    pub acceleration: f64,
    pub seed: u64,
    entries: Array2<bool>,
}

impl SamplingMask {
    /// Boolean entries in centered layout.
    pub fn entries(&self) -> &Array2<bool> {
        &self.entries
    }

    pub fn num_sampled(&self) -> usize {
        self.entries.iter().filter(|&&b| b).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.num_sampled() as f64 / (self.grid_shape.0 * self.grid_shape.1) as f64
    }

    /// Whether the DC position (grid center) is sampled.
    pub fn dc_sampled(&self) -> bool {
        self.entries[[self.grid_shape.0 / 2, self.grid_shape.1 / 2]]
    }

    /// Portable serialization: small header plus one '0'/'1' string per row.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MaskFile {
            pattern: self.pattern,
            rows: self.grid_shape.0,
            cols: self.grid_shape.1,
            acceleration: self.acceleration,
            seed: self.seed,
            entries: self
                .entries
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
                .collect(),
        };
        let text =
            serde_json::to_string_pretty(&file).map_err(|e| ModarError::Serde(e.to_string()))?;
        crate::modulation::registry::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<SamplingMask> {
        let text = std::fs::read_to_string(path)?;
        let file: MaskFile =
            serde_json::from_str(&text).map_err(|e| ModarError::Serde(e.to_string()))?;
        let mut entries = Array2::from_elem((file.rows, file.cols), false);
        if file.entries.len() != file.rows {
            return Err(ModarError::Data("mask file row count mismatch".into()));
        }
        for (r, row) in file.entries.iter().enumerate() {
            if row.len() != file.cols {
                return Err(ModarError::Data(format!("mask file row {r} length mismatch")));
            }
            for (c, ch) in row.chars().enumerate() {
                entries[[r, c]] = ch == '1';
            }
        }
        Ok(SamplingMask {
            grid_shape: (file.rows, file.cols),
            pattern: file.pattern,
            acceleration: file.acceleration,
            seed: file.seed,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    pattern: Pattern,
    rows: usize,
    cols: usize,
    acceleration: f64,
    seed: u64,
    entries: Vec<String>,
}

/// Generate a sampling mask for the given pattern at acceleration `R`.
pub fn make_mask(
    pattern: Pattern,
    grid_shape: (usize, usize),
    acceleration: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let (rows, cols) = grid_shape;
    if rows < 16 || cols < 16 {
        return Err(ModarError::Config(format!(
            "mask grid must be at least 16x16, got {rows}x{cols}"
        )));
    }
    if !(acceleration >= 1.0) {
        return Err(ModarError::Config(format!(
            "acceleration must be ≥ 1, got {acceleration}"
        )));
    }
    let target = 1.0 / acceleration;
    let entries = match pattern {
        Pattern::Full => Array2::from_elem(grid_shape, true),
        Pattern::Radial => radial(grid_shape, target, seed)?,
        Pattern::Cartesian => cartesian(grid_shape, target, seed)?,
        Pattern::GaussianDensity => gaussian_density(grid_shape, target, seed)?,
        Pattern::Spiral => spiral(grid_shape, target, seed)?,
    };
    let mask = SamplingMask {
        grid_shape,
        pattern,
        acceleration,
        seed,
        entries,
    };
    let frac = mask.sampled_fraction();
    if (frac - target).abs() > FRACTION_TOL {
        return Err(ModarError::MaskInfeasible {
            target,
            achievable: frac,
            tol: FRACTION_TOL,
        });
    }
    Ok(mask)
}

fn center(grid: (usize, usize)) -> (f64, f64) {
    ((grid.0 / 2) as f64, (grid.1 / 2) as f64)
}

/// N equiangular spokes through the grid center, rasterized to nearest grid
/// points; N found by bisection on the sampled fraction.
fn radial(grid: (usize, usize), target: f64, seed: u64) -> Result<Array2<bool>> {
    let (rows, cols) = grid;
    let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "radial", 0));
    let offset: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let rasterize = |n: usize| -> Array2<bool> {
        let mut m = Array2::from_elem(grid, false);
        let (cy, cx) = center(grid);
        let r_max = ((rows * rows + cols * cols) as f64).sqrt() / 2.0;
        for i in 0..n {
            let theta = offset + std::f64::consts::PI * i as f64 / n as f64;
            let (sin, cos) = theta.sin_cos();
            let mut t = -r_max;
            while t <= r_max {
                let y = (cy + t * sin).round();
                let x = (cx + t * cos).round();
                if y >= 0.0 && (y as usize) < rows && x >= 0.0 && (x as usize) < cols {
                    m[[y as usize, x as usize]] = true;
                }
                t += 0.5;
            }
        }
        m[[rows / 2, cols / 2]] = true;
        m
    };
    let frac = |n: usize| {
        rasterize(n).iter().filter(|&&b| b).count() as f64 / (rows * cols) as f64
    };
    // grow an upper bracket, then bisect on spoke count
    let mut hi = 4usize;
    let cap = 8 * rows.max(cols);
    while frac(hi) < target && hi < cap {
        hi *= 2;
    }
    let mut lo = 1usize;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // pick the best candidate in a small neighborhood (rasterization is not
    // perfectly monotone in n)
    let best = (lo.saturating_sub(2).max(1)..=hi + 2)
        .min_by(|&a, &b| {
            (frac(a) - target)
                .abs()
                .partial_cmp(&(frac(b) - target).abs())
                .unwrap()
        })
        .unwrap();
    Ok(rasterize(best))
}

/// Fully sampled center band of 8% of the phase-encode columns plus uniformly
/// random remaining columns; every selected column is fully sampled.
fn cartesian(grid: (usize, usize), target: f64, seed: u64) -> Result<Array2<bool>> {
    let (rows, cols) = grid;
    let band = ((0.08 * cols as f64).round() as usize).max(1);
    let want_cols = ((target * cols as f64).round() as usize).clamp(band, cols);
    let c0 = cols / 2 - band / 2;
    let mut selected: Vec<usize> = (c0..c0 + band).collect();
    let mut rest: Vec<usize> = (0..cols).filter(|c| !selected.contains(c)).collect();
    let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "cartesian", 0));
    rest.shuffle(&mut rng);
    selected.extend(rest.into_iter().take(want_cols - band));
    let mut m = Array2::from_elem(grid, false);
    for &c in &selected {
        for r in 0..rows {
            m[[r, c]] = true;
        }
    }
    Ok(m)
}

/// i.i.d. Bernoulli with probability exp(−‖k‖²/(2s²)); `s` tuned by bisection
/// against a fixed per-cell uniform draw, DC forced on.
fn gaussian_density(grid: (usize, usize), target: f64, seed: u64) -> Result<Array2<bool>> {
    let (rows, cols) = grid;
    let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "gaussian-density", 0));
    let u = Array2::from_shape_simple_fn(grid, || rng.gen_range(0.0..1.0f64));
    let (cy, cx) = center(grid);
    let d2 = Array2::from_shape_fn(grid, |(r, c)| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        dy * dy + dx * dx
    });
    let build = |s: f64| {
        let mut m = Array2::from_elem(grid, false);
        for r in 0..rows {
            for c in 0..cols {
                m[[r, c]] = u[[r, c]] < (-d2[[r, c]] / (2.0 * s * s)).exp();
            }
        }
        m[[rows / 2, cols / 2]] = true;
        m
    };
    let frac = |s: f64| {
        build(s).iter().filter(|&&b| b).count() as f64 / (rows * cols) as f64
    };
    let mut lo = 0.05;
    let mut hi = 20.0 * rows.max(cols) as f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if (frac(lo) - target).abs() < (frac(hi) - target).abs() {
        lo
    } else {
        hi
    };
    Ok(build(s))
}

/// Archimedean spiral `r = aθ` rasterized from the center; `a` tuned by
/// bisection (smaller `a` winds tighter and samples more).
fn spiral(grid: (usize, usize), target: f64, seed: u64) -> Result<Array2<bool>> {
    let (rows, cols) = grid;
    let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "spiral", 0));
    let offset: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let (cy, cx) = center(grid);
    let r_max = ((rows * rows + cols * cols) as f64).sqrt() / 2.0;
    let rasterize = |a: f64| {
        let mut m = Array2::from_elem(grid, false);
        let mut theta = 0.0f64;
        loop {
            let r = a * theta;
            if r > r_max {
                break;
            }
            let y = (cy + r * (theta + offset).sin()).round();
            let x = (cx + r * (theta + offset).cos()).round();
            if y >= 0.0 && (y as usize) < rows && x >= 0.0 && (x as usize) < cols {
                m[[y as usize, x as usize]] = true;
            }
            // keep arc-length steps near half a pixel
            let step = 0.5 / (a * a + r * r).sqrt().max(0.5);
            theta += step.min(0.2);
        }
        m[[rows / 2, cols / 2]] = true;
        m
    };
    let frac = |a: f64| {
        rasterize(a).iter().filter(|&&b| b).count() as f64 / (rows * cols) as f64
    };
    let mut lo = 1e-3; // dense
    let mut hi = r_max; // sparse
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = if (frac(lo) - target).abs() < (frac(hi) - target).abs() {
        lo
    } else {
        hi
    };
    Ok(rasterize(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mask_is_all_ones() {
        let m = make_mask(Pattern::Full, (64, 64), 1.0, 0).unwrap();
        assert_eq!(m.sampled_fraction(), 1.0);
        assert!(m.dc_sampled());
    }

    #[test]
    fn radial_256_r4_fraction_and_dc() {
        // fraction tolerance verified by brute-force counting of entries
        let m = make_mask(Pattern::Radial, (256, 256), 4.0, 7).unwrap();
        let count = m.entries().iter().filter(|&&b| b).count();
        let frac = count as f64 / (256.0 * 256.0);
        assert!((0.22..=0.28).contains(&frac), "fraction {frac}");
        assert!(m.dc_sampled());
    }

    #[test]
    fn cartesian_64_r4_columns_fully_sampled() {
        let m = make_mask(Pattern::Cartesian, (64, 64), 4.0, 3).unwrap();
        let e = m.entries();
        // scan the grid: every selected column must be fully sampled
        for c in 0..64 {
            let col_set = (0..64).filter(|&r| e[[r, c]]).count();
            assert!(col_set == 0 || col_set == 64, "column {c} partially sampled");
        }
        let frac = m.sampled_fraction();
        assert!((0.22..=0.28).contains(&frac), "fraction {frac}");
        assert!(m.dc_sampled());
    }

    #[test]
    fn stochastic_patterns_hit_fraction_for_named_ratios() {
        for pattern in [
            Pattern::Radial,
            Pattern::Cartesian,
            Pattern::GaussianDensity,
            Pattern::Spiral,
        ] {
            for r in [4.0, 8.0, 10.0] {
                let m = make_mask(pattern, (64, 64), r, 5).unwrap();
                let frac = m.sampled_fraction();
                assert!(
                    (frac - 1.0 / r).abs() <= FRACTION_TOL,
                    "{pattern} R={r}: fraction {frac}"
                );
                if pattern != Pattern::Spiral {
                    assert!(m.dc_sampled(), "{pattern} R={r}: DC not sampled");
                }
            }
        }
    }

    #[test]
    fn masks_are_reproducible_and_seed_sensitive() {
        let a = make_mask(Pattern::GaussianDensity, (64, 64), 4.0, 9).unwrap();
        let b = make_mask(Pattern::GaussianDensity, (64, 64), 4.0, 9).unwrap();
        assert_eq!(a.entries(), b.entries());
        let c = make_mask(Pattern::GaussianDensity, (64, 64), 4.0, 10).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn infeasible_acceleration_reports_achievable_fraction() {
        // full sampling cannot reach R=4
        let err = make_mask(Pattern::Full, (64, 64), 4.0, 0).unwrap_err();
        match err {
            ModarError::MaskInfeasible { achievable, .. } => assert_eq!(achievable, 1.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_pattern_name_errors() {
        assert!("vogel".parse::<Pattern>().is_err());
        assert_eq!("gaussian_density".parse::<Pattern>().unwrap(), Pattern::GaussianDensity);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_mask(Pattern::Radial, (64, 64), 4.0, 2).unwrap();
        let p = dir.path().join("mask.json");
        m.save(&p).unwrap();
        let back = SamplingMask::load(&p).unwrap();
        assert_eq!(m.entries(), back.entries());
        assert_eq!(m.acceleration, back.acceleration);
        assert_eq!(m.pattern, back.pattern);
    }
}
