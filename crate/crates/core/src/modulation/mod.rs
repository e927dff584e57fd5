//! Rank-one per-layer weight modulation.
//!
//! A layer with weight `W (c_out, c_in, k, k)` is adapted multiplicatively:
//! `W_eff = W ⊙ (1 + M)` where `M[o,j,a,b] = m4[o]·m3[j]·m1[a]·m2[b]` is the
//! outer product of four factor vectors (kernel rows, kernel columns, input
//! channels, output channels). A full layer needs only `k + k + c_in + c_out`
//! trainable numbers. Modulations are stored per domain in a registry, bound
//! to one backbone by its fingerprint; the backbone itself is never touched.

pub mod registry;

pub use registry::DomainRegistry;

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::conv;
use crate::error::{ModarError, Result};
use crate::prior::{ConvBlockSpec, PriorNetwork};

/// The four rank-one factor vectors of one convolution layer:
/// kernel rows (`k`), kernel columns (`k`), input channels, output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneFactors {
    pub m1: Array1<f64>,
    pub m2: Array1<f64>,
    pub m3: Array1<f64>,
    pub m4: Array1<f64>,
}

impl RankOneFactors {
    pub fn zeros(spec: ConvBlockSpec) -> Self {
        RankOneFactors {
            m1: Array1::zeros(spec.kernel),
            m2: Array1::zeros(spec.kernel),
            m3: Array1::zeros(spec.in_channels),
            m4: Array1::zeros(spec.out_channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.m1.len() + self.m2.len() + self.m3.len() + self.m4.len()
    }

    pub fn check_shape(&self, spec: ConvBlockSpec) -> Result<()> {
        if self.m1.len() != spec.kernel
            || self.m2.len() != spec.kernel
            || self.m3.len() != spec.in_channels
            || self.m4.len() != spec.out_channels
        {
            return Err(ModarError::Shape(format!(
                "factor lengths ({},{},{},{}) do not match layer (k={}, c_in={}, c_out={})",
                self.m1.len(),
                self.m2.len(),
                self.m3.len(),
                self.m4.len(),
                spec.kernel,
                spec.in_channels,
                spec.out_channels
            )));
        }
        if !self.all_finite() {
            return Err(ModarError::NonFinite("modulation factors".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.m1
            .iter()
            .chain(self.m2.iter())
            .chain(self.m3.iter())
            .chain(self.m4.iter())
            .all(|x| x.is_finite())
    }
}

/// Which factors a training mode treats as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    /// All four factor vectors per modulated layer.
    RankOne,
    /// Only input-channel vectors (`m3`); the other factors are fixed at one
    /// so the combined multiplier is a per-input-channel scale.
    ChannelOnly,
}

/// Training provenance stored with a modulation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModulationMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_val_psnr: f64,
}

/// Per-domain rank-one factors for a subset of the backbone layers. Layers
/// absent from the map are implicitly unmodulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationSet {
    pub domain_id: String,
    pub backbone_fingerprint: String,
    pub mode: ModulationMode,
    pub meta: ModulationMeta,
    layers: BTreeMap<usize, RankOneFactors>,
}

impl ModulationSet {
    pub fn new(
        domain_id: impl Into<String>,
        backbone_fingerprint: impl Into<String>,
        mode: ModulationMode,
    ) -> Self {
        ModulationSet {
            domain_id: domain_id.into(),
            backbone_fingerprint: backbone_fingerprint.into(),
            mode,
            meta: ModulationMeta::default(),
            layers: BTreeMap::new(),
        }
    }

    pub fn layers(&self) -> &BTreeMap<usize, RankOneFactors> {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut BTreeMap<usize, RankOneFactors> {
        &mut self.layers
    }

    pub fn insert(&mut self, layer: usize, factors: RankOneFactors) {
        self.layers.insert(layer, factors);
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Stored factor entries: Σ (k + k + c_in + c_out) over present layers.
    pub fn param_count(&self) -> usize {
        self.layers.values().map(|f| f.num_params()).sum()
    }
}

fn init_factor(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    let bound = 1.0 / (len as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.gen_range(-bound..bound))
}

/// Initialize factors for every layer of `net`: each vector i.i.d.
/// `U[−1/√f, 1/√f]` where `f` is that vector's length.
pub fn init_modulation(net: &PriorNetwork, domain_id: &str, seed: u64) -> ModulationSet {
    init_modulation_partial(net, domain_id, seed, &(0..net.num_layers()).collect::<Vec<_>>())
}

/// Initialize factors only for `layer_subset` (partial modulation).
pub fn init_modulation_partial(
    net: &PriorNetwork,
    domain_id: &str,
    seed: u64,
    layer_subset: &[usize],
) -> ModulationSet {
    let mut set = ModulationSet::new(domain_id, net.fingerprint(), ModulationMode::RankOne);
    set.meta.seed = seed;
    for &l in layer_subset {
        let spec = net.layers[l].spec;
        let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "modulation-init", l as u64));
        set.insert(
            l,
            RankOneFactors {
                m1: init_factor(spec.kernel, &mut rng),
                m2: init_factor(spec.kernel, &mut rng),
                m3: init_factor(spec.in_channels, &mut rng),
                m4: init_factor(spec.out_channels, &mut rng),
            },
        );
    }
    set
}

/// Initialize a channel-only baseline: `m3` drawn near zero, the other
/// factors pinned at one so `M[o,j,a,b] = m3[j]`.
pub fn init_channel_only(net: &PriorNetwork, domain_id: &str, seed: u64) -> ModulationSet {
    let mut set = ModulationSet::new(domain_id, net.fingerprint(), ModulationMode::ChannelOnly);
    set.meta.seed = seed;
    for (l, layer) in net.layers.iter().enumerate() {
        let spec = layer.spec;
        let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "channel-init", l as u64));
        set.insert(
            l,
            RankOneFactors {
                m1: Array1::ones(spec.kernel),
                m2: Array1::ones(spec.kernel),
                m3: init_factor(spec.in_channels, &mut rng),
                m4: Array1::ones(spec.out_channels),
            },
        );
    }
    set
}

/// Combine the four factor vectors into the full modulation tensor in weight
/// layout: `M[o,j,a,b] = m4[o]·m3[j]·m1[a]·m2[b]`.
pub fn combine_factors(f: &RankOneFactors) -> Array4<f64> {
    let (k1, k2, c_in, c_out) = (f.m1.len(), f.m2.len(), f.m3.len(), f.m4.len());
    Array4::from_shape_fn((c_out, c_in, k1, k2), |(o, j, a, b)| {
        f.m4[o] * f.m3[j] * f.m1[a] * f.m2[b]
    })
}

/// `W ⊙ (1 + M)` with `M = combine_factors(f)`.
pub fn effective_weights(w: &Array4<f64>, f: &RankOneFactors) -> Array4<f64> {
    let m = combine_factors(f);
    let mut out = w.clone();
    out.zip_mut_with(&m, |wv, &mv| *wv *= 1.0 + mv);
    out
}

/// Modulated convolution, dense path: convolve with `W ⊙ (1 + M)`.
pub fn modulated_conv(
    u: &Array3<f64>,
    w: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    f: &RankOneFactors,
) -> Result<Array3<f64>> {
    conv::check_shapes(u, w)?;
    let spec = ConvBlockSpec {
        kernel: w.dim().2,
        in_channels: w.dim().1,
        out_channels: w.dim().0,
        has_activation: false,
        spectral_norm: false,
    };
    f.check_shape(spec)?;
    Ok(conv::conv2d(u, &effective_weights(w, f), bias))
}

/// Modulated convolution, decomposed path: the product term is computed by
/// scaling input channels with `m3`, convolving with kernel-modulated weight
/// slices `W ⊙ (m1 ⊗ m2)`, and scaling output channels with `m4`; the plain
/// convolution supplies the identity part of `(1 + M)`.
pub fn modulated_conv_decomposed(
    u: &Array3<f64>,
    w: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    f: &RankOneFactors,
) -> Result<Array3<f64>> {
    conv::check_shapes(u, w)?;
    let spec = ConvBlockSpec {
        kernel: w.dim().2,
        in_channels: w.dim().1,
        out_channels: w.dim().0,
        has_activation: false,
        spectral_norm: false,
    };
    f.check_shape(spec)?;
    let base = conv::conv2d(u, w, bias);

    // W ⊙ (m1 ⊗ m2): modulate every (o, j) kernel slice
    let (c_out, c_in, k, _) = w.dim();
    let mut w_k = w.clone();
    for o in 0..c_out {
        for j in 0..c_in {
            for a in 0..k {
                for b in 0..k {
                    w_k[[o, j, a, b]] *= f.m1[a] * f.m2[b];
                }
            }
        }
    }
    // U ⊙ m3: per-input-channel scale
    let mut u_s = u.clone();
    for (j, mut plane) in u_s.outer_iter_mut().enumerate() {
        plane *= f.m3[j];
    }
    let mut prod = conv::conv2d(&u_s, &w_k, None);
    // per-output-channel scale with m4
    for (o, mut plane) in prod.outer_iter_mut().enumerate() {
        plane *= f.m4[o];
    }
    Ok(base + prod)
}

/// Σ over `layer_subset` of `k + k + c_in + c_out`.
pub fn count_modulation_params(net: &PriorNetwork, layer_subset: &[usize]) -> usize {
    layer_subset
        .iter()
        .map(|&l| {
            let s = net.layers[l].spec;
            s.kernel + s.kernel + s.in_channels + s.out_channels
        })
        .sum()
}

/// Gradients of a scalar loss with respect to the factor vectors, given the
/// gradient `g_w_eff` with respect to the effective weight and the
/// pre-modulation weight `w_sn` (`W_eff = w_sn ⊙ (1 + M)` implies
/// `∂L/∂M = g_w_eff ⊙ w_sn`, contracted against the other three factors).
pub fn factor_grads(
    g_w_eff: &Array4<f64>,
    w_sn: &Array4<f64>,
    f: &RankOneFactors,
) -> RankOneFactors {
    let (c_out, c_in, k1, k2) = w_sn.dim();
    let mut g = RankOneFactors {
        m1: Array1::zeros(k1),
        m2: Array1::zeros(k2),
        m3: Array1::zeros(c_in),
        m4: Array1::zeros(c_out),
    };
    for o in 0..c_out {
        for j in 0..c_in {
            for a in 0..k1 {
                for b in 0..k2 {
                    let gm = g_w_eff[[o, j, a, b]] * w_sn[[o, j, a, b]];
                    g.m1[a] += gm * f.m4[o] * f.m3[j] * f.m2[b];
                    g.m2[b] += gm * f.m4[o] * f.m3[j] * f.m1[a];
                    g.m3[j] += gm * f.m4[o] * f.m1[a] * f.m2[b];
                    g.m4[o] += gm * f.m3[j] * f.m1[a] * f.m2[b];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::PriorConfig;
    use ndarray::{Array3, Array4};
    use rand::Rng;

    fn rand_factors(k: usize, c_in: usize, c_out: usize, seed: u64) -> RankOneFactors {
        let mut rng = crate::seeds::rng(seed);
        RankOneFactors {
            m1: Array1::from_shape_simple_fn(k, || rng.gen_range(-1.0..1.0)),
            m2: Array1::from_shape_simple_fn(k, || rng.gen_range(-1.0..1.0)),
            m3: Array1::from_shape_simple_fn(c_in, || rng.gen_range(-1.0..1.0)),
            m4: Array1::from_shape_simple_fn(c_out, || rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn init_bounds_follow_vector_lengths() {
        let net = PriorNetwork::build(PriorConfig::full(1, 0)).unwrap();
        let set = init_modulation(&net, "d", 3);
        for f in set.layers().values() {
            // k = 3 → 1/√3; channel factors bounded by 1/√len
            assert!(f.m1.iter().all(|x| x.abs() <= 1.0 / 3f64.sqrt()));
            assert!(f
                .m3
                .iter()
                .all(|x| x.abs() <= 1.0 / (f.m3.len() as f64).sqrt()));
            assert!(f
                .m4
                .iter()
                .all(|x| x.abs() <= 1.0 / (f.m4.len() as f64).sqrt()));
        }
        let c64 = &set.layers()[&5];
        assert!(c64.m3.iter().all(|x| x.abs() <= 0.125));
        // deterministic per seed
        let again = init_modulation(&net, "d", 3);
        assert_eq!(set, again);
        assert_ne!(set, init_modulation(&net, "d", 4));
    }

    #[test]
    fn combine_matches_quadruple_loop_oracle() {
        let f = rand_factors(2, 2, 2, 1);
        let m = combine_factors(&f);
        for o in 0..2 {
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let want = f.m4[o] * f.m3[j] * f.m1[a] * f.m2[b];
                        assert_eq!(m[[o, j, a, b]], want);
                    }
                }
            }
        }
    }

    #[test]
    fn combine_edge_cases() {
        let ones = RankOneFactors {
            m1: Array1::ones(3),
            m2: Array1::ones(3),
            m3: Array1::ones(2),
            m4: Array1::ones(4),
        };
        assert!(combine_factors(&ones).iter().all(|&x| x == 1.0));
        let mut zero_m1 = rand_factors(3, 2, 4, 2);
        zero_m1.m1.fill(0.0);
        assert!(combine_factors(&zero_m1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combined_tensor_unfoldings_have_rank_one() {
        // second singular value of every mode unfolding ≤ 1e-10 × first
        let f = rand_factors(3, 4, 5, 3);
        let m = combine_factors(&f);
        let (c_out, c_in, k1, k2) = m.dim();
        let unfoldings: Vec<nalgebra::DMatrix<f64>> = (0..4)
            .map(|mode| {
                let (rows, cols) = match mode {
                    0 => (c_out, c_in * k1 * k2),
                    1 => (c_in, c_out * k1 * k2),
                    2 => (k1, c_out * c_in * k2),
                    _ => (k2, c_out * c_in * k1),
                };
                let mut mat = nalgebra::DMatrix::zeros(rows, cols);
                let mut col = vec![0usize; 4];
                for o in 0..c_out {
                    for j in 0..c_in {
                        for a in 0..k1 {
                            for b in 0..k2 {
                                let v = m[[o, j, a, b]];
                                let (r, c) = match mode {
                                    0 => (o, (j * k1 + a) * k2 + b),
                                    1 => (j, (o * k1 + a) * k2 + b),
                                    2 => (a, (o * c_in + j) * k2 + b),
                                    _ => (b, (o * c_in + j) * k1 + a),
                                };
                                mat[(r, c)] = v;
                                col[0] += 1;
                            }
                        }
                    }
                }
                mat
            })
            .collect();
        for mat in unfoldings {
            let svd = mat.svd(false, false);
            let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(s[1] <= 1e-10 * s[0].max(1e-300), "unfolding rank > 1: {s:?}");
        }
    }

    #[test]
    fn effective_weights_identity_and_zero_cases() {
        let mut rng = crate::seeds::rng(4);
        let w = Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.gen_range(-1.0..1.0));
        let mut f = rand_factors(3, 2, 2, 5);
        f.m2.fill(0.0); // any zero vector kills M
        assert_eq!(effective_weights(&w, &f), w);
        let zero_w = Array4::<f64>::zeros((2, 2, 3, 3));
        let f2 = rand_factors(3, 2, 2, 6);
        assert!(effective_weights(&zero_w, &f2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn effective_weights_matches_entrywise_loop() {
        let mut rng = crate::seeds::rng(7);
        let w = Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.gen_range(-1.0..1.0));
        let f = rand_factors(3, 2, 2, 8);
        let got = effective_weights(&w, &f);
        for o in 0..2 {
            for j in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        let m = f.m4[o] * f.m3[j] * f.m1[a] * f.m2[b];
                        let want = w[[o, j, a, b]] * (1.0 + m);
                        assert!((got[[o, j, a, b]] - want).abs() < 1e-15);
                    }
                }
            }
        }
    }

    fn rel_err(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let num = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
        let den = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn decomposed_path_equals_dense_path() {
        let mut rng = crate::seeds::rng(9);
        for (k, c_in, c_out) in [(1, 1, 4), (3, 4, 5), (5, 4, 1)] {
            let u = Array3::from_shape_simple_fn((c_in, 8, 8), || rng.gen_range(-1.0..1.0));
            let w =
                Array4::from_shape_simple_fn((c_out, c_in, k, k), || rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_simple_fn(c_out, || rng.gen_range(-1.0..1.0));
            let f = rand_factors(k, c_in, c_out, 100 + k as u64);
            let dense = modulated_conv(&u, &w, Some(&b), &f).unwrap();
            let decomp = modulated_conv_decomposed(&u, &w, Some(&b), &f).unwrap();
            assert!(rel_err(&decomp, &dense) <= 1e-5);
        }
    }

    #[test]
    fn zero_modulation_reduces_to_plain_convolution() {
        let mut rng = crate::seeds::rng(10);
        let u = Array3::from_shape_simple_fn((3, 8, 8), || rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_simple_fn((2, 3, 3, 3), || rng.gen_range(-1.0..1.0));
        let mut f = rand_factors(3, 3, 2, 11);
        f.m3.fill(0.0);
        let plain = conv::conv2d(&u, &w, None);
        let modded = modulated_conv(&u, &w, None, &f).unwrap();
        assert!(rel_err(&modded, &plain) <= 1e-6);
        let decomp = modulated_conv_decomposed(&u, &w, None, &f).unwrap();
        assert!(rel_err(&decomp, &plain) <= 1e-6);
    }

    #[test]
    fn uniform_scaling_via_output_factor() {
        // 1×1 kernels, impulse input; choose factors so combined M ≡ c−1,
        // then V = c · (plain conv output)
        let c = 2.5;
        let mut u = Array3::<f64>::zeros((2, 5, 5));
        u[[0, 2, 2]] = 1.0;
        u[[1, 2, 2]] = 1.0;
        let mut rng = crate::seeds::rng(12);
        let w = Array4::from_shape_simple_fn((3, 2, 1, 1), || rng.gen_range(-1.0..1.0));
        let f = RankOneFactors {
            m1: Array1::ones(1),
            m2: Array1::ones(1),
            m3: Array1::ones(2),
            m4: Array1::from_elem(3, c - 1.0),
        };
        let plain = conv::conv2d(&u, &w, None);
        let modded = modulated_conv(&u, &w, None, &f).unwrap();
        let err = (&modded - &(&plain * c))
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12);
    }

    #[test]
    fn parameter_accounting_matches_formula() {
        let net = PriorNetwork::build(PriorConfig::full(1, 0)).unwrap();
        // one intermediate layer (3,3,64,64) → 134
        assert_eq!(count_modulation_params(&net, &[5]), 134);
        // full 13-layer 1-channel network → 1,616
        let all: Vec<usize> = (0..13).collect();
        assert_eq!(count_modulation_params(&net, &all), 1_616);
        assert_eq!(count_modulation_params(&net, &all), 2 * 71 + 11 * 134);
        // < 0.5% of the backbone
        let ratio = 1_616.0 / net.weight_count() as f64;
        assert!(ratio < 0.005, "ratio {ratio}");
        // last-4-layers subset: 3·134 + 71
        assert_eq!(count_modulation_params(&net, &[9, 10, 11, 12]), 3 * 134 + 71);
    }

    #[test]
    fn channel_only_trainable_count() {
        let net = PriorNetwork::build(PriorConfig::full(1, 0)).unwrap();
        let set = init_channel_only(&net, "d", 1);
        let trainable: usize = set.layers().values().map(|f| f.m3.len()).sum();
        assert_eq!(trainable, 769); // 1 + 12·64
    }

    #[test]
    fn factor_grads_match_finite_differences() {
        let mut rng = crate::seeds::rng(13);
        let u = Array3::from_shape_simple_fn((2, 6, 6), || rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_simple_fn((3, 2, 3, 3), || rng.gen_range(-1.0..1.0));
        let g = Array3::from_shape_simple_fn((3, 6, 6), || rng.gen_range(-1.0..1.0));
        let f = rand_factors(3, 2, 3, 14);
        // loss = <conv(u, w⊙(1+M)), g>
        let g_w_eff = conv::conv2d_weight_grad(&g, &u, 3);
        let grads = factor_grads(&g_w_eff, &w, &f);
        let h = 1e-6;
        let loss = |f: &RankOneFactors| (&modulated_conv(&u, &w, None, f).unwrap() * &g).sum();
        for (vec_idx, entry) in [(0usize, 1usize), (1, 2), (2, 0), (3, 2)] {
            let mut fp = f.clone();
            let mut fm = f.clone();
            let (gp, gm) = {
                let sel = |fs: &mut RankOneFactors| -> &mut Array1<f64> {
                    match vec_idx {
                        0 => &mut fs.m1,
                        1 => &mut fs.m2,
                        2 => &mut fs.m3,
                        _ => &mut fs.m4,
                    }
                };
                sel(&mut fp)[entry] += h;
                sel(&mut fm)[entry] -= h;
                (loss(&fp), loss(&fm))
            };
            let fd = (gp - gm) / (2.0 * h);
            let an = match vec_idx {
                0 => grads.m1[entry],
                1 => grads.m2[entry],
                2 => grads.m3[entry],
                _ => grads.m4[entry],
            };
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(1.0),
                "vec {vec_idx} entry {entry}: fd {fd} analytic {an}"
            );
        }
    }
}
