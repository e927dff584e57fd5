//! The artifact-removal prior `D(x; θ) = x − α·f(x; θ)`.
//!
//! `f` is a DnCNN-style stack of convolution blocks (conv + spectral
//! normalization + ReLU) followed by a final convolution without activation.
//! "b blocks" means `b + 1` convolution layers. Weights may be modulated per
//! domain with rank-one factors; biases are never modulated or normalized.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::conv;
use crate::error::{ModarError, Result};
use crate::modulation::{effective_weights, ModulationSet};
use crate::Image;

/// Architecture + initialization parameters of a prior network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PriorConfig {
    /// Number of conv+SN+ReLU blocks; the network has `blocks + 1` conv layers.
    pub blocks: usize,
    pub hidden_channels: usize,
    /// Input/output channels (1 real, 2 for complex signals, 3 RGB).
    pub channels: usize,
    pub kernel: usize,
    /// Averaging coefficient of the AR operator `x − α·f(x)`.
    pub alpha: f64,
    pub spectral_norm: bool,
    pub seed: u64,
}

impl PriorConfig {
    /// Full-scale profile: 12 blocks of 64 filters, 3×3 kernels, α = 0.2.
    pub fn full(channels: usize, seed: u64) -> Self {
        PriorConfig {
            blocks: 12,
            hidden_channels: 64,
            channels,
            kernel: 3,
            alpha: 0.2,
            spectral_norm: true,
            seed,
        }
    }

    /// Desk-scale profile: 5 blocks of 16 filters.
    pub fn desk(channels: usize, seed: u64) -> Self {
        PriorConfig {
            blocks: 5,
            hidden_channels: 16,
            channels,
            kernel: 3,
            alpha: 0.2,
            spectral_norm: true,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(ModarError::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.blocks == 0 || self.hidden_channels == 0 {
            return Err(ModarError::Config("blocks and hidden_channels must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModarError::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(1..=3).contains(&self.channels) {
            return Err(ModarError::Config(format!(
                "channels must be 1, 2 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Static shape of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_activation: bool,
    pub spectral_norm: bool,
}

/// Persistent power-iteration state for one layer's unfolded weight matrix
/// `(c_out, c_in·k²)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub sigma: f64,
}

const SIGMA_FLOOR: f64 = 1e-12;

impl SnState {
    fn init(c_out: usize, unfolded: usize, seed: u64) -> Self {
        let mut rng = crate::seeds::rng(seed);
        let mut u = Array1::from_shape_simple_fn(c_out, || rng.gen_range(-1.0..1.0f64));
        let mut v = Array1::from_shape_simple_fn(unfolded, || rng.gen_range(-1.0..1.0f64));
        u /= u.dot(&u).sqrt().max(SIGMA_FLOOR);
        v /= v.dot(&v).sqrt().max(SIGMA_FLOOR);
        SnState { u, v, sigma: 1.0 }
    }

    /// One power-iteration update of (u, v); refreshes the σ̂ estimate.
    pub fn power_iterate(&mut self, w_mat: &Array2<f64>) {
        let mut v = w_mat.t().dot(&self.u);
        let nv = v.dot(&v).sqrt();
        if nv > SIGMA_FLOOR {
            v /= nv;
            self.v = v;
        }
        let mut u = w_mat.dot(&self.v);
        let nu = u.dot(&u).sqrt();
        if nu > SIGMA_FLOOR {
            u /= nu;
            self.u = u;
        }
        self.sigma = self.sigma_for(w_mat);
    }

    /// σ̂ = uᵀWv with the current vectors, floored away from zero.
    pub fn sigma_for(&self, w_mat: &Array2<f64>) -> f64 {
        self.u.dot(&w_mat.dot(&self.v)).max(SIGMA_FLOOR)
    }
}

/// One convolution layer: weight, bias, optional SN state.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvBlockSpec,
    /// `(c_out, c_in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub sn: Option<SnState>,
}

impl ConvLayer {
    pub fn weight_matrix(&self) -> Array2<f64> {
        let (c_out, c_in, k, _) = self.weight.dim();
        self.weight
            .to_shape((c_out, c_in * k * k))
            .unwrap()
            .to_owned()
    }
}

/// Divide a weight by its power-iteration spectral-norm estimate, advancing
/// the persistent state by one iteration.
pub fn spectral_normalize(w: &Array4<f64>, state: &mut SnState) -> Array4<f64> {
    let (c_out, c_in, k, _) = w.dim();
    let w_mat = w.to_shape((c_out, c_in * k * k)).unwrap().to_owned();
    state.power_iterate(&w_mat);
    w / state.sigma
}

/// How σ̂ is resolved when compiling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Use the stored σ̂ (evaluation / frozen backbone).
    Frozen,
    /// Recompute σ̂ = uᵀWv from the current weight with stored vectors
    /// (training forward; gradients account for σ̂'s dependence on W).
    Train,
}

/// The DnCNN-style residual network `f` with its AR averaging coefficient.
#[derive(Debug, Clone)]
pub struct PriorNetwork {
    pub config: PriorConfig,
    pub layers: Vec<ConvLayer>,
    pub alpha: f64,
}

/// Build the full-scale prior used in the experiments (12 blocks, 64 filters).
pub fn build_prior(channels: usize, seed: u64) -> Result<PriorNetwork> {
    PriorNetwork::build(PriorConfig::full(channels, seed))
}

impl PriorNetwork {
    pub fn build(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let n_layers = config.blocks + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let in_ch = if l == 0 { config.channels } else { config.hidden_channels };
            let out_ch = if l == n_layers - 1 { config.channels } else { config.hidden_channels };
            let spec = ConvBlockSpec {
                kernel: config.kernel,
                in_channels: in_ch,
                out_channels: out_ch,
                has_activation: l != n_layers - 1,
                spectral_norm: config.spectral_norm,
            };
            let fan_in = (in_ch * config.kernel * config.kernel) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let mut rng = crate::seeds::rng(crate::seeds::derive(config.seed, "conv-weight", l as u64));
            let weight = Array4::from_shape_simple_fn(
                (out_ch, in_ch, config.kernel, config.kernel),
                || rng.gen_range(-bound..bound),
            );
            let bias = Array1::zeros(out_ch);
            let sn = config.spectral_norm.then(|| {
                let mut s = SnState::init(
                    out_ch,
                    in_ch * config.kernel * config.kernel,
                    crate::seeds::derive(config.seed, "sn-vectors", l as u64),
                );
                let w_mat = weight
                    .to_shape((out_ch, in_ch * config.kernel * config.kernel))
                    .unwrap()
                    .to_owned();
                for _ in 0..15 {
                    s.power_iterate(&w_mat);
                }
                s
            });
            layers.push(ConvLayer { spec, weight, bias, sn });
        }
        Ok(PriorNetwork {
            config,
            layers,
            alpha: config.alpha,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Convolution weight entries only (the paper's "407k" accounting).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// One power-iteration update on every normalized layer.
    pub fn power_iterate_all(&mut self) {
        for l in &mut self.layers {
            let w_mat = l.weight_matrix();
            if let Some(sn) = l.sn.as_mut() {
                sn.power_iterate(&w_mat);
            }
        }
    }

    /// Refresh every stored σ̂ from the current weights without advancing the
    /// power-iteration vectors (used before freezing/serializing).
    pub fn refresh_sigmas(&mut self) {
        for l in &mut self.layers {
            let w_mat = l.weight_matrix();
            if let Some(sn) = l.sn.as_mut() {
                sn.sigma = sn.sigma_for(&w_mat);
            }
        }
    }

    /// Cryptographic fingerprint of all parameter bytes (weights, biases,
    /// SN state) plus the architecture header.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"modar-prior-v1");
        for v in [
            self.config.blocks as u64,
            self.config.hidden_channels as u64,
            self.config.channels as u64,
            self.config.kernel as u64,
        ] {
            h.update(v.to_le_bytes());
        }
        h.update(self.alpha.to_le_bytes());
        for l in &self.layers {
            for x in l.weight.iter() {
                h.update(x.to_le_bytes());
            }
            for x in l.bias.iter() {
                h.update(x.to_le_bytes());
            }
            if let Some(sn) = &l.sn {
                for x in sn.u.iter().chain(sn.v.iter()) {
                    h.update(x.to_le_bytes());
                }
                h.update(sn.sigma.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Mutable views over all trainable parameters, weights then bias per
    /// layer, in layer order.
    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
        }
        out
    }

    /// Compile per-layer effective weights for the given mode and optional
    /// modulation. Shapes of modulation factors are validated here.
    pub fn compile(
        &self,
        modulation: Option<&ModulationSet>,
        mode: WeightMode,
    ) -> Result<CompiledPrior> {
        let mut w_sn = Vec::with_capacity(self.layers.len());
        let mut sigmas = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let sigma = match (&l.sn, mode) {
                (Some(sn), WeightMode::Frozen) => sn.sigma.max(SIGMA_FLOOR),
                (Some(sn), WeightMode::Train) => sn.sigma_for(&l.weight_matrix()),
                (None, _) => 1.0,
            };
            sigmas.push(sigma);
            w_sn.push(&l.weight / sigma);
        }
        let mut w_eff = w_sn.clone();
        if let Some(m) = modulation {
            for (&layer_idx, factors) in m.layers() {
                let l = self.layers.get(layer_idx).ok_or_else(|| {
                    ModarError::Shape(format!(
                        "modulation references layer {layer_idx}, network has {}",
                        self.layers.len()
                    ))
                })?;
                factors.check_shape(l.spec)?;
                w_eff[layer_idx] = effective_weights(&w_sn[layer_idx], factors);
            }
        }
        Ok(CompiledPrior {
            w_sn,
            w_eff,
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            sigmas,
            alpha: self.alpha,
            channels: self.config.channels,
        })
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-layer effective weights ready for repeated application inside the
/// unrolled solver.
#[derive(Debug, Clone)]
pub struct CompiledPrior {
    /// Spectrally normalized weights `W/σ̂` (pre-modulation).
    pub w_sn: Vec<Array4<f64>>,
    /// Weights actually convolved: `w_sn ⊙ (1 + M)` on modulated layers.
    pub w_eff: Vec<Array4<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub sigmas: Vec<f64>,
    pub alpha: f64,
    pub channels: usize,
}

/// Cached per-layer inputs of one application of `f`, for the reverse pass.
pub struct FTrace {
    /// `layer_inputs[l]` is the input to conv layer `l`; post-ReLU values of
    /// layer `l` are `layer_inputs[l+1]`.
    pub layer_inputs: Vec<Array3<f64>>,
    pub output: Array3<f64>,
}

/// Per-layer gradients returned by [`CompiledPrior::f_backward`].
pub struct FGrads {
    pub input_grad: Array3<f64>,
    /// Gradient with respect to the *effective* weight of each layer.
    pub d_w_eff: Vec<Array4<f64>>,
    pub d_bias: Vec<Array1<f64>>,
}

impl CompiledPrior {
    fn check_channels(&self, x: &Image) -> Result<()> {
        if x.dim().0 != self.channels {
            return Err(ModarError::Shape(format!(
                "prior expects {} channels, got {}",
                self.channels,
                x.dim().0
            )));
        }
        Ok(())
    }

    /// The residual body `f(x)`.
    pub fn f_apply(&self, x: &Image) -> Result<Image> {
        self.check_channels(x)?;
        let n = self.w_eff.len();
        let mut a = x.clone();
        for l in 0..n {
            conv::check_shapes(&a, &self.w_eff[l])?;
            let mut p = conv::conv2d(&a, &self.w_eff[l], Some(&self.biases[l]));
            if l < n - 1 {
                p.mapv_inplace(|v| v.max(0.0));
            }
            a = p;
        }
        Ok(a)
    }

    /// `f(x)` with cached activations for the reverse pass.
    pub fn f_apply_traced(&self, x: &Image) -> Result<(Image, FTrace)> {
        self.check_channels(x)?;
        let n = self.w_eff.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut a = x.clone();
        for l in 0..n {
            conv::check_shapes(&a, &self.w_eff[l])?;
            layer_inputs.push(a.clone());
            let mut p = conv::conv2d(&a, &self.w_eff[l], Some(&self.biases[l]));
            if l < n - 1 {
                p.mapv_inplace(|v| v.max(0.0));
            }
            a = p;
        }
        Ok((
            a.clone(),
            FTrace {
                layer_inputs,
                output: a,
            },
        ))
    }

    /// Reverse pass of `f` given `upstream = ∂L/∂f(x)`; returns `∂L/∂x` and
    /// per-layer gradients with respect to effective weights and biases.
    pub fn f_backward(&self, trace: &FTrace, upstream: &Image) -> FGrads {
        let n = self.w_eff.len();
        let mut d_w_eff: Vec<Array4<f64>> = Vec::with_capacity(n);
        let mut d_bias: Vec<Array1<f64>> = Vec::with_capacity(n);
        for l in 0..n {
            d_w_eff.push(Array4::zeros(self.w_eff[l].dim()));
            d_bias.push(Array1::zeros(self.biases[l].len()));
        }
        let mut g_a = upstream.clone();
        for l in (0..n).rev() {
            let g_p = if l < n - 1 {
                // ReLU mask from the post-activation values
                let post = &trace.layer_inputs[l + 1];
                let mut g = g_a.clone();
                g.zip_mut_with(post, |gv, &pv| {
                    if pv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                g
            } else {
                g_a
            };
            d_w_eff[l] = conv::conv2d_weight_grad(&g_p, &trace.layer_inputs[l], self.w_eff[l].dim().2);
            d_bias[l] = conv::conv2d_bias_grad(&g_p);
            g_a = conv::conv2d_input_grad(&g_p, &self.w_eff[l]);
        }
        FGrads {
            input_grad: g_a,
            d_w_eff,
            d_bias,
        }
    }

    /// The α-averaged AR operator `x − α·f(x)`.
    pub fn ar_apply(&self, x: &Image) -> Result<Image> {
        let fx = self.f_apply(x)?;
        Ok(x - &(fx * self.alpha))
    }
}

/// The AR operator with an optional domain modulation (convenience wrapper
/// that compiles frozen weights once per call).
pub fn ar_apply(x: &Image, net: &PriorNetwork, modulation: Option<&ModulationSet>) -> Result<Image> {
    net.compile(modulation, WeightMode::Frozen)?.ar_apply(x)
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    spec: ConvBlockSpec,
    weight: Vec<f64>,
    bias: Vec<f64>,
    sn: Option<SnState>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: PriorConfig,
    alpha: f64,
    fingerprint: String,
    layers: Vec<LayerFile>,
}

impl PriorNetwork {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            config: self.config,
            alpha: self.alpha,
            fingerprint: self.fingerprint(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    spec: l.spec,
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                    sn: l.sn.clone(),
                })
                .collect(),
        };
        let text =
            serde_json::to_string(&file).map_err(|e| ModarError::Serde(e.to_string()))?;
        crate::modulation::registry::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<PriorNetwork> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| ModarError::Serde(e.to_string()))?;
        let mut layers = Vec::with_capacity(file.layers.len());
        for lf in file.layers {
            let shape = (
                lf.spec.out_channels,
                lf.spec.in_channels,
                lf.spec.kernel,
                lf.spec.kernel,
            );
            let weight = Array4::from_shape_vec(shape, lf.weight)
                .map_err(|e| ModarError::Serde(e.to_string()))?;
            layers.push(ConvLayer {
                spec: lf.spec,
                weight,
                bias: Array1::from_vec(lf.bias),
                sn: lf.sn,
            });
        }
        let net = PriorNetwork {
            config: file.config,
            layers,
            alpha: file.alpha,
        };
        let fp = net.fingerprint();
        if fp != file.fingerprint {
            return Err(ModarError::FingerprintMismatch {
                expected: file.fingerprint,
                got: fp,
            });
        }
        Ok(net)
    }
}
