//! Unrolled PnP-FISTA reconstruction.
//!
//! Starting from the zero-filled estimate `x⁰ = Aᴴy`, each of the `K`
//! iterations performs a gradient step on the data fidelity, applies the
//! α-averaged AR operator, and extrapolates with FISTA momentum:
//!
//! ```text
//! zᵏ = xᵏ⁻¹ − γ·Aᴴ(Axᵏ⁻¹ − y)
//! sᵏ = D(zᵏ) = zᵏ − α·f(zᵏ)
//! xᵏ = sᵏ + βₖ(sᵏ − sᵏ⁻¹),   s⁰ = x⁰
//! ```
//!
//! The whole computation is differentiable; [`ReconTrace`] caches the
//! forward pass and [`backward`] produces exact gradients with respect to
//! the effective conv weights, biases, and (through the chain rule in
//! [`crate::training`]) base weights or modulation factors.

use serde::{Deserialize, Serialize};

use crate::error::{ModarError, Result};
use crate::modulation::ModulationSet;
use crate::operators::{MeasurementOperator, Measurements};
use crate::prior::{CompiledPrior, FTrace, PriorNetwork, WeightMode};
use crate::Image;

/// Momentum schedule of the extrapolation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumMode {
    /// The published recursion `q_k = (1+√(1+4q_{k−1}²))/2`.
    Fista,
    /// `q_k = 1` for all k (β = 0); the operating point used for training.
    FixedQ1,
}

/// Solver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Unrolling depth K.
    pub iterations: usize,
    /// Data-fidelity step size γ.
    pub gamma: f64,
    pub momentum: MomentumMode,
}

impl SolverConfig {
    pub fn new(iterations: usize, gamma: f64, momentum: MomentumMode) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(ModarError::Config(format!("gamma must be > 0, got {gamma}")));
        }
        Ok(SolverConfig {
            iterations,
            gamma,
            momentum,
        })
    }

    /// The full-scale MRI operating point: K = 33, γ = 1.5, q ≡ 1.
    pub fn full_mri() -> Self {
        SolverConfig {
            iterations: 33,
            gamma: 1.5,
            momentum: MomentumMode::FixedQ1,
        }
    }
}

/// One momentum update: returns `(q_k, β_k)` from `q_{k−1}`.
pub fn momentum_step(q_prev: f64, mode: MomentumMode) -> Result<(f64, f64)> {
    if q_prev < 1.0 {
        return Err(ModarError::Config(format!(
            "momentum requires q ≥ 1, got {q_prev}"
        )));
    }
    match mode {
        MomentumMode::Fista => {
            let q = 0.5 * (1.0 + (1.0 + 4.0 * q_prev * q_prev).sqrt());
            Ok((q, (q_prev - 1.0) / q))
        }
        MomentumMode::FixedQ1 => Ok((1.0, 0.0)),
    }
}

/// Mutable per-iteration state of one reconstruction.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Image,
    pub s_prev: Image,
    pub q: f64,
    pub k: usize,
}

fn check_finite(x: &Image, k: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModarError::NonFinite(format!(
            "solver produced a non-finite iterate at iteration {k}"
        )))
    }
}

/// Run the unrolled solver and return `x^K`.
pub fn unrolled_reconstruct(
    y: &Measurements,
    op: &MeasurementOperator,
    net: &PriorNetwork,
    modulation: Option<&ModulationSet>,
    config: &SolverConfig,
) -> Result<Image> {
    let compiled = net.compile(modulation, WeightMode::Frozen)?;
    reconstruct_compiled(y, op, &compiled, config)
}

/// Run the solver with pre-compiled weights (avoids recompiling per sample).
pub fn reconstruct_compiled(
    y: &Measurements,
    op: &MeasurementOperator,
    prior: &CompiledPrior,
    config: &SolverConfig,
) -> Result<Image> {
    if op.input_shape().0 != prior.channels {
        return Err(ModarError::Shape(format!(
            "operator carries {} channels, prior expects {}",
            op.input_shape().0,
            prior.channels
        )));
    }
    let x0 = op.apply_adjoint(y)?;
    check_finite(&x0, 0)?;
    let mut state = SolverState {
        s_prev: x0.clone(),
        x: x0,
        q: 1.0,
        k: 0,
    };
    for k in 1..=config.iterations {
        let grad = op.grad_data_fidelity(&state.x, y)?;
        let z = &state.x - &(grad * config.gamma);
        let s = prior.ar_apply(&z)?;
        let (q, beta) = momentum_step(state.q, config.momentum)?;
        let x = &s + &((&s - &state.s_prev) * beta);
        check_finite(&x, k)?;
        state = SolverState {
            x,
            s_prev: s,
            q,
            k,
        };
    }
    Ok(state.x)
}

/// Cached forward pass of one reconstruction, sufficient for the reverse
/// sweep: per-iteration `f` traces and the β schedule.
pub struct ReconTrace {
    pub x_final: Image,
    f_traces: Vec<FTrace>,
    betas: Vec<f64>,
}

/// Forward pass with caching. Weight mode is the caller's choice: `Train`
/// recomputes σ̂ from the live weights, `Frozen` uses the stored estimates.
pub fn reconstruct_traced(
    y: &Measurements,
    op: &MeasurementOperator,
    prior: &CompiledPrior,
    config: &SolverConfig,
) -> Result<ReconTrace> {
    let x0 = op.apply_adjoint(y)?;
    check_finite(&x0, 0)?;
    let mut x = x0.clone();
    let mut s_prev = x0;
    let mut q = 1.0;
    let mut f_traces = Vec::with_capacity(config.iterations);
    let mut betas = Vec::with_capacity(config.iterations);
    for k in 1..=config.iterations {
        let grad = op.grad_data_fidelity(&x, y)?;
        let z = &x - &(grad * config.gamma);
        let (fz, trace) = prior.f_apply_traced(&z)?;
        let s = &z - &(fz * prior.alpha);
        let (q_next, beta) = momentum_step(q, config.momentum)?;
        let x_next = &s + &((&s - &s_prev) * beta);
        check_finite(&x_next, k)?;
        f_traces.push(trace);
        betas.push(beta);
        s_prev = s;
        x = x_next;
        q = q_next;
    }
    Ok(ReconTrace {
        x_final: x,
        f_traces,
        betas,
    })
}

/// Accumulated parameter gradients of one reverse sweep, expressed with
/// respect to each layer's *effective* weight and bias.
pub struct SolverGrads {
    pub d_w_eff: Vec<ndarray::Array4<f64>>,
    pub d_bias: Vec<ndarray::Array1<f64>>,
}

/// Reverse sweep through the unrolled iterations.
///
/// `upstream` is `∂L/∂x^K`. Gradient flow through the data-fidelity step
/// uses the self-adjointness of `I − γAᴴA`; gradient flow into `x⁰ = Aᴴy`
/// is discarded (constant with respect to parameters).
pub fn backward(
    trace: &ReconTrace,
    op: &MeasurementOperator,
    prior: &CompiledPrior,
    config: &SolverConfig,
    upstream: &Image,
) -> Result<SolverGrads> {
    let n_layers = prior.w_eff.len();
    let mut d_w_eff: Vec<ndarray::Array4<f64>> = prior
        .w_eff
        .iter()
        .map(|w| ndarray::Array4::zeros(w.dim()))
        .collect();
    let mut d_bias: Vec<ndarray::Array1<f64>> = prior
        .biases
        .iter()
        .map(|b| ndarray::Array1::zeros(b.len()))
        .collect();

    let mut g_x = upstream.clone();
    let mut g_s_carry: Option<Image> = None; // −β_{k+1}·g_{x^{k+1}} flowing into s^k
    for k in (0..config.iterations).rev() {
        let beta = trace.betas[k];
        // xᵏ = (1+βₖ)·sᵏ − βₖ·sᵏ⁻¹
        let mut g_s = &g_x * (1.0 + beta);
        if let Some(c) = g_s_carry.take() {
            g_s += &c;
        }
        // sᵏ = zᵏ − α·f(zᵏ)
        let fg = prior.f_backward(&trace.f_traces[k], &g_s);
        for l in 0..n_layers {
            d_w_eff[l].scaled_add(-prior.alpha, &fg.d_w_eff[l]);
            d_bias[l].scaled_add(-prior.alpha, &fg.d_bias[l]);
        }
        let g_z = &g_s - &(fg.input_grad * prior.alpha);
        // zᵏ = (I − γAᴴA)xᵏ⁻¹ + γAᴴy; the linear part is self-adjoint
        let gram = op.gram_apply(&g_z)?;
        let g_x_prev = &g_z - &(gram * config.gamma);
        g_s_carry = Some(&g_x * (-beta));
        g_x = g_x_prev;
    }
    Ok(SolverGrads { d_w_eff, d_bias })
}
