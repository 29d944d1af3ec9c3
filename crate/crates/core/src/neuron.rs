//! LIF / ALIF neuron dynamics.
//!
//! Membrane update with reset by subtraction:
//!
//! ```text
//! V[t] = ζ·V[t−1] + Z·X[t] − S[t−1]·V_th
//! S[t] = Θ(V[t] − V_th)
//! ```
//!
//! The Heaviside step is replaced in the backward pass by the fast-sigmoid
//! derivative `1 / (1 + λ|V − V_th|)²`. ALIF layers treat `V_th` as a
//! learnable scalar. The spike in the reset term is held constant during
//! differentiation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronConfig {
    /// Membrane decay ζ ∈ (0, 1).
    pub zeta: f32,
    /// Initial threshold membrane potential.
    pub v_th_init: f32,
    /// Surrogate slope λ > 0.
    pub lambda: f32,
    /// Threshold is a learnable parameter when set.
    pub adaptive: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            zeta: 0.5,
            v_th_init: 0.5,
            lambda: 25.0,
            adaptive: true,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::Config(format!("zeta must lie in (0,1), got {}", self.zeta)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.v_th_init > 0.0) {
            return Err(Error::Config(format!("v_th_init must be positive, got {}", self.v_th_init)));
        }
        Ok(())
    }
}

#[inline]
pub fn surrogate_grad_scalar(v: f32, v_th: f32, lambda: f32) -> f32 {
    let d = 1.0 + lambda * (v - v_th).abs();
    1.0 / (d * d)
}

/// Elementwise fast-sigmoid derivative `1 / (1 + λ|v − v_th|)²`.
pub fn surrogate_grad(v: &Tensor, v_th: f32, lambda: f32) -> Tensor {
    v.map(|x| surrogate_grad_scalar(x, v_th, lambda))
}

/// `∂S/∂V_th`: the negated surrogate derivative.
pub fn threshold_grad_contribution(v: &Tensor, v_th: f32, lambda: f32) -> Tensor {
    v.map(|x| -surrogate_grad_scalar(x, v_th, lambda))
}

/// Per-step state of a neuron layer on a tape: the membrane potential and
/// the spikes emitted on the previous step.
#[derive(Clone, Debug)]
pub struct NeuronState {
    pub v: Var,
    pub s_prev: Tensor,
}

impl NeuronState {
    /// `V[0] = 0`, no previous spikes.
    pub fn resting(tape: &mut Tape, shape: &[usize]) -> Self {
        Self {
            v: tape.constant(Tensor::zeros(shape)),
            s_prev: Tensor::zeros(shape),
        }
    }
}

/// One LIF step. Returns the binary spikes and the next state.
pub fn lif_step(
    tape: &mut Tape,
    state: &NeuronState,
    weighted_input: Var,
    threshold: Var,
    cfg: &NeuronConfig,
) -> Result<(Var, NeuronState)> {
    let v = tape.membrane(state.v, weighted_input, &state.s_prev, threshold, cfg.zeta)?;
    let spikes = tape.spike(v, threshold, cfg.lambda)?;
    let s_prev = tape.value(spikes).clone();
    Ok((spikes, NeuronState { v, s_prev }))
}

/// One step of the non-resetting readout `V[t] = ζ·V[t−1] + input`.
pub fn membrane_readout_step(tape: &mut Tape, v_prev: Var, weighted_input: Var, zeta: f32) -> Result<Var> {
    let decayed = tape.scale(v_prev, zeta)?;
    tape.add(decayed, weighted_input)
}
