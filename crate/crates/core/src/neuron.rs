//! Binary and burst leaky integrate-and-fire layers.
//!
//! Both layers share the membrane recurrence
//!
//! ```text
//! U[t] = (β·U[t-1] + I[t]) · clamp(1 - α·S[t-1], 0, 1)
//! ```
//!
//! A binary layer emits 1 where `U[t] > V_θ`. A burst layer emits
//! `clamp(floor(U[t] / V_θ), 0, n_max)`, so it fires level 1 already at
//! `U[t] == V_θ`. The clamp on the reset factor keeps a burst of several
//! spikes from inverting the sign of the membrane.

use serde::{Deserialize, Serialize};

use crate::energy::LayerRecord;
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    Binary,
    Burst,
}

/// Effective (already squashed) neuron constants for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams {
    /// Membrane decay rate in `[0, 1]`.
    pub beta: f32,
    /// Soft reset factor in `[0, 1]`.
    pub alpha: f32,
    /// Threshold interval, `> 0`.
    pub v_theta: f32,
    /// Highest burst level, `>= 1`. Ignored by binary layers.
    pub n_max: u32,
}

impl NeuronParams {
    pub fn new(beta: f32, alpha: f32, v_theta: f32, n_max: u32) -> Result<Self> {
        let p = Self {
            beta,
            alpha,
            v_theta,
            n_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_theta > 0.0) {
            return Err(Error::Argument(format!("v_theta must be > 0, got {}", self.v_theta)));
        }
        if self.n_max < 1 {
            return Err(Error::Argument("n_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// Effective decay at initialization.
pub const BETA_INIT: f64 = 0.5;
/// Effective soft-reset factor at initialization. A logistic squash cannot
/// reach 1.0 exactly, and near-saturation it would stop learning.
pub const ALPHA_INIT: f64 = 0.98;

/// Logistic squash mapping an unconstrained stored value into `(0, 1)`.
pub fn squash(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

/// Inverse of [`squash`].
pub fn unsquash(effective: f64) -> f64 {
    (effective / (1.0 - effective)).ln()
}

/// Multiplicative reset applied at the step after an emission of `prev`.
pub fn reset_factor(alpha: f32, prev: i32) -> f32 {
    (1.0 - alpha * prev as f32).clamp(0.0, 1.0)
}

/// Per-layer persistent state.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub potential: Tensor,
    pub prev_spikes: IntTensor,
}

impl MembraneState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            potential: Tensor::zeros(shape),
            prev_spikes: IntTensor::zeros(shape),
        }
    }
}

fn integrate(state: &mut MembraneState, input: &Tensor, params: &NeuronParams) -> Result<()> {
    if state.potential.shape() != input.shape() {
        return Err(Error::dim(format!(
            "membrane state {:?} does not match input current {:?}",
            state.potential.shape(),
            input.shape()
        )));
    }
    let prev = state.prev_spikes.data();
    for ((u, &i), &s) in state.potential.data_mut().iter_mut().zip(input.data()).zip(prev) {
        *u = (params.beta * *u + i) * reset_factor(params.alpha, s);
    }
    Ok(())
}

/// One binary LIF timestep; updates `state` in place.
pub fn binary_lif_step(state: &mut MembraneState, input: &Tensor, params: &NeuronParams) -> Result<IntTensor> {
    integrate(state, input, params)?;
    let theta = params.v_theta;
    let out = state.potential.map(|u| i32::from(u > theta));
    state.prev_spikes = out.clone();
    Ok(out)
}

/// Burst level for a membrane value.
pub fn burst_level(u: f32, v_theta: f32, n_max: u32) -> i32 {
    let q = (u / v_theta).floor();
    if q <= 0.0 {
        0
    } else if q >= n_max as f32 {
        n_max as i32
    } else {
        q as i32
    }
}

/// One burst LIF timestep; updates `state` in place.
pub fn burst_lif_step(state: &mut MembraneState, input: &Tensor, params: &NeuronParams) -> Result<IntTensor> {
    integrate(state, input, params)?;
    let out = state
        .potential
        .map(|u| burst_level(u, params.v_theta, params.n_max));
    state.prev_spikes = out.clone();
    Ok(out)
}

/// A neuron layer that owns its membrane state.
#[derive(Clone, Debug)]
pub struct NeuronLayer {
    pub kind: NeuronKind,
    pub params: NeuronParams,
    state: Option<MembraneState>,
}

impl NeuronLayer {
    pub fn new(kind: NeuronKind, params: NeuronParams) -> Self {
        Self {
            kind,
            params,
            state: None,
        }
    }

    pub fn binary(params: NeuronParams) -> Self {
        Self::new(NeuronKind::Binary, params)
    }

    pub fn burst(params: NeuronParams) -> Self {
        Self::new(NeuronKind::Burst, params)
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    pub fn state(&self) -> Option<&MembraneState> {
        self.state.as_ref()
    }

    /// Advances one timestep. State is created lazily at the input's shape.
    pub fn step(&mut self, input: &Tensor) -> Result<IntTensor> {
        let state = self
            .state
            .get_or_insert_with(|| MembraneState::zeros(input.shape()));
        match self.kind {
            NeuronKind::Binary => binary_lif_step(state, input, &self.params),
            NeuronKind::Burst => burst_lif_step(state, input, &self.params),
        }
    }

    /// Resets the layer, then runs it over `inputs[t]` for `t = 0..T`
    /// (time is axis 0). Every nonzero emission is one sign event.
    pub fn run_sequence(&mut self, inputs: &Tensor, rec: &mut LayerRecord) -> Result<IntTensor> {
        self.reset();
        let shape = inputs.shape();
        if shape.len() < 2 {
            return Err(Error::dim(format!(
                "neuron sequence input needs a leading time axis, got {shape:?}"
            )));
        }
        let per_step: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.data().chunks(per_step) {
            let current = Tensor::new(&shape[1..], chunk.to_vec())?;
            let spikes = self.step(&current)?;
            rec.sign += spikes.nnz();
            out.extend_from_slice(spikes.data());
        }
        IntTensor::new(shape, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Rectangular,
    Arctan,
}

/// Stand-in derivative for the binary threshold, applied to the normalized
/// distance `(U - V_θ) / V_θ`. Both kinds integrate to 1 over the real line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn arctan(width: f64) -> Self {
        Self {
            kind: SurrogateKind::Arctan,
            width,
        }
    }

    pub fn grad(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Rectangular => {
                if x.abs() < self.width / 2.0 {
                    1.0 / self.width
                } else {
                    0.0
                }
            }
            SurrogateKind::Arctan => {
                let z = std::f64::consts::PI * self.width * x / 2.0;
                self.width / (2.0 * (1.0 + z * z))
            }
        }
    }

    /// Antiderivative of [`Self::grad`], rising from 0 to 1.
    pub fn primitive(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Rectangular => (x / self.width + 0.5).clamp(0.0, 1.0),
            SurrogateKind::Arctan => {
                let z = std::f64::consts::PI * self.width * x / 2.0;
                0.5 + z.atan() / std::f64::consts::PI
            }
        }
    }
}

/// Elementwise surrogate derivative.
pub fn surrogate_grad(u_minus_theta: &Tensor, spec: &SurrogateSpec) -> Tensor {
    u_minus_theta.map(|x| spec.grad(x as f64) as f32)
}

/// Straight-through derivative of the burst floor: `1/V_θ` strictly inside
/// the active range `0 < U/V_θ < n_max`, else 0.
pub fn burst_ste(u: f64, v_theta: f64, n_max: u32) -> f64 {
    let q = u / v_theta;
    if q > 0.0 && q < n_max as f64 {
        1.0 / v_theta
    } else {
        0.0
    }
}

pub fn burst_ste_grad(u: &Tensor, params: &NeuronParams) -> Tensor {
    u.map(|x| burst_ste(x as f64, params.v_theta as f64, params.n_max) as f32)
}

/// `ln(1 + e^{kx}) / k`, computed without overflow.
pub(crate) fn softplus(x: f64, k: f64) -> f64 {
    let z = k * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / k
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
