//! Model families, their primitive function Φ and its partial derivatives.
//!
//! All three families share the same dynamics skeleton: a pre-activation that
//! is affine in the state, followed by σ. For the symmetric families
//! (layered-dense, convolutional) the pre-activation is exactly `∂Φ/∂s`; the
//! vector-field family has no Φ.

mod conv;
mod dense;
mod state;
mod vector_field;

pub use conv::{ConvParams, ConvSpec, ConvStage};
pub use dense::LayeredDenseParams;
pub use state::NeuralState;
pub use vector_field::VectorFieldParams;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{activate, ActivationKind};
use crate::error::{EpError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LayeredDense,
    VectorField,
    Conv,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::LayeredDense => "layered_dense",
            Family::VectorField => "vector_field",
            Family::Conv => "conv",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Family::LayeredDense => 1,
            Family::VectorField => 2,
            Family::Conv => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Family::LayeredDense),
            2 => Some(Family::VectorField),
            3 => Some(Family::Conv),
            _ => None,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "layered_dense" | "dense" => Ok(Family::LayeredDense),
            "vector_field" | "vf" => Ok(Family::VectorField),
            "conv" | "cnn" => Ok(Family::Conv),
            other => Err(format!("unknown model family '{other}'")),
        }
    }
}

/// Uniform init in `±√(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

/// Trainable parameters θ of one model. Gradients and updates are values of
/// the same type and variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    LayeredDense(LayeredDenseParams),
    VectorField(VectorFieldParams),
    Conv(ConvParams),
}

impl ModelParams {
    pub fn family(&self) -> Family {
        match self {
            ModelParams::LayeredDense(_) => Family::LayeredDense,
            ModelParams::VectorField(_) => Family::VectorField,
            ModelParams::Conv(_) => Family::Conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::LayeredDense(p) => p.validate(),
            ModelParams::VectorField(p) => p.validate(),
            ModelParams::Conv(p) => p.validate(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            ModelParams::LayeredDense(p) => p.tensors(),
            ModelParams::VectorField(p) => p.tensors(),
            ModelParams::Conv(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ModelParams::LayeredDense(p) => p.tensors_mut(),
            ModelParams::VectorField(p) => p.tensors_mut(),
            ModelParams::Conv(p) => p.tensors_mut(),
        }
    }

    /// Names in declaration order, e.g. `W1, W2, b1, b2`.
    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            ModelParams::LayeredDense(p) => p.tensor_names(),
            ModelParams::VectorField(p) => p.tensor_names(),
            ModelParams::Conv(p) => p.tensor_names(),
        }
    }

    /// Which tensors the learning rules update. Only the vector-field backward
    /// weights are frozen.
    pub fn trainable_mask(&self) -> Vec<bool> {
        match self {
            ModelParams::VectorField(p) => p
                .forward
                .iter()
                .map(|_| true)
                .chain(p.backward.iter().map(|_| false))
                .chain(p.biases.iter().map(|_| true))
                .collect(),
            other => vec![true; other.tensors().len()],
        }
    }

    /// Number of state layers.
    pub fn num_layers(&self) -> usize {
        match self {
            ModelParams::LayeredDense(p) => p.weights.len(),
            ModelParams::VectorField(p) => p.forward.len(),
            ModelParams::Conv(p) => p.kernels.len() + p.dense.len(),
        }
    }

    /// 1-based index of the state layer each tensor feeds, in
    /// [`tensors`](Self::tensors) order.
    pub fn tensor_layers(&self) -> Vec<usize> {
        let n = self.num_layers();
        match self {
            ModelParams::LayeredDense(_) => (1..=n).chain(1..=n).collect(),
            ModelParams::VectorField(_) => (1..=n).chain(1..n).chain(1..=n).collect(),
            ModelParams::Conv(p) => {
                let c = p.kernels.len();
                (1..=c).chain(1..=c).chain(c + 1..=n).chain(c + 1..=n).collect()
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    fn check_same_layout(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        if self.family() != other.family() {
            return Err(EpError::InvalidInput(format!(
                "{op}: mixing {} and {} parameters",
                self.family().name(),
                other.family().name()
            )));
        }
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(EpError::Shape {
                op,
                expected: vec![a.len()],
                found: vec![b.len()],
            });
        }
        for (x, y) in a.iter().zip(&b) {
            x.same_shape(y, op)?;
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_same_layout(other, "ModelParams::axpy")?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    /// `self += rate_i · other` per tensor.
    pub fn axpy_per_tensor(&mut self, rates: &[f64], other: &ModelParams) -> Result<()> {
        self.check_same_layout(other, "ModelParams::axpy_per_tensor")?;
        let ts = self.tensors_mut();
        if rates.len() != ts.len() {
            return Err(EpError::InvalidConfig(format!(
                "{} learning rates given for {} parameter tensors",
                rates.len(),
                ts.len()
            )));
        }
        for ((a, b), &r) in ts.into_iter().zip(other.tensors()).zip(rates) {
            a.axpy(r, b)?;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.scale_in_place(alpha);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_layout(other, "ModelParams::max_abs_diff")?;
        self.tensors()
            .iter()
            .zip(other.tensors())
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn zero_state(&self) -> NeuralState {
        match self {
            ModelParams::LayeredDense(p) => p.zero_state(),
            ModelParams::VectorField(p) => p.zero_state(),
            ModelParams::Conv(p) => p.zero_state(),
        }
    }

    /// Width of the output layer ŷ.
    pub fn output_size(&self) -> usize {
        self.zero_state().output().len()
    }

    /// Width of the clamped input.
    pub fn input_size(&self) -> usize {
        match self {
            ModelParams::LayeredDense(p) => p.weights[0].shape()[1],
            ModelParams::VectorField(p) => p.forward[0].shape()[1],
            ModelParams::Conv(p) => p.input_shape.iter().product(),
        }
    }

    /// Binds an input, precomputing its constant contribution to layer 1.
    pub fn clamp<'a>(&'a self, x: &'a Tensor) -> Result<Clamped<'a>> {
        if x.len() != self.input_size() {
            return Err(EpError::Shape {
                op: "clamp input",
                expected: vec![self.input_size()],
                found: x.shape().to_vec(),
            });
        }
        let drive = match self {
            ModelParams::LayeredDense(p) => p.input_drive(x)?,
            ModelParams::VectorField(p) => p.input_drive(x)?,
            ModelParams::Conv(p) => p.input_drive(x)?,
        };
        Ok(Clamped {
            params: self,
            x,
            drive,
        })
    }
}

impl ModelParams {
    /// Clamps `x` with a caller-maintained input drive, for phases in which
    /// the input weights change but are applied lazily.
    pub(crate) fn clamp_with_drive<'a>(&'a self, x: &'a Tensor, drive: Tensor) -> Clamped<'a> {
        Clamped {
            params: self,
            x,
            drive,
        }
    }
}

/// A model with its input clamped. All state-space evaluations go through
/// this view so that the input projection is computed once per sample.
#[derive(Debug, Clone)]
pub struct Clamped<'a> {
    params: &'a ModelParams,
    x: &'a Tensor,
    drive: Tensor,
}

impl<'a> Clamped<'a> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn input(&self) -> &'a Tensor {
        self.x
    }

    pub(crate) fn drive(&self) -> &Tensor {
        &self.drive
    }

    fn no_phi(&self, op: &'static str) -> EpError {
        EpError::UnsupportedModel {
            op,
            family: self.params.family().name(),
        }
    }

    pub fn phi(&self, s: &NeuralState) -> Result<f64> {
        match self.params {
            ModelParams::LayeredDense(p) => p.phi(&self.drive, s),
            ModelParams::Conv(p) => p.phi(&self.drive, s),
            ModelParams::VectorField(_) => Err(self.no_phi("phi")),
        }
    }

    pub fn d_phi_d_s(&self, s: &NeuralState) -> Result<NeuralState> {
        match self.params {
            ModelParams::LayeredDense(p) => p.d_phi_d_s(&self.drive, s),
            ModelParams::Conv(p) => p.d_phi_d_s(&self.drive, s),
            ModelParams::VectorField(_) => Err(self.no_phi("d_phi_d_s")),
        }
    }

    pub fn d_phi_d_theta(&self, s: &NeuralState) -> Result<ModelParams> {
        match self.params {
            ModelParams::LayeredDense(p) => Ok(ModelParams::LayeredDense(p.d_phi_d_theta(self.x, s)?)),
            ModelParams::Conv(p) => Ok(ModelParams::Conv(p.d_phi_d_theta(self.x, s)?)),
            ModelParams::VectorField(_) => Err(self.no_phi("d_phi_d_theta")),
        }
    }

    /// The local quantity whose temporal difference drives learning: `∂Φ/∂θ`
    /// for the symmetric families, forward-weight activity products for the
    /// vector field.
    pub fn learning_signal(&self, s: &NeuralState) -> Result<ModelParams> {
        match self.params {
            ModelParams::VectorField(p) => Ok(ModelParams::VectorField(p.hebbian(self.x, s)?)),
            _ => self.d_phi_d_theta(s),
        }
    }

    /// `learning_signal(b) − learning_signal(a)`.
    pub fn learning_signal_diff(&self, a: &NeuralState, b: &NeuralState) -> Result<ModelParams> {
        match self.params {
            ModelParams::LayeredDense(p) => Ok(ModelParams::LayeredDense(p.d_phi_d_theta_diff(self.x, a, b)?)),
            ModelParams::VectorField(p) => Ok(ModelParams::VectorField(p.hebbian_diff(self.x, a, b)?)),
            ModelParams::Conv(_) => self.learning_signal(b)?.sub(&self.learning_signal(a)?),
        }
    }

    /// Input to σ: `∂Φ/∂s` for symmetric models, the vector field otherwise.
    pub fn pre_activation(&self, s: &NeuralState) -> Result<NeuralState> {
        match self.params {
            ModelParams::VectorField(p) => p.field(&self.drive, s),
            _ => self.d_phi_d_s(s),
        }
    }

    /// Pre-activation with the output layer pulled by `β(y − ŷ)`.
    pub fn nudged_pre_activation(&self, s: &NeuralState, y: &Tensor, beta: f64) -> Result<NeuralState> {
        let yhat = s.output();
        if y.len() != yhat.len() {
            return Err(EpError::Shape {
                op: "nudge target",
                expected: yhat.shape().to_vec(),
                found: y.shape().to_vec(),
            });
        }
        let mut u = self.pre_activation(s)?;
        if beta != 0.0 {
            let out = u.output_mut();
            for ((o, &t), &p) in out.data_mut().iter_mut().zip(y.data()).zip(yhat.data()) {
                *o += beta * (t - p);
            }
        }
        Ok(u)
    }

    pub fn free_step(&self, s: &NeuralState, kind: ActivationKind) -> Result<NeuralState> {
        let u = self.pre_activation(s)?;
        Ok(NeuralState::new(u.layers.iter().map(|l| activate(l, kind)).collect()))
    }

    pub fn nudged_step(&self, s: &NeuralState, y: &Tensor, beta: f64, kind: ActivationKind) -> Result<NeuralState> {
        let u = self.nudged_pre_activation(s, y, beta)?;
        Ok(NeuralState::new(u.layers.iter().map(|l| activate(l, kind)).collect()))
    }

    /// `J_sᵀ·g` where `J_s` is the Jacobian of the pre-activation with respect
    /// to the state. The pre-activation is affine in `s`, so this does not
    /// depend on where it is evaluated.
    pub fn state_vjp(&self, g: &NeuralState) -> Result<NeuralState> {
        match self.params {
            ModelParams::LayeredDense(p) => p.coupling(g),
            ModelParams::Conv(p) => p.coupling(g),
            ModelParams::VectorField(p) => p.coupling_transpose(g),
        }
    }

    /// `J_θᵀ·g` where `J_θ` is the Jacobian of the pre-activation at `s` with
    /// respect to θ.
    pub fn param_vjp(&self, s: &NeuralState, g: &NeuralState) -> Result<ModelParams> {
        Ok(match self.params {
            ModelParams::LayeredDense(p) => ModelParams::LayeredDense(p.param_vjp(self.x, s, g)?),
            ModelParams::VectorField(p) => ModelParams::VectorField(p.param_vjp(self.x, s, g)?),
            ModelParams::Conv(p) => ModelParams::Conv(p.param_vjp(self.x, s, g)?),
        })
    }

    /// `Σ_t J_θᵀ(s_t)·g_t` over `(s_t, g_t)` pairs.
    pub fn param_vjp_sum(&self, pairs: &[(&NeuralState, NeuralState)]) -> Result<ModelParams> {
        Ok(match self.params {
            ModelParams::LayeredDense(p) => ModelParams::LayeredDense(p.param_vjp_sum(self.x, pairs)?),
            ModelParams::VectorField(p) => ModelParams::VectorField(p.param_vjp_sum(self.x, pairs)?),
            ModelParams::Conv(_) => {
                let mut acc = self.params.zeros_like();
                for (s, g) in pairs {
                    acc.axpy(1.0, &self.param_vjp(s, g)?)?;
                }
                acc
            }
        })
    }
}

/// Φ(x, s, θ). Errors for the vector-field family.
pub fn phi(x: &Tensor, s: &NeuralState, params: &ModelParams) -> Result<f64> {
    params.clamp(x)?.phi(s)
}

pub fn d_phi_d_s(x: &Tensor, s: &NeuralState, params: &ModelParams) -> Result<NeuralState> {
    params.clamp(x)?.d_phi_d_s(s)
}

pub fn d_phi_d_theta(x: &Tensor, s: &NeuralState, params: &ModelParams) -> Result<ModelParams> {
    params.clamp(x)?.d_phi_d_theta(s)
}

pub fn free_step(x: &Tensor, s: &NeuralState, params: &ModelParams, kind: ActivationKind) -> Result<NeuralState> {
    params.clamp(x)?.free_step(s, kind)
}

pub fn nudged_step(
    x: &Tensor,
    s: &NeuralState,
    params: &ModelParams,
    y: &Tensor,
    beta: f64,
    kind: ActivationKind,
) -> Result<NeuralState> {
    params.clamp(x)?.nudged_step(s, y, beta, kind)
}

/// Squared-norm cost `½‖ŷ − y‖²`.
pub fn cost(s: &NeuralState, y: &Tensor) -> Result<f64> {
    Ok(0.5 * s.output().sub(y)?.norm_sq())
}
