use serde::{Deserialize, Serialize};

use crate::error::{EpError, Result};
use crate::tensor::Tensor;

/// Activations of every free layer `s¹ … sᴺ`. The input is clamped and is not
/// part of the state; the last layer is the output `ŷ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralState {
    pub layers: Vec<Tensor>,
}

impl NeuralState {
    pub fn new(layers: Vec<Tensor>) -> Self {
        assert!(!layers.is_empty(), "a state needs at least one layer");
        NeuralState { layers }
    }

    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("non-empty state")
    }

    pub fn output_mut(&mut self) -> &mut Tensor {
        self.layers.last_mut().expect("non-empty state")
    }

    pub fn zeros_like(&self) -> Self {
        NeuralState {
            layers: self.layers.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }

    fn check_layout(&self, other: &NeuralState, op: &'static str) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(EpError::Shape {
                op,
                expected: vec![self.layers.len()],
                found: vec![other.layers.len()],
            });
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            a.same_shape(b, op)?;
        }
        Ok(())
    }

    pub fn sub(&self, other: &NeuralState) -> Result<NeuralState> {
        self.check_layout(other, "NeuralState::sub")?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        Ok(NeuralState { layers })
    }

    pub fn axpy(&mut self, alpha: f64, other: &NeuralState) -> Result<()> {
        self.check_layout(other, "NeuralState::axpy")?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> NeuralState {
        NeuralState {
            layers: self.layers.iter().map(|t| t.scale(alpha)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> NeuralState {
        NeuralState {
            layers: self.layers.iter().map(|t| t.map(f)).collect(),
        }
    }

    pub fn hadamard(&self, other: &NeuralState) -> Result<NeuralState> {
        self.check_layout(other, "NeuralState::hadamard")?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.hadamard(b))
            .collect::<Result<_>>()?;
        Ok(NeuralState { layers })
    }

    /// Largest absolute elementwise difference (the ∞-norm of `self − other`).
    pub fn max_abs_diff(&self, other: &NeuralState) -> Result<f64> {
        self.check_layout(other, "NeuralState::max_abs_diff")?;
        self.layers
            .iter()
            .zip(&other.layers)
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Tensor::all_finite)
    }
}
