//! Layered, fully connected network with symmetric connections.
//!
//! `W_k` (shape `n_k × n_{k−1}`) carries the bottom-up signal `W_k·s^{k−1}`
//! and, transposed, the top-down signal `W_kᵀ·s^k`. The primitive function is
//!
//! ```text
//! Φ(x, s, θ) = Σ_k ( s^kᵀ·W_k·s^{k−1} + b_kᵀ·s^k ),   s⁰ ≡ x
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, NeuralState};
use crate::error::{EpError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredDenseParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl LayeredDenseParams {
    /// Fan-based uniform init of every `W_k`, zero biases. `sizes` lists the
    /// input width followed by every layer width.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let weights = sizes.windows(2).map(|w| glorot(&[w[1], w[0]], w[0], w[1], rng)).collect();
        let biases = sizes[1..].iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(LayeredDenseParams { weights, biases })
    }

    /// Input width followed by every layer width.
    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![self.weights[0].shape()[1]];
        out.extend(self.weights.iter().map(|w| w.shape()[0]));
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        validate_chain(&self.weights, &self.biases, "LayeredDenseParams")
    }

    pub fn zero_state(&self) -> NeuralState {
        NeuralState::new(self.biases.iter().map(Tensor::zeros_like).collect())
    }

    pub(crate) fn input_drive(&self, x: &Tensor) -> Result<Tensor> {
        self.weights[0].matvec(x)
    }

    /// State-dependent part of `∂Φ/∂s`: every term except `W_1·x` and the
    /// biases. Linear in `s`, and symmetric as an operator.
    pub(crate) fn coupling(&self, s: &NeuralState) -> Result<NeuralState> {
        check_state(s, &self.biases)?;
        let n = self.weights.len();
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let mut u = if k == 0 {
                self.biases[0].zeros_like()
            } else {
                self.weights[k].matvec(&s.layers[k - 1])?
            };
            if k + 1 < n {
                u = u.add(&self.weights[k + 1].matvec_t(&s.layers[k + 1])?)?;
            }
            layers.push(u);
        }
        Ok(NeuralState::new(layers))
    }

    pub(crate) fn d_phi_d_s(&self, drive: &Tensor, s: &NeuralState) -> Result<NeuralState> {
        let mut u = self.coupling(s)?;
        u.layers[0].axpy(1.0, drive)?;
        for (l, b) in u.layers.iter_mut().zip(&self.biases) {
            l.axpy(1.0, b)?;
        }
        Ok(u)
    }

    pub(crate) fn phi(&self, drive: &Tensor, s: &NeuralState) -> Result<f64> {
        check_state(s, &self.biases)?;
        let mut total = s.layers[0].dot(drive)?;
        for k in 1..self.weights.len() {
            total += s.layers[k].dot(&self.weights[k].matvec(&s.layers[k - 1])?)?;
        }
        for (l, b) in s.layers.iter().zip(&self.biases) {
            total += l.dot(b)?;
        }
        Ok(total)
    }

    /// `∂Φ/∂W_k = s^k·s^{k−1,ᵀ}`, `∂Φ/∂b_k = s^k`.
    pub(crate) fn d_phi_d_theta(&self, x: &Tensor, s: &NeuralState) -> Result<Self> {
        check_state(s, &self.biases)?;
        let weights = (0..self.weights.len())
            .map(|k| {
                let pre = if k == 0 { x } else { &s.layers[k - 1] };
                Tensor::outer(&s.layers[k], pre).reshape(self.weights[k].shape())
            })
            .collect::<Result<_>>()?;
        Ok(LayeredDenseParams {
            weights,
            biases: s.layers.clone(),
        })
    }

    /// `∂Φ/∂θ(b) − ∂Φ/∂θ(a)`, with the input term formed as one outer
    /// product `(b¹ − a¹)·xᵀ`.
    pub(crate) fn d_phi_d_theta_diff(&self, x: &Tensor, a: &NeuralState, b: &NeuralState) -> Result<Self> {
        check_state(a, &self.biases)?;
        check_state(b, &self.biases)?;
        Ok(LayeredDenseParams {
            weights: activity_diff(&self.weights, x, a, b)?,
            biases: b.sub(a)?.layers,
        })
    }

    /// Transposed parameter Jacobian of the pre-activation at `s`, applied to
    /// a pre-activation adjoint `g`.
    pub(crate) fn param_vjp(&self, x: &Tensor, s: &NeuralState, g: &NeuralState) -> Result<Self> {
        check_state(s, &self.biases)?;
        check_state(g, &self.biases)?;
        let mut weights = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let pre = if k == 0 { x } else { &s.layers[k - 1] };
            let mut w = Tensor::outer(&g.layers[k], pre).reshape(self.weights[k].shape())?;
            if k > 0 {
                w.add_outer(1.0, &s.layers[k], &g.layers[k - 1])?;
            }
            weights.push(w);
        }
        Ok(LayeredDenseParams {
            weights,
            biases: g.layers.clone(),
        })
    }

    /// `Σ_t param_vjp(x, s_t, g_t)`. The input term is linear in `g` alone,
    /// so it takes one outer product with `x` instead of one per pair.
    pub(crate) fn param_vjp_sum(&self, x: &Tensor, pairs: &[(&NeuralState, NeuralState)]) -> Result<Self> {
        let mut biases: Vec<Tensor> = self.biases.iter().map(Tensor::zeros_like).collect();
        let mut weights: Vec<Tensor> = self.weights.iter().map(Tensor::zeros_like).collect();
        for (s, g) in pairs {
            check_state(s, &self.biases)?;
            check_state(g, &self.biases)?;
            for (b, gl) in biases.iter_mut().zip(&g.layers) {
                b.axpy(1.0, gl)?;
            }
            for k in 1..self.weights.len() {
                weights[k].add_outer(1.0, &g.layers[k], &s.layers[k - 1])?;
                weights[k].add_outer(1.0, &s.layers[k], &g.layers[k - 1])?;
            }
        }
        weights[0].add_outer(1.0, &biases[0], x)?;
        Ok(LayeredDenseParams { weights, biases })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub(crate) fn tensor_names(&self) -> Vec<String> {
        let n = self.weights.len();
        (1..=n).map(|k| format!("W{k}")).chain((1..=n).map(|k| format!("b{k}"))).collect()
    }
}

pub(crate) fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&n| n == 0) {
        return Err(EpError::InvalidConfig(format!(
            "layer sizes must list the input and at least one layer, all positive; got {sizes:?}"
        )));
    }
    Ok(())
}

pub(crate) fn validate_chain(weights: &[Tensor], biases: &[Tensor], what: &'static str) -> Result<()> {
    if weights.is_empty() || weights.len() != biases.len() {
        return Err(EpError::InvalidInput(format!(
            "{what}: {} weight tensors but {} bias tensors",
            weights.len(),
            biases.len()
        )));
    }
    for (k, (w, b)) in weights.iter().zip(biases).enumerate() {
        if w.ndim() != 2 || b.ndim() != 1 || w.shape()[0] != b.len() {
            return Err(EpError::Shape {
                op: what,
                expected: vec![b.len()],
                found: w.shape().to_vec(),
            });
        }
        if k > 0 && w.shape()[1] != weights[k - 1].shape()[0] {
            return Err(EpError::Shape {
                op: what,
                expected: vec![w.shape()[0], weights[k - 1].shape()[0]],
                found: w.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub(crate) fn check_state(s: &NeuralState, biases: &[Tensor]) -> Result<()> {
    if s.layers.len() != biases.len() {
        return Err(EpError::Shape {
            op: "state layout",
            expected: vec![biases.len()],
            found: vec![s.layers.len()],
        });
    }
    for (l, b) in s.layers.iter().zip(biases) {
        if l.len() != b.len() {
            return Err(EpError::Shape {
                op: "state layout",
                expected: b.shape().to_vec(),
                found: l.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Differences of the products `s^k·s^{k−1,ᵀ}` (with `s⁰ = x`) between
/// states `b` and `a`, shaped like `weights`.
pub(crate) fn activity_diff(weights: &[Tensor], x: &Tensor, a: &NeuralState, b: &NeuralState) -> Result<Vec<Tensor>> {
    (0..weights.len())
        .map(|k| {
            if k == 0 {
                let d = b.layers[0].sub(&a.layers[0])?;
                return Tensor::outer(&d, x).reshape(weights[0].shape());
            }
            let mut w = Tensor::outer(&b.layers[k], &b.layers[k - 1]);
            w.add_outer(-1.0, &a.layers[k], &a.layers[k - 1])?;
            w.reshape(weights[k].shape())
        })
        .collect()
}
