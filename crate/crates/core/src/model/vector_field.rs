//! Layered network with independent forward (`W_k`) and backward (`B_k`)
//! weights. Layer `k` is driven by `W_k·s^{k−1} + B_{k+1}·s^{k+1} + b_k`; the
//! resulting vector field is not the gradient of any scalar function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{check_sizes, check_state, validate_chain};
use super::{glorot, LayeredDenseParams, NeuralState};
use crate::error::{EpError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldParams {
    pub forward: Vec<Tensor>,
    /// `backward[j]` is `B_{j+2}`, shaped like `W_{j+2}ᵀ`: it feeds layer
    /// `j+2` back into layer `j+1`. The input layer receives no feedback, so
    /// there is no `B_1`.
    pub backward: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl VectorFieldParams {
    /// Forward weights drawn like [`LayeredDenseParams::init`]; backward
    /// weights start as their exact transposes.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let forward: Vec<Tensor> =
            sizes.windows(2).map(|w| glorot(&[w[1], w[0]], w[0], w[1], rng)).collect();
        let backward = forward[1..].iter().map(|w| w.transpose()).collect::<Result<_>>()?;
        let biases = sizes[1..].iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(VectorFieldParams {
            forward,
            backward,
            biases,
        })
    }

    /// Tied copy of a symmetric model (`B_k := W_kᵀ`).
    pub fn from_symmetric(p: &LayeredDenseParams) -> Result<Self> {
        Ok(VectorFieldParams {
            forward: p.weights.clone(),
            backward: p.weights[1..].iter().map(|w| w.transpose()).collect::<Result<_>>()?,
            biases: p.biases.clone(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![self.forward[0].shape()[1]];
        out.extend(self.forward.iter().map(|w| w.shape()[0]));
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        validate_chain(&self.forward, &self.biases, "VectorFieldParams")?;
        if self.backward.len() + 1 != self.forward.len() {
            return Err(EpError::InvalidInput(format!(
                "VectorFieldParams: expected {} backward tensors, found {}",
                self.forward.len() - 1,
                self.backward.len()
            )));
        }
        for (b, w) in self.backward.iter().zip(&self.forward[1..]) {
            let (r, c) = (w.shape()[0], w.shape()[1]);
            if b.shape() != [c, r] {
                return Err(EpError::Shape {
                    op: "VectorFieldParams backward",
                    expected: vec![c, r],
                    found: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn zero_state(&self) -> NeuralState {
        NeuralState::new(self.biases.iter().map(Tensor::zeros_like).collect())
    }

    pub(crate) fn input_drive(&self, x: &Tensor) -> Result<Tensor> {
        self.forward[0].matvec(x)
    }

    pub(crate) fn coupling(&self, s: &NeuralState) -> Result<NeuralState> {
        check_state(s, &self.biases)?;
        let n = self.forward.len();
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let mut u = if k == 0 {
                self.biases[0].zeros_like()
            } else {
                self.forward[k].matvec(&s.layers[k - 1])?
            };
            if k + 1 < n {
                u = u.add(&self.backward[k].matvec(&s.layers[k + 1])?)?;
            }
            layers.push(u);
        }
        Ok(NeuralState::new(layers))
    }

    /// `J_sᵀ·g`: the transpose of [`Self::coupling`].
    pub(crate) fn coupling_transpose(&self, g: &NeuralState) -> Result<NeuralState> {
        check_state(g, &self.biases)?;
        let n = self.forward.len();
        let mut layers = Vec::with_capacity(n);
        for j in 0..n {
            let mut a = self.biases[j].zeros_like();
            if j + 1 < n {
                a = a.add(&self.forward[j + 1].matvec_t(&g.layers[j + 1])?)?;
            }
            if j > 0 {
                a = a.add(&self.backward[j - 1].matvec_t(&g.layers[j - 1])?)?;
            }
            layers.push(a);
        }
        Ok(NeuralState::new(layers))
    }

    pub(crate) fn field(&self, drive: &Tensor, s: &NeuralState) -> Result<NeuralState> {
        let mut u = self.coupling(s)?;
        u.layers[0].axpy(1.0, drive)?;
        for (l, b) in u.layers.iter_mut().zip(&self.biases) {
            l.axpy(1.0, b)?;
        }
        Ok(u)
    }

    pub(crate) fn param_vjp(&self, x: &Tensor, s: &NeuralState, g: &NeuralState) -> Result<Self> {
        check_state(s, &self.biases)?;
        check_state(g, &self.biases)?;
        let n = self.forward.len();
        let forward = (0..n)
            .map(|k| {
                let pre = if k == 0 { x } else { &s.layers[k - 1] };
                Tensor::outer(&g.layers[k], pre).reshape(self.forward[k].shape())
            })
            .collect::<Result<_>>()?;
        let backward = (0..n - 1)
            .map(|k| Tensor::outer(&g.layers[k], &s.layers[k + 1]))
            .collect();
        Ok(VectorFieldParams {
            forward,
            backward,
            biases: g.layers.clone(),
        })
    }

    /// `Σ_t param_vjp(x, s_t, g_t)` with a single outer product for the input
    /// term.
    pub(crate) fn param_vjp_sum(&self, x: &Tensor, pairs: &[(&NeuralState, NeuralState)]) -> Result<Self> {
        let mut biases: Vec<Tensor> = self.biases.iter().map(Tensor::zeros_like).collect();
        let mut forward: Vec<Tensor> = self.forward.iter().map(Tensor::zeros_like).collect();
        let mut backward: Vec<Tensor> = self.backward.iter().map(Tensor::zeros_like).collect();
        for (s, g) in pairs {
            check_state(s, &self.biases)?;
            check_state(g, &self.biases)?;
            for (b, gl) in biases.iter_mut().zip(&g.layers) {
                b.axpy(1.0, gl)?;
            }
            for k in 1..self.forward.len() {
                forward[k].add_outer(1.0, &g.layers[k], &s.layers[k - 1])?;
                backward[k - 1].add_outer(1.0, &g.layers[k - 1], &s.layers[k])?;
            }
        }
        forward[0].add_outer(1.0, &biases[0], x)?;
        Ok(VectorFieldParams { forward, backward, biases })
    }

    /// Pre/post-synaptic activity products for the forward weights and biases;
    /// zero for the backward weights, which do not learn.
    pub(crate) fn hebbian(&self, x: &Tensor, s: &NeuralState) -> Result<Self> {
        check_state(s, &self.biases)?;
        let forward = (0..self.forward.len())
            .map(|k| {
                let pre = if k == 0 { x } else { &s.layers[k - 1] };
                Tensor::outer(&s.layers[k], pre).reshape(self.forward[k].shape())
            })
            .collect::<Result<_>>()?;
        Ok(VectorFieldParams {
            forward,
            backward: self.backward.iter().map(Tensor::zeros_like).collect(),
            biases: s.layers.clone(),
        })
    }

    /// `hebbian(b) − hebbian(a)`.
    pub(crate) fn hebbian_diff(&self, x: &Tensor, a: &NeuralState, b: &NeuralState) -> Result<Self> {
        check_state(a, &self.biases)?;
        check_state(b, &self.biases)?;
        Ok(VectorFieldParams {
            forward: super::dense::activity_diff(&self.forward, x, a, b)?,
            backward: self.backward.iter().map(Tensor::zeros_like).collect(),
            biases: b.sub(a)?.layers,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        self.forward.iter().chain(&self.backward).chain(&self.biases).collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.forward
            .iter_mut()
            .chain(self.backward.iter_mut())
            .chain(self.biases.iter_mut())
            .collect()
    }

    pub(crate) fn tensor_names(&self) -> Vec<String> {
        let n = self.forward.len();
        (1..=n)
            .map(|k| format!("W{k}"))
            .chain((2..=n).map(|k| format!("B{k}")))
            .chain((1..=n).map(|k| format!("b{k}")))
            .collect()
    }
}
