//! Convolutional network: conv stages followed by a dense head.
//!
//! Conv layer `k` holds the pooled feature maps `s^k = σ(𝒫(θ_k ⋆ s^{k−1}) + …)`
//! and the primitive function is
//!
//! ```text
//! Φ = Σ_conv ⟨s^k, 𝒫(θ_k ⋆ s^{k−1}) + c_k⟩ + Σ_dense ( s^jᵀ·W_j·s^{j−1} + b_jᵀ·s^j )
//! ```
//!
//! with per-feature-map biases `c_k`. The top-down signal into a conv layer is
//! the adjoint chain: unpool, then transposed convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, NeuralState};
use crate::conv::{avg_pool, avg_unpool, conv2d, conv2d_input_adjoint, conv2d_kernel_grad};
use crate::error::{EpError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub features: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Architecture of a convolutional model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// (channels, height, width)
    pub input: [usize; 3],
    pub stages: Vec<ConvStage>,
    /// Widths of the dense layers after flattening; the last is the output.
    pub dense: Vec<usize>,
}

impl Default for ConvSpec {
    /// 1×28×28 → 32@5×5 → pool 2 → 64@5×5 → pool 2 → 10.
    fn default() -> Self {
        ConvSpec {
            input: [1, 28, 28],
            stages: vec![
                ConvStage {
                    features: 32,
                    kernel: 5,
                    pool: 2,
                },
                ConvStage {
                    features: 64,
                    kernel: 5,
                    pool: 2,
                },
            ],
            dense: vec![10],
        }
    }
}

impl ConvSpec {
    /// Shapes of every state layer, or an error if the chain does not fit.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.stages.is_empty() || self.dense.is_empty() {
            return Err(EpError::InvalidConfig(
                "a conv model needs at least one conv stage and one dense layer".into(),
            ));
        }
        let [mut c, mut h, mut w] = self.input;
        let mut shapes = Vec::new();
        for st in &self.stages {
            if st.kernel == 0 || st.kernel > h || st.kernel > w || st.pool == 0 || st.features == 0 {
                return Err(EpError::InvalidConfig(format!(
                    "conv stage {st:?} does not fit a {c}×{h}×{w} input"
                )));
            }
            let (oh, ow) = (h - st.kernel + 1, w - st.kernel + 1);
            if oh % st.pool != 0 || ow % st.pool != 0 {
                return Err(EpError::InvalidConfig(format!(
                    "conv output {oh}×{ow} not divisible by pool {}",
                    st.pool
                )));
            }
            c = st.features;
            h = oh / st.pool;
            w = ow / st.pool;
            shapes.push(vec![c, h, w]);
        }
        shapes.extend(self.dense.iter().map(|&n| vec![n]));
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub input_shape: [usize; 3],
    pub pools: Vec<usize>,
    /// `kernels[k]` has shape F_k × C_k × k × k.
    pub kernels: Vec<Tensor>,
    /// One bias per feature map of each conv stage.
    pub conv_biases: Vec<Tensor>,
    pub dense: Vec<Tensor>,
    pub dense_biases: Vec<Tensor>,
}

impl ConvParams {
    pub fn init<R: Rng>(spec: &ConvSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut c = spec.input[0];
        let mut kernels = Vec::new();
        let mut conv_biases = Vec::new();
        for st in &spec.stages {
            let area = st.kernel * st.kernel;
            kernels.push(glorot(&[st.features, c, st.kernel, st.kernel], c * area, st.features * area, rng));
            conv_biases.push(Tensor::zeros(&[st.features]));
            c = st.features;
        }
        let mut fan_in: usize = shapes[spec.stages.len() - 1].iter().product();
        let mut dense = Vec::new();
        let mut dense_biases = Vec::new();
        for &n in &spec.dense {
            dense.push(glorot(&[n, fan_in], fan_in, n, rng));
            dense_biases.push(Tensor::zeros(&[n]));
            fan_in = n;
        }
        Ok(ConvParams {
            input_shape: spec.input,
            pools: spec.stages.iter().map(|s| s.pool).collect(),
            kernels,
            conv_biases,
            dense,
            dense_biases,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            input: self.input_shape,
            stages: self
                .kernels
                .iter()
                .zip(&self.pools)
                .map(|(k, &pool)| ConvStage {
                    features: k.shape()[0],
                    kernel: k.shape()[2],
                    pool,
                })
                .collect(),
            dense: self.dense.iter().map(|w| w.shape()[0]).collect(),
        }
    }

    pub(crate) fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.spec().layer_shapes()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let spec = self.spec();
        let shapes = spec.layer_shapes()?;
        let mut c = self.input_shape[0];
        for (k, (kern, b)) in self.kernels.iter().zip(&self.conv_biases).enumerate() {
            if kern.ndim() != 4 || kern.shape()[1] != c || kern.shape()[2] != kern.shape()[3] {
                return Err(EpError::Shape {
                    op: "ConvParams kernels",
                    expected: vec![spec.stages[k].features, c, spec.stages[k].kernel, spec.stages[k].kernel],
                    found: kern.shape().to_vec(),
                });
            }
            if b.shape() != [kern.shape()[0]] {
                return Err(EpError::Shape {
                    op: "ConvParams conv biases",
                    expected: vec![kern.shape()[0]],
                    found: b.shape().to_vec(),
                });
            }
            c = kern.shape()[0];
        }
        if self.kernels.len() != self.pools.len() || self.kernels.len() != self.conv_biases.len() {
            return Err(EpError::InvalidInput("ConvParams: stage lists differ in length".into()));
        }
        let mut fan_in: usize = shapes[self.kernels.len() - 1].iter().product();
        for (w, b) in self.dense.iter().zip(&self.dense_biases) {
            if w.ndim() != 2 || w.shape()[1] != fan_in || b.shape() != [w.shape()[0]] {
                return Err(EpError::Shape {
                    op: "ConvParams dense",
                    expected: vec![b.len(), fan_in],
                    found: w.shape().to_vec(),
                });
            }
            fan_in = w.shape()[0];
        }
        if self.dense.len() != self.dense_biases.len() {
            return Err(EpError::InvalidInput("ConvParams: dense lists differ in length".into()));
        }
        Ok(())
    }

    pub fn zero_state(&self) -> NeuralState {
        let shapes = self.layer_shapes().expect("validated conv params");
        NeuralState::new(shapes.iter().map(|s| Tensor::zeros(s)).collect())
    }

    fn check_state(&self, s: &NeuralState) -> Result<()> {
        let shapes = self.layer_shapes()?;
        if s.layers.len() != shapes.len() {
            return Err(EpError::Shape {
                op: "conv state layout",
                expected: vec![shapes.len()],
                found: vec![s.layers.len()],
            });
        }
        for (l, sh) in s.layers.iter().zip(&shapes) {
            if l.shape() != sh.as_slice() {
                return Err(EpError::Shape {
                    op: "conv state layout",
                    expected: sh.clone(),
                    found: l.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn as_image(&self, x: &Tensor) -> Result<Tensor> {
        x.clone().reshape(&self.input_shape)
    }

    /// `𝒫(θ_1 ⋆ x)`, the constant input contribution to the first conv layer.
    pub(crate) fn input_drive(&self, x: &Tensor) -> Result<Tensor> {
        avg_pool(&conv2d(&self.as_image(x)?, &self.kernels[0])?, self.pools[0])
    }

    fn spatial(t: &Tensor) -> (usize, usize) {
        (t.shape()[1], t.shape()[2])
    }

    /// Top-down signal from conv layer `k+1` into the input of stage `k+1`,
    /// i.e. `∂/∂s^k ⟨s^{k+1}, 𝒫(θ_{k+1} ⋆ s^k)⟩`.
    fn conv_top_down(&self, k_next: usize, upper: &Tensor, lower_hw: (usize, usize)) -> Result<Tensor> {
        let spread = avg_unpool(upper, self.pools[k_next])?;
        conv2d_input_adjoint(&spread, &self.kernels[k_next], lower_hw)
    }

    pub(crate) fn coupling(&self, s: &NeuralState) -> Result<NeuralState> {
        self.check_state(s)?;
        let nc = self.kernels.len();
        let nd = self.dense.len();
        let mut layers = Vec::with_capacity(nc + nd);
        for k in 0..nc {
            let mut u = if k == 0 {
                s.layers[0].zeros_like()
            } else {
                avg_pool(&conv2d(&s.layers[k - 1], &self.kernels[k])?, self.pools[k])?
            };
            if k + 1 < nc {
                u.axpy(1.0, &self.conv_top_down(k + 1, &s.layers[k + 1], Self::spatial(&s.layers[k]))?)?;
            } else {
                let td = self.dense[0].matvec_t(&s.layers[nc])?.reshape(s.layers[k].shape())?;
                u.axpy(1.0, &td)?;
            }
            layers.push(u);
        }
        for j in 0..nd {
            let mut u = self.dense[j].matvec(&s.layers[nc + j - 1])?;
            if j + 1 < nd {
                u.axpy(1.0, &self.dense[j + 1].matvec_t(&s.layers[nc + j + 1])?)?;
            }
            layers.push(u);
        }
        Ok(NeuralState::new(layers))
    }

    fn add_biases(&self, u: &mut NeuralState) -> Result<()> {
        let nc = self.kernels.len();
        for (k, c) in self.conv_biases.iter().enumerate() {
            let plane = u.layers[k].len() / c.len();
            for (chunk, &bias) in u.layers[k].data_mut().chunks_exact_mut(plane).zip(c.data()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        for (j, b) in self.dense_biases.iter().enumerate() {
            u.layers[nc + j].axpy(1.0, b)?;
        }
        Ok(())
    }

    pub(crate) fn d_phi_d_s(&self, drive: &Tensor, s: &NeuralState) -> Result<NeuralState> {
        let mut u = self.coupling(s)?;
        u.layers[0].axpy(1.0, drive)?;
        self.add_biases(&mut u)?;
        Ok(u)
    }

    pub(crate) fn phi(&self, drive: &Tensor, s: &NeuralState) -> Result<f64> {
        self.check_state(s)?;
        let nc = self.kernels.len();
        let mut total = s.layers[0].dot(drive)?;
        for k in 1..nc {
            let bottom_up = avg_pool(&conv2d(&s.layers[k - 1], &self.kernels[k])?, self.pools[k])?;
            total += s.layers[k].dot(&bottom_up)?;
        }
        for j in 0..self.dense.len() {
            total += s.layers[nc + j].dot(&self.dense[j].matvec(&s.layers[nc + j - 1])?)?;
        }
        total += self.bias_terms(s)?;
        Ok(total)
    }

    fn bias_terms(&self, s: &NeuralState) -> Result<f64> {
        let nc = self.kernels.len();
        let mut total = 0.0;
        for (k, c) in self.conv_biases.iter().enumerate() {
            total += c.dot(&feature_sums(&s.layers[k], c.len()))?;
        }
        for (j, b) in self.dense_biases.iter().enumerate() {
            total += s.layers[nc + j].dot(b)?;
        }
        Ok(total)
    }

    /// `∂Φ/∂θ_k = 𝒫⁻¹(s^k) ⋆ s^{k−1}` for the kernels, feature-map sums for
    /// the conv biases, outer products for the dense head.
    pub(crate) fn d_phi_d_theta(&self, x: &Tensor, s: &NeuralState) -> Result<Self> {
        self.param_pairing(x, s, s, false)
    }

    /// Transposed parameter Jacobian of the pre-activation at `s` applied to
    /// `g`. Because Φ is bilinear in (θ, s) this is the derivative of
    /// `∂Φ/∂θ` along `g`: each coupling term contributes once through its
    /// upper layer and once through its lower layer.
    pub(crate) fn param_vjp(&self, x: &Tensor, s: &NeuralState, g: &NeuralState) -> Result<Self> {
        self.check_state(g)?;
        let mut out = self.param_pairing(x, g, s, false)?;
        let lower = self.param_pairing(x, s, g, true)?;
        for (a, b) in out.tensors_mut().into_iter().zip(lower.tensors()) {
            a.axpy(1.0, b)?;
        }
        Ok(out)
    }

    /// Gradient of `Σ_k ⟨upper^k, 𝒫(θ_k ⋆ lower^{k−1})⟩ + dense terms + biases·upper`
    /// with respect to θ. With `skip_input` the terms whose lower operand is
    /// the clamped input (and the bias terms) are dropped.
    fn param_pairing(&self, x: &Tensor, upper: &NeuralState, lower: &NeuralState, skip_input: bool) -> Result<Self> {
        self.check_state(upper)?;
        self.check_state(lower)?;
        let nc = self.kernels.len();
        let image = self.as_image(x)?;
        let mut kernels = Vec::with_capacity(nc);
        for k in 0..nc {
            let kern = &self.kernels[k];
            if k == 0 && skip_input {
                kernels.push(kern.zeros_like());
                continue;
            }
            let below = if k == 0 { &image } else { &lower.layers[k - 1] };
            let spread = avg_unpool(&upper.layers[k], self.pools[k])?;
            kernels.push(conv2d_kernel_grad(&spread, below, (kern.shape()[2], kern.shape()[3]))?);
        }
        let mut dense = Vec::with_capacity(self.dense.len());
        for j in 0..self.dense.len() {
            dense.push(Tensor::outer(&upper.layers[nc + j], &lower.layers[nc + j - 1]));
        }
        let (conv_biases, dense_biases) = if skip_input {
            (
                self.conv_biases.iter().map(Tensor::zeros_like).collect(),
                self.dense_biases.iter().map(Tensor::zeros_like).collect(),
            )
        } else {
            (
                self.conv_biases
                    .iter()
                    .enumerate()
                    .map(|(k, c)| feature_sums(&upper.layers[k], c.len()))
                    .collect(),
                upper.layers[nc..].to_vec(),
            )
        };
        Ok(ConvParams {
            input_shape: self.input_shape,
            pools: self.pools.clone(),
            kernels,
            conv_biases,
            dense,
            dense_biases,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        self.kernels
            .iter()
            .chain(&self.conv_biases)
            .chain(&self.dense)
            .chain(&self.dense_biases)
            .collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .chain(self.conv_biases.iter_mut())
            .chain(self.dense.iter_mut())
            .chain(self.dense_biases.iter_mut())
            .collect()
    }

    pub(crate) fn tensor_names(&self) -> Vec<String> {
        let nc = self.kernels.len();
        let nd = self.dense.len();
        (1..=nc)
            .map(|k| format!("K{k}"))
            .chain((1..=nc).map(|k| format!("c{k}")))
            .chain((1..=nd).map(|j| format!("Wd{j}")))
            .chain((1..=nd).map(|j| format!("bd{j}")))
            .collect()
    }
}

fn feature_sums(t: &Tensor, features: usize) -> Tensor {
    let plane = t.len() / features;
    Tensor::vector(t.data().chunks_exact(plane).map(|c| c.iter().sum()).collect())
}
