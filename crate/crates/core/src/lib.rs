//! Discrete-time equilibrium propagation (EP), continual EP and continual
//! vector-field EP for small energy-based recurrent networks, with a BPTT
//! gradient oracle used to check that EP's update processes match BPTT's
//! gradient processes step by step.
//!
//! - [`tensor`], [`activation`], [`conv`]: numeric building blocks
//! - [`model`]: the three model families and their primitive function Φ
//! - [`checkpoint`]: binary parameter files
//! - [`dynamics`]: free, nudged and continual phases
//! - [`bptt`]: reverse accumulation through the free phase
//! - [`gdu`]: EP update processes compared against BPTT gradients
//! - [`training`]: EP, C-EP, C-VF and BPTT training loops
//! - [`data`]: IDX loading, stratified subsets, synthetic data

pub mod activation;
pub mod bptt;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod gdu;
pub mod model;
pub mod tensor;
pub mod training;

pub use activation::{activate, activate_prime, ActivationKind};
pub use error::{EpError, Result};
pub use model::{Family, ModelParams, NeuralState};
pub use tensor::Tensor;
