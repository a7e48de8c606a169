//! Training loops for EP, continual EP, continual vector-field EP and the
//! BPTT baseline, plus evaluation.
//!
//! Samples of a minibatch run their phases independently (in parallel)
//! against the same θ. Their updates are summed in sample order and averaged,
//! so results do not depend on the thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::trajectory_gradient;
use crate::data::Dataset;
use crate::dynamics::{ep_update, run_free_phase, run_nudged_phase, PhaseConfig};
use crate::error::{EpError, Result};
use crate::gdu::run_gdu;
use crate::model::{glorot, ConvParams, NeuralState, ConvSpec, Family, LayeredDenseParams, ModelParams, VectorFieldParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ep,
    Cep,
    Cvf,
    Bptt,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ep => "ep",
            Algorithm::Cep => "cep",
            Algorithm::Cvf => "cvf",
            Algorithm::Bptt => "bptt",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = EpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ep" => Ok(Algorithm::Ep),
            "cep" => Ok(Algorithm::Cep),
            "cvf" => Ok(Algorithm::Cvf),
            "bptt" => Ok(Algorithm::Bptt),
            other => Err(EpError::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    /// Layer widths including the input, for the dense and vector-field
    /// families.
    pub sizes: Vec<usize>,
    /// Architecture of the conv family.
    pub conv: ConvSpec,
    /// Multiplier on the fan-based initial weights. Biases start at zero.
    pub init_scale: f64,
    pub phase: PhaseConfig,
    /// Learning rate of the output layer. Each layer below doubles it.
    pub lr: f64,
    /// Explicit per-tensor learning rates, overriding `lr` when non-empty.
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Abort when a larger fraction of an epoch's free phases hit `T`
    /// without converging.
    pub max_nonconverged_fraction: f64,
    /// Abort when the train error is still at least 90% of chance after
    /// five epochs.
    pub early_abort: bool,
    /// Samples used to measure the initial EP/BPTT agreement for C-VF.
    pub gdu_samples: usize,
    /// Nudging strength used for that measurement.
    pub gdu_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            family: Family::LayeredDense,
            sizes: vec![784, 512, 10],
            conv: ConvSpec::default(),
            init_scale: 1.0,
            phase: PhaseConfig::default(),
            lr: 0.05,
            learning_rates: vec![],
            epochs: 30,
            batch_size: 20,
            seed: 0,
            max_nonconverged_fraction: 1.0,
            early_abort: true,
            gdu_samples: 8,
            gdu_beta: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.phase.validate()?;
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(EpError::InvalidConfig(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        if self.batch_size == 0 {
            return Err(EpError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || self.learning_rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(EpError::InvalidConfig("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.max_nonconverged_fraction) {
            return Err(EpError::InvalidConfig(format!(
                "max_nonconverged_fraction must lie in [0, 1], got {}",
                self.max_nonconverged_fraction
            )));
        }
        Ok(())
    }

    /// Per-tensor rates: `learning_rates` if given, else `lr · 2^(N − k)`
    /// for a tensor feeding layer `k` of `N`. Frozen tensors get 0.
    pub fn tensor_rates(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let layers = params.tensor_layers();
        let mask = params.trainable_mask();
        let rates: Vec<f64> = if self.learning_rates.is_empty() {
            let n = params.num_layers() as i32;
            layers.iter().map(|&k| self.lr * 2f64.powi(n - k as i32)).collect()
        } else if self.learning_rates.len() == layers.len() {
            self.learning_rates.clone()
        } else {
            return Err(EpError::InvalidConfig(format!(
                "{} learning rates given for {} tensors",
                self.learning_rates.len(),
                layers.len()
            )));
        };
        Ok(rates.into_iter().zip(mask).map(|(r, m)| if m { r } else { 0.0 }).collect())
    }

    /// Phase config whose per-tensor η follows the same layer scaling as
    /// the learning rates, unless scales are given explicitly.
    fn continual_phase_config(&self, params: &ModelParams) -> Result<PhaseConfig> {
        let mut phase = self.phase.clone();
        if phase.eta_scales.is_empty() && self.learning_rates.is_empty() {
            let n = params.num_layers() as i32;
            phase.eta_scales = params.tensor_layers().iter().map(|&k| 2f64.powi(n - k as i32)).collect();
        }
        Ok(phase)
    }
}

/// Initial parameters for `cfg.family`, drawn from `rng`.
pub fn init_params<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> Result<ModelParams> {
    let params = match cfg.family {
        Family::LayeredDense => ModelParams::LayeredDense(LayeredDenseParams::init(&cfg.sizes, rng)?),
        Family::VectorField => ModelParams::VectorField(VectorFieldParams::init(&cfg.sizes, rng)?),
        Family::Conv => ModelParams::Conv(ConvParams::init(&cfg.conv, rng)?),
    };
    Ok(if cfg.init_scale == 1.0 { params } else { params.scale(cfg.init_scale) })
}

/// Sets every backward weight `B_k` to `cos α·W_kᵀ + sin α·R⊥`, where `R⊥`
/// is a random matrix orthogonalized against `W_kᵀ` and rescaled to
/// `‖W_kᵀ‖`. The angle between `vec(B_k)` and `vec(W_kᵀ)` is then `α`.
pub fn set_backward_angle<R: Rng>(params: &mut VectorFieldParams, angle_degrees: f64, rng: &mut R) -> Result<()> {
    if !(0.0..=90.0).contains(&angle_degrees) {
        return Err(EpError::InvalidConfig(format!(
            "angle must lie in [0, 90] degrees, got {angle_degrees}"
        )));
    }
    let alpha = angle_degrees.to_radians();
    let (c, s) = if angle_degrees == 90.0 { (0.0, 1.0) } else { (alpha.cos(), alpha.sin()) };
    for j in 0..params.backward.len() {
        let wt = params.forward[j + 1].transpose()?;
        let shape = wt.shape().to_vec();
        let r = glorot(&shape, shape[1], shape[0], rng);
        let wn2 = wt.norm_sq();
        let mut perp = r.clone();
        if wn2 > 0.0 {
            perp.axpy(-r.dot(&wt)? / wn2, &wt)?;
        }
        let pn = perp.norm();
        let scale = if pn > 0.0 { wn2.sqrt() / pn } else { 0.0 };
        let mut b = wt.scale(c);
        if s != 0.0 {
            b.axpy(s * scale, &perp)?;
        }
        params.backward[j] = b;
    }
    Ok(())
}

/// Degrees between `vec(B_k)` and `vec(W_kᵀ)` for every backward weight.
pub fn backward_angles(params: &VectorFieldParams) -> Result<Vec<f64>> {
    params
        .backward
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let wt = params.forward[j + 1].transpose()?;
            let cos = b.dot(&wt)? / (b.norm() * wt.norm());
            Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_err: f64,
    pub test_err: f64,
    /// Mean free-phase length over the epoch's training samples.
    pub mean_free_steps: f64,
    pub nonconverged_fraction: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    /// Mean EP/BPTT weight-process cosine at initialization (C-VF only).
    pub initial_gdu_cosine: Option<f64>,
}

impl TrainOutcome {
    pub fn final_test_error(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.test_err)
    }

    pub fn best_test_error(&self) -> Option<f64> {
        self.metrics.iter().map(|m| m.test_err).reduce(f64::min)
    }
}

/// Writes `epoch,train_err,test_err,mean_free_steps,wall_ms` rows.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "epoch,train_err,test_err,mean_free_steps,wall_ms")?;
        for m in metrics {
            writeln!(w, "{},{},{},{},{}", m.epoch, m.train_err, m.test_err, m.mean_free_steps, m.wall_ms)?;
        }
        w.flush()
    };
    emit().map_err(|e| EpError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub error: f64,
    pub mean_free_steps: f64,
    pub nonconverged_fraction: f64,
}

/// Free phase per sample; the prediction is the argmax of `ŷ`.
pub fn evaluate(params: &ModelParams, data: &Dataset, phase: &PhaseConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Ok(Evaluation {
            error: 0.0,
            mean_free_steps: 0.0,
            nonconverged_fraction: 0.0,
        });
    }
    let runs = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let traj = run_free_phase(params, &data.input(i), phase)?;
            let wrong = traj.final_state().output().argmax() != data.label(i);
            Ok((wrong, traj.steps(), traj.converged))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    Ok(Evaluation {
        error: runs.iter().filter(|r| r.0).count() as f64 / n,
        mean_free_steps: runs.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        nonconverged_fraction: runs.iter().filter(|r| !r.2).count() as f64 / n,
    })
}

/// Continual second phase of a minibatch run in lockstep: every sample steps
/// with the shared θ_t, then θ moves by the batch mean of the per-sample
/// learning-signal differences scaled by `η_i/β`. Returns θ_K.
pub(crate) fn continual_batch(
    params: &ModelParams,
    xs: &[Tensor],
    ys: &[Tensor],
    starts: Vec<NeuralState>,
    phase: &PhaseConfig,
) -> Result<ModelParams> {
    let b = xs.len() as f64;
    let rates: Vec<f64> = phase.eta_rates(params)?.iter().map(|r| r / phase.beta / b).collect();
    match params {
        ModelParams::Conv(_) => continual_batch_reference(params, xs, ys, starts, phase, &rates),
        _ => continual_batch_lazy_input(params, xs, ys, starts, phase, &rates),
    }
}

/// Materializes θ_t at every step.
fn continual_batch_reference(
    params: &ModelParams,
    xs: &[Tensor],
    ys: &[Tensor],
    mut states: Vec<NeuralState>,
    phase: &PhaseConfig,
    rates: &[f64],
) -> Result<ModelParams> {
    let mut theta = params.clone();
    for _ in 0..phase.k_steps {
        let steps = (0..xs.len())
            .into_par_iter()
            .map(|c| {
                let model = theta.clamp(&xs[c])?;
                let next = model.nudged_step(&states[c], &ys[c], phase.beta, phase.activation)?;
                let diff = model.learning_signal_diff(&states[c], &next)?;
                Ok((next, diff))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sum = theta.zeros_like();
        for (c, (next, diff)) in steps.into_iter().enumerate() {
            sum.axpy(1.0, &diff)?;
            states[c] = next;
        }
        theta.axpy_per_tensor(rates, &sum)?;
    }
    Ok(theta)
}

/// Dense and vector-field families. The input weight only enters the
/// dynamics through `W_1 x_c`, and its per-step change is a sum of rank-1
/// terms `d_b x_bᵀ`, so each drive is advanced through the batch Gram matrix
/// and `W_1` itself is written once, after the last step.
fn continual_batch_lazy_input(
    params: &ModelParams,
    xs: &[Tensor],
    ys: &[Tensor],
    mut states: Vec<NeuralState>,
    phase: &PhaseConfig,
    rates: &[f64],
) -> Result<ModelParams> {
    let mut theta = params.clone();
    let (n, bias_offset) = match params {
        ModelParams::LayeredDense(p) => (p.weights.len(), p.weights.len()),
        ModelParams::VectorField(p) => (p.forward.len(), 2 * p.forward.len() - 1),
        ModelParams::Conv(_) => unreachable!("conv uses the reference path"),
    };
    let gram: Vec<Vec<f64>> = xs
        .iter()
        .map(|a| xs.iter().map(|c| a.dot(c)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut drives = xs
        .iter()
        .map(|x| Ok(theta.clamp(x)?.drive().clone()))
        .collect::<Result<Vec<Tensor>>>()?;
    let first: Vec<Tensor> = states.iter().map(|s| s.layers[0].clone()).collect();
    for _ in 0..phase.k_steps {
        let next = (0..xs.len())
            .into_par_iter()
            .map(|c| {
                theta
                    .clamp_with_drive(&xs[c], drives[c].clone())
                    .nudged_step(&states[c], &ys[c], phase.beta, phase.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        let d1 = next
            .iter()
            .zip(&states)
            .map(|(b, a)| b.layers[0].sub(&a.layers[0]))
            .collect::<Result<Vec<_>>>()?;
        {
            let weights = match &mut theta {
                ModelParams::LayeredDense(p) => &mut p.weights,
                ModelParams::VectorField(p) => &mut p.forward,
                ModelParams::Conv(_) => unreachable!(),
            };
            for k in 1..n {
                for (a, b) in states.iter().zip(&next) {
                    weights[k].add_outer(rates[k], &b.layers[k], &b.layers[k - 1])?;
                    weights[k].add_outer(-rates[k], &a.layers[k], &a.layers[k - 1])?;
                }
            }
        }
        let biases = match &mut theta {
            ModelParams::LayeredDense(p) => &mut p.biases,
            ModelParams::VectorField(p) => &mut p.biases,
            ModelParams::Conv(_) => unreachable!(),
        };
        for k in 0..n {
            for (a, b) in states.iter().zip(&next) {
                biases[k].axpy(rates[bias_offset + k], &b.layers[k])?;
                biases[k].axpy(-rates[bias_offset + k], &a.layers[k])?;
            }
        }
        for (c, drive) in drives.iter_mut().enumerate() {
            for (bi, d) in d1.iter().enumerate() {
                drive.axpy(rates[0] * gram[bi][c], d)?;
            }
        }
        states = next;
    }
    let w1 = match &mut theta {
        ModelParams::LayeredDense(p) => &mut p.weights[0],
        ModelParams::VectorField(p) => &mut p.forward[0],
        ModelParams::Conv(_) => unreachable!(),
    };
    for ((s, s0), x) in states.iter().zip(&first).zip(xs) {
        w1.add_outer(rates[0], &s.layers[0].sub(s0)?, x)?;
    }
    Ok(theta)
}

/// Free phase of one sample, plus its own update for the algorithms whose
/// samples are independent given θ. Continual algorithms leave `delta` empty
/// and finish the batch in [`continual_batch`].
struct SampleStep {
    delta: Option<ModelParams>,
    s_star: NeuralState,
    free_steps: usize,
    converged: bool,
}

fn sample_step(algo: Algorithm, params: &ModelParams, x: &Tensor, y: &Tensor, phase: &PhaseConfig) -> Result<SampleStep> {
    let free = run_free_phase(params, x, phase)?;
    let s_star = free.final_state();
    let delta = match algo {
        Algorithm::Ep => {
            let nudged = run_nudged_phase(params, x, y, s_star, phase)?;
            Some(ep_update(params, s_star, nudged.final_state(), x, phase.beta)?)
        }
        Algorithm::Cep | Algorithm::Cvf => None,
        Algorithm::Bptt => Some(trajectory_gradient(params, x, y, &free, phase.activation)?.0.scale(-1.0)),
    };
    Ok(SampleStep {
        delta,
        s_star: s_star.clone(),
        free_steps: free.steps(),
        converged: free.converged,
    })
}

fn check_family(algo: Algorithm, family: Family) -> Result<()> {
    let ok = match algo {
        Algorithm::Ep | Algorithm::Cep => family != Family::VectorField,
        Algorithm::Cvf => family == Family::VectorField,
        Algorithm::Bptt => true,
    };
    if ok {
        Ok(())
    } else {
        Err(EpError::UnsupportedModel {
            op: algo.name(),
            family: family.name(),
        })
    }
}

/// Runs `cfg.epochs` epochs of `algo` from `params`.
pub fn train_from(
    algo: Algorithm,
    cfg: &TrainConfig,
    mut params: ModelParams,
    train: &Dataset,
    test: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_family(algo, params.family())?;
    if train.is_empty() {
        return Err(EpError::InvalidInput("training set is empty".into()));
    }
    let continual = matches!(algo, Algorithm::Cep | Algorithm::Cvf);
    let phase = if continual {
        cfg.continual_phase_config(&params)?
    } else {
        cfg.phase.clone()
    };
    if matches!(algo, Algorithm::Ep) || continual {
        phase.check_beta()?;
    }
    let rates = cfg.tensor_rates(&params)?;
    let chance = 1.0 - 1.0 / train.target_dim() as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(rng);
        let (mut steps, mut nonconverged) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_step(algo, &params, &train.input(i), &train.target(i), &phase))
                .collect::<Result<Vec<_>>>()?;
            steps += results.iter().map(|r| r.free_steps).sum::<usize>();
            nonconverged += results.iter().filter(|r| !r.converged).count();
            if continual {
                let xs: Vec<Tensor> = batch.iter().map(|&i| train.input(i)).collect();
                let ys: Vec<Tensor> = batch.iter().map(|&i| train.target(i)).collect();
                let starts = results.into_iter().map(|r| r.s_star).collect();
                params = continual_batch(&params, &xs, &ys, starts, &phase)?;
            } else {
                let mut deltas = results.into_iter().map(|r| r.delta.expect("set for non-continual algorithms"));
                let mut sum = deltas.next().expect("batches are non-empty");
                for d in deltas {
                    sum.axpy(1.0, &d)?;
                }
                params.axpy_per_tensor(&rates, &sum.scale(1.0 / batch.len() as f64))?;
            }
        }
        if !params.all_finite() {
            return Err(EpError::Numerical(format!("non-finite parameters after epoch {epoch}")));
        }
        let nonconverged_fraction = nonconverged as f64 / train.len() as f64;
        if nonconverged_fraction > cfg.max_nonconverged_fraction {
            return Err(EpError::Numerical(format!(
                "{:.1}% of free phases in epoch {epoch} did not converge within T = {} (limit {:.1}%)",
                100.0 * nonconverged_fraction,
                phase.t_max,
                100.0 * cfg.max_nonconverged_fraction
            )));
        }
        let train_err = evaluate(&params, train, &cfg.phase)?.error;
        let test_err = evaluate(&params, test, &cfg.phase)?.error;
        let m = EpochMetrics {
            epoch,
            train_err,
            test_err,
            mean_free_steps: steps as f64 / train.len() as f64,
            nonconverged_fraction,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!(
            "{} epoch {epoch}: train {:.4} test {:.4} steps {:.1} ({} ms)",
            algo.name(),
            m.train_err,
            m.test_err,
            m.mean_free_steps,
            m.wall_ms
        );
        metrics.push(m);
        if cfg.early_abort && epoch == 5 && train_err >= 0.9 * chance {
            return Err(EpError::Numerical(format!(
                "train error {train_err:.3} is not below 90% of chance ({:.3}) after 5 epochs",
                0.9 * chance
            )));
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        initial_gdu_cosine: None,
    })
}

/// Two-phase EP: free phase, nudged phase, then `θ ← θ + lr ⊙ Δθ`.
pub fn train_ep(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &mut rng)?;
    train_from(Algorithm::Ep, cfg, params, train, test, &mut rng)
}

/// Continual EP: θ evolves during the second phase and its final value is
/// kept. Per-tensor η follows the learning-rate layer scaling.
pub fn train_cep(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &mut rng)?;
    train_from(Algorithm::Cep, cfg, params, train, test, &mut rng)
}

/// BPTT baseline: `θ ← θ − lr ⊙ dL/dθ` through the free phase.
pub fn train_bptt(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &mut rng)?;
    train_from(Algorithm::Bptt, cfg, params, train, test, &mut rng)
}

/// Vector-field parameters with backward weights at `angle_degrees` from the
/// transposed forward weights. The forward weights and biases are the ones
/// the symmetric family would draw from the same seed.
pub fn init_cvf(cfg: &TrainConfig, angle_degrees: f64, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let mut dense = LayeredDenseParams::init(&cfg.sizes, rng)?;
    dense.weights.iter_mut().for_each(|w| w.scale_in_place(cfg.init_scale));
    let mut vf = VectorFieldParams::from_symmetric(&dense)?;
    set_backward_angle(&mut vf, angle_degrees, rng)?;
    Ok(ModelParams::VectorField(vf))
}

/// Mean cosine between EP weight processes and BPTT weight gradients over
/// the trainable tensors, steps and the first `cfg.gdu_samples` samples.
pub fn initial_gdu_cosine(cfg: &TrainConfig, params: &ModelParams, data: &Dataset) -> Result<f64> {
    let n = cfg.gdu_samples.min(data.len());
    if n == 0 {
        return Ok(1.0);
    }
    let phase = PhaseConfig {
        beta: cfg.gdu_beta,
        eta: 0.0,
        ..cfg.phase.clone()
    };
    let cosines = (0..n)
        .into_par_iter()
        .map(|i| Ok(run_gdu(params, &data.input(i), &data.target(i), &phase)?.report.theta_cosine_mean))
        .collect::<Result<Vec<f64>>>()?;
    Ok(cosines.iter().sum::<f64>() / n as f64)
}

/// Continual vector-field EP with backward weights initialized at
/// `angle_degrees` and kept fixed; only forward weights and biases learn.
pub fn train_cvf(cfg: &TrainConfig, angle_degrees: f64, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    if cfg.family != Family::VectorField {
        return Err(EpError::UnsupportedModel {
            op: "cvf",
            family: cfg.family.name(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_cvf(cfg, angle_degrees, &mut rng)?;
    let cosine = initial_gdu_cosine(cfg, &params, train)?;
    let mut out = train_from(Algorithm::Cvf, cfg, params, train, test, &mut rng)?;
    out.initial_gdu_cosine = Some(cosine);
    Ok(out)
}
