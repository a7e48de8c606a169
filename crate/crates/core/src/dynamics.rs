//! Phase runners.
//!
//! The free phase iterates `s ← σ(∂Φ/∂s)` from the all-zero state until the
//! ∞-norm of the state change drops to `tol`. The second phase starts from the
//! free steady state `s_*` and either keeps θ fixed (nudged phase) or lets it
//! move at every step (continual phase):
//!
//! ```text
//! s_{t+1} = σ(∂Φ/∂s(x, s_t, θ_t) + β(y − ŷ_t))
//! θ_{t+1} = θ_t + (η/β)·(∂Φ/∂θ(s_{t+1}) − ∂Φ/∂θ(s_t))      (both at θ_t)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{EpError, Result};
use crate::model::{ModelParams, NeuralState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// Free-phase step budget (T).
    pub t_max: usize,
    /// Second-phase length (K).
    pub k_steps: usize,
    pub beta: f64,
    /// Continual learning rate η.
    pub eta: f64,
    /// Optional per-tensor multipliers of η; empty means uniform.
    #[serde(default)]
    pub eta_scales: Vec<f64>,
    pub tol: f64,
    pub activation: ActivationKind,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            t_max: 100,
            k_steps: 12,
            beta: 0.5,
            eta: 0.0,
            eta_scales: Vec::new(),
            tol: 1e-4,
            activation: ActivationKind::HardSigmoid,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(EpError::InvalidConfig("T must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(EpError::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if !self.beta.is_finite() {
            return Err(EpError::InvalidConfig(format!("beta must be finite, got {}", self.beta)));
        }
        if !(self.eta >= 0.0) {
            return Err(EpError::InvalidConfig(format!("eta must be non-negative, got {}", self.eta)));
        }
        Ok(())
    }

    pub(crate) fn check_beta(&self) -> Result<()> {
        if self.beta == 0.0 {
            return Err(EpError::InvalidConfig("beta must be non-zero for an EP update".into()));
        }
        Ok(())
    }

    /// Effective η per parameter tensor, zero for frozen tensors.
    pub fn eta_rates(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mask = params.trainable_mask();
        if !self.eta_scales.is_empty() && self.eta_scales.len() != mask.len() {
            return Err(EpError::InvalidConfig(format!(
                "{} eta scales given for {} parameter tensors",
                self.eta_scales.len(),
                mask.len()
            )));
        }
        Ok(mask
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let scale = self.eta_scales.get(i).copied().unwrap_or(1.0);
                if m {
                    self.eta * scale
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Time-indexed record of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `states[0]` is the initial state.
    pub states: Vec<NeuralState>,
    /// Parameters at every step; only recorded by the continual phase.
    pub params_over_time: Option<Vec<ModelParams>>,
    pub converged: bool,
    /// ∞-norm of the last state change.
    pub residual: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &NeuralState {
        self.states.last().expect("trajectory holds its initial state")
    }

    /// Number of steps taken (excludes the initial state).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Writes `step,layer,neuron_index,value` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| EpError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "step,layer,neuron_index,value")?;
            for (t, s) in self.states.iter().enumerate() {
                for (l, layer) in s.layers.iter().enumerate() {
                    for (i, v) in layer.data().iter().enumerate() {
                        writeln!(w, "{t},{},{i},{v:e}", l + 1)?;
                    }
                }
            }
            w.flush()
        };
        emit().map_err(|e| EpError::io(path, e))
    }
}

/// Iterates the free dynamics from the all-zero state.
pub fn run_free_phase(params: &ModelParams, x: &Tensor, cfg: &PhaseConfig) -> Result<Trajectory> {
    run_free_phase_from(params, x, params.zero_state(), cfg)
}

/// Iterates the free dynamics from `s0` until the state change is within
/// `cfg.tol` or `cfg.t_max` steps have been taken.
pub fn run_free_phase_from(params: &ModelParams, x: &Tensor, s0: NeuralState, cfg: &PhaseConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let model = params.clamp(x)?;
    let mut states = vec![s0];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cfg.t_max {
        let current = states.last().expect("non-empty");
        let next = model.free_step(current, cfg.activation)?;
        residual = next.max_abs_diff(current)?;
        states.push(next);
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Trajectory {
        states,
        params_over_time: None,
        converged,
        residual,
    })
}

/// `K` nudged steps with fixed θ, starting from `s_init`.
pub fn run_nudged_phase(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    s_init: &NeuralState,
    cfg: &PhaseConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let model = params.clamp(x)?;
    let mut states = Vec::with_capacity(cfg.k_steps + 1);
    states.push(s_init.clone());
    let mut residual = 0.0;
    for _ in 0..cfg.k_steps {
        let current = states.last().expect("non-empty");
        let next = model.nudged_step(current, y, cfg.beta, cfg.activation)?;
        residual = next.max_abs_diff(current)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        params_over_time: None,
        converged: residual <= cfg.tol,
        residual,
    })
}

/// Continual second phase: neurons and synapses evolve together. Records the
/// parameter trajectory alongside the states.
pub fn run_continual_phase(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    s_init: &NeuralState,
    cfg: &PhaseConfig,
) -> Result<Trajectory> {
    continual_phase(params, x, y, s_init, cfg, true).map(|(traj, _)| traj)
}

/// Same as [`run_continual_phase`] but keeps only the final parameters.
pub(crate) fn continual_phase(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    s_init: &NeuralState,
    cfg: &PhaseConfig,
    record_params: bool,
) -> Result<(Trajectory, ModelParams)> {
    cfg.validate()?;
    cfg.check_beta()?;
    let rates: Vec<f64> = cfg.eta_rates(params)?.iter().map(|r| r / cfg.beta).collect();
    let mut theta = params.clone();
    let mut states = Vec::with_capacity(cfg.k_steps + 1);
    states.push(s_init.clone());
    let mut thetas = record_params.then(|| vec![theta.clone()]);
    let mut residual = 0.0;
    for _ in 0..cfg.k_steps {
        let current = states.last().expect("non-empty");
        let (next, signal_diff) = {
            let model = theta.clamp(x)?;
            let next = model.nudged_step(current, y, cfg.beta, cfg.activation)?;
            let diff = model.learning_signal_diff(current, &next)?;
            (next, diff)
        };
        theta.axpy_per_tensor(&rates, &signal_diff)?;
        residual = next.max_abs_diff(current)?;
        states.push(next);
        if let Some(ts) = thetas.as_mut() {
            ts.push(theta.clone());
        }
    }
    Ok((
        Trajectory {
            states,
            params_over_time: thetas,
            converged: residual <= cfg.tol,
            residual,
        },
        theta,
    ))
}

/// `Δθ = (1/β)(∂Φ/∂θ(x, s_*^β, θ) − ∂Φ/∂θ(x, s_*, θ))`.
pub fn ep_update(
    params: &ModelParams,
    s_star: &NeuralState,
    s_star_beta: &NeuralState,
    x: &Tensor,
    beta: f64,
) -> Result<ModelParams> {
    if beta == 0.0 {
        return Err(EpError::InvalidConfig("beta must be non-zero for an EP update".into()));
    }
    let model = params.clamp(x)?;
    let diff = model.learning_signal_diff(s_star, s_star_beta)?;
    Ok(diff.scale(1.0 / beta))
}

/// Outcome of [`compare_free_phase_speed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub epsilon: f64,
    pub discrete_steps: usize,
    pub discrete_converged: bool,
    pub energy_steps: usize,
    pub energy_converged: bool,
    /// `energy_steps / discrete_steps`; 1.0 when neither run converged.
    pub ratio: f64,
    pub warning: Option<String>,
}

/// Free phase of the ε-discretized energy dynamics
/// `s ← (1 − ε)·s + ε·σ(∂Φ/∂s)`, which reduces to the discrete dynamics at ε = 1.
pub fn run_energy_free_phase(params: &ModelParams, x: &Tensor, cfg: &PhaseConfig, epsilon: f64) -> Result<Trajectory> {
    cfg.validate()?;
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(EpError::InvalidConfig(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let model = params.clamp(x)?;
    let mut states = vec![params.zero_state()];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cfg.t_max {
        let current = states.last().expect("non-empty");
        let target = model.free_step(current, cfg.activation)?;
        let mut next = current.scale(1.0 - epsilon);
        next.axpy(epsilon, &target)?;
        residual = next.max_abs_diff(current)?;
        states.push(next);
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Trajectory {
        states,
        params_over_time: None,
        converged,
        residual,
    })
}

/// Iterations-to-tolerance of the discrete dynamics versus the ε-discretized
/// energy dynamics on the same model and input.
pub fn compare_free_phase_speed(params: &ModelParams, x: &Tensor, cfg: &PhaseConfig, epsilon: f64) -> Result<SpeedReport> {
    let discrete = run_free_phase(params, x, cfg)?;
    let energy = run_energy_free_phase(params, x, cfg, epsilon)?;
    let (ratio, warning) = match (discrete.converged, energy.converged) {
        (false, false) => (1.0, Some("neither dynamics converged within the step budget".to_string())),
        (false, true) => (
            energy.steps() as f64 / discrete.steps() as f64,
            Some("discrete dynamics did not converge".to_string()),
        ),
        (true, false) => (
            energy.steps() as f64 / discrete.steps() as f64,
            Some("energy dynamics did not converge; ratio is a lower bound".to_string()),
        ),
        (true, true) => (energy.steps() as f64 / discrete.steps() as f64, None),
    };
    Ok(SpeedReport {
        epsilon,
        discrete_steps: discrete.steps(),
        discrete_converged: discrete.converged,
        energy_steps: energy.steps(),
        energy_converged: energy.converged,
        ratio,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind::{HardSigmoid, ShiftedSigmoid};
    use crate::model::{LayeredDenseParams, VectorFieldParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(sizes: &[usize], seed: u64) -> (ModelParams, Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::LayeredDense(LayeredDenseParams::init(sizes, &mut r).unwrap());
        let x = Tensor::vector((0..sizes[0]).map(|_| r.gen_range(0.0..1.0)).collect());
        let y = Tensor::vector((0..*sizes.last().unwrap()).map(|_| r.gen_range(0.0..1.0)).collect());
        (p, x, y)
    }

    fn cfg(kind: ActivationKind) -> PhaseConfig {
        PhaseConfig {
            t_max: 100,
            k_steps: 20,
            beta: 0.1,
            eta: 0.0,
            eta_scales: vec![],
            tol: 1e-8,
            activation: kind,
        }
    }

    #[test]
    fn zero_params_converge_in_one_step() {
        let (p, x, _) = setup(&[4, 6, 2], 1);
        let z = p.zeros_like();
        let traj = run_free_phase(&z, &x, &cfg(HardSigmoid)).unwrap();
        assert_eq!(traj.steps(), 1);
        assert!(traj.converged);
        assert_eq!(traj.residual, 0.0);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_step() {
        let (p, x, _) = setup(&[4, 6, 2], 2);
        let c = PhaseConfig {
            tol: f64::INFINITY,
            ..cfg(HardSigmoid)
        };
        let traj = run_free_phase(&p, &x, &c).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert!(traj.converged);
    }

    #[test]
    fn small_dense_free_phase_settles() {
        for seed in 0..5 {
            let (p, x, _) = setup(&[4, 6, 2], 100 + seed);
            let traj = run_free_phase(&p, &x, &cfg(HardSigmoid)).unwrap();
            assert!(traj.converged, "seed {seed}: residual {}", traj.residual);
            assert!(traj.residual <= 1e-8);
        }
    }

    #[test]
    fn invalid_configs() {
        let (p, x, y) = setup(&[4, 6, 2], 3);
        let bad_t = PhaseConfig {
            t_max: 0,
            ..cfg(HardSigmoid)
        };
        assert!(run_free_phase(&p, &x, &bad_t).is_err());
        let zero_beta = PhaseConfig {
            beta: 0.0,
            ..cfg(HardSigmoid)
        };
        let s = p.zero_state();
        assert!(matches!(
            run_continual_phase(&p, &x, &y, &s, &zero_beta),
            Err(EpError::InvalidConfig(_))
        ));
        assert!(matches!(ep_update(&p, &s, &s, &x, 0.0), Err(EpError::InvalidConfig(_))));
    }

    #[test]
    fn nudged_phase_constant_at_fixed_point() {
        let (p, x, y) = setup(&[4, 6, 2], 4);
        let c = cfg(ShiftedSigmoid);
        let free = run_free_phase(&p, &x, &c).unwrap();
        let s_star = free.final_state().clone();
        // Make s_* an exact fixed point so the zero-β phase cannot drift.
        let fixed = p.clamp(&x).unwrap().free_step(&s_star, c.activation).unwrap();
        let fixed = {
            let mut s = fixed;
            for _ in 0..50 {
                s = p.clamp(&x).unwrap().free_step(&s, c.activation).unwrap();
            }
            s
        };
        let zero_beta = PhaseConfig { beta: 0.0, ..c.clone() };
        let traj = run_nudged_phase(&p, &x, &y, &fixed, &zero_beta).unwrap();
        for s in &traj.states {
            assert!(s.max_abs_diff(&fixed).unwrap() < 1e-12);
        }
        let yhat = fixed.output().clone();
        let traj = run_nudged_phase(&p, &x, &yhat, &fixed, &c).unwrap();
        for s in &traj.states {
            assert!(s.max_abs_diff(&fixed).unwrap() < 1e-12);
        }
    }

    #[test]
    fn nudged_phase_matches_resimulation() {
        let (p, x, y) = setup(&[5, 7, 3], 5);
        let c = cfg(HardSigmoid);
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let traj = run_nudged_phase(&p, &x, &y, &s_star, &c).unwrap();
        assert_eq!(traj.states.len(), c.k_steps + 1);
        let mut s = s_star.clone();
        for (t, recorded) in traj.states.iter().enumerate() {
            assert!(recorded.max_abs_diff(&s).unwrap() <= 1e-12, "step {t}");
            s = crate::model::nudged_step(&x, &s, &p, &y, c.beta, c.activation).unwrap();
        }
    }

    #[test]
    fn continual_with_zero_eta_is_the_nudged_phase() {
        let (p, x, y) = setup(&[5, 7, 3], 6);
        let c = cfg(HardSigmoid);
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let nudged = run_nudged_phase(&p, &x, &y, &s_star, &c).unwrap();
        let continual = run_continual_phase(&p, &x, &y, &s_star, &c).unwrap();
        assert_eq!(nudged.states, continual.states);
        let thetas = continual.params_over_time.unwrap();
        assert_eq!(thetas.len(), c.k_steps + 1);
        assert!(thetas.iter().all(|t| t == &p));
    }

    #[test]
    fn continual_weight_change_telescopes() {
        let (p, x, y) = setup(&[5, 7, 3], 7);
        let c = PhaseConfig {
            eta: 0.01,
            ..cfg(ShiftedSigmoid)
        };
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let traj = run_continual_phase(&p, &x, &y, &s_star, &c).unwrap();
        let last = traj.params_over_time.as_ref().unwrap().last().unwrap();
        let model = p.clamp(&x).unwrap();
        let expected_change = model
            .d_phi_d_theta(traj.final_state())
            .unwrap()
            .sub(&model.d_phi_d_theta(&s_star).unwrap())
            .unwrap()
            .scale(c.eta / c.beta);
        let change = last.sub(&p).unwrap();
        assert!(change.max_abs_diff(&expected_change).unwrap() < 1e-12);
        assert!(change.tensors().iter().any(|t| t.max_abs() > 0.0));
    }

    #[test]
    fn single_synapse_ep_update() {
        let p = ModelParams::LayeredDense(LayeredDenseParams {
            weights: vec![Tensor::matrix(&[vec![0.3]]).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
        });
        let x = Tensor::vector(vec![0.5]);
        let s_star = NeuralState::new(vec![Tensor::vector(vec![1.0])]);
        let s_beta = NeuralState::new(vec![Tensor::vector(vec![1.1])]);
        let dw = ep_update(&p, &s_star, &s_beta, &x, 0.1).unwrap();
        let w = dw.tensors()[0].data()[0];
        assert!((w - 0.5).abs() < 1e-12, "{w}");
        let same = ep_update(&p, &s_star, &s_star, &x, 0.1).unwrap();
        assert!(same.tensors().iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn free_phase_reaches_same_state_from_different_starts() {
        let (p, x, _) = setup(&[4, 6, 2], 8);
        let c = cfg(ShiftedSigmoid);
        let a = run_free_phase(&p, &x, &c).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut start = p.zero_state();
        for l in &mut start.layers {
            l.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
        }
        let b = run_free_phase_from(&p, &x, start, &c).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.final_state().max_abs_diff(b.final_state()).unwrap() <= 10.0 * c.tol);
    }

    #[test]
    fn vector_field_continual_phase_leaves_backward_weights() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let p = ModelParams::VectorField(VectorFieldParams::init(&[4, 6, 3], &mut r).unwrap());
        let x = Tensor::vector(vec![0.2, 0.4, 0.6, 0.8]);
        let y = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let c = PhaseConfig {
            eta: 0.05,
            ..cfg(HardSigmoid)
        };
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let (_, theta) = continual_phase(&p, &x, &y, &s_star, &c, false).unwrap();
        match (&theta, &p) {
            (ModelParams::VectorField(a), ModelParams::VectorField(b)) => {
                assert_eq!(a.backward, b.backward);
                assert_ne!(a.forward, b.forward);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn speed_ratio_is_one_at_unit_epsilon() {
        let (p, x, _) = setup(&[4, 6, 2], 11);
        let r = compare_free_phase_speed(&p, &x, &cfg(HardSigmoid), 1.0).unwrap();
        assert_eq!(r.discrete_steps, r.energy_steps);
        assert_eq!(r.ratio, 1.0);
        let r = compare_free_phase_speed(&p, &x, &cfg(HardSigmoid), 0.1).unwrap();
        assert!(r.ratio > 1.0, "{r:?}");
    }

    #[test]
    fn speed_without_convergence_reports_unit_ratio() {
        let (p, x, _) = setup(&[4, 6, 2], 12);
        let c = PhaseConfig {
            t_max: 1,
            tol: 1e-300,
            ..cfg(HardSigmoid)
        };
        let r = compare_free_phase_speed(&p, &x, &c, 0.1).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn trajectory_csv_rows() {
        let (p, x, _) = setup(&[2, 3, 2], 13);
        let c = PhaseConfig {
            t_max: 2,
            tol: 1e-300,
            ..cfg(HardSigmoid)
        };
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,layer,neuron_index,value");
        assert_eq!(lines.len(), 1 + 3 * 5);
    }
}
