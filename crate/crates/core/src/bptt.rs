//! Backpropagation through time over a recorded free phase.
//!
//! The free phase is viewed as the unrolled computation
//! `s_{i+1} = σ(F(x, s_i, θ_{i+1}))`, `i = 0 … T−1`, with every `θ_i` equal to
//! the shared θ, and loss `L = ½‖ŷ_T − y‖²`. Reverse accumulation yields
//!
//! - `grad_s[t]     = ∂L/∂s_{T−t}` for `t = 0 … K`
//! - `grad_theta[t] = ∂L/∂θ_{T−t}` for `t = 0 … K−1`, the partial derivative
//!   with respect to the copy of θ that produced `s_{T−t}`.
//!
//! Summing `grad_theta` over the full unroll gives the tied gradient `dL/dθ`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{activate, activate_prime, ActivationKind};
use crate::dynamics::{run_free_phase, PhaseConfig, Trajectory};
use crate::error::{EpError, Result};
use crate::model::{cost, Clamped, ModelParams, NeuralState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpttGradients {
    pub grad_s: Vec<NeuralState>,
    pub grad_theta: Vec<ModelParams>,
    pub loss: f64,
    /// Set when the free phase had not converged, so the steady-state premise
    /// behind the EP/BPTT comparison does not hold.
    pub premise_warning: Option<String>,
}

impl BpttGradients {
    /// `Σ_t grad_theta[t]`.
    pub fn summed_theta(&self) -> Option<ModelParams> {
        let mut iter = self.grad_theta.iter();
        let mut acc = iter.next()?.clone();
        for g in iter {
            acc.axpy(1.0, g).expect("gradients share a layout");
        }
        Some(acc)
    }
}

fn output_error(s: &NeuralState, y: &Tensor) -> Result<NeuralState> {
    let mut a = s.zeros_like();
    let diff = s.output().sub(y).or_else(|_| {
        Err(EpError::Shape {
            op: "bptt target",
            expected: s.output().shape().to_vec(),
            found: y.shape().to_vec(),
        })
    })?;
    a.output_mut().data_mut().copy_from_slice(diff.data());
    Ok(a)
}

/// Pre-activation adjoint `σ′(F(x, s_prev, θ)) ⊙ a`.
fn through_sigma(model: &Clamped<'_>, s_prev: &NeuralState, a: &NeuralState, kind: ActivationKind) -> Result<NeuralState> {
    let u = model.pre_activation(s_prev)?;
    let d = NeuralState::new(u.layers.iter().map(|l| activate_prime(l, kind)).collect());
    d.hadamard(a)
}

/// Reverse accumulation through the last `k` steps of `trajectory`.
pub fn bptt_gradients(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    trajectory: &Trajectory,
    k: usize,
    kind: ActivationKind,
) -> Result<BpttGradients> {
    let t_len = trajectory.steps();
    if k > t_len {
        return Err(EpError::InvalidConfig(format!(
            "K = {k} exceeds the {t_len} recorded free-phase steps"
        )));
    }
    let model = params.clamp(x)?;
    let s_final = trajectory.final_state();
    let loss = cost(s_final, y)?;
    let mut a = output_error(s_final, y)?;
    let mut grad_s = Vec::with_capacity(k + 1);
    let mut grad_theta = Vec::with_capacity(k);
    grad_s.push(a.clone());
    for t in 0..k {
        let s_prev = &trajectory.states[t_len - t - 1];
        let g = through_sigma(&model, s_prev, &a, kind)?;
        grad_theta.push(model.param_vjp(s_prev, &g)?);
        a = model.state_vjp(&g)?;
        grad_s.push(a.clone());
    }
    Ok(BpttGradients {
        grad_s,
        grad_theta,
        loss,
        premise_warning: (!trajectory.converged).then(|| {
            format!(
                "free phase did not converge (residual {:.3e}); steady-state premise violated",
                trajectory.residual
            )
        }),
    })
}

/// Tied gradient `dL/dθ` over the whole recorded trajectory, without keeping
/// per-step gradients. Returns the gradient and the loss.
pub fn trajectory_gradient(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    trajectory: &Trajectory,
    kind: ActivationKind,
) -> Result<(ModelParams, f64)> {
    let model = params.clamp(x)?;
    let t_len = trajectory.steps();
    let s_final = trajectory.final_state();
    let loss = cost(s_final, y)?;
    let mut a = output_error(s_final, y)?;
    let mut pairs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let s_prev = &trajectory.states[t_len - t - 1];
        let g = through_sigma(&model, s_prev, &a, kind)?;
        a = model.state_vjp(&g)?;
        pairs.push((s_prev, g));
    }
    Ok((model.param_vjp_sum(&pairs)?, loss))
}

/// Runs the free phase, then returns `Σ_t grad_theta[t]` over the full unroll.
pub fn total_gradient(params: &ModelParams, x: &Tensor, y: &Tensor, cfg: &PhaseConfig) -> Result<ModelParams> {
    let traj = run_free_phase(params, x, cfg)?;
    Ok(trajectory_gradient(params, x, y, &traj, cfg.activation)?.0)
}

/// Replays the unrolled free dynamics for exactly `steps` steps from
/// `s_start`, using `at_step(i)` as the parameters of step `i` (counted from
/// 0 at `s_start`). Returns the final state and, for the hard sigmoid, the
/// derivative pattern seen along the way.
fn replay(
    s_start: &NeuralState,
    x: &Tensor,
    steps: usize,
    kind: ActivationKind,
    at_step: impl Fn(usize) -> ModelParams,
) -> Result<(NeuralState, Vec<bool>)> {
    let mut s = s_start.clone();
    let mut pattern = Vec::new();
    for i in 0..steps {
        let p = at_step(i);
        let u = p.clamp(x)?.pre_activation(&s)?;
        if kind == ActivationKind::HardSigmoid {
            for l in &u.layers {
                pattern.extend(l.data().iter().map(|&v| v > 0.0 && v < 1.0));
            }
        }
        s = NeuralState::new(u.layers.iter().map(|l| activate(l, kind)).collect());
    }
    Ok((s, pattern))
}

/// Loss of the free dynamics unrolled for exactly `steps` steps from zero
/// with a tied θ.
pub fn unrolled_loss(params: &ModelParams, x: &Tensor, y: &Tensor, steps: usize, kind: ActivationKind) -> Result<f64> {
    let (s, _) = replay(&params.zero_state(), x, steps, kind, |_| params.clone())?;
    cost(&s, y)
}

/// One compared coordinate of a finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    /// `theta[t].<name>`, `s[t].layer<k>` or `total.<name>`.
    pub tensor: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Coordinates whose ±h window crosses a hard-sigmoid kink are reported
    /// but excluded from the error statistics.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub premise_warning: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }

    /// Writes `tensor,coordinate,analytic,numeric,rel_err` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| EpError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "tensor,coordinate,analytic,numeric,rel_err")?;
            for e in &self.entries {
                let rel = if e.skipped { "skipped".to_string() } else { format!("{:e}", e.rel_err) };
                writeln!(w, "{},{},{:e},{:e},{}", e.tensor, e.coordinate, e.analytic, e.numeric, rel)?;
            }
            w.flush()
        };
        emit().map_err(|e| EpError::io(path, e))
    }
}

/// Relative error with an absolute floor so that entries of order `floor`
/// and below are judged on absolute accuracy. Exact agreement (including
/// zero against zero) is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    if analytic == numeric {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub phase: PhaseConfig,
    /// Number of backward steps checked.
    pub k: usize,
    pub h: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

/// Checks [`bptt_gradients`] (per-step parameter and state gradients) and
/// the tied total gradient against central finite differences of the
/// replayed unroll.
pub fn finite_diff_check(params: &ModelParams, x: &Tensor, y: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&cfg.h) {
        return Err(EpError::InvalidConfig(format!("h must lie in [1e-7, 1e-4], got {}", cfg.h)));
    }
    let kind = cfg.phase.activation;
    let traj = run_free_phase(params, x, &cfg.phase)?;
    let t_len = traj.steps();
    let grads = bptt_gradients(params, x, y, &traj, cfg.k.min(t_len), kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = params.tensor_names();
    let sample = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        if len > cfg.coords_per_tensor {
            idx.shuffle(rng);
            idx.truncate(cfg.coords_per_tensor);
            idx.sort_unstable();
        }
        idx
    };
    let h = cfg.h;
    let mut entries = Vec::new();
    let mut push = |tensor: String, coordinate: usize, analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        let skipped = plus.1 != minus.1;
        entries.push(GradCheckEntry {
            tensor,
            coordinate,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
            skipped,
        });
    };

    // Per-step parameter gradients: perturb only the copy of θ used at step
    // T−t−1 → T−t, replaying from the recorded state before it.
    for (t, g) in grads.grad_theta.iter().enumerate() {
        let start = t_len - t - 1;
        for (ti, tensor) in g.tensors().iter().enumerate() {
            for i in sample(tensor.len(), &mut rng) {
                let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    let mut bumped = params.clone();
                    bumped.tensors_mut()[ti].data_mut()[i] += delta;
                    let (s, pat) = replay(&traj.states[start], x, t + 1, kind, |step| {
                        if step == 0 {
                            bumped.clone()
                        } else {
                            params.clone()
                        }
                    })?;
                    Ok((cost(&s, y)?, pat))
                };
                push(format!("theta[{t}].{}", names[ti]), i, tensor.data()[i], eval(h)?, eval(-h)?);
            }
        }
    }

    // Per-step state gradients: perturb s_{T−t} and replay t steps.
    for (t, g) in grads.grad_s.iter().enumerate() {
        let base = &traj.states[t_len - t];
        for (li, layer) in g.layers.iter().enumerate() {
            for i in sample(layer.len(), &mut rng) {
                let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    let mut s = base.clone();
                    s.layers[li].data_mut()[i] += delta;
                    let (s, pat) = replay(&s, x, t, kind, |_| params.clone())?;
                    Ok((cost(&s, y)?, pat))
                };
                push(format!("s[{t}].layer{}", li + 1), i, layer.data()[i], eval(h)?, eval(-h)?);
            }
        }
    }

    // Tied gradient over the full unroll.
    let (total, _) = trajectory_gradient(params, x, y, &traj, kind)?;
    for (ti, tensor) in total.tensors().iter().enumerate() {
        for i in sample(tensor.len(), &mut rng) {
            let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut bumped = params.clone();
                bumped.tensors_mut()[ti].data_mut()[i] += delta;
                let (s, pat) = replay(&bumped.zero_state(), x, t_len, kind, |_| bumped.clone())?;
                Ok((cost(&s, y)?, pat))
            };
            push(format!("total.{}", names[ti]), i, tensor.data()[i], eval(h)?, eval(-h)?);
        }
    }

    let checked: Vec<f64> = entries.iter().filter(|e| !e.skipped).map(|e| e.rel_err).collect();
    let max_rel_err = checked.iter().cloned().fold(0.0, f64::max);
    let mean_rel_err = if checked.is_empty() {
        0.0
    } else {
        checked.iter().sum::<f64>() / checked.len() as f64
    };
    Ok(GradCheckReport {
        checked: checked.len(),
        skipped: entries.len() - checked.len(),
        entries,
        max_rel_err,
        mean_rel_err,
        premise_warning: grads.premise_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind::{HardSigmoid, ShiftedSigmoid};
    use crate::model::LayeredDenseParams;
    use rand::Rng;

    fn setup(sizes: &[usize], seed: u64) -> (ModelParams, Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::LayeredDense(LayeredDenseParams::init(sizes, &mut r).unwrap());
        let x = Tensor::vector((0..sizes[0]).map(|_| r.gen_range(0.0..1.0)).collect());
        let y = Tensor::vector((0..*sizes.last().unwrap()).map(|_| r.gen_range(0.0..1.0)).collect());
        (p, x, y)
    }

    fn phase(kind: ActivationKind) -> PhaseConfig {
        PhaseConfig {
            t_max: 50,
            k_steps: 10,
            beta: 0.1,
            eta: 0.0,
            eta_scales: vec![],
            tol: 1e-300,
            activation: kind,
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let (p, x, _) = setup(&[4, 6, 2], 1);
        let c = phase(ShiftedSigmoid);
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let y = traj.final_state().output().clone();
        let g = bptt_gradients(&p, &x, &y, &traj, 10, c.activation).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad_s.iter().all(|s| s.layers.iter().all(|l| l.max_abs() == 0.0)));
        assert!(g.grad_theta.iter().all(|t| t.tensors().iter().all(|l| l.max_abs() == 0.0)));
    }

    #[test]
    fn k_zero_returns_the_loss_gradient() {
        let (p, x, y) = setup(&[4, 6, 2], 2);
        let c = phase(ShiftedSigmoid);
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let g = bptt_gradients(&p, &x, &y, &traj, 0, c.activation).unwrap();
        assert_eq!(g.grad_s.len(), 1);
        assert!(g.grad_theta.is_empty());
        assert_eq!(g.grad_s[0].layers[0].max_abs(), 0.0);
        let expected = traj.final_state().output().sub(&y).unwrap();
        assert_eq!(g.grad_s[0].output(), &expected);
    }

    #[test]
    fn k_beyond_trajectory_is_rejected() {
        let (p, x, y) = setup(&[4, 6, 2], 3);
        let c = PhaseConfig {
            t_max: 5,
            ..phase(ShiftedSigmoid)
        };
        let traj = run_free_phase(&p, &x, &c).unwrap();
        assert!(matches!(
            bptt_gradients(&p, &x, &y, &traj, 6, c.activation),
            Err(EpError::InvalidConfig(_))
        ));
    }

    #[test]
    fn non_converged_trajectory_is_flagged() {
        let (p, x, y) = setup(&[4, 6, 2], 4);
        let c = PhaseConfig {
            t_max: 1,
            ..phase(ShiftedSigmoid)
        };
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let g = bptt_gradients(&p, &x, &y, &traj, 1, c.activation).unwrap();
        assert!(g.premise_warning.is_some());
    }

    #[test]
    fn smooth_instance_matches_finite_differences() {
        let (p, x, y) = setup(&[4, 6, 2], 5);
        let cfg = GradCheckConfig {
            phase: phase(ShiftedSigmoid),
            k: 10,
            h: 1e-5,
            coords_per_tensor: 20,
            seed: 0,
        };
        let report = finite_diff_check(&p, &x, &y, &cfg).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_network_checks_trivially() {
        let (p, x, y) = setup(&[4, 6, 2], 6);
        let z = p.zeros_like();
        let cfg = GradCheckConfig {
            phase: phase(HardSigmoid),
            k: 3,
            h: 1e-5,
            coords_per_tensor: 20,
            seed: 0,
        };
        let report = finite_diff_check(&z, &x, &y, &cfg).unwrap();
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn kink_straddling_coordinates_are_skipped() {
        // Single unit whose pre-activation sits exactly on the lower kink.
        let p = ModelParams::LayeredDense(LayeredDenseParams {
            weights: vec![Tensor::matrix(&[vec![1.0]]).unwrap()],
            biases: vec![Tensor::vector(vec![-0.5])],
        });
        let x = Tensor::vector(vec![0.5]);
        let y = Tensor::vector(vec![1.0]);
        let cfg = GradCheckConfig {
            phase: PhaseConfig {
                t_max: 3,
                ..phase(HardSigmoid)
            },
            k: 2,
            h: 1e-5,
            coords_per_tensor: 20,
            seed: 0,
        };
        let report = finite_diff_check(&p, &x, &y, &cfg).unwrap();
        assert!(report.skipped > 0);
        assert!(report.entries.iter().any(|e| e.skipped && e.tensor.starts_with("theta")));
    }

    #[test]
    fn two_step_single_synapse_chain_rule() {
        // s1 = σ(w·x + b), s2 = σ(w·x + b) as well: one layer has no recurrence,
        // so dL/dw = (s − y)·σ′(u)·x from the last step only.
        let w = 0.4;
        let b = 0.1;
        let xv = 0.7;
        let p = ModelParams::LayeredDense(LayeredDenseParams {
            weights: vec![Tensor::matrix(&[vec![w]]).unwrap()],
            biases: vec![Tensor::vector(vec![b])],
        });
        let x = Tensor::vector(vec![xv]);
        let y = Tensor::vector(vec![0.9]);
        let c = PhaseConfig {
            t_max: 2,
            ..phase(ShiftedSigmoid)
        };
        let u = w * xv + b;
        let s = ShiftedSigmoid.apply(u);
        let expected = (s - 0.9) * ShiftedSigmoid.derivative(u) * xv;
        let g = total_gradient(&p, &x, &y, &c).unwrap();
        assert!((g.tensors()[0].data()[0] - expected).abs() < 1e-14);
        let gb = (s - 0.9) * ShiftedSigmoid.derivative(u);
        assert!((g.tensors()[1].data()[0] - gb).abs() < 1e-14);
    }

    #[test]
    fn per_step_gradients_sum_to_total() {
        let (p, x, y) = setup(&[4, 6, 2], 7);
        let c = phase(ShiftedSigmoid);
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let g = bptt_gradients(&p, &x, &y, &traj, traj.steps(), c.activation).unwrap();
        let summed = g.summed_theta().unwrap();
        let total = total_gradient(&p, &x, &y, &c).unwrap();
        assert!(summed.max_abs_diff(&total).unwrap() < 1e-12);
    }

    #[test]
    fn total_gradient_matches_tied_finite_differences() {
        let (p, x, y) = setup(&[4, 6, 2], 8);
        let c = PhaseConfig {
            t_max: 30,
            ..phase(ShiftedSigmoid)
        };
        let total = total_gradient(&p, &x, &y, &c).unwrap();
        let h = 1e-5;
        for (ti, t) in total.tensors().iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= h;
                let numeric = (unrolled_loss(&plus, &x, &y, 30, c.activation).unwrap()
                    - unrolled_loss(&minus, &x, &y, 30, c.activation).unwrap())
                    / (2.0 * h);
                assert!(relative_error(t.data()[i], numeric) < 1e-5);
            }
        }
    }

    #[test]
    fn state_gradient_support_grows_backwards() {
        let (p, x, y) = setup(&[3, 4, 5, 6, 2], 9);
        let c = phase(ShiftedSigmoid);
        let traj = run_free_phase(&p, &x, &c).unwrap();
        let g = bptt_gradients(&p, &x, &y, &traj, 4, c.activation).unwrap();
        // Layers are 1..=4, output is layer 4 (index 3). After t steps only
        // layers within t hops of the output can be non-zero.
        for t in 0..=3 {
            for li in 0..4 {
                let hops = 3 - li;
                let nonzero = g.grad_s[t].layers[li].max_abs() > 0.0;
                if hops > t {
                    assert!(!nonzero, "t={t} layer {li}");
                } else if (t - hops) % 2 == 0 {
                    assert!(nonzero, "t={t} layer {li}");
                }
            }
        }
    }
}
