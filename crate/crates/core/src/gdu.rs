//! Step-by-step comparison of EP update processes with BPTT gradients.
//!
//! The EP processes are read off a second phase started from the free
//! steady state:
//!
//! - `Δ_s(t) = (s_{t+1} − s_t) / β`
//! - `Δ_θ(t) = (∂Φ/∂θ(s_{t+1}) − ∂Φ/∂θ(s_t)) / β`, both terms at `θ_t`
//!
//! and `Δ(t)` is paired with `−∇(t)` from [`crate::bptt`]. Agreement is
//! measured per tensor and per step by a symmetric relative squared error
//! and by cosine similarity. The mean cosine over trainable parameter
//! tensors and steps is what [`GduReport::theta_cosine_mean`] reports and is
//! used as the degree to which a network satisfies the EP/BPTT equivalence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bptt::{bptt_gradients, BpttGradients};
use crate::dynamics::{run_continual_phase, run_free_phase, PhaseConfig};
use crate::error::{EpError, Result};
use crate::model::{ModelParams, NeuralState};
use crate::tensor::{dot, Tensor};

const EPS0: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpProcesses {
    pub delta_s: Vec<NeuralState>,
    pub delta_theta: Vec<ModelParams>,
    pub beta: f64,
    pub eta: f64,
}

impl EpProcesses {
    pub fn len(&self) -> usize {
        self.delta_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_s.is_empty()
    }
}

/// Runs the second phase from `s_star` (η = 0 gives standard EP, η > 0
/// continual EP) and maps its trajectory to the EP processes.
pub fn compute_ep_processes(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    s_star: &NeuralState,
    cfg: &PhaseConfig,
) -> Result<EpProcesses> {
    cfg.check_beta()?;
    let traj = run_continual_phase(params, x, y, s_star, cfg)?;
    let thetas = traj.params_over_time.as_ref().expect("continual phase records parameters");
    let inv = 1.0 / cfg.beta;
    let mut delta_s = Vec::with_capacity(cfg.k_steps);
    let mut delta_theta = Vec::with_capacity(cfg.k_steps);
    for t in 0..traj.steps() {
        let (s0, s1) = (&traj.states[t], &traj.states[t + 1]);
        delta_s.push(s1.sub(s0)?.scale(inv));
        let model = thetas[t].clamp(x)?;
        let diff = model.learning_signal_diff(s0, s1)?;
        delta_theta.push(diff.scale(inv));
    }
    Ok(EpProcesses {
        delta_s,
        delta_theta,
        beta: cfg.beta,
        eta: cfg.eta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    State,
    Param,
}

/// Agreement of `Δ(t)` with `−∇(t)` for one tensor at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GduEntry {
    pub kind: ProcessKind,
    pub tensor: String,
    pub t: usize,
    pub rel_mse: f64,
    /// `None` when exactly one side is zero.
    pub cosine: Option<f64>,
    /// `‖Δ + ∇‖²`
    pub sq_err: f64,
    /// `‖Δ‖² + ‖∇‖²`
    pub sq_norms: f64,
}

/// Aggregates over `t` for one tensor. `rel_mse` pools squared errors and
/// norms over steps; cosine statistics cover the steps where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub kind: ProcessKind,
    pub tensor: String,
    pub rel_mse: f64,
    pub cosine_mean: f64,
    pub cosine_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GduReport {
    pub entries: Vec<GduEntry>,
    pub tensors: Vec<TensorSummary>,
    pub theta_rel_mse: f64,
    pub theta_cosine_mean: f64,
    pub theta_cosine_min: f64,
    pub state_rel_mse: f64,
    pub state_cosine_mean: f64,
    pub state_cosine_min: f64,
    /// Pairs with exactly one zero side, and the largest norm seen on the
    /// non-zero side. Structurally zero BPTT gradients meet EP differences
    /// at the free-phase residual level here.
    pub unpaired: usize,
    pub unpaired_max_norm: f64,
    pub premise_warning: Option<String>,
}

/// `‖Δ + ∇‖² / (‖Δ‖² + ‖∇‖² + ε₀)`.
pub fn rel_mse(delta: &[f64], grad: &[f64]) -> f64 {
    let num: f64 = delta.iter().zip(grad).map(|(d, g)| (d + g) * (d + g)).sum();
    num / (dot(delta, delta) + dot(grad, grad) + EPS0)
}

/// `cos(Δ, −∇)`. Two zero vectors count as an exact match; a zero vector
/// against a non-zero one has no cosine.
pub fn cosine_to_negative(delta: &[f64], grad: &[f64]) -> Option<f64> {
    let nd = dot(delta, delta);
    let ng = dot(grad, grad);
    match (nd == 0.0, ng == 0.0) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => None,
        (false, false) => Some((-dot(delta, grad) / (nd.sqrt() * ng.sqrt())).clamp(-1.0, 1.0)),
    }
}

fn entry(kind: ProcessKind, tensor: String, t: usize, delta: &[f64], grad: &[f64]) -> GduEntry {
    let sq_err: f64 = delta.iter().zip(grad).map(|(d, g)| (d + g) * (d + g)).sum();
    let sq_norms = dot(delta, delta) + dot(grad, grad);
    GduEntry {
        kind,
        tensor,
        t,
        rel_mse: sq_err / (sq_norms + EPS0),
        cosine: cosine_to_negative(delta, grad),
        sq_err,
        sq_norms,
    }
}

fn pooled<'a>(entries: impl Iterator<Item = &'a GduEntry>) -> f64 {
    let (e, n) = entries.fold((0.0, 0.0), |(e, n), x| (e + x.sq_err, n + x.sq_norms));
    e / (n + EPS0)
}

/// Mean and minimum over defined cosines; (1, 1) when none are defined.
fn cosine_stats<'a>(entries: impl Iterator<Item = &'a GduEntry>) -> (f64, f64) {
    let c: Vec<f64> = entries.filter_map(|e| e.cosine).collect();
    if c.is_empty() {
        (1.0, 1.0)
    } else {
        (c.iter().sum::<f64>() / c.len() as f64, c.iter().cloned().fold(1.0, f64::min))
    }
}

fn state_names(s: &NeuralState) -> Vec<String> {
    (1..=s.num_layers()).map(|k| format!("s{k}")).collect()
}

/// Pairs `Δ(t)` with `−∇(t)` for `t < K`. Frozen parameter tensors (the
/// vector field's backward weights) are left out of the parameter metrics.
pub fn compare_to_bptt(ep: &EpProcesses, bptt: &BpttGradients) -> Result<GduReport> {
    let k = ep.len();
    if bptt.grad_theta.len() != k || bptt.grad_s.len() < k || ep.delta_theta.len() != k {
        return Err(EpError::InvalidInput(format!(
            "process lengths differ: EP {k}, BPTT {} parameter / {} state steps",
            bptt.grad_theta.len(),
            bptt.grad_s.len()
        )));
    }
    let mut entries = Vec::new();
    for t in 0..k {
        let (d, g) = (&ep.delta_theta[t], &bptt.grad_theta[t]);
        let names = d.tensor_names();
        let mask = d.trainable_mask();
        for (i, (dt, gt)) in d.tensors().iter().zip(g.tensors()).enumerate() {
            if !mask[i] {
                continue;
            }
            entries.push(entry(ProcessKind::Param, names[i].clone(), t, dt.data(), gt.data()));
        }
        let (d, g) = (&ep.delta_s[t], &bptt.grad_s[t]);
        for (name, (dl, gl)) in state_names(d).into_iter().zip(d.layers.iter().zip(&g.layers)) {
            entries.push(entry(ProcessKind::State, name, t, dl.data(), gl.data()));
        }
    }

    let mut tensors: Vec<TensorSummary> = Vec::new();
    for e in entries.iter().filter(|e| e.t == 0) {
        let of = || entries.iter().filter(|o| o.kind == e.kind && o.tensor == e.tensor);
        let (cosine_mean, cosine_min) = cosine_stats(of());
        tensors.push(TensorSummary {
            kind: e.kind,
            tensor: e.tensor.clone(),
            rel_mse: pooled(of()),
            cosine_mean,
            cosine_min,
        });
    }
    let of = |kind: ProcessKind| entries.iter().filter(move |e| e.kind == kind);
    let (theta_cosine_mean, theta_cosine_min) = cosine_stats(of(ProcessKind::Param));
    let (state_cosine_mean, state_cosine_min) = cosine_stats(of(ProcessKind::State));
    let unpaired: Vec<&GduEntry> = entries.iter().filter(|e| e.cosine.is_none()).collect();
    Ok(GduReport {
        theta_rel_mse: pooled(of(ProcessKind::Param)),
        theta_cosine_mean,
        theta_cosine_min,
        state_rel_mse: pooled(of(ProcessKind::State)),
        state_cosine_mean,
        state_cosine_min,
        unpaired: unpaired.len(),
        unpaired_max_norm: unpaired.iter().map(|e| e.sq_norms.sqrt()).fold(0.0, f64::max),
        entries,
        tensors,
        premise_warning: bptt.premise_warning.clone(),
    })
}

impl GduReport {
    /// Writes the report as pretty JSON.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| EpError::InvalidInput(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| EpError::io(path, e))
    }
}

/// Everything produced by one run of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GduRun {
    pub ep: EpProcesses,
    pub bptt: BpttGradients,
    pub report: GduReport,
    pub free_steps: usize,
}

/// Free phase (at most `T` steps), BPTT over its last `K` steps, EP
/// processes over `K` second-phase steps, and their comparison. A free phase
/// that settles in fewer than `K` steps is continued at its steady state
/// until it spans `K` steps.
pub fn run_gdu(params: &ModelParams, x: &Tensor, y: &Tensor, cfg: &PhaseConfig) -> Result<GduRun> {
    let mut free = run_free_phase(params, x, cfg)?;
    let model = params.clamp(x)?;
    while free.steps() < cfg.k_steps {
        let next = model.free_step(free.final_state(), cfg.activation)?;
        free.residual = next.max_abs_diff(free.final_state())?;
        free.states.push(next);
    }
    let bptt = bptt_gradients(params, x, y, &free, cfg.k_steps, cfg.activation)?;
    let ep = compute_ep_processes(params, x, y, free.final_state(), cfg)?;
    let report = compare_to_bptt(&ep, &bptt)?;
    Ok(GduRun {
        ep,
        bptt,
        report,
        free_steps: free.steps(),
    })
}

/// Flattened `(Δ_θ, Δ_s)` over all steps, trainable tensors only.
fn flatten(p: &EpProcesses) -> (Vec<f64>, Vec<f64>) {
    let mut theta = Vec::new();
    let mut state = Vec::new();
    for (d, s) in p.delta_theta.iter().zip(&p.delta_s) {
        for (t, keep) in d.tensors().iter().zip(d.trainable_mask()) {
            if keep {
                theta.extend_from_slice(t.data());
            }
        }
        for l in &s.layers {
            state.extend_from_slice(l.data());
        }
    }
    (theta, state)
}

/// Agreement between two runs of the EP processes, e.g. continual against
/// standard EP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessDistance {
    /// Pooled `‖a − b‖² / (‖a‖² + ‖b‖²)` for weights and states.
    pub theta_rel_mse: f64,
    pub state_rel_mse: f64,
    /// `‖a − b‖ / ‖b‖`, which keeps growing once the processes are unrelated.
    pub theta_divergence: f64,
    pub state_divergence: f64,
}

pub fn process_distance(a: &EpProcesses, b: &EpProcesses) -> Result<ProcessDistance> {
    if a.len() != b.len() {
        return Err(EpError::InvalidInput(format!(
            "process lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (ta, sa) = flatten(a);
    let (tb, sb) = flatten(b);
    if ta.len() != tb.len() || sa.len() != sb.len() {
        return Err(EpError::InvalidInput("processes come from different architectures".into()));
    }
    let measure = |x: &[f64], y: &[f64]| {
        let diff: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
        let rel = diff / (dot(x, x) + dot(y, y) + EPS0);
        let div = (diff / (dot(y, y) + EPS0)).sqrt();
        (rel, div)
    };
    let (theta_rel_mse, theta_divergence) = measure(&ta, &tb);
    let (state_rel_mse, state_divergence) = measure(&sa, &sb);
    Ok(ProcessDistance {
        theta_rel_mse,
        state_rel_mse,
        theta_divergence,
        state_divergence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepRow {
    pub beta: f64,
    pub theta_rel_mse: f64,
    pub state_rel_mse: f64,
    pub theta_cosine_mean: f64,
    pub state_cosine_mean: f64,
}

/// Runs [`run_gdu`] for each β (positive, strictly decreasing).
pub fn beta_sweep(params: &ModelParams, x: &Tensor, y: &Tensor, cfg: &PhaseConfig, betas: &[f64]) -> Result<Vec<BetaSweepRow>> {
    if betas.iter().any(|&b| !(b > 0.0)) || betas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(EpError::InvalidConfig(format!(
            "betas must be positive and strictly decreasing, got {betas:?}"
        )));
    }
    betas
        .iter()
        .map(|&beta| {
            let run = run_gdu(params, x, y, &PhaseConfig { beta, ..cfg.clone() })?;
            Ok(BetaSweepRow {
                beta,
                theta_rel_mse: run.report.theta_rel_mse,
                state_rel_mse: run.report.state_rel_mse,
                theta_cosine_mean: run.report.theta_cosine_mean,
                state_cosine_mean: run.report.state_cosine_mean,
            })
        })
        .collect()
}

/// One row of the process CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct GduCsvRow {
    pub tensor: String,
    pub coord_index: usize,
    pub t: usize,
    pub ep_value: f64,
    pub minus_bptt_value: f64,
}

pub const GDU_CSV_HEADER: &str = "tensor,coord_index,t,ep_value,minus_bptt_value";

/// Writes `Δ(t)` and `−∇(t)` for up to 8 coordinates per tensor, sampled
/// with a fixed seed, for every tensor listed in `report`.
pub fn emit_gdu_csv(report: &GduReport, ep: &EpProcesses, bptt: &BpttGradients, path: impl AsRef<Path>) -> Result<()> {
    const PER_TENSOR: usize = 8;
    const SEED: u64 = 0x6d75;
    let path = path.as_ref();
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for summary in &report.tensors {
        let series: Vec<(&Tensor, &Tensor)> = (0..ep.len())
            .map(|t| match summary.kind {
                ProcessKind::Param => {
                    let i = ep.delta_theta[t]
                        .tensor_names()
                        .iter()
                        .position(|n| *n == summary.tensor)
                        .expect("report tensors come from the same processes");
                    (ep.delta_theta[t].tensors()[i], bptt.grad_theta[t].tensors()[i])
                }
                ProcessKind::State => {
                    let k: usize = summary.tensor[1..].parse().expect("state tensors are named s<k>");
                    (&ep.delta_s[t].layers[k - 1], &bptt.grad_s[t].layers[k - 1])
                }
            })
            .collect();
        let Some(first) = series.first() else { continue };
        let mut coords: Vec<usize> = (0..first.0.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(PER_TENSOR);
        coords.sort_unstable();
        for &c in &coords {
            for (t, (d, g)) in series.iter().enumerate() {
                rows.push(GduCsvRow {
                    tensor: summary.tensor.clone(),
                    coord_index: c,
                    t,
                    ep_value: d.data()[c],
                    minus_bptt_value: -g.data()[c],
                });
            }
        }
    }
    let file = File::create(path).map_err(|e| EpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{GDU_CSV_HEADER}")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{}", r.tensor, r.coord_index, r.t, r.ep_value, r.minus_bptt_value)?;
        }
        w.flush()
    };
    emit().map_err(|e| EpError::io(path, e))
}

/// Parses a file written by [`emit_gdu_csv`].
pub fn read_gdu_csv(path: impl AsRef<Path>) -> Result<Vec<GduCsvRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EpError::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EpError::io(path, e))?;
        let len = line.len() as u64 + 1;
        if i == 0 {
            if line != GDU_CSV_HEADER {
                return Err(EpError::Format {
                    offset,
                    message: format!("unexpected header {line:?}"),
                });
            }
            offset += len;
            continue;
        }
        let bad = |what: &str| EpError::Format {
            offset,
            message: format!("line {}: {what}", i + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        rows.push(GduCsvRow {
            tensor: f[0].to_string(),
            coord_index: f[1].parse().map_err(|_| bad("bad coord_index"))?,
            t: f[2].parse().map_err(|_| bad("bad t"))?,
            ep_value: f[3].parse().map_err(|_| bad("bad ep_value"))?,
            minus_bptt_value: f[4].parse().map_err(|_| bad("bad minus_bptt_value"))?,
        });
        offset += len;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind::ShiftedSigmoid;
    use crate::model::LayeredDenseParams;
    use rand::Rng;

    fn setup(sizes: &[usize], seed: u64) -> (ModelParams, Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::LayeredDense(LayeredDenseParams::init(sizes, &mut r).unwrap());
        let x = Tensor::vector((0..sizes[0]).map(|_| r.gen_range(0.0..1.0)).collect());
        let y = Tensor::vector((0..*sizes.last().unwrap()).map(|_| r.gen_range(0.0..1.0)).collect());
        (p, x, y)
    }

    fn cfg(beta: f64, k: usize) -> PhaseConfig {
        PhaseConfig {
            t_max: 200,
            k_steps: k,
            beta,
            eta: 0.0,
            eta_scales: vec![],
            tol: 1e-12,
            activation: ShiftedSigmoid,
        }
    }

    #[test]
    fn metrics_on_exact_and_flipped_vectors() {
        let g = [0.5, -1.0, 2.0];
        let d = [-0.5, 1.0, -2.0];
        assert_eq!(rel_mse(&d, &g), 0.0);
        assert_eq!(cosine_to_negative(&d, &g), Some(1.0));
        assert!((cosine_to_negative(&g, &g).unwrap() + 1.0).abs() < 1e-15);
        assert!((rel_mse(&g, &g) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_to_negative(&[0.0; 3], &[0.0; 3]), Some(1.0));
        assert_eq!(cosine_to_negative(&[0.0; 3], &g), None);
        assert_eq!(rel_mse(&[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn zero_loss_fixed_point_gives_zero_processes() {
        let (p, x, _) = setup(&[4, 6, 2], 1);
        let c = cfg(0.1, 5);
        let free = run_free_phase(&p, &x, &c).unwrap();
        let y = free.final_state().output().clone();
        let ep = compute_ep_processes(&p, &x, &y, free.final_state(), &c).unwrap();
        assert_eq!(ep.len(), 5);
        // The free phase stopped within 1e-12 of a fixed point.
        assert!(ep.delta_s.iter().all(|d| d.layers.iter().all(|l| l.max_abs() < 1e-10)));
        assert!(ep.delta_theta.iter().all(|d| d.tensors().iter().all(|l| l.max_abs() < 1e-10)));
    }

    #[test]
    fn single_step_state_process_is_the_scaled_first_move() {
        let (p, x, y) = setup(&[4, 6, 2], 2);
        let c = cfg(0.3, 1);
        let free = run_free_phase(&p, &x, &c).unwrap();
        let s_star = free.final_state();
        let ep = compute_ep_processes(&p, &x, &y, s_star, &c).unwrap();
        let s1 = p.clamp(&x).unwrap().nudged_step(s_star, &y, 0.3, ShiftedSigmoid).unwrap();
        for (k, l) in ep.delta_s[0].layers.iter().enumerate() {
            for (i, v) in l.data().iter().enumerate() {
                let expected = (s1.layers[k].data()[i] - s_star.layers[k].data()[i]) / 0.3;
                assert_eq!(*v, expected);
            }
        }
    }

    #[test]
    fn processes_recomputed_from_the_trajectory() {
        let (p, x, y) = setup(&[3, 5, 2], 3);
        let c = PhaseConfig { eta: 0.05, ..cfg(0.2, 4) };
        let free = run_free_phase(&p, &x, &c).unwrap();
        let ep = compute_ep_processes(&p, &x, &y, free.final_state(), &c).unwrap();
        let traj = run_continual_phase(&p, &x, &y, free.final_state(), &c).unwrap();
        let thetas = traj.params_over_time.unwrap();
        for t in 0..4 {
            let ModelParams::LayeredDense(th) = &thetas[t] else { unreachable!() };
            let (a, b) = (&traj.states[t], &traj.states[t + 1]);
            // ∂Φ/∂W2 = s2 s1ᵀ, so its difference is s2' s1'ᵀ − s2 s1ᵀ.
            let w2 = Tensor::outer(&b.layers[1], &b.layers[0]).sub(&Tensor::outer(&a.layers[1], &a.layers[0])).unwrap();
            let ModelParams::LayeredDense(d) = &ep.delta_theta[t] else { unreachable!() };
            assert!(d.weights[1].max_abs_diff(&w2.scale(1.0 / 0.2)).unwrap() < 1e-14);
            assert_eq!(th.weights.len(), 2);
        }
    }

    #[test]
    fn weight_processes_track_bptt_for_small_beta() {
        let (p, x, y) = setup(&[4, 6, 2], 4);
        let run = run_gdu(&p, &x, &y, &cfg(1e-4, 10)).unwrap();
        assert!(run.report.premise_warning.is_none());
        assert!(run.report.theta_cosine_min > 0.999, "{}", run.report.theta_cosine_min);
        assert!(run.report.theta_rel_mse < 1e-3);
    }

    #[test]
    fn error_shrinks_with_beta() {
        let (p, x, y) = setup(&[4, 6, 2], 5);
        let rows = beta_sweep(&p, &x, &y, &cfg(1.0, 8), &[0.04, 0.02, 0.01]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].theta_rel_mse > rows[1].theta_rel_mse);
        assert!(rows[1].theta_rel_mse > rows[2].theta_rel_mse);
    }

    #[test]
    fn sweep_rejects_unordered_betas() {
        let (p, x, y) = setup(&[4, 6, 2], 6);
        assert!(beta_sweep(&p, &x, &y, &cfg(1.0, 3), &[0.01, 0.02]).is_err());
        assert!(beta_sweep(&p, &x, &y, &cfg(1.0, 3), &[0.0]).is_err());
        assert_eq!(beta_sweep(&p, &x, &y, &cfg(1.0, 3), &[0.1]).unwrap().len(), 1);
    }

    #[test]
    fn length_mismatch_is_invalid_input() {
        let (p, x, y) = setup(&[4, 6, 2], 7);
        let run = run_gdu(&p, &x, &y, &cfg(0.1, 4)).unwrap();
        let mut short = run.bptt.clone();
        short.grad_theta.pop();
        assert!(matches!(compare_to_bptt(&run.ep, &short), Err(EpError::InvalidInput(_))));
    }

    #[test]
    fn csv_round_trip() {
        let (p, x, y) = setup(&[4, 12, 2], 8);
        let run = run_gdu(&p, &x, &y, &cfg(0.01, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gdu.csv");
        emit_gdu_csv(&run.report, &run.ep, &run.bptt, &path).unwrap();
        let rows = read_gdu_csv(&path).unwrap();
        // W1 has 48 coords (8 sampled), W2 24 (8), b1 12 (8), b2 2, s1 12 (8), s2 2.
        assert_eq!(rows.len(), (8 + 8 + 8 + 2 + 8 + 2) * 3);
        for r in &rows {
            let t = r.t;
            let (ep, g) = if let Some(k) = r.tensor.strip_prefix('s') {
                let k: usize = k.parse().unwrap();
                (
                    run.ep.delta_s[t].layers[k - 1].data()[r.coord_index],
                    run.bptt.grad_s[t].layers[k - 1].data()[r.coord_index],
                )
            } else {
                let i = p.tensor_names().iter().position(|n| *n == r.tensor).unwrap();
                (
                    run.ep.delta_theta[t].tensors()[i].data()[r.coord_index],
                    run.bptt.grad_theta[t].tensors()[i].data()[r.coord_index],
                )
            };
            assert_eq!(r.ep_value, ep);
            assert_eq!(r.minus_bptt_value, -g);
        }
        emit_gdu_csv(&run.report, &run.ep, &run.bptt, dir.path().join("again.csv")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.csv")).unwrap()
        );
    }

    #[test]
    fn empty_report_writes_only_the_header() {
        let report = GduReport {
            entries: vec![],
            tensors: vec![],
            theta_rel_mse: 0.0,
            theta_cosine_mean: 0.0,
            theta_cosine_min: 0.0,
            state_rel_mse: 0.0,
            state_cosine_mean: 0.0,
            state_cosine_min: 0.0,
            unpaired: 0,
            unpaired_max_norm: 0.0,
            premise_warning: None,
        };
        let ep = EpProcesses {
            delta_s: vec![],
            delta_theta: vec![],
            beta: 0.1,
            eta: 0.0,
        };
        let bptt = BpttGradients {
            grad_s: vec![],
            grad_theta: vec![],
            loss: 0.0,
            premise_warning: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        emit_gdu_csv(&report, &ep, &bptt, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{GDU_CSV_HEADER}\n"));
        assert!(read_gdu_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn continual_processes_drift_with_eta() {
        let (p, x, y) = setup(&[4, 6, 2], 9);
        let c = cfg(0.01, 10);
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let base = compute_ep_processes(&p, &x, &y, &s_star, &c).unwrap();
        let same = process_distance(&base, &base).unwrap();
        assert_eq!((same.theta_rel_mse, same.theta_divergence), (0.0, 0.0));
        let mut last = 0.0;
        for eta in [1e-6, 1e-3, 1e-1] {
            let ep = compute_ep_processes(&p, &x, &y, &s_star, &PhaseConfig { eta, ..c.clone() }).unwrap();
            let d = process_distance(&ep, &base).unwrap();
            assert!(d.theta_divergence > last);
            last = d.theta_divergence;
        }
    }

    #[test]
    fn distance_is_a_pooled_ratio() {
        let (p, x, y) = setup(&[3, 4, 2], 10);
        let c = cfg(0.1, 3);
        let s_star = run_free_phase(&p, &x, &c).unwrap().final_state().clone();
        let a = compute_ep_processes(&p, &x, &y, &s_star, &c).unwrap();
        let mut b = a.clone();
        for d in &mut b.delta_theta {
            *d = d.scale(2.0);
        }
        let d = process_distance(&b, &a).unwrap();
        // ‖2a − a‖² / (4‖a‖² + ‖a‖²) = 1/5 and ‖2a − a‖ / ‖a‖ = 1.
        assert!((d.theta_rel_mse - 0.2).abs() < 1e-15);
        assert!((d.theta_divergence - 1.0).abs() < 1e-15);
        assert_eq!(d.state_divergence, 0.0);
    }
}
