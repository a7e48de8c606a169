//! `ep`: training, GDU comparison, gradient checking and free-phase speed
//! measurements from a flat JSON config.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical abort,
//! 4 threshold failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use ep_core::bptt::{finite_diff_check, GradCheckConfig};
use ep_core::checkpoint;
use ep_core::data::Dataset;
use ep_core::dynamics::{compare_free_phase_speed, run_free_phase};
use ep_core::gdu::{emit_gdu_csv, run_gdu};
use ep_core::training::{self, backward_angles, init_cvf, init_params, Algorithm};
use ep_core::{EpError, ModelParams, Tensor};

use config::Config;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Threshold(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Threshold(m) => m,
        }
    }
}

impl From<EpError> for CliError {
    fn from(e: EpError) -> Self {
        match e {
            EpError::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ep", version, about = "Equilibrium propagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config with dotted keys, or a run manifest.
    #[arg(long)]
    config: PathBuf,
    /// `key=value` override, applied after the file; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory for the run directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with EP, continual EP, continual vector-field EP or BPTT.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["ep", "cep", "cvf", "bptt"])]
        algo: String,
        /// Initial angle in degrees between backward and transposed forward
        /// weights (cvf only).
        #[arg(long)]
        angle: Option<f64>,
    },
    /// Compare EP update processes with BPTT gradients over β and η sweeps.
    Gdu {
        #[command(flatten)]
        common: Common,
        /// Comma-separated nudging strengths.
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        /// Comma-separated continual learning rates.
        #[arg(long, value_delimiter = ',')]
        eta: Vec<f64>,
    },
    /// Check BPTT gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Free-phase iterations of the discrete dynamics versus ε-discretized
    /// energy dynamics.
    Speed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    version: &'static str,
    command: String,
    seed: u64,
    config: Value,
    started: String,
    finished: String,
    status: String,
    output_dir: PathBuf,
    files: Vec<String>,
    summary: Value,
}

struct Run {
    dir: PathBuf,
    files: Vec<String>,
}

impl Run {
    fn create(parent: &Path, name: &str, seed: u64) -> Result<Self, CliError> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let base = format!("{name}_{seed}_{stamp}");
        let mut dir = parent.join(&base);
        let mut n = 1;
        while dir.exists() {
            dir = parent.join(format!("{base}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Run { dir, files: Vec::new() })
    }

    /// Path for an artifact, recorded in the manifest.
    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let path = self.file(name);
        let text = serde_json::to_string_pretty(value).expect("serializable");
        std::fs::write(&path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }
}

fn resolve(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(&common.config)?;
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(out) = &common.out {
        cfg.set_json("output.dir", json!(out))?;
    }
    Ok(cfg)
}

/// Runs `body` inside a fresh run directory and writes the manifest whether
/// or not it succeeds.
fn with_run(
    cfg: &Config,
    name: &str,
    body: impl FnOnce(&Config, &mut Run) -> Result<Value, CliError>,
) -> Result<(), CliError> {
    let started = chrono::Utc::now().to_rfc3339();
    let seed = cfg.seed()?;
    let parent: PathBuf = cfg.get("output.dir")?;
    let mut run = Run::create(&parent, name, seed)?;
    let outcome = body(cfg, &mut run);
    let (status, summary) = match &outcome {
        Ok(s) => ("ok".to_string(), s.clone()),
        Err(e) => (format!("error: {}", e.message()), Value::Null),
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        command: name.to_string(),
        seed,
        config: cfg.to_json(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        status,
        output_dir: run.dir.clone(),
        files: run.files.clone(),
        summary,
    };
    let path = run.dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    println!("run directory: {}", run.dir.display());
    outcome.map(|_| ())
}

/// The configured checkpoint, or fresh parameters drawn from the seed.
fn model(cfg: &Config, rng: &mut ChaCha8Rng, angle: Option<f64>) -> Result<ModelParams, CliError> {
    if let Some(path) = cfg.get::<Option<PathBuf>>("model.checkpoint")? {
        return Ok(checkpoint::load(path)?);
    }
    let tc = cfg.train()?;
    Ok(match angle {
        Some(a) => init_cvf(&tc, a, rng)?,
        None => init_params(&tc, rng)?,
    })
}

fn sample(data: &Dataset, index: usize) -> Result<(Tensor, Tensor), CliError> {
    if index >= data.len() {
        return Err(CliError::Config(format!(
            "data.sample_index {index} is out of range for {} samples",
            data.len()
        )));
    }
    Ok((data.input(index), data.target(index)))
}

/// With `data.zero_loss`, the target is replaced by the model's own free
/// steady-state output, so the loss and every BPTT gradient vanish. The EP
/// processes vanish too only if the free phase ends on an exact fixed point;
/// otherwise its residual drift shows up in them.
fn target_for(cfg: &Config, params: &ModelParams, x: &Tensor, y: Tensor) -> Result<Tensor, CliError> {
    if !cfg.get::<bool>("data.zero_loss")? {
        return Ok(y);
    }
    let traj = run_free_phase(params, x, &cfg.phase()?)?;
    Ok(traj.final_state().output().clone())
}

fn cmd_train(cfg: &Config, run: &mut Run, algo: Algorithm) -> Result<Value, CliError> {
    let tc = cfg.train()?;
    let (train, test, teacher) = cfg.datasets()?;
    if let Some(t) = &teacher {
        checkpoint::save(t, run.file("teacher.ckpt"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let angle = (algo == Algorithm::Cvf).then(|| cfg.get::<f64>("train.angle")).transpose()?;
    let params = model(cfg, &mut rng, angle)?;
    let gdu_cosine = match algo {
        Algorithm::Cvf => Some(training::initial_gdu_cosine(&tc, &params, &train)?),
        _ => None,
    };
    let angles = match &params {
        ModelParams::VectorField(vf) => Some(backward_angles(vf)?),
        _ => None,
    };
    let outcome = training::train_from(algo, &tc, params, &train, &test, &mut rng)?;
    training::write_metrics_csv(&outcome.metrics, run.file("metrics.csv"))?;
    checkpoint::save(&outcome.params, run.file("final.ckpt"))?;
    let last = outcome.metrics.last();
    println!(
        "{}: {} epochs, final train error {}, test error {}",
        algo.name(),
        outcome.metrics.len(),
        last.map_or("n/a".into(), |m| format!("{:.4}", m.train_err)),
        last.map_or("n/a".into(), |m| format!("{:.4}", m.test_err)),
    );
    Ok(json!({
        "algo": algo.name(),
        "epochs": outcome.metrics.len(),
        "final_train_error": last.map(|m| m.train_err),
        "final_test_error": last.map(|m| m.test_err),
        "initial_gdu_cosine": gdu_cosine,
        "initial_backward_angles": angles,
    }))
}

fn cmd_gdu(cfg: &Config, run: &mut Run) -> Result<Value, CliError> {
    let phase = cfg.phase()?;
    let betas: Vec<f64> = cfg.get("gdu.betas")?;
    let etas: Vec<f64> = cfg.get("gdu.etas")?;
    if betas.is_empty() || etas.is_empty() {
        return Err(CliError::Config("gdu.betas and gdu.etas must be non-empty".into()));
    }
    let (train, _, _) = cfg.datasets()?;
    let (x, y) = sample(&train, cfg.get("data.sample_index")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let params = model(cfg, &mut rng, None)?;
    let y = target_for(cfg, &params, &x, y)?;
    let mut rows = Vec::new();
    for &beta in &betas {
        for &eta in &etas {
            let p = ep_core::dynamics::PhaseConfig { beta, eta, ..phase.clone() };
            let g = run_gdu(&params, &x, &y, &p)?;
            let tag = format!("beta{beta}_eta{eta}");
            emit_gdu_csv(&g.report, &g.ep, &g.bptt, run.file(&format!("gdu_{tag}.csv")))?;
            g.report.write_json(run.file(&format!("report_{tag}.json")))?;
            println!(
                "beta {beta} eta {eta}: weights cos min {:.6} rel_mse {:.3e}; states cos min {:.6} rel_mse {:.3e}{}",
                g.report.theta_cosine_min,
                g.report.theta_rel_mse,
                g.report.state_cosine_min,
                g.report.state_rel_mse,
                g.report.premise_warning.as_deref().map(|w| format!(" [warning: {w}]")).unwrap_or_default()
            );
            rows.push(json!({
                "beta": beta,
                "eta": eta,
                "free_steps": g.free_steps,
                "theta_rel_mse": g.report.theta_rel_mse,
                "theta_cosine_mean": g.report.theta_cosine_mean,
                "theta_cosine_min": g.report.theta_cosine_min,
                "state_rel_mse": g.report.state_rel_mse,
                "state_cosine_mean": g.report.state_cosine_mean,
                "state_cosine_min": g.report.state_cosine_min,
                "unpaired": g.report.unpaired,
                "premise_warning": g.report.premise_warning,
            }));
        }
    }
    let cos_thr: f64 = cfg.get("gdu.cosine_threshold")?;
    let mse_thr: f64 = cfg.get("gdu.rel_mse_threshold")?;
    let check_states: bool = cfg.get("gdu.check_states")?;
    // The invariant is checked on the run closest to β → 0 with η = min η.
    let beta0 = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let eta0 = etas.iter().copied().fold(f64::INFINITY, f64::min);
    let checked = rows
        .iter()
        .find(|r| r["beta"] == json!(beta0) && r["eta"] == json!(eta0))
        .expect("the minimum pair was run")
        .clone();
    let num = |k: &str| checked[k].as_f64().unwrap_or(f64::NAN);
    let mut failures = Vec::new();
    if let Some(w) = checked["premise_warning"].as_str() {
        failures.push(format!("premise violated: {w}"));
    }
    if !(num("theta_cosine_min") >= cos_thr) || !(num("theta_rel_mse") <= mse_thr) {
        failures.push(format!(
            "weights: cos min {} / rel_mse {} against {cos_thr} / {mse_thr}",
            num("theta_cosine_min"),
            num("theta_rel_mse")
        ));
    }
    if check_states && (!(num("state_cosine_min") >= cos_thr) || !(num("state_rel_mse") <= mse_thr)) {
        failures.push(format!(
            "states: cos min {} / rel_mse {} against {cos_thr} / {mse_thr}",
            num("state_cosine_min"),
            num("state_rel_mse")
        ));
    }
    let summary = json!({
        "runs": rows,
        "checked": {"beta": beta0, "eta": eta0},
        "passed": failures.is_empty(),
        "failures": failures,
    });
    run.write_json("summary.json", &summary)?;
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Threshold(format!("GDU check failed: {}", failures.join("; "))))
    }
}

fn cmd_gradcheck(cfg: &Config, run: &mut Run) -> Result<Value, CliError> {
    let gc = GradCheckConfig {
        phase: cfg.phase()?,
        k: cfg.get("gradcheck.k")?,
        h: cfg.get("gradcheck.h")?,
        coords_per_tensor: cfg.get("gradcheck.coords_per_tensor")?,
        seed: cfg.get("gradcheck.seed")?,
    };
    let threshold: f64 = cfg.get("gradcheck.threshold")?;
    let (train, _, _) = cfg.datasets()?;
    let (x, y) = sample(&train, cfg.get("data.sample_index")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let params = model(cfg, &mut rng, None)?;
    let y = target_for(cfg, &params, &x, y)?;
    let report = finite_diff_check(&params, &x, &y, &gc)?;
    report.write_csv(run.file("gradcheck.csv"))?;
    let passed = report.passes(threshold);
    println!(
        "gradcheck: {} coordinates checked, {} skipped, max rel err {:.3e}, mean {:.3e}, threshold {threshold:e}: {}",
        report.checked,
        report.skipped,
        report.max_rel_err,
        report.mean_rel_err,
        if passed { "pass" } else { "FAIL" }
    );
    let summary = json!({
        "checked": report.checked,
        "skipped": report.skipped,
        "max_rel_err": report.max_rel_err,
        "mean_rel_err": report.mean_rel_err,
        "threshold": threshold,
        "passed": passed,
        "premise_warning": report.premise_warning,
    });
    run.write_json("summary.json", &summary)?;
    if passed {
        Ok(summary)
    } else {
        Err(CliError::Threshold(format!(
            "max relative error {:e} is not below {threshold:e}",
            report.max_rel_err
        )))
    }
}

fn cmd_speed(cfg: &Config, run: &mut Run) -> Result<Value, CliError> {
    let phase = cfg.phase()?;
    let epsilon: f64 = cfg.get("speed.epsilon")?;
    let n: usize = cfg.get("speed.samples")?;
    let (train, _, _) = cfg.datasets()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let params = model(cfg, &mut rng, None)?;
    let reports = (0..n.min(train.len()))
        .map(|i| compare_free_phase_speed(&params, &train.input(i), &phase, epsilon))
        .collect::<Result<Vec<_>, _>>()?;
    if reports.is_empty() {
        return Err(CliError::Config("speed needs at least one sample".into()));
    }
    let discrete: usize = reports.iter().map(|r| r.discrete_steps).sum();
    let energy: usize = reports.iter().map(|r| r.energy_steps).sum();
    let ratio = energy as f64 / discrete as f64;
    let warnings: Vec<&str> = reports.iter().filter_map(|r| r.warning.as_deref()).collect();
    println!(
        "speed: epsilon {epsilon}, discrete {discrete} steps, energy {energy} steps over {} samples, ratio {ratio:.3}",
        reports.len()
    );
    if !warnings.is_empty() {
        eprintln!("warning: {} of {} samples: {}", warnings.len(), reports.len(), warnings[0]);
    }
    let summary = json!({
        "epsilon": epsilon,
        "samples": reports.len(),
        "discrete_steps": discrete,
        "energy_steps": energy,
        "ratio": ratio,
        "warnings": warnings.len(),
    });
    run.write_json("speed.json", &json!({"summary": summary, "per_sample": reports}))?;
    Ok(summary)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, algo, angle } => {
            let algo: Algorithm = algo.parse()?;
            let mut cfg = resolve(&common)?;
            if let Some(a) = angle {
                cfg.set_json("train.angle", json!(a))?;
            }
            with_run(&cfg, algo.name(), |c, r| cmd_train(c, r, algo))
        }
        Command::Gdu { common, beta, eta } => {
            let mut cfg = resolve(&common)?;
            if !beta.is_empty() {
                cfg.set_json("gdu.betas", json!(beta))?;
            }
            if !eta.is_empty() {
                cfg.set_json("gdu.etas", json!(eta))?;
            }
            with_run(&cfg, "gdu", cmd_gdu)
        }
        Command::Gradcheck { common, threshold } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = threshold {
                cfg.set_json("gradcheck.threshold", json!(t))?;
            }
            with_run(&cfg, "gradcheck", cmd_gradcheck)
        }
        Command::Speed { common, epsilon } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epsilon {
                cfg.set_json("speed.epsilon", json!(e))?;
            }
            with_run(&cfg, "speed", cmd_speed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
