//! Flat dotted-key configuration.
//!
//! A config file is a JSON object whose keys are the dotted names listed in
//! [`defaults`]. Missing keys take their defaults, unknown keys are rejected,
//! and `--set key=value` flags are applied afterwards in order. A run
//! manifest (an object with a `config` member) is also accepted, so a past run
//! can be repeated from its manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use ep_core::data::{load_idx, subset, synthetic_linked, Dataset};
use ep_core::dynamics::PhaseConfig;
use ep_core::model::{ConvSpec, ConvStage};
use ep_core::training::TrainConfig;
use ep_core::{ActivationKind, Family};

use crate::CliError;

/// Every accepted key with its default value.
pub fn defaults() -> BTreeMap<String, Value> {
    let pairs = [
        ("model.family", json!("layered_dense")),
        ("model.sizes", json!([784, 512, 10])),
        ("model.init_scale", json!(1.0)),
        ("model.checkpoint", json!(null)),
        ("model.conv.input", json!([1, 28, 28])),
        ("model.conv.stages", json!([[32, 5, 2], [64, 5, 2]])),
        ("model.conv.dense", json!([10])),
        ("phase.t_max", json!(100)),
        ("phase.k_steps", json!(12)),
        ("phase.beta", json!(0.5)),
        ("phase.eta", json!(0.0)),
        ("phase.eta_scales", json!([])),
        ("phase.tol", json!(1e-4)),
        ("phase.activation", json!("hard_sigmoid")),
        ("train.lr", json!(0.05)),
        ("train.learning_rates", json!([])),
        ("train.epochs", json!(30)),
        ("train.batch_size", json!(20)),
        ("train.seed", json!(0)),
        ("train.max_nonconverged_fraction", json!(1.0)),
        ("train.early_abort", json!(true)),
        ("train.angle", json!(0.0)),
        ("train.gdu_samples", json!(8)),
        ("train.gdu_beta", json!(0.01)),
        ("data.source", json!("synthetic")),
        ("data.train_images", json!("data/mnist/train-images-idx3-ubyte")),
        ("data.train_labels", json!("data/mnist/train-labels-idx1-ubyte")),
        ("data.test_images", json!("data/mnist/test-images-idx3-ubyte")),
        ("data.test_labels", json!("data/mnist/test-labels-idx1-ubyte")),
        ("data.train_size", json!(1000)),
        ("data.test_size", json!(1000)),
        ("data.train_subset_seed", json!(1)),
        ("data.test_subset_seed", json!(2)),
        ("data.synthetic_seed", json!(0)),
        ("data.sample_index", json!(0)),
        ("data.zero_loss", json!(false)),
        ("gdu.betas", json!([1e-3])),
        ("gdu.etas", json!([0.0])),
        ("gdu.cosine_threshold", json!(0.999)),
        ("gdu.rel_mse_threshold", json!(1e-3)),
        ("gdu.check_states", json!(false)),
        ("gradcheck.k", json!(10)),
        ("gradcheck.h", json!(1e-5)),
        ("gradcheck.coords_per_tensor", json!(16)),
        ("gradcheck.seed", json!(0)),
        ("gradcheck.threshold", json!(1e-5)),
        ("speed.epsilon", json!(0.1)),
        ("speed.samples", json!(10)),
        ("output.dir", json!("runs")),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    /// Defaults overlaid with the file at `path`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let mut obj = match value {
            Value::Object(o) => o,
            _ => return Err(CliError::Config(format!("config {} must be a JSON object", path.display()))),
        };
        if let Some(Value::Object(inner)) = obj.remove("config") {
            obj = inner;
        }
        let mut cfg = Config { values: defaults() };
        cfg.merge(obj)?;
        Ok(cfg)
    }

    fn merge(&mut self, obj: Map<String, Value>) -> Result<(), CliError> {
        for (k, v) in obj {
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    fn set_value(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override. The value is parsed as JSON when it
    /// parses, and taken as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(key.trim(), value)
    }

    pub fn set_json(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        self.set_value(key, value)
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T, CliError> {
        let v = self.values.get(key).unwrap_or_else(|| panic!("{key} has no default"));
        serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("config key {key:?} has an invalid value {v}: {e}")))
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.values.clone().into_iter().collect())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("train.seed")
    }

    pub fn family(&self) -> Result<Family, CliError> {
        let s: String = self.get("model.family")?;
        s.parse().map_err(CliError::Config)
    }

    pub fn phase(&self) -> Result<PhaseConfig, CliError> {
        let act: String = self.get("phase.activation")?;
        let activation: ActivationKind = act.parse().map_err(CliError::Config)?;
        Ok(PhaseConfig {
            t_max: self.get("phase.t_max")?,
            k_steps: self.get("phase.k_steps")?,
            beta: self.get("phase.beta")?,
            eta: self.get("phase.eta")?,
            eta_scales: self.get("phase.eta_scales")?,
            tol: self.get("phase.tol")?,
            activation,
        })
    }

    pub fn conv(&self) -> Result<ConvSpec, CliError> {
        let stages: Vec<[usize; 3]> = self.get("model.conv.stages")?;
        Ok(ConvSpec {
            input: self.get("model.conv.input")?,
            stages: stages
                .into_iter()
                .map(|[features, kernel, pool]| ConvStage { features, kernel, pool })
                .collect(),
            dense: self.get("model.conv.dense")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            family: self.family()?,
            sizes: self.get("model.sizes")?,
            conv: self.conv()?,
            init_scale: self.get("model.init_scale")?,
            phase: self.phase()?,
            lr: self.get("train.lr")?,
            learning_rates: self.get("train.learning_rates")?,
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            seed: self.seed()?,
            max_nonconverged_fraction: self.get("train.max_nonconverged_fraction")?,
            early_abort: self.get("train.early_abort")?,
            gdu_samples: self.get("train.gdu_samples")?,
            gdu_beta: self.get("train.gdu_beta")?,
        })
    }

    /// Model input and output widths implied by the architecture keys.
    fn io_dims(&self) -> Result<(usize, usize), CliError> {
        Ok(match self.family()? {
            Family::Conv => {
                let spec = self.conv()?;
                let out = *spec.dense.last().ok_or_else(|| CliError::Config("model.conv.dense is empty".into()))?;
                (spec.input.iter().product(), out)
            }
            _ => {
                let sizes: Vec<usize> = self.get("model.sizes")?;
                if sizes.len() < 2 {
                    return Err(CliError::Config("model.sizes needs an input and at least one layer".into()));
                }
                (sizes[0], sizes[sizes.len() - 1])
            }
        })
    }

    /// Train and test splits. Synthetic data is generated from a random
    /// teacher, which is returned for persistence.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Option<ep_core::ModelParams>), CliError> {
        let source: String = self.get("data.source")?;
        let train_n: usize = self.get("data.train_size")?;
        let test_n: usize = self.get("data.test_size")?;
        let (train, test, teacher) = match source.as_str() {
            "mnist" | "idx" => {
                let path = |k: &str| -> Result<String, CliError> { self.get(k) };
                let train = load_idx(path("data.train_images")?, path("data.train_labels")?)?;
                let test = load_idx(path("data.test_images")?, path("data.test_labels")?)?;
                let train = if train_n == train.len() { train } else { subset(&train, train_n, self.get("data.train_subset_seed")?)? };
                let test = if test_n == test.len() { test } else { subset(&test, test_n, self.get("data.test_subset_seed")?)? };
                (train, test, None)
            }
            "synthetic" => {
                let (d_in, d_out) = self.io_dims()?;
                let seed: u64 = self.get("data.synthetic_seed")?;
                let (all, teacher) = synthetic_linked(train_n + test_n, d_in, d_out, seed)?;
                let train = all.select(&(0..train_n).collect::<Vec<_>>(), "synthetic-train");
                let test = all.select(&(train_n..train_n + test_n).collect::<Vec<_>>(), "synthetic-test");
                (train, test, Some(teacher))
            }
            other => return Err(CliError::Config(format!("unknown data.source {other:?}"))),
        };
        let (d_in, d_out) = self.io_dims()?;
        if train.input_dim() != d_in || train.target_dim() != d_out {
            return Err(CliError::Config(format!(
                "data has {} inputs and {} targets but the model expects {d_in} and {d_out}",
                train.input_dim(),
                train.target_dim()
            )));
        }
        let train = match self.family()? {
            Family::Conv => train.with_sample_shape(&self.conv()?.input)?,
            _ => train,
        };
        let test = match self.family()? {
            Family::Conv => test.with_sample_shape(&self.conv()?.input)?,
            _ => test,
        };
        Ok((train, test, teacher))
    }
}
