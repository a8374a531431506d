//! Checkpoints: parameters, Adam moments, configs and progress in one container file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, FormatError, Result};
use crate::feature_store::container;
use crate::model::PstpNet;
use crate::optim::AdamState;
use crate::tensor::{Precision, Scalar, Tensor};

/// Where training stands when a checkpoint is written.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Epochs fully completed.
    pub epochs_done: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor<S>>,
    pub adam: AdamState<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn capture(net: &PstpNet<S>, train: &TrainConfig, adam: &AdamState<S>, progress: Progress) -> Self {
        Self {
            model: net.cfg.clone(),
            train: train.clone(),
            progress,
            param_names: net.params.params().iter().map(|p| p.name.clone()).collect(),
            params: net.params.values(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Map::new();
        m.insert("format".into(), json!("checkpoint"));
        m.insert("model".into(), serde_json::to_value(&self.model).expect("config serialises"));
        m.insert("train".into(), serde_json::to_value(&self.train).expect("config serialises"));
        m.insert("progress".into(), serde_json::to_value(self.progress).expect("progress serialises"));
        m.insert("adam_step".into(), json!(self.adam.step));
        m.insert("params".into(), json!(self.param_names));
        let mut names = Vec::with_capacity(3 * self.params.len());
        for prefix in ["param", "adam_m", "adam_v"] {
            names.extend(self.param_names.iter().map(|n| format!("{prefix}/{n}")));
        }
        let tensors: Vec<&Tensor<S>> = self.params.iter().chain(&self.adam.m).chain(&self.adam.v).collect();
        let pairs: Vec<(&str, &Tensor<S>)> = names.iter().map(String::as_str).zip(tensors).collect();
        container::encode(m, &pairs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let d = container::decode(bytes)?;
        let m = &d.manifest;
        let field = |k: &str| -> Result<Value, FormatError> {
            m.get(k).cloned().ok_or_else(|| FormatError::Manifest(format!("missing {k}")))
        };
        if field("format")? != json!("checkpoint") {
            return Err(FormatError::Manifest("not a checkpoint".into()));
        }
        let parse = |k: &str| -> Result<Value, FormatError> { field(k) };
        let model: ModelConfig =
            serde_json::from_value(parse("model")?).map_err(|e| FormatError::Manifest(format!("model: {e}")))?;
        let train: TrainConfig =
            serde_json::from_value(parse("train")?).map_err(|e| FormatError::Manifest(format!("train: {e}")))?;
        let progress: Progress = serde_json::from_value(parse("progress")?)
            .map_err(|e| FormatError::Manifest(format!("progress: {e}")))?;
        let step = parse("adam_step")?
            .as_u64()
            .ok_or_else(|| FormatError::Manifest("adam_step is not an integer".into()))?;
        let param_names: Vec<String> =
            serde_json::from_value(parse("params")?).map_err(|e| FormatError::Manifest(format!("params: {e}")))?;
        let load = |prefix: &str| -> Result<Vec<Tensor<S>>, FormatError> {
            param_names.iter().map(|n| d.tensor(&format!("{prefix}/{n}"))).collect()
        };
        let params = load("param")?;
        let adam = AdamState { step, m: load("adam_m")?, v: load("adam_v")? };
        Ok(Self { model, train, progress, param_names, params, adam })
    }

    /// Rebuilds the network, checking names and shapes against a fresh build of the stored config.
    pub fn restore(&self) -> Result<PstpNet<S>> {
        let mut net = PstpNet::<S>::new(&self.model, 0)?;
        let expected: Vec<(&str, &[usize])> =
            net.params.params().iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> =
            self.param_names.iter().map(String::as_str).zip(self.params.iter().map(|t| t.shape())).collect();
        if expected != found {
            return Err(Error::Config("checkpoint parameters do not match its model config".into()));
        }
        for (p, v) in net.params.params_mut().iter_mut().zip(&self.params) {
            p.value = v.clone();
        }
        Ok(net)
    }
}

/// Field-by-field differences between two model configs, empty when equal.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let (a, b) = (serde_json::to_value(expected).expect("ser"), serde_json::to_value(found).expect("ser"));
    let (Value::Object(a), Value::Object(b)) = (a, b) else { unreachable!("configs serialise to objects") };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: expected {v}, found {}", b.get(k).unwrap_or(&Value::Null)))
        .collect()
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, optionally requiring its model config to equal `expected`.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::<S>::from_bytes(&bytes).map_err(|e| Error::format(path, e))?;
    if let Some(want) = expected {
        let diff = config_diff(want, &ckpt.model);
        if !diff.is_empty() {
            return Err(Error::Config(format!("checkpoint config mismatch: {}", diff.join(", "))));
        }
    }
    Ok(ckpt)
}

/// Element precision a checkpoint was written in.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = container::decode(&bytes).map_err(|e| Error::format(path, e))?;
    match d.dtype.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::format(path, FormatError::Manifest(format!("unsupported dtype {other:?}")))),
    }
}
