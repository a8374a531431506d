//! One video's precomputed features, stored as a `PSTP` container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::container;
use crate::config::ModelConfig;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

/// Feature-array extents of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleDims {
    pub segments: usize,
    pub snippets: usize,
    pub patches: usize,
    pub dim: usize,
    pub audio_dim: usize,
}

impl BundleDims {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            segments: cfg.segments,
            snippets: cfg.snippets,
            patches: cfg.patches,
            dim: cfg.dim,
            audio_dim: cfg.audio_dim,
        }
    }

    pub fn audio_shape(&self) -> Vec<usize> {
        vec![self.segments, self.snippets, self.audio_dim]
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        vec![self.segments, self.snippets, self.dim]
    }

    pub fn patch_shape(&self) -> Vec<usize> {
        vec![self.segments, self.snippets, self.patches, self.dim]
    }

    pub fn question_shape(&self) -> Vec<usize> {
        vec![1, self.dim]
    }
}

/// Ground-truth location of the planted answer evidence in a synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub segment: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub dims: BundleDims,
    pub classes: usize,
    /// `[K × T × D_a]`
    pub audio_raw: Tensor<f32>,
    /// `[K × T × D]`
    pub visual_frame: Tensor<f32>,
    /// `[K × T × M × D]`, patch 0 is the [CLS] token.
    pub visual_patch: Tensor<f32>,
    /// `[1 × D]`
    pub question: Tensor<f32>,
    pub answer: usize,
    pub qtype: String,
    pub video_id: String,
    pub planted: Option<Planted>,
}

const TENSOR_NAMES: [&str; 4] = ["audio_raw", "visual_frame", "visual_patch", "question"];

impl FeatureBundle {
    /// Checks shapes against `dims`, the label range and finiteness.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        for (name, t, want) in [
            ("audio_raw", &self.audio_raw, d.audio_shape()),
            ("visual_frame", &self.visual_frame, d.frame_shape()),
            ("visual_patch", &self.visual_patch, d.patch_shape()),
            ("question", &self.question, d.question_shape()),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{name} of {} contains non-finite values", self.video_id)));
            }
        }
        if self.answer >= self.classes {
            return Err(Error::Data(format!(
                "answer {} out of range for {} classes",
                self.answer, self.classes
            )));
        }
        if let Some(p) = self.planted {
            if p.segment >= d.segments || p.patch >= d.patches {
                return Err(Error::Data(format!("planted location {p:?} outside {d:?}")));
            }
        }
        Ok(())
    }

    /// Errors unless the bundle matches the model's feature layout and class count.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.dims != BundleDims::of(cfg) {
            return Err(Error::Config(format!(
                "bundle {} has dims {:?} but the model expects {:?}",
                self.video_id,
                self.dims,
                BundleDims::of(cfg)
            )));
        }
        if self.classes != cfg.classes {
            return Err(Error::Config(format!(
                "bundle {} has {} classes but the model has {}",
                self.video_id, self.classes, cfg.classes
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Map::new();
        m.insert("format".into(), json!("feature_bundle"));
        m.insert("dims".into(), serde_json::to_value(self.dims).expect("dims serialise"));
        m.insert("classes".into(), json!(self.classes));
        m.insert("answer".into(), json!(self.answer));
        m.insert("qtype".into(), json!(self.qtype));
        m.insert("video_id".into(), json!(self.video_id));
        m.insert("planted".into(), serde_json::to_value(self.planted).expect("planted serialises"));
        container::encode(
            m,
            &[
                ("audio_raw", &self.audio_raw),
                ("visual_frame", &self.visual_frame),
                ("visual_patch", &self.visual_patch),
                ("question", &self.question),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let d = container::decode(bytes)?;
        let m = &d.manifest;
        let field = |k: &str| m.get(k).ok_or_else(|| FormatError::Manifest(format!("missing {k}")));
        let dims: BundleDims = serde_json::from_value(field("dims")?.clone())
            .map_err(|e| FormatError::Manifest(format!("dims: {e}")))?;
        let as_usize = |k: &str| -> Result<usize, FormatError> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| FormatError::Manifest(format!("{k} is not an integer")))
        };
        let classes = as_usize("classes")?;
        let answer = as_usize("answer")?;
        let as_string = |k: &str| -> Result<String, FormatError> {
            Ok(field(k)?
                .as_str()
                .ok_or_else(|| FormatError::Manifest(format!("{k} is not a string")))?
                .to_string())
        };
        let qtype = as_string("qtype")?;
        let video_id = as_string("video_id")?;
        let planted: Option<Planted> = match m.get("planted") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| FormatError::Manifest(format!("planted: {e}")))?,
            ),
        };
        if d.names() != TENSOR_NAMES {
            return Err(FormatError::Manifest(format!(
                "expected tensors {TENSOR_NAMES:?}, found {:?}",
                d.names()
            )));
        }
        for (name, want) in [
            ("audio_raw", dims.audio_shape()),
            ("visual_frame", dims.frame_shape()),
            ("visual_patch", dims.patch_shape()),
            ("question", dims.question_shape()),
        ] {
            let got = d.shape(name).expect("name listed");
            if got != want.as_slice() {
                return Err(FormatError::DimMismatch(format!(
                    "{name} declared as {got:?} but dims {dims:?} require {want:?}"
                )));
            }
        }
        if answer >= classes {
            return Err(FormatError::Manifest(format!("answer {answer} out of range for {classes} classes")));
        }
        Ok(Self {
            dims,
            classes,
            audio_raw: d.tensor("audio_raw")?,
            visual_frame: d.tensor("visual_frame")?,
            visual_patch: d.tensor("visual_patch")?,
            question: d.tensor("question")?,
            answer,
            qtype,
            video_id,
            planted,
        })
    }
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    bundle.validate()?;
    fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bundle = FeatureBundle::from_bytes(&bytes).map_err(|e| Error::format(path, e))?;
    bundle.validate()?;
    Ok(bundle)
}
