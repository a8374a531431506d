//! Model, training and synthetic-data configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

fn yes() -> bool {
    true
}

/// Architecture hyperparameters.
///
/// Field defaults are the reference configuration (K=20, T=3, M=50, D=512,
/// Top_k=7, Top_m=20, 4 heads, one fusion layer). `classes` has no default and
/// must always be given explicitly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// K: segments per video.
    #[serde(default = "defaults::segments")]
    pub segments: usize,
    /// T: one-second snippets per segment.
    #[serde(default = "defaults::snippets")]
    pub snippets: usize,
    /// M: patches per frame, including the leading [CLS] token.
    #[serde(default = "defaults::patches")]
    pub patches: usize,
    /// D: shared feature width.
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    /// Raw audio feature width before the learned projection.
    #[serde(default = "defaults::audio_dim")]
    pub audio_dim: usize,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default = "defaults::top_m")]
    pub top_m: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    /// Stacked AVF / LGPM layers.
    #[serde(default = "defaults::fusion_layers")]
    pub fusion_layers: usize,
    /// C: answer vocabulary size.
    pub classes: usize,
    /// When false, SRSM keeps every patch without question attention.
    #[serde(default = "yes")]
    pub use_srsm_attention: bool,
    #[serde(default = "yes")]
    pub use_avam: bool,
    #[serde(default = "yes")]
    pub use_lgpm: bool,
}

mod defaults {
    pub fn segments() -> usize {
        20
    }
    pub fn snippets() -> usize {
        3
    }
    pub fn patches() -> usize {
        50
    }
    pub fn dim() -> usize {
        512
    }
    pub fn audio_dim() -> usize {
        128
    }
    pub fn top_k() -> usize {
        7
    }
    pub fn top_m() -> usize {
        20
    }
    pub fn heads() -> usize {
        4
    }
    pub fn fusion_layers() -> usize {
        1
    }
}

impl ModelConfig {
    /// Reference configuration with `classes` answers.
    pub fn reference(classes: usize) -> Self {
        Self {
            segments: defaults::segments(),
            snippets: defaults::snippets(),
            patches: defaults::patches(),
            dim: defaults::dim(),
            audio_dim: defaults::audio_dim(),
            top_k: defaults::top_k(),
            top_m: defaults::top_m(),
            heads: defaults::heads(),
            fusion_layers: defaults::fusion_layers(),
            classes,
            use_srsm_attention: true,
            use_avam: true,
            use_lgpm: true,
        }
    }

    /// The configuration used for efficiency comparisons (42 answer classes).
    pub fn full_size() -> Self {
        Self::reference(42)
    }

    /// Small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            segments: 3,
            snippets: 2,
            patches: 5,
            dim: 8,
            audio_dim: 6,
            top_k: 2,
            top_m: 3,
            heads: 2,
            fusion_layers: 1,
            classes: 3,
            use_srsm_attention: true,
            use_avam: true,
            use_lgpm: true,
        }
    }

    /// Γ: number of selected frames.
    pub fn gamma(&self) -> usize {
        self.snippets * self.top_k
    }

    /// K·T: snippets per video.
    pub fn frames(&self) -> usize {
        self.segments * self.snippets
    }

    /// Checks every invariant, naming each offending field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("segments", self.segments),
            ("snippets", self.snippets),
            ("patches", self.patches),
            ("dim", self.dim),
            ("audio_dim", self.audio_dim),
            ("top_k", self.top_k),
            ("top_m", self.top_m),
            ("heads", self.heads),
            ("fusion_layers", self.fusion_layers),
            ("classes", self.classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.top_k > self.segments {
            problems.push(format!("top_k ({}) exceeds segments ({})", self.top_k, self.segments));
        }
        if self.top_m > self.patches {
            problems.push(format!("top_m ({}) exceeds patches ({})", self.top_m, self.patches));
        }
        if !self.use_srsm_attention && self.top_m != self.patches {
            problems.push(format!(
                "top_m ({}) must equal patches ({}) when use_srsm_attention is false",
                self.top_m, self.patches
            ));
        }
        if self.heads > 0 && !self.dim.is_multiple_of(self.heads) {
            problems.push(format!("dim ({}) is not divisible by heads ({})", self.dim, self.heads));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        match ablation {
            Ablation::Tssm => cfg.top_k = cfg.segments,
            Ablation::Srsm => {
                cfg.top_m = cfg.patches;
                cfg.use_srsm_attention = false;
            }
            Ablation::Avam => cfg.use_avam = false,
            Ablation::Lgpm => cfg.use_lgpm = false,
        }
        cfg
    }
}

/// A module removed (or its selection widened to everything) for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Keep every segment: Top_k = K.
    Tssm,
    /// Keep every patch and drop the question-patch attention.
    Srsm,
    Avam,
    Lgpm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Tssm, Ablation::Srsm, Ablation::Avam, Ablation::Lgpm];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Tssm => "tssm",
            Ablation::Srsm => "srsm",
            Ablation::Avam => "avam",
            Ablation::Lgpm => "lgpm",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected tssm|srsm|avam|lgpm)")))
    }
}

/// Optimisation recipe. Defaults: Adam at 1e-4, ×0.1 every 10 epochs, batch 64, 30 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 10,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.lr_decay_every == 0 {
            problems.push("lr_decay_every must be at least 1".to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            problems.push(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Step schedule: `lr · lr_decay^⌊epoch / lr_decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Synthetic dataset recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub signal_strength: f64,
    #[serde(default = "SynthSpec::default_noise")]
    pub noise_std: f64,
    /// Noise added to the question feature around its answer prototype.
    #[serde(default = "SynthSpec::default_question_noise")]
    pub question_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Question-type tags assigned round-robin.
    #[serde(default = "SynthSpec::default_qtypes")]
    pub qtypes: Vec<String>,
    /// Train/val/test fractions.
    #[serde(default = "SynthSpec::default_split")]
    pub split: [f64; 3],
}

impl SynthSpec {
    fn default_noise() -> f64 {
        1.0
    }

    fn default_question_noise() -> f64 {
        0.05
    }

    fn default_qtypes() -> Vec<String> {
        ["audio", "visual", "audio-visual"].map(String::from).to_vec()
    }

    fn default_split() -> [f64; 3] {
        [0.8, 0.1, 0.1]
    }

    pub fn new(n_videos: usize, signal_strength: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            n_videos,
            signal_strength,
            noise_std,
            question_noise: Self::default_question_noise(),
            seed,
            qtypes: Self::default_qtypes(),
            split: Self::default_split(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            problems.push(format!("signal_strength must be >= 0, got {}", self.signal_strength));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.question_noise >= 0.0 && self.question_noise.is_finite()) {
            problems.push(format!("question_noise must be >= 0, got {}", self.question_noise));
        }
        if self.qtypes.is_empty() {
            problems.push("qtypes must list at least one tag".to_string());
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| r < 0.0) {
            problems.push(format!("split ratios must be non-negative and sum to 1, got {:?}", self.split));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Parses a TOML document, reporting line/column on syntax errors.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let location = e
            .span()
            .map(|span| {
                let line = text[..span.start].matches('\n').count() + 1;
                let col = span.start - text[..span.start].rfind('\n').map_or(0, |i| i + 1) + 1;
                format!(" at line {line}, column {col}")
            })
            .unwrap_or_default();
        Error::Config(format!("{origin}{location}: {}", e.message()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults() {
        let c = ModelConfig::full_size();
        assert_eq!((c.segments, c.top_k, c.top_m, c.dim, c.heads), (20, 7, 20, 512, 4));
        assert_eq!(c.gamma(), 21);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_every_field() {
        let mut c = ModelConfig::tiny();
        c.top_k = 9;
        c.top_m = 0;
        c.heads = 3;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("top_k") && msg.contains("top_m") && msg.contains("heads"), "{msg}");
    }

    #[test]
    fn lr_schedule_is_exact() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 1e-4);
        assert_eq!(t.lr_at(9), 1e-4);
        assert_eq!(t.lr_at(10), 1e-4 * 0.1);
        assert_eq!(t.lr_at(25), 1e-4 * 0.1f64.powi(2));
    }

    #[test]
    fn classes_must_be_explicit() {
        let err = parse_toml::<ModelConfig>("segments = 4\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("classes"), "{err}");
        let ok: ModelConfig = parse_toml("classes = 8\n", "cfg").unwrap();
        assert_eq!(ok.segments, 20);
    }

    #[test]
    fn parse_errors_carry_line_info() {
        let err = parse_toml::<ModelConfig>("classes = 8\ntop_k = \"x\"\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn ablations() {
        let c = ModelConfig::full_size();
        assert_eq!(c.with_ablation(Ablation::Tssm).top_k, 20);
        let s = c.with_ablation(Ablation::Srsm);
        assert_eq!(s.top_m, s.patches);
        assert!(!s.use_srsm_attention);
        assert!("bogus".parse::<Ablation>().is_err());
        assert_eq!("AVAM".parse::<Ablation>().unwrap(), Ablation::Avam);
    }

    #[test]
    fn synth_validation() {
        let mut s = SynthSpec::new(10, -1.0, 1.0, 0);
        assert!(s.validate().unwrap_err().to_string().contains("signal_strength"));
        s.signal_strength = 1.0;
        s.split = [0.5, 0.2, 0.2];
        assert!(s.validate().is_err());
    }
}
