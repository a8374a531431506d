//! Synthetic feature scenes with a planted question-relevant segment and patch.
//!
//! Every video gets Gaussian noise in all features. The answer's prototype is
//! added to patch `p*` of every frame in segment `s*`, a fixed projection of the
//! same prototype is added to the raw audio of that segment, and the question
//! feature is the prototype plus a little noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{BundleDims, FeatureBundle, Planted};
use crate::config::{ModelConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A bundle tagged with the split it was assigned to.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub bundle: FeatureBundle,
    pub split: Option<Split>,
}

/// Output of [`generate_synthetic`]: the bundles plus the class prototypes used to plant them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// `[C × D]`, unit-norm rows.
    pub prototypes: Tensor<f32>,
    /// `[C × D_a]`, unit-norm rows.
    pub audio_prototypes: Tensor<f32>,
    pub bundles: Vec<FeatureBundle>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect()
}

fn normalize_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit-norm class prototypes and their audio-space images for a dataset seed.
pub fn prototypes(spec: &SynthSpec, cfg: &ModelConfig) -> (Tensor<f32>, Tensor<f32>) {
    let (c, d, da) = (cfg.classes, cfg.dim, cfg.audio_dim);
    let mut rng = stream_rng(spec.seed, 0);
    let mut protos = gaussian(&mut rng, c * d, 1.0);
    normalize_rows(&mut protos, d);
    let projection = gaussian(&mut rng, d * da, 1.0);
    let mut audio = vec![0f32; c * da];
    for ci in 0..c {
        for j in 0..da {
            let mut acc = 0f64;
            for i in 0..d {
                acc += protos[ci * d + i] as f64 * projection[i * da + j] as f64;
            }
            audio[ci * da + j] = acc as f32;
        }
    }
    normalize_rows(&mut audio, da);
    (
        Tensor::new(vec![c, d], protos).expect("shape"),
        Tensor::new(vec![c, da], audio).expect("shape"),
    )
}

/// Generates `spec.n_videos` bundles for `cfg`; a pure function of its inputs.
pub fn generate_synthetic(spec: &SynthSpec, cfg: &ModelConfig) -> Result<SynthDataset> {
    spec.validate()?;
    cfg.validate()?;
    let (protos, audio_protos) = prototypes(spec, cfg);
    let dims = BundleDims::of(cfg);
    let bundles = (0..spec.n_videos)
        .into_par_iter()
        .map(|i| make_video(spec, cfg, dims, i, &protos, &audio_protos))
        .collect::<Vec<_>>();
    Ok(SynthDataset { prototypes: protos, audio_prototypes: audio_protos, bundles })
}

fn make_video(
    spec: &SynthSpec,
    cfg: &ModelConfig,
    dims: BundleDims,
    index: usize,
    protos: &Tensor<f32>,
    audio_protos: &Tensor<f32>,
) -> FeatureBundle {
    let mut rng = stream_rng(spec.seed, index as u64 + 1);
    let (k, t, m, d, da) = (dims.segments, dims.snippets, dims.patches, dims.dim, dims.audio_dim);
    let answer = index % cfg.classes;
    let qtype = spec.qtypes[rng.random_range(0..spec.qtypes.len())].clone();
    let planted = Planted { segment: rng.random_range(0..k), patch: rng.random_range(0..m) };

    let mut audio = gaussian(&mut rng, k * t * da, spec.noise_std);
    let frame = gaussian(&mut rng, k * t * d, spec.noise_std);
    let mut patch = gaussian(&mut rng, k * t * m * d, spec.noise_std);
    let mut question = gaussian(&mut rng, d, spec.question_noise);

    let s = spec.signal_strength as f32;
    let proto = protos.row(answer);
    let aproto = audio_protos.row(answer);
    for snip in 0..t {
        let frame_idx = planted.segment * t + snip;
        let p = &mut patch[(frame_idx * m + planted.patch) * d..][..d];
        p.iter_mut().zip(proto).for_each(|(x, &v)| *x += s * v);
        let a = &mut audio[frame_idx * da..][..da];
        a.iter_mut().zip(aproto).for_each(|(x, &v)| *x += s * v);
    }
    question.iter_mut().zip(proto).for_each(|(x, &v)| *x += v);

    FeatureBundle {
        dims,
        classes: cfg.classes,
        audio_raw: Tensor::new(dims.audio_shape(), audio).expect("shape"),
        visual_frame: Tensor::new(dims.frame_shape(), frame).expect("shape"),
        visual_patch: Tensor::new(dims.patch_shape(), patch).expect("shape"),
        question: Tensor::new(dims.question_shape(), question).expect("shape"),
        answer,
        qtype,
        video_id: format!("synth-{:06}", index),
        planted: Some(planted),
    }
}

/// Partitions `items` into train/val/test by `ratios` after a seeded shuffle.
///
/// Split sizes are `round(n·r_train)`, `round(n·r_val)` and the remainder.
pub fn split_dataset<T>(items: Vec<T>, ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((train, val, test))
}

/// Generates a dataset and tags each bundle with its split.
pub fn generate_split(spec: &SynthSpec, cfg: &ModelConfig) -> Result<(SynthDataset, Vec<Sample>)> {
    let mut ds = generate_synthetic(spec, cfg)?;
    let bundles = std::mem::take(&mut ds.bundles);
    let (train, val, test) = split_dataset(bundles, spec.split, spec.seed)?;
    let mut samples = Vec::with_capacity(spec.n_videos);
    for (part, split) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        samples.extend(part.into_iter().map(|bundle| Sample { bundle, split: Some(split) }));
    }
    samples.sort_by(|a, b| a.bundle.video_id.cmp(&b.bundle.video_id));
    Ok((ds, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let (a, b, c) = split_dataset((0..10).collect(), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<i32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let again = split_dataset((0..10).collect(), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a, b, c), again);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_dataset(vec![1, 2], [0.5, 0.5, 0.1], 0).is_err());
    }

    #[test]
    fn negative_signal_rejected() {
        let spec = SynthSpec::new(2, -0.5, 1.0, 0);
        assert!(generate_synthetic(&spec, &ModelConfig::tiny()).is_err());
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let spec = SynthSpec::new(1, 1.0, 1.0, 7);
        let (p, a) = prototypes(&spec, &ModelConfig::tiny());
        for t in [&p, &a] {
            let (rows, _) = t.as_matrix_dims();
            for r in 0..rows {
                let n: f32 = t.row(r).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }
}
