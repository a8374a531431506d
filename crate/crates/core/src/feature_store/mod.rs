//! On-disk feature bundles, synthetic scene generation and dataset splits.

pub mod bundle;
pub mod container;
pub mod dataset;
pub mod synth;

pub use bundle::{read_bundle, write_bundle, BundleDims, FeatureBundle, Planted};
pub use dataset::{read_dataset, read_index, write_dataset, DatasetIndex, IndexEntry};
pub use synth::{generate_split, generate_synthetic, prototypes, split_dataset, Sample, Split, SynthDataset};
