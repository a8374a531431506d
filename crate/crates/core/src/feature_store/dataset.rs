//! Dataset directories: one bundle file per video plus `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{read_bundle, write_bundle, BundleDims, Planted};
use super::synth::{Sample, Split};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub video_id: String,
    pub qtype: String,
    pub answer: usize,
    pub split: Option<Split>,
    pub planted: Option<Planted>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dims: BundleDims,
    pub classes: usize,
    pub videos: Vec<IndexEntry>,
}

/// Writes every sample under `dir/videos/` and the index. Samples must share dims.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let first = samples.first().ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    let (dims, classes) = (first.bundle.dims, first.bundle.classes);
    if let Some(bad) = samples.iter().find(|s| s.bundle.dims != dims || s.bundle.classes != classes) {
        return Err(Error::Data(format!("bundle {} has inconsistent dims", bad.bundle.video_id)));
    }
    let videos = dir.join("videos");
    fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    let entries = samples
        .par_iter()
        .map(|s| {
            let rel = format!("videos/{}.pstp", s.bundle.video_id);
            write_bundle(&s.bundle, dir.join(&rel))?;
            Ok(IndexEntry {
                path: rel,
                video_id: s.bundle.video_id.clone(),
                qtype: s.bundle.qtype.clone(),
                answer: s.bundle.answer,
                split: s.split,
                planted: s.bundle.planted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex { dims, classes, videos: entries };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads the samples of `dir`, optionally only those tagged with one of `splits`.
pub fn read_dataset(dir: impl AsRef<Path>, splits: Option<&[Split]>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let wanted: Vec<&IndexEntry> = index
        .videos
        .iter()
        .filter(|e| splits.is_none_or(|s| e.split.is_some_and(|x| s.contains(&x))))
        .collect();
    wanted
        .par_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let bundle = read_bundle(&path)?;
            if bundle.dims != index.dims || bundle.answer != e.answer || bundle.video_id != e.video_id {
                return Err(Error::Data(format!("{} disagrees with {INDEX_FILE}", path.display())));
            }
            Ok(Sample { bundle, split: e.split })
        })
        .collect()
}
