//! Hard Top-k selection and the selection trace it produces.

use serde::{Deserialize, Serialize};

/// Indices of the `k` largest weights, returned in ascending index order.
///
/// Ties are broken toward the lower index. Panics if `k > weights.len()`.
pub fn top_k_indices<T: PartialOrd + Copy>(weights: &[T], k: usize) -> Vec<usize> {
    assert!(k <= weights.len(), "top-{k} of {} weights", weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps lower indices first among equal weights.
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Snippet rows (`segment · T + t`) covered by the selected segments, in order.
pub fn snippet_rows(segments: &[usize], snippets: usize) -> Vec<usize> {
    segments.iter().flat_map(|&s| (0..snippets).map(move |t| s * snippets + t)).collect()
}

/// Row `g` of a grouped tensor repeated `n` times, for every group in order.
pub fn repeat_groups(groups: usize, n: usize) -> Vec<usize> {
    (0..groups).flat_map(|g| std::iter::repeat_n(g, n)).collect()
}

/// Rows `g · width + j` for each group's chosen column set.
pub fn grouped_rows(choices: &[Vec<usize>], width: usize) -> Vec<usize> {
    choices
        .iter()
        .enumerate()
        .flat_map(|(g, idx)| idx.iter().map(move |&j| g * width + j))
        .collect()
}

/// Segment and patch choices of one forward pass, with the weights that drove them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Ω_TSSM, ascending, length Top_k.
    pub segment_indices: Vec<usize>,
    /// Head-averaged question→segment attention, length K.
    pub segment_weights: Vec<f64>,
    /// Ω_γ for each of the Γ selected frames, ascending, length Top_m.
    pub patch_indices: Vec<Vec<usize>>,
    /// W_γ for each selected frame, length M; empty when SRSM attention is ablated.
    pub patch_weights: Vec<Vec<f64>>,
    /// Original snippet index (`segment · T + t`) of each selected frame.
    pub frame_snippets: Vec<usize>,
}

impl SelectionTrace {
    /// Whether `segment` was among the selected segments.
    pub fn segment_hit(&self, segment: usize) -> bool {
        self.segment_indices.binary_search(&segment).is_ok()
    }

    /// Whether `patch` was selected in at least half of the selected frames.
    pub fn patch_hit(&self, patch: usize) -> bool {
        let frames = self.patch_indices.len();
        if frames == 0 {
            return false;
        }
        let hits = self.patch_indices.iter().filter(|idx| idx.binary_search(&patch).is_ok()).count();
        2 * hits >= frames
    }
}
