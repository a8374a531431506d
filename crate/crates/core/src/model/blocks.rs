//! Projection-free audio-visual fusion and the segment embedding.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Scalar;

/// One residual self + cross attention update of both modalities.
///
/// `audio`, `visual`: `[G·n × D]`, attention stays within each of the `groups`
/// blocks of `n` rows. Logits are scaled by `1/√D`.
fn avf_layer<S: Scalar>(tape: &mut Tape<S>, audio: Var, visual: Var, groups: usize) -> Result<(Var, Var)> {
    if tape.shape(audio) != tape.shape(visual) {
        return Err(Error::Shape(format!(
            "audio {:?} and visual {:?} sequences differ",
            tape.shape(audio),
            tape.shape(visual)
        )));
    }
    let d = tape.value(audio).as_matrix_dims().1;
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let (a_self, _) = tape.attention(audio, audio, audio, groups, 1, scale)?;
    let (a_cross, _) = tape.attention(audio, visual, visual, groups, 1, scale)?;
    let (v_self, _) = tape.attention(visual, visual, visual, groups, 1, scale)?;
    let (v_cross, _) = tape.attention(visual, audio, audio, groups, 1, scale)?;
    let a = tape.add(audio, a_self)?;
    let a = tape.add(a, a_cross)?;
    let v = tape.add(visual, v_self)?;
    let v = tape.add(v, v_cross)?;
    Ok((a, v))
}

/// AVF: `layers` stacked residual self/cross attention updates within each segment.
pub fn avf_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    visual: Var,
    groups: usize,
    layers: usize,
) -> Result<(Var, Var)> {
    let (mut a, mut v) = (audio, visual);
    for _ in 0..layers {
        (a, v) = avf_layer(tape, a, v, groups)?;
    }
    Ok((a, v))
}

/// LGPM: the AVF update applied over the whole `[(K·T) × D]` sequence.
pub fn lgpm_perceive<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    visual: Var,
    layers: usize,
) -> Result<(Var, Var)> {
    avf_fuse(tape, audio, visual, 1, layers)
}

/// Pools AVF outputs over each segment's snippets, joins the modalities and
/// maps `2D → D` followed by ReLU. Returns `[K × D]`.
pub fn segment_embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[Var],
    fc: &Linear,
    audio: Var,
    visual: Var,
    segments: usize,
    snippets: usize,
) -> Result<Var> {
    let d = tape.value(audio).as_matrix_dims().1;
    let a = tape.reshape(audio, &[segments, snippets, d])?;
    let a = tape.mean(a, 1)?;
    let a = tape.reshape(a, &[segments, d])?;
    let v = tape.reshape(visual, &[segments, snippets, d])?;
    let v = tape.mean(v, 1)?;
    let v = tape.reshape(v, &[segments, d])?;
    let joint = tape.concat_cols(&[a, v])?;
    let h = fc.forward(tape, params, joint)?;
    Ok(tape.relu(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_snippet_avf_is_sum_of_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![0.25, 3.0, -1.0]]).unwrap());
        let (a2, v2) = avf_fuse(&mut tape, a, v, 1, 1).unwrap();
        assert_eq!(tape.value(a2).data(), &[2.25, -1.0, 0.0]);
        assert_eq!(tape.value(v2).data(), &[1.5, 4.0, -1.5]);
    }

    #[test]
    fn zero_inputs_stay_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![6, 4]));
        let v = tape.constant(Tensor::zeros(vec![6, 4]));
        let (a2, v2) = avf_fuse(&mut tape, a, v, 3, 2).unwrap();
        assert!(tape.value(a2).data().iter().chain(tape.value(v2).data()).all(|&x| x == 0.0));
        let (a3, v3) = lgpm_perceive(&mut tape, a, v, 1).unwrap();
        assert!(tape.value(a3).data().iter().chain(tape.value(v3).data()).all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_lengths_fail() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![4, 4]));
        let v = tape.constant(Tensor::zeros(vec![6, 4]));
        assert!(lgpm_perceive(&mut tape, a, v, 1).is_err());
    }
}
