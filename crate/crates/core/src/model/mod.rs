//! The progressive spatio-temporal perception network.
//!
//! Forward graph for one video:
//!
//! 1. raw audio is projected to `D`;
//! 2. AVF updates audio/visual snippets inside each segment, segments are
//!    embedded and the question attends over them (TSSM), keeping the Top_k
//!    segments and gathering their snippets, audio and patches (Γ = T·Top_k frames);
//! 3. per selected frame the question attends over its patches (SRSM), keeping Top_m;
//! 4. each frame's audio attends over its kept patches (AVAM);
//! 5. LGPM runs the AVF update over the full unselected sequence;
//! 6. pooled module outputs are fused with the question and classified.
//!
//! Hard selections only route gradients through the selected rows.

pub mod blocks;
pub mod select;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{avf_fuse, lgpm_perceive, segment_embed};
pub use select::{top_k_indices, SelectionTrace};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::feature_store::FeatureBundle;
use crate::nn::{Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Scalar, Tensor};
use select::{grouped_rows, repeat_groups, snippet_rows};

/// Cost-attribution scopes, in forward order.
pub const MODULES: [&str; 6] = ["input", "tssm", "srsm", "avam", "lgpm", "fusion"];

/// Per-video input features flattened to matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<S> {
    /// `[(K·T) × D_a]`
    pub audio_raw: Tensor<S>,
    /// `[(K·T) × D]`
    pub visual_frame: Tensor<S>,
    /// `[(K·T·M) × D]`
    pub visual_patch: Tensor<S>,
    /// `[1 × D]`
    pub question: Tensor<S>,
}

impl<S: Scalar> ModelInput<S> {
    pub fn from_bundle(b: &FeatureBundle) -> Self {
        let d = &b.dims;
        let frames = d.segments * d.snippets;
        let flat = |t: &Tensor<f32>, shape: Vec<usize>| t.cast::<S>().reshape(shape).expect("bundle dims validated");
        Self {
            audio_raw: flat(&b.audio_raw, vec![frames, d.audio_dim]),
            visual_frame: flat(&b.visual_frame, vec![frames, d.dim]),
            visual_patch: flat(&b.visual_patch, vec![frames * d.patches, d.dim]),
            question: flat(&b.question, vec![1, d.dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.audio_raw, &self.visual_frame, &self.visual_patch, &self.question]
    }

    pub fn from_tensors(t: [Tensor<S>; 4]) -> Self {
        let [audio_raw, visual_frame, visual_patch, question] = t;
        Self { audio_raw, visual_frame, visual_patch, question }
    }
}

/// Tape handles for a [`ModelInput`].
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub audio_raw: Var,
    pub visual_frame: Var,
    pub visual_patch: Var,
    pub question: Var,
}

impl InputVars {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, input: &ModelInput<S>, requires_grad: bool) -> Self {
        Self {
            audio_raw: tape.leaf(input.audio_raw.clone(), requires_grad),
            visual_frame: tape.leaf(input.visual_frame.clone(), requires_grad),
            visual_patch: tape.leaf(input.visual_patch.clone(), requires_grad),
            question: tape.leaf(input.question.clone(), requires_grad),
        }
    }

    pub fn from_slice(v: &[Var]) -> Self {
        Self { audio_raw: v[0], visual_frame: v[1], visual_patch: v[2], question: v[3] }
    }
}

/// Learned layers of the network; ablated modules have none.
#[derive(Debug, Clone)]
pub struct Layers {
    pub audio_proj: Linear,
    pub segment_fc: Linear,
    pub tssm: MultiHeadAttention,
    pub srsm: Option<MultiHeadAttention>,
    pub avam: Option<MultiHeadAttention>,
    pub fusion_fc: Linear,
    pub classifier: Linear,
}

/// Intermediate module outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModuleOutputs {
    /// F_TSSM `[Top_k × T × D]`: AVF-updated visual snippets of the selected segments.
    pub f_tssm: Var,
    /// Selected rows of the question-updated segment embeddings, `[Top_k × D]`.
    pub f_tssm_segments: Var,
    /// F_TSSM^A `[Γ × D]`
    pub f_tssm_audio: Var,
    /// F_TSSM^P `[Γ × M × D]`
    pub f_tssm_patch: Var,
    /// F_SRSM `[Γ × Top_m × D]`
    pub f_srsm: Var,
    /// F_AVAM `[Γ × Top_m × D]`
    pub f_avam: Option<Var>,
    /// F_LGPM^A `[(K·T) × D]`
    pub f_lgpm_a: Option<Var>,
    /// F_LGPM^V `[(K·T) × D]`
    pub f_lgpm_v: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub outputs: ModuleOutputs,
    pub trace: SelectionTrace,
}

/// Results of [`PstpNet::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct SampleGrads<S> {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Tensor<S>>,
    pub trace: SelectionTrace,
}

/// Results of [`PstpNet::predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub answer: usize,
    pub trace: SelectionTrace,
}

#[derive(Debug, Clone)]
pub struct PstpNet<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub layers: Layers,
}

fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<S: Scalar> PstpNet<S> {
    /// Builds the network with Glorot-uniform weights drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h) = (cfg.dim, cfg.heads);
        let audio_proj = Linear::new(&mut store, &mut rng, "audio_proj", "input", cfg.audio_dim, d)?;
        let segment_fc = Linear::new(&mut store, &mut rng, "segment_fc", "tssm", 2 * d, d)?;
        let tssm = MultiHeadAttention::new(&mut store, &mut rng, "tssm_attn", "tssm", d, h)?;
        let srsm = cfg
            .use_srsm_attention
            .then(|| MultiHeadAttention::new(&mut store, &mut rng, "srsm_attn", "srsm", d, h))
            .transpose()?;
        let avam = cfg
            .use_avam
            .then(|| MultiHeadAttention::new(&mut store, &mut rng, "avam_attn", "avam", d, h))
            .transpose()?;
        let fusion_fc = Linear::new(&mut store, &mut rng, "fusion_fc", "fusion", d, d)?;
        let classifier = Linear::new(&mut store, &mut rng, "classifier", "fusion", d, cfg.classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            layers: Layers { audio_proj, segment_fc, tssm, srsm, avam, fusion_fc, classifier },
        })
    }

    /// Checks that `input` matches this network's configured shapes.
    pub fn check_input(&self, input: &ModelInput<S>) -> Result<()> {
        let c = &self.cfg;
        let frames = c.frames();
        for (name, t, want) in [
            ("audio_raw", &input.audio_raw, [frames, c.audio_dim]),
            ("visual_frame", &input.visual_frame, [frames, c.dim]),
            ("visual_patch", &input.visual_patch, [frames * c.patches, c.dim]),
            ("question", &input.question, [1, c.dim]),
        ] {
            if t.shape() != want {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Builds the full forward graph on `tape`. `params` are the bound
    /// parameter leaves in registration order.
    pub fn forward(&self, tape: &mut Tape<S>, params: &[Var], x: &InputVars) -> Result<ForwardPass> {
        let c = &self.cfg;
        let l = &self.layers;

        tape.set_scope("input");
        let audio = l.audio_proj.forward(tape, params, x.audio_raw)?;

        tape.set_scope("tssm");
        let (tssm_out, selected, segment_weights) =
            self.tssm_select(tape, params, audio, x.visual_frame, x.visual_patch, x.question)?;

        tape.set_scope("srsm");
        let (f_srsm, patch_indices, patch_weights) = self.srsm_select(tape, params, tssm_out.f_tssm_patch, x.question)?;

        tape.set_scope("avam");
        let f_avam = match &l.avam {
            Some(mha) => Some(avam_attend(tape, params, mha, f_srsm, tssm_out.f_tssm_audio)?),
            None => None,
        };

        tape.set_scope("lgpm");
        let (f_lgpm_a, f_lgpm_v) = if c.use_lgpm {
            let (a, v) = lgpm_perceive(tape, audio, x.visual_frame, c.fusion_layers)?;
            (Some(a), Some(v))
        } else {
            (None, None)
        };

        let outputs = ModuleOutputs { f_srsm, f_avam, f_lgpm_a, f_lgpm_v, ..tssm_out };
        tape.set_scope("fusion");
        let logits = self.fuse_and_predict(tape, params, &outputs, x.question)?;
        tape.set_scope("other");

        let trace = SelectionTrace {
            frame_snippets: snippet_rows(&selected, c.snippets),
            segment_indices: selected,
            segment_weights,
            patch_indices,
            patch_weights,
        };
        Ok(ForwardPass { logits, outputs, trace })
    }

    /// TSSM: AVF, segment embedding, question attention, Top_k selection and gathers.
    ///
    /// Returns partial outputs (SRSM/AVAM/LGPM fields hold placeholders), the
    /// selected segment indices and W_AV.
    pub fn tssm_select(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        audio: Var,
        visual: Var,
        patches: Var,
        question: Var,
    ) -> Result<(ModuleOutputs, Vec<usize>, Vec<f64>)> {
        let c = &self.cfg;
        let l = &self.layers;
        if c.top_k > c.segments {
            return Err(Error::Config(format!("top_k {} exceeds {} segments", c.top_k, c.segments)));
        }
        let (a_upd, v_upd) = avf_fuse(tape, audio, visual, c.segments, c.fusion_layers)?;
        let segs = segment_embed(tape, params, &l.segment_fc, a_upd, v_upd, c.segments, c.snippets)?;
        let (att, w_av) = l.tssm.forward(tape, params, question, segs, segs)?;
        let segs_upd = tape.add_row(segs, att)?;
        let selected = top_k_indices(w_av.data(), c.top_k);

        let rows = snippet_rows(&selected, c.snippets);
        let f_tssm = tape.gather_rows(v_upd, &rows)?;
        let f_tssm = tape.reshape(f_tssm, &[c.top_k, c.snippets, c.dim])?;
        let f_tssm_segments = tape.gather_rows(segs_upd, &selected)?;
        let f_tssm_audio = tape.gather_rows(audio, &rows)?;
        let m = c.patches;
        let patch_rows: Vec<usize> = rows.iter().flat_map(|&r| (0..m).map(move |p| r * m + p)).collect();
        let f_tssm_patch = tape.gather_rows(patches, &patch_rows)?;
        let f_tssm_patch = tape.reshape(f_tssm_patch, &[c.gamma(), c.patches, c.dim])?;
        let outputs = ModuleOutputs {
            f_tssm,
            f_tssm_segments,
            f_tssm_audio,
            f_tssm_patch,
            f_srsm: f_tssm_patch,
            f_avam: None,
            f_lgpm_a: None,
            f_lgpm_v: None,
        };
        Ok((outputs, selected, to_f64(w_av.data())))
    }

    /// SRSM: per selected frame, question attention over its M patches, the
    /// attended row added to every patch, then Top_m patches kept.
    ///
    /// Returns `[Γ × Top_m × D]`, per-frame indices and per-frame weights.
    #[allow(clippy::type_complexity)]
    pub fn srsm_select(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        frame_patches: Var,
        question: Var,
    ) -> Result<(Var, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        let c = &self.cfg;
        let gamma = c.gamma();
        if c.top_m > c.patches {
            return Err(Error::Config(format!("top_m {} exceeds {} patches", c.top_m, c.patches)));
        }
        let Some(mha) = &self.layers.srsm else {
            let all: Vec<usize> = (0..c.patches).collect();
            return Ok((frame_patches, vec![all; gamma], vec![Vec::new(); gamma]));
        };
        let flat = tape.reshape(frame_patches, &[gamma * c.patches, c.dim])?;
        let (att, w) = mha.forward_shared_query(tape, params, question, flat, gamma)?;
        let spread = tape.gather_rows(att, &repeat_groups(gamma, c.patches))?;
        let updated = tape.add(flat, spread)?;
        let mut indices = Vec::with_capacity(gamma);
        let mut weights = Vec::with_capacity(gamma);
        for g in 0..gamma {
            let row = w.row(g);
            indices.push(top_k_indices(row, c.top_m));
            weights.push(to_f64(row));
        }
        let kept = tape.gather_rows(updated, &grouped_rows(&indices, c.patches))?;
        let kept = tape.reshape(kept, &[gamma, c.top_m, c.dim])?;
        Ok((kept, indices, weights))
    }

    /// Pools module outputs into tokens, gates them with the question and classifies.
    pub fn fuse_and_predict(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        mo: &ModuleOutputs,
        question: Var,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let pool = |tape: &mut Tape<S>, v: Var| -> Result<Var> {
            let flat = tape.reshape(v, &[tape.value(v).numel() / d, d])?;
            tape.mean(flat, 0)
        };
        let tssm_v = pool(tape, mo.f_tssm)?;
        let tssm_s = pool(tape, mo.f_tssm_segments)?;
        let mut tokens = vec![tape.add(tssm_v, tssm_s)?, pool(tape, mo.f_srsm)?];
        if let Some(v) = mo.f_avam {
            tokens.push(pool(tape, v)?);
        }
        if let Some(v) = mo.f_lgpm_v {
            tokens.push(pool(tape, v)?);
        }
        tokens.push(pool(tape, mo.f_tssm_audio)?);
        if let Some(a) = mo.f_lgpm_a {
            tokens.push(pool(tape, a)?);
        }
        let stacked = tape.concat_rows(&tokens)?;
        let aggregate = tape.relu(stacked);
        let pooled = tape.mean(aggregate, 0)?;
        let gated = tape.mul(pooled, question)?;
        let gated = tape.tanh(gated);
        let hidden = self.layers.fusion_fc.forward(tape, params, gated)?;
        self.layers.classifier.forward(tape, params, hidden)
    }

    /// Cross-entropy loss, its gradient w.r.t. every parameter, and the trace.
    pub fn loss_and_grads(&self, input: &ModelInput<S>, label: usize) -> Result<SampleGrads<S>> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, true);
        let x = InputVars::bind(&mut tape, input, false);
        let pass = self.forward(&mut tape, &params, &x)?;
        let loss = tape.cross_entropy(pass.logits, label)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        let logits = to_f64(tape.value(pass.logits).data());
        tape.backward(loss)?;
        let grads = params.iter().map(|&p| tape.grad_tensor(p)).collect();
        Ok(SampleGrads { loss: loss_value, logits, grads, trace: pass.trace })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, input: &ModelInput<S>) -> Result<Prediction> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let x = InputVars::bind(&mut tape, input, false);
        let pass = self.forward(&mut tape, &params, &x)?;
        let probs_var = tape.softmax(pass.logits)?;
        let logits = to_f64(tape.value(pass.logits).data());
        let probs = to_f64(tape.value(probs_var).data());
        let answer = top_k_indices(&logits, 1)[0];
        Ok(Prediction { logits, probs, answer, trace: pass.trace })
    }

    /// MACs measured on a real forward pass, by module scope.
    pub fn measured_macs(&self, input: &ModelInput<S>) -> Result<std::collections::BTreeMap<String, u64>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let x = InputVars::bind(&mut tape, input, false);
        self.forward(&mut tape, &params, &x)?;
        Ok(tape.macs_by_scope().iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

/// AVAM: each frame's audio attends over its kept patches; the attended row is
/// added to every kept patch. `kept: [Γ × Top_m × D]`, `audio: [Γ × D]`.
pub fn avam_attend<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[Var],
    mha: &MultiHeadAttention,
    kept: Var,
    audio: Var,
) -> Result<Var> {
    let shape = tape.shape(kept).to_vec();
    let (gamma, d) = tape.value(audio).as_matrix_dims();
    if shape.len() != 3 || shape[0] != gamma || shape[2] != d {
        return Err(Error::Shape(format!(
            "avam: patches {shape:?} do not align with audio [{gamma}, {d}]"
        )));
    }
    let top_m = shape[1];
    let flat = tape.reshape(kept, &[gamma * top_m, d])?;
    let (att, _) = mha.forward_grouped(tape, params, audio, flat, flat, gamma)?;
    let spread = tape.gather_rows(att, &repeat_groups(gamma, top_m))?;
    let out = tape.add(flat, spread)?;
    tape.reshape(out, &shape)
}
