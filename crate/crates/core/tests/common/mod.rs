//! Shared fixtures and a plain-loop reference implementation of the network.
#![allow(dead_code)]

use std::collections::HashMap;

use pstp_core::model::ModelInput;
use pstp_core::{ModelConfig, PstpNet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput<f64> {
    let mut r = rng(seed);
    let f = cfg.frames();
    ModelInput {
        audio_raw: random_tensor(&mut r, &[f, cfg.audio_dim], 1.0),
        visual_frame: random_tensor(&mut r, &[f, cfg.dim], 1.0),
        visual_patch: random_tensor(&mut r, &[f * cfg.patches, cfg.dim], 1.0),
        question: random_tensor(&mut r, &[1, cfg.dim], 1.0),
    }
}

/// A network with every parameter (biases included) drawn uniformly.
pub fn random_net(cfg: &ModelConfig, seed: u64) -> PstpNet<f64> {
    let mut net = PstpNet::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in net.params.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = random_tensor(&mut r, &shape, 0.5);
    }
    net
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.as_matrix_dims();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    c
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn mean_rows(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Single-head attention of each query row over `keys`/`values`; returns (out, weights).
pub fn attend(queries: &Mat, keys: &Mat, values: &Mat, scale: f64) -> (Mat, Mat) {
    let mut out = Vec::new();
    let mut ws = Vec::new();
    for q in queries {
        let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let w = softmax(&logits);
        let mut o = vec![0.0; values[0].len()];
        for (wj, v) in w.iter().zip(values) {
            for (oo, vv) in o.iter_mut().zip(v) {
                *oo += wj * vv;
            }
        }
        out.push(o);
        ws.push(w);
    }
    (out, ws)
}

/// Multi-head attention by slicing columns per head; weights are head-averaged.
pub fn attend_heads(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale: f64) -> (Mat, Mat) {
    let (dk, dv) = (q[0].len() / heads, v[0].len() / heads);
    let cols = |m: &Mat, h: usize, w: usize| -> Mat { m.iter().map(|r| r[h * w..(h + 1) * w].to_vec()).collect() };
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    let mut avg = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..heads {
        let (o, w) = attend(&cols(q, h, dk), &cols(k, h, dk), &cols(v, h, dv), scale);
        for i in 0..q.len() {
            out[i][h * dv..(h + 1) * dv].copy_from_slice(&o[i]);
            for j in 0..k.len() {
                avg[i][j] += w[i][j] / heads as f64;
            }
        }
    }
    (out, avg)
}

pub fn top_k_ref(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    // Largest first, lower index first among ties.
    idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort();
    top
}

pub struct RefParams(HashMap<String, Tensor<f64>>);

impl RefParams {
    pub fn of(net: &PstpNet<f64>) -> Self {
        Self(net.params.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect())
    }

    pub fn linear(&self, name: &str, x: &Mat) -> Mat {
        let w = to_mat(&self.0[&format!("{name}.weight")]);
        let b = self.0[&format!("{name}.bias")].data().to_vec();
        add_row(&matmul(x, &w), &b)
    }

    pub fn mha(&self, name: &str, q: &Mat, kv: &Mat, heads: usize) -> (Mat, Mat) {
        let qp = self.linear(&format!("{name}.query"), q);
        let kp = self.linear(&format!("{name}.key"), kv);
        let vp = self.linear(&format!("{name}.value"), kv);
        let scale = 1.0 / ((qp[0].len() / heads) as f64).sqrt();
        let (o, w) = attend_heads(&qp, &kp, &vp, heads, scale);
        (self.linear(&format!("{name}.output"), &o), w)
    }
}

fn avf(audio: &Mat, visual: &Mat, block: usize, layers: usize) -> (Mat, Mat) {
    let scale = 1.0 / (audio[0].len() as f64).sqrt();
    let (mut a, mut v) = (audio.clone(), visual.clone());
    for _ in 0..layers {
        let mut na = Vec::new();
        let mut nv = Vec::new();
        for (ab, vb) in a.chunks(block).zip(v.chunks(block)) {
            let (ab, vb) = (ab.to_vec(), vb.to_vec());
            let (a_self, _) = attend(&ab, &ab, &ab, scale);
            let (a_cross, _) = attend(&ab, &vb, &vb, scale);
            let (v_self, _) = attend(&vb, &vb, &vb, scale);
            let (v_cross, _) = attend(&vb, &ab, &ab, scale);
            na.extend(add(&add(&ab, &a_self), &a_cross));
            nv.extend(add(&add(&vb, &v_self), &v_cross));
        }
        a = na;
        v = nv;
    }
    (a, v)
}

pub struct RefOutput {
    pub logits: Vec<f64>,
    pub segments: Vec<usize>,
    pub segment_weights: Vec<f64>,
    pub patches: Vec<Vec<usize>>,
}

/// Straight-line forward pass written directly from the module descriptions.
pub fn reference_forward(cfg: &ModelConfig, net: &PstpNet<f64>, x: &ModelInput<f64>) -> RefOutput {
    let p = RefParams::of(net);
    let (k, t, m, h) = (cfg.segments, cfg.snippets, cfg.patches, cfg.heads);
    let audio = p.linear("audio_proj", &to_mat(&x.audio_raw));
    let visual = to_mat(&x.visual_frame);
    let patches = to_mat(&x.visual_patch);
    let q = to_mat(&x.question);

    // Temporal selection.
    let (a_upd, v_upd) = avf(&audio, &visual, t, cfg.fusion_layers);
    let joint: Mat = (0..k)
        .map(|s| {
            let mut row = mean_rows(&a_upd[s * t..(s + 1) * t]);
            row.extend(mean_rows(&v_upd[s * t..(s + 1) * t]));
            row
        })
        .collect();
    let segs: Mat = p.linear("segment_fc", &joint).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let (att, w) = p.mha("tssm_attn", &q, &segs, h);
    let segs_upd = add_row(&segs, &att[0]);
    let selected = top_k_ref(&w[0], cfg.top_k);
    let rows: Vec<usize> = selected.iter().flat_map(|&s| (0..t).map(move |i| s * t + i)).collect();
    let f_tssm: Mat = rows.iter().map(|&r| v_upd[r].clone()).collect();
    let f_sel: Mat = selected.iter().map(|&s| segs_upd[s].clone()).collect();
    let f_audio: Mat = rows.iter().map(|&r| audio[r].clone()).collect();

    // Spatial selection and audio-guided attention, frame by frame.
    let mut kept_all = Vec::new();
    let mut avam_all = Vec::new();
    let mut patch_idx = Vec::new();
    for (g, &r) in rows.iter().enumerate() {
        let frame: Mat = patches[r * m..(r + 1) * m].to_vec();
        let kept: Mat = if cfg.use_srsm_attention {
            let (att, w) = p.mha("srsm_attn", &q, &frame, h);
            let upd = add_row(&frame, &att[0]);
            let idx = top_k_ref(&w[0], cfg.top_m);
            let kept = idx.iter().map(|&i| upd[i].clone()).collect();
            patch_idx.push(idx);
            kept
        } else {
            patch_idx.push((0..m).collect());
            frame
        };
        if cfg.use_avam {
            let (att, _) = p.mha("avam_attn", &vec![f_audio[g].clone()], &kept, h);
            avam_all.extend(add_row(&kept, &att[0]));
        }
        kept_all.extend(kept);
    }

    let mut tokens = vec![add(&vec![mean_rows(&f_tssm)], &vec![mean_rows(&f_sel)])[0].clone(), mean_rows(&kept_all)];
    if cfg.use_avam {
        tokens.push(mean_rows(&avam_all));
    }
    let lgpm = cfg.use_lgpm.then(|| avf(&audio, &visual, k * t, cfg.fusion_layers));
    if let Some((_, lv)) = &lgpm {
        tokens.push(mean_rows(lv));
    }
    tokens.push(mean_rows(&f_audio));
    if let Some((la, _)) = &lgpm {
        tokens.push(mean_rows(la));
    }
    let relu: Mat = tokens.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let pooled = mean_rows(&relu);
    let gated: Vec<f64> = pooled.iter().zip(&q[0]).map(|(a, b)| (a * b).tanh()).collect();
    let hidden = p.linear("fusion_fc", &vec![gated]);
    let logits = p.linear("classifier", &hidden)[0].clone();
    RefOutput { logits, segments: selected, segment_weights: w[0].clone(), patches: patch_idx }
}
