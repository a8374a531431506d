//! Parameter and forward-pass MAC accounting.
//!
//! MAC convention (shared with the tape's own counters): a matmul `(m×k)(k×n)`
//! costs `m·k·n`; elementwise ops, softmax and bias adds cost one per output
//! element; means cost one per input element; attention over `G` groups costs
//! `G·n_q·n_k·(d_k + d_v + heads)` for logits, softmax and the weighted sum;
//! gathers and reshapes are free. FLOPs are reported as `2·MACs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig};
use crate::model::{PstpNet, MODULES};
use crate::tensor::Scalar;

fn linear_params(d_in: usize, d_out: usize) -> u64 {
    (d_in * d_out + d_out) as u64
}

fn linear_macs(rows: usize, d_in: usize, d_out: usize) -> u64 {
    (rows * d_in * d_out + rows * d_out) as u64
}

fn attention_macs(groups: usize, n_q: usize, n_k: usize, dim: usize, heads: usize) -> u64 {
    (groups * n_q * n_k * (2 * dim + heads)) as u64
}

/// One projection-free AVF layer over `groups` blocks of `n` rows.
fn avf_layer_macs(groups: usize, n: usize, dim: usize) -> u64 {
    4 * attention_macs(groups, n, n, dim, 1) + 4 * (groups * n * dim) as u64
}

/// Projected multi-head attention with `q_rows` query rows projected and
/// `groups` blocks of `n_q` queries over `n_k` keys.
fn mha_macs(q_rows: usize, groups: usize, n_q: usize, n_k: usize, dim: usize, heads: usize) -> u64 {
    linear_macs(q_rows, dim, dim)
        + 2 * linear_macs(groups * n_k, dim, dim)
        + attention_macs(groups, n_q, n_k, dim, heads)
        + linear_macs(groups * n_q, dim, dim)
}

/// Trainable parameters per module, derived from the config alone.
pub fn expected_params(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let d = cfg.dim;
    let mha = 4 * linear_params(d, d);
    let mut out: BTreeMap<String, u64> = MODULES.iter().map(|m| (m.to_string(), 0)).collect();
    out.insert("input".into(), linear_params(cfg.audio_dim, d));
    out.insert("tssm".into(), linear_params(2 * d, d) + mha);
    out.insert("srsm".into(), if cfg.use_srsm_attention { mha } else { 0 });
    out.insert("avam".into(), if cfg.use_avam { mha } else { 0 });
    out.insert("fusion".into(), linear_params(d, d) + linear_params(d, cfg.classes));
    out
}

/// Parameters per module as registered in a built model.
pub fn count_params<S: Scalar>(model: &PstpNet<S>) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = MODULES.iter().map(|m| (m.to_string(), 0)).collect();
    for (module, n) in model.params.numel_by_module() {
        *out.entry(module).or_insert(0) += n as u64;
    }
    out
}

/// Closed-form forward MACs per module.
pub fn count_macs(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let (k, t, d, h) = (cfg.segments, cfg.snippets, cfg.dim, cfg.heads);
    let frames = cfg.frames();
    let gamma = cfg.gamma();
    let m = cfg.patches;
    let kept = if cfg.use_srsm_attention { cfg.top_m } else { m };
    let layers = cfg.fusion_layers as u64;
    let fd = (frames * d) as u64;

    let input = linear_macs(frames, cfg.audio_dim, d);

    let tssm = layers * avf_layer_macs(k, t, d)
        + 2 * fd
        + linear_macs(k, 2 * d, d)
        + (k * d) as u64
        + mha_macs(1, 1, 1, k, d, h)
        + (k * d) as u64;

    let srsm = if cfg.use_srsm_attention {
        mha_macs(gamma, gamma, 1, m, d, h) + (gamma * m * d) as u64
    } else {
        0
    };

    let avam = if cfg.use_avam {
        mha_macs(gamma, gamma, 1, kept, d, h) + (gamma * kept * d) as u64
    } else {
        0
    };

    let lgpm = if cfg.use_lgpm { layers * avf_layer_macs(1, frames, d) } else { 0 };

    let mut pooled = (cfg.top_k * t * d + cfg.top_k * d + d + gamma * kept * d + gamma * d) as u64;
    let mut tokens = 3;
    if cfg.use_avam {
        pooled += (gamma * kept * d) as u64;
        tokens += 1;
    }
    if cfg.use_lgpm {
        pooled += 2 * fd;
        tokens += 2;
    }
    let fusion = pooled
        + 2 * (tokens * d) as u64
        + 2 * d as u64
        + linear_macs(1, d, d)
        + linear_macs(1, d, cfg.classes);

    [("input", input), ("tssm", tssm), ("srsm", srsm), ("avam", avam), ("lgpm", lgpm), ("fusion", fusion)]
        .into_iter()
        .map(|(name, v)| (name.to_string(), v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    pub params_total: u64,
    pub params_by_module: BTreeMap<String, u64>,
    pub macs_total: u64,
    pub macs_by_module: BTreeMap<String, u64>,
    pub flops_total: u64,
}

impl CostReport {
    pub fn of(cfg: &ModelConfig) -> Self {
        let params_by_module = expected_params(cfg);
        let macs_by_module = count_macs(cfg);
        let macs_total = macs_by_module.values().sum();
        Self {
            config: cfg.clone(),
            params_total: params_by_module.values().sum(),
            params_by_module,
            macs_total,
            macs_by_module,
            flops_total: 2 * macs_total,
        }
    }

    /// Fraction of total MACs spent in `module`.
    pub fn macs_share(&self, module: &str) -> f64 {
        self.macs_by_module.get(module).copied().unwrap_or(0) as f64 / self.macs_total as f64
    }
}

/// Reports for the full config followed by each ablation, labelled.
pub fn ablation_reports(cfg: &ModelConfig, ablations: &[Ablation]) -> Vec<(String, CostReport)> {
    let mut out = vec![("full".to_string(), CostReport::of(cfg))];
    for &a in ablations {
        out.push((format!("w/o {a}"), CostReport::of(&cfg.with_ablation(a))));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub module: String,
    pub params_a: u64,
    pub params_b: u64,
    /// `b / a`; 1.0 when both are zero, `None` when only `a` is.
    pub params_ratio: Option<f64>,
    pub macs_a: u64,
    pub macs_b: u64,
    pub macs_ratio: Option<f64>,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    match (a, b) {
        (0, 0) => Some(1.0),
        (0, _) => None,
        _ => Some(b as f64 / a as f64),
    }
}

/// Per-module and total ratios of `b` relative to `a`; the total row is last.
pub fn compare_configs(a: &ModelConfig, b: &ModelConfig) -> Vec<RatioRow> {
    let (ra, rb) = (CostReport::of(a), CostReport::of(b));
    let row = |module: &str, pa: u64, pb: u64, ma: u64, mb: u64| RatioRow {
        module: module.to_string(),
        params_a: pa,
        params_b: pb,
        params_ratio: ratio(pa, pb),
        macs_a: ma,
        macs_b: mb,
        macs_ratio: ratio(ma, mb),
    };
    let mut rows: Vec<RatioRow> = MODULES
        .iter()
        .map(|&m| row(m, ra.params_by_module[m], rb.params_by_module[m], ra.macs_by_module[m], rb.macs_by_module[m]))
        .collect();
    rows.push(row("total", ra.params_total, rb.params_total, ra.macs_total, rb.macs_total));
    rows
}

/// Aligned plain-text table: one row per report, MACs per module then totals.
pub fn render_table(reports: &[(String, CostReport)]) -> String {
    let mut header = vec!["config".to_string(), "params".to_string()];
    header.extend(MODULES.iter().map(|m| format!("macs:{m}")));
    header.extend(["macs".to_string(), "flops".to_string(), "vs full".to_string()]);
    let base = reports.first().map(|(_, r)| r.macs_total).unwrap_or(0);
    let mut rows = vec![header];
    for (label, r) in reports {
        let mut row = vec![label.clone(), r.params_total.to_string()];
        row.extend(MODULES.iter().map(|m| r.macs_by_module[*m].to_string()));
        row.push(r.macs_total.to_string());
        row.push(r.flops_total.to_string());
        row.push(format!("{:.3}", r.macs_total as f64 / base.max(1) as f64));
        rows.push(row);
    }
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
