//! Command implementations. Each returns the lines it wants printed on stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pstp_core::feature_store::{generate_split, read_bundle, read_dataset, write_dataset, Sample, Split};
use pstp_core::profiler::{ablation_reports, render_table, CostReport};
use pstp_core::training::{
    self, checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint, EpochEvent, Metrics, TrainOptions,
    TrainState,
};
use pstp_core::model::ModelInput;
use pstp_core::{Ablation, Error, ModelConfig, Precision, PstpNet, Result, Scalar, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{RunConfig, RunManifest};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESULTS_FILE: &str = "results.jsonl";

fn record<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialise")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- gen ----

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let spec = cfg.synth()?;
    let (_, samples) = generate_split(spec, &cfg.model)?;
    create_dir(out)?;
    let index = write_dataset(out, &samples)?;
    let mut manifest = RunManifest::new("gen", cfg.clone(), spec.seed);
    manifest.artifacts = vec!["index.json".into()];
    manifest.artifacts.extend(index.videos.iter().map(|v| v.path.clone()));
    manifest.write(out)?;
    let count = |s: Split| samples.iter().filter(|x| x.split == Some(s)).count();
    Ok(vec![record(&json!({
        "kind": "gen",
        "out": out.display().to_string(),
        "videos": samples.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    }))])
}

// ---- train ----

fn load_split(data: &Path, split: Split) -> Result<Vec<Sample>> {
    read_dataset(data, Some(&[split]))
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<String>> {
    if !data.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", data.display())));
    }
    let tc = cfg.train_or_default();
    match tc.precision {
        Precision::F32 => train_as::<f32>(cfg, &tc, data, out),
        Precision::F64 => train_as::<f64>(cfg, &tc, data, out),
    }
}

fn train_as<S: Scalar>(cfg: &RunConfig, tc: &TrainConfig, data: &Path, out: &Path) -> Result<Vec<String>> {
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    create_dir(out)?;
    let mut net = PstpNet::<S>::new(&cfg.model, tc.seed)?;
    let state = TrainState::fresh(&net);
    let (best_path, last_path) = (out.join(BEST_CKPT), out.join(LAST_CKPT));
    save_checkpoint(&Checkpoint::capture(&net, tc, &state.adam, state.progress), &best_path)?;

    let log_path = out.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut on_epoch = |e: EpochEvent<'_, S>| -> Result<()> {
        let ckpt = Checkpoint::capture(e.net, tc, &e.state.adam, e.state.progress);
        save_checkpoint(&ckpt, &last_path)?;
        if e.improved {
            save_checkpoint(&ckpt, &best_path)?;
        }
        Ok(())
    };
    let outcome = training::train(
        &mut net,
        &train_set,
        &val_set,
        tc,
        state,
        TrainOptions { log: Some(&mut log), on_epoch: Some(&mut on_epoch), ..Default::default() },
    );
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let outcome = outcome?;
    let last = Checkpoint::capture(&net, tc, &outcome.state.adam, outcome.state.progress);
    save_checkpoint(&last, &last_path)?;
    if val_set.is_empty() {
        save_checkpoint(&last, &best_path)?;
    }

    let best = load_checkpoint::<S>(&best_path, Some(&cfg.model))?.restore()?;
    let val = if val_set.is_empty() { None } else { Some(training::evaluate(&best, &val_set)?) };
    let summary = json!({
        "kind": "summary",
        "epochs": outcome.state.progress.epochs_done,
        "steps": outcome.state.progress.step,
        "best_epoch": outcome.state.progress.best_epoch,
        "val": val,
    });
    write_file(&out.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary).expect("ser") + "\n"))?;

    let mut manifest = RunManifest::new("train", RunConfig { train: Some(tc.clone()), ..cfg.clone() }, tc.seed);
    manifest.inputs.insert("data".into(), data.display().to_string());
    manifest.artifacts =
        [METRICS_FILE, BEST_CKPT, LAST_CKPT, SUMMARY_FILE].iter().map(|s| s.to_string()).collect();
    manifest.write(out)?;

    let mut lines = vec![record(&summary)];
    if let Some(v) = &val {
        lines.extend(metrics_table("val", v).lines().map(String::from));
    }
    Ok(lines)
}

// ---- eval ----

/// Plain-text accuracy table: overall then one column per question type.
pub fn metrics_table(label: &str, m: &Metrics) -> String {
    let mut head = vec!["split".to_string(), "n".to_string(), "overall".to_string()];
    let mut row = vec![label.to_string(), m.samples.to_string(), format!("{:.4}", m.accuracy)];
    for (qt, q) in &m.per_qtype {
        head.push(qt.clone());
        row.push(format!("{:.4}", q.accuracy));
    }
    if let Some(h) = m.tssm_hit_rate {
        head.push("tssm hit".into());
        row.push(format!("{h:.4}"));
    }
    if let Some(h) = m.srsm_hit_rate {
        head.push("srsm hit".into());
        row.push(format!("{h:.4}"));
    }
    let w: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
    let fmt = |cells: &[String]| {
        cells.iter().zip(&w).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
    };
    format!("{}\n{}\n", fmt(&head), fmt(&row))
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?} (expected train|val|test)"))),
    }
}

pub fn eval(ckpt: &Path, data: &Path, split: Split) -> Result<Vec<String>> {
    match checkpoint_precision(ckpt)? {
        Precision::F32 => eval_as::<f32>(ckpt, data, split),
        Precision::F64 => eval_as::<f64>(ckpt, data, split),
    }
}

fn eval_as<S: Scalar>(ckpt: &Path, data: &Path, split: Split) -> Result<Vec<String>> {
    let net = load_checkpoint::<S>(ckpt, None)?.restore()?;
    let samples = load_split(data, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {} of {} is empty", split.name(), data.display())));
    }
    let m = training::evaluate(&net, &samples)?;
    let mut lines = vec![record(&json!({ "kind": "eval", "split": split.name(), "metrics": m }))];
    lines.extend(metrics_table(split.name(), &m).lines().map(String::from));
    Ok(lines)
}

// ---- profile ----

pub fn profile(model: &ModelConfig, ablations: &[Ablation]) -> Result<Vec<String>> {
    model.validate()?;
    let reports = ablation_reports(model, ablations);
    let full = &reports[0].1;
    let mut lines: Vec<String> = reports
        .iter()
        .map(|(label, r)| {
            let mut rec = json!({ "kind": "cost", "label": label, "report": r });
            if label != "full" {
                rec["macs_ratio_vs_full"] = json!(r.macs_total as f64 / full.macs_total as f64);
                rec["removed_share_of_full"] =
                    json!((full.macs_total as f64 - r.macs_total as f64) / full.macs_total as f64);
            }
            record(&rec)
        })
        .collect();
    lines.extend(render_table(&reports).lines().map(String::from));
    Ok(lines)
}

// ---- sweep ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Segments,
    TopK,
    TopM,
    Layers,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "K" | "k" | "segments" => Ok(Self::Segments),
            "topk" => Ok(Self::TopK),
            "topm" => Ok(Self::TopM),
            "layers" => Ok(Self::Layers),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?} (expected K|topk|topm|layers)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Segments => "K",
            Self::TopK => "topk",
            Self::TopM => "topm",
            Self::Layers => "layers",
        }
    }

    fn apply(self, base: &ModelConfig, value: usize) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Self::Segments => cfg.segments = value,
            Self::TopK => cfg.top_k = value,
            Self::TopM => cfg.top_m = value,
            Self::Layers => cfg.fusion_layers = value,
        }
        cfg
    }
}

pub struct SweepRequest<'a> {
    pub cfg: &'a RunConfig,
    pub param: SweepParam,
    pub values: &'a [usize],
    pub out: Option<&'a Path>,
    pub cost_only: bool,
}

pub fn sweep(req: &SweepRequest<'_>) -> Result<Vec<String>> {
    if req.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let tc = req.cfg.train_or_default();
    let mut lines = Vec::new();
    let mut rows: Vec<(String, CostReport)> = Vec::new();
    let mut shared: Option<(ModelConfig, Vec<Sample>)> = None;
    for &value in req.values {
        let model = req.param.apply(&req.cfg.model, value);
        if let Err(e) = model.validate() {
            lines.push(record(&json!({
                "kind": "warning", "param": req.param.name(), "value": value, "skipped": e.to_string(),
            })));
            continue;
        }
        let cost = CostReport::of(&model);
        let mut rec = json!({
            "kind": "sweep", "param": req.param.name(), "value": value,
            "params": cost.params_total, "macs": cost.macs_total, "flops": cost.flops_total,
        });
        if !req.cost_only {
            let spec = req.cfg.synth()?;
            // Bundle shapes depend on K only among the swept parameters.
            let regen = shared.as_ref().is_none_or(|(c, _)| c.segments != model.segments);
            if regen {
                let (_, samples) = generate_split(spec, &model)?;
                shared = Some((model.clone(), samples));
            }
            let samples = &shared.as_ref().expect("generated above").1;
            let pick = |s: Split| samples.iter().filter(|x| x.split == Some(s)).cloned().collect::<Vec<_>>();
            let (tr, va, te) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
            let (val, test) = match tc.precision {
                Precision::F32 => train_and_score::<f32>(&model, &tc, &tr, &va, &te)?,
                Precision::F64 => train_and_score::<f64>(&model, &tc, &tr, &va, &te)?,
            };
            rec["val"] = json!(val);
            rec["test"] = json!(test);
        }
        lines.push(record(&rec));
        rows.push((format!("{}={value}", req.param.name()), cost));
    }
    if let Some(out) = req.out {
        create_dir(out)?;
        let results: String = lines.iter().map(|l| format!("{l}\n")).collect();
        write_file(&out.join(RESULTS_FILE), &results)?;
        let mut manifest = RunManifest::new("sweep", req.cfg.clone(), tc.seed);
        manifest.inputs.insert("param".into(), req.param.name().into());
        manifest.inputs.insert(
            "values".into(),
            req.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        manifest.inputs.insert("cost_only".into(), req.cost_only.to_string());
        manifest.artifacts = vec![RESULTS_FILE.into()];
        manifest.write(out)?;
    }
    if !rows.is_empty() {
        lines.extend(render_table(&rows).lines().map(String::from));
    }
    Ok(lines)
}

fn train_and_score<S: Scalar>(
    model: &ModelConfig,
    tc: &TrainConfig,
    tr: &[Sample],
    va: &[Sample],
    te: &[Sample],
) -> Result<(Option<Metrics>, Option<Metrics>)> {
    let mut net = PstpNet::<S>::new(model, tc.seed)?;
    let state = TrainState::fresh(&net);
    let outcome = training::train(&mut net, tr, va, tc, state, TrainOptions::default())?;
    if let Some(best) = outcome.best_params {
        for (p, v) in net.params.params_mut().iter_mut().zip(best) {
            p.value = v;
        }
    }
    let score = |s: &[Sample]| if s.is_empty() { Ok(None) } else { training::evaluate(&net, s).map(Some) };
    Ok((score(va)?, score(te)?))
}

// ---- inspect ----

pub fn inspect(ckpt: &Path, bundle: &Path) -> Result<Vec<String>> {
    match checkpoint_precision(ckpt)? {
        Precision::F32 => inspect_as::<f32>(ckpt, bundle),
        Precision::F64 => inspect_as::<f64>(ckpt, bundle),
    }
}

fn inspect_as<S: Scalar>(ckpt: &Path, bundle: &Path) -> Result<Vec<String>> {
    let net = load_checkpoint::<S>(ckpt, None)?.restore()?;
    let b = read_bundle(bundle)?;
    b.check_config(&net.cfg)?;
    let pred = net.predict(&ModelInput::from_bundle(&b))?;
    let rec = json!({
        "kind": "inspect",
        "video_id": b.video_id,
        "predicted": pred.answer,
        "answer": b.answer,
        "probs": pred.probs,
        "planted": b.planted,
        "trace": pred.trace,
    });
    let mut lines = vec![record(&rec)];
    lines.push(format!("segments {:?}", pred.trace.segment_indices));
    for (snip, idx) in pred.trace.frame_snippets.iter().zip(&pred.trace.patch_indices) {
        lines.push(format!("  snippet {snip:>4}  patches {idx:?}"));
    }
    Ok(lines)
}

// ---- rerun ----

pub fn rerun(manifest_path: &Path, out: &Path) -> Result<Vec<String>> {
    let m = RunManifest::read(manifest_path)?;
    match m.command.as_str() {
        "gen" => gen(&m.config, out),
        "train" => train(&m.config, &PathBuf::from(m.input("data")?), out),
        "sweep" => {
            let values = m
                .input("values")?
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("values: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            sweep(&SweepRequest {
                cfg: &m.config,
                param: SweepParam::parse(m.input("param")?)?,
                values: &values,
                out: Some(out),
                cost_only: m.input("cost_only")? == "true",
            })
        }
        other => Err(Error::Config(format!("cannot rerun command {other:?}"))),
    }
}
