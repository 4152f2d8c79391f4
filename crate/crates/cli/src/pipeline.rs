//! The inject, pretrain, finetune, score, and evaluate commands.
//!
//! Commands communicate through files under the run directory: inject
//! materializes labeled test series and a rewritten manifest, pretrain and
//! finetune write checkpoints and loss logs, score writes per-series score
//! tables with calibrated thresholds, evaluate writes per-series reports.

use std::fs;
use std::path::{Path, PathBuf};

use maskvar_core::dataset::{
    load_manifest, write_csv, DatasetManifest, ManifestEntry, Role, TimeSeries,
};
use maskvar_core::detect::{calibration_slice, detect, score_series, spot_threshold};
use maskvar_core::eval::{binary_to_events, evaluate_series, quantile_hit, EvalReport};
use maskvar_core::inject::inject;
use maskvar_core::net::{load_checkpoint, save_checkpoint, ModelParams};
use maskvar_core::train::{finetune_from_manifest, pretrain_from_manifest, LossReport, PretrainRun};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{artifact_dir, write_meta, RunConfig};
use crate::error::{artifact_io, CliError};
use crate::synth::{effective_manifest_path, relative_to};

/// Multiplier deriving distinct per-channel injection seeds, matching the
/// derivation used for the training-time abnormal stream.
const SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

/// Injects anomalies into every test-role series, writes the labeled copies
/// under `<run_dir>/inject`, and rewrites the manifest so test entries point
/// at the injected files. Train entries keep pointing at the originals.
pub fn run_inject(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let src_path = cfg.manifest_path()?;
    let manifest = load_manifest(src_path)?;
    let spec0 = cfg.inject_spec();

    let out_dir = artifact_dir(cfg, "inject")?;
    let mut entries = Vec::new();
    let mut channel_counter = 0u64;
    let mut injected_count = 0usize;

    for entry in &manifest.entries {
        if entry.role != Role::Test {
            let original = manifest.resolved_path(entry);
            entries.push(ManifestEntry {
                path: relative_to(&out_dir, &original)?.to_string_lossy().into_owned(),
                ..entry.clone()
            });
            continue;
        }
        let ts = {
            let mut ts = maskvar_core::dataset::load(
                &manifest.resolved_path(entry),
                maskvar_core::dataset::Format::Csv,
            )?;
            ts.domain_tag = entry.domain_tag.clone();
            ts
        };
        let t_len = ts.len();
        let c = ts.channels();
        let mut values = Array2::<f64>::zeros((t_len, c));
        let mut labels = vec![0u8; t_len];
        for ch in 0..c {
            let mut spec = spec0.clone();
            spec.seed = spec0.seed.wrapping_add(channel_counter.wrapping_mul(SEED_STEP));
            channel_counter += 1;
            let column: Vec<f64> = ts.values.column(ch).to_vec();
            let result = inject(&column, &spec)?;
            for (t, &v) in result.values.iter().enumerate() {
                values[(t, ch)] = v;
            }
            for (t, &l) in result.labels.iter().enumerate() {
                if l != 0 {
                    labels[t] = 1;
                }
            }
        }
        let name = format!("{}_injected", ts.name);
        let out = TimeSeries {
            name: name.clone(),
            domain_tag: ts.domain_tag.clone(),
            values,
            labels: Some(labels),
            sample_interval: ts.sample_interval.clone(),
        };
        let file = format!("{name}.csv");
        write_csv(&out, &out_dir.join(&file))?;
        injected_count += 1;
        entries.push(ManifestEntry {
            path: file,
            role: Role::Test,
            domain_tag: entry.domain_tag.clone(),
            format: "csv".to_string(),
        });
    }
    if injected_count == 0 {
        return Err(CliError::Data(format!(
            "manifest {} has no test-role entries to inject",
            src_path.display()
        )));
    }

    let rewritten = DatasetManifest {
        entries,
        seed: manifest.seed,
        base_dir: out_dir.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&rewritten).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| artifact_io(&manifest_path, e))?;
    write_meta(&out_dir, "inject", cfg)?;
    Ok(manifest_path)
}

fn write_losses(path: &Path, reports: &[LossReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    w.write_record(["step", "epoch", "loss_norm", "loss_abnorm"])
        .and_then(|()| {
            reports.iter().try_for_each(|r| {
                w.write_record([
                    r.step.to_string(),
                    r.epoch.to_string(),
                    r.loss_norm.to_string(),
                    r.loss_abnorm.to_string(),
                ])
            })
        })
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    w.flush().map_err(|e| artifact_io(path, e))
}

fn finish_training_command(
    cfg: &RunConfig,
    command: &str,
    run: &PretrainRun,
) -> Result<PathBuf, CliError> {
    let dir = artifact_dir(cfg, command)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &run.params, Some(&run.state))?;
    write_losses(&dir.join("losses.csv"), &run.reports)?;
    write_meta(&dir, command, cfg)?;
    Ok(ckpt)
}

/// Pretrains on the manifest's normal-role series plus the synthesized
/// abnormal stream. With `resume`, continues from this run's checkpoint.
pub fn run_pretrain(cfg: &RunConfig, resume: bool) -> Result<PathBuf, CliError> {
    let manifest = load_manifest(&effective_manifest_path(cfg)?)?;
    let spec = cfg.inject_spec();
    let train_cfg = cfg.train_config();
    let resume_state = if resume {
        let ckpt = cfg.run_dir.join("pretrain").join("model.ckpt");
        if !ckpt.exists() {
            return Err(CliError::Config(format!(
                "cannot resume: {} does not exist",
                ckpt.display()
            )));
        }
        let (params, state) = load_checkpoint(&ckpt)?;
        let state = state.ok_or_else(|| {
            CliError::Train(format!(
                "checkpoint {} carries no training state",
                ckpt.display()
            ))
        })?;
        Some((params, state))
    } else {
        None
    };
    let run = pretrain_from_manifest(
        &manifest,
        &cfg.net,
        &train_cfg,
        &spec,
        cfg.dataset.stride,
        resume_state,
    )?;
    finish_training_command(cfg, "pretrain", &run)
}

/// Resolves the checkpoint a command should consume: the explicit flag,
/// else this run's finetune output, else its pretrain output.
fn resolve_checkpoint(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        if !p.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} does not exist",
                p.display()
            )));
        }
        return Ok(p.to_path_buf());
    }
    for cand in ["finetune", "pretrain"] {
        let p = cfg.run_dir.join(cand).join("model.ckpt");
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::Config(format!(
        "no checkpoint under {}; run pretrain or pass --checkpoint",
        cfg.run_dir.display()
    )))
}

/// Continues training an existing checkpoint on the manifest's data.
pub fn run_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    let manifest = load_manifest(&effective_manifest_path(cfg)?)?;
    let ckpt = match checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )));
            }
            p.to_path_buf()
        }
        None => {
            let p = cfg.run_dir.join("pretrain").join("model.ckpt");
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "no pretrain checkpoint under {}; pass --checkpoint",
                    cfg.run_dir.display()
                )));
            }
            p
        }
    };
    let (params, _) = load_checkpoint(&ckpt)?;
    let run = finetune_from_manifest(
        params,
        &manifest,
        &cfg.train_config(),
        &cfg.inject_spec(),
        cfg.dataset.stride,
    )?;
    finish_training_command(cfg, "finetune", &run)
}

/// Sidecar describing one scored series.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub series: String,
    pub n_points: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub fit: serde_json::Value,
}

/// Scores every test-role series with the resolved checkpoint, calibrates a
/// threshold on each score stream's leading fraction, and writes
/// `<name>.csv` (t, score, decision) plus a `<name>.json` sidecar.
pub fn run_score(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let manifest = load_manifest(&effective_manifest_path(cfg)?)?;
    let ckpt_path = resolve_checkpoint(cfg, checkpoint)?;
    let (params, _) = load_checkpoint(&ckpt_path)?;
    let spot = cfg.detect.spot();

    let test_series = manifest.load_role(Role::Test)?;
    if test_series.is_empty() {
        return Err(CliError::Data("manifest has no test-role series".into()));
    }
    let dir = artifact_dir(cfg, "score")?;
    let mut outputs = Vec::new();
    for ts in &test_series {
        let scored = score_series(ts, &params, cfg.detect.n_pairs, cfg.seed)?;
        let init = calibration_slice(&scored.scores, &spot);
        let fit = spot_threshold(init, &spot)?;
        let scored = detect(scored, fit.delta);
        let decisions = scored.decisions.as_ref().expect("detect sets decisions");

        let csv_path = dir.join(format!("{}.csv", ts.name));
        write_score_csv(&csv_path, &scored.scores, decisions)?;
        let sidecar = ScoreSidecar {
            series: ts.name.clone(),
            n_points: scored.scores.len(),
            n_pairs: cfg.detect.n_pairs,
            seed: cfg.seed,
            threshold: fit.delta,
            fit: serde_json::to_value(&fit).expect("fit serializes"),
        };
        let json_path = dir.join(format!("{}.json", ts.name));
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|e| artifact_io(&json_path, e))?;
        outputs.push(csv_path);
    }
    write_meta(&dir, "score", cfg)?;
    Ok(outputs)
}

fn write_score_csv(path: &Path, scores: &[f64], decisions: &[u8]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    w.write_record(["t", "score", "decision"])
        .and_then(|()| {
            scores.iter().zip(decisions).enumerate().try_for_each(|(t, (s, d))| {
                w.write_record([t.to_string(), s.to_string(), d.to_string()])
            })
        })
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    w.flush().map_err(|e| artifact_io(path, e))
}

/// Reads a score table written by [`run_score`].
pub fn read_score_csv(path: &Path) -> Result<(Vec<f64>, Vec<u8>), CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["t", "score", "decision"] {
        return Err(CliError::Data(format!(
            "{} is not a score table (header {:?})",
            path.display(),
            headers
        )));
    }
    let mut scores = Vec::new();
    let mut decisions = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let bad = |what: &str| {
            CliError::Data(format!("{}: bad {what} in row {:?}", path.display(), rec))
        };
        scores.push(
            rec.get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("score"))?,
        );
        let d: u8 = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("decision"))?;
        if d > 1 {
            return Err(bad("decision"));
        }
        decisions.push(d);
    }
    Ok((scores, decisions))
}

/// Per-series quantile-hit results at the configured alphas.
#[derive(Debug, Serialize, Deserialize)]
pub struct QuantileHits {
    pub series: String,
    pub hits: Vec<QuantileHit>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuantileHit {
    pub alpha: f64,
    pub hit: bool,
}

/// Evaluates one score table against one labeled series, writing the report
/// to `out`. The report JSON carries exactly the EvalReport fields.
pub fn evaluate_files(scores: &Path, labels: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let (score_vals, decisions) = read_score_csv(scores)?;
    let series = maskvar_core::dataset::load(labels, maskvar_core::dataset::Format::Csv)?;
    let labels_vec = series.labels.ok_or_else(|| {
        CliError::Data(format!("{} has no label column", labels.display()))
    })?;
    let report = evaluate_series(&score_vals, &decisions, &labels_vec)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| artifact_io(parent, e))?;
        }
    }
    fs::write(
        out,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| artifact_io(out, e))?;
    Ok(report)
}

/// Evaluates every scored test series in the run directory. Writes
/// `<name>.report.json` (exact EvalReport fields) and `<name>.quantile.json`
/// per series.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Vec<(String, EvalReport)>, CliError> {
    let manifest = load_manifest(&effective_manifest_path(cfg)?)?;
    let score_dir = cfg.run_dir.join("score");
    let test_series = manifest.load_role(Role::Test)?;
    if test_series.is_empty() {
        return Err(CliError::Data("manifest has no test-role series".into()));
    }
    let dir = artifact_dir(cfg, "eval")?;
    let mut reports = Vec::new();
    for ts in &test_series {
        let csv_path = score_dir.join(format!("{}.csv", ts.name));
        if !csv_path.exists() {
            return Err(CliError::Eval(format!(
                "no scores for series {:?}: {} missing (run score first)",
                ts.name,
                csv_path.display()
            )));
        }
        let (scores, decisions) = read_score_csv(&csv_path)?;
        let labels = ts.labels.as_ref().ok_or_else(|| {
            CliError::Data(format!("test series {:?} has no label column", ts.name))
        })?;
        let report = evaluate_series(&scores, &decisions, labels)?;

        let report_path = dir.join(format!("{}.report.json", ts.name));
        fs::write(
            &report_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| artifact_io(&report_path, e))?;

        let gt = binary_to_events(labels);
        let hits = QuantileHits {
            series: ts.name.clone(),
            hits: cfg
                .eval
                .alphas
                .iter()
                .map(|&alpha| QuantileHit {
                    alpha,
                    hit: quantile_hit(&scores, &gt, alpha),
                })
                .collect(),
        };
        let q_path = dir.join(format!("{}.quantile.json", ts.name));
        fs::write(
            &q_path,
            serde_json::to_string_pretty(&hits).expect("hits serialize"),
        )
        .map_err(|e| artifact_io(&q_path, e))?;
        reports.push((ts.name.clone(), report));
    }
    write_meta(&dir, "evaluate", cfg)?;
    Ok(reports)
}

/// Loads `<name>.ckpt` model parameters for inspection or reuse.
pub fn load_params(path: &Path) -> Result<ModelParams, CliError> {
    let (params, _) = load_checkpoint(path)?;
    Ok(params)
}
