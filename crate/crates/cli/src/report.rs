//! The report command: a run summary table plus one static score-over-time
//! plot per test series, with the calibrated threshold and the labeled
//! anomaly regions drawn in.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use maskvar_core::dataset::Role;
use maskvar_core::eval::{binary_to_events, EvalReport};
use serde::{Deserialize, Serialize};

use crate::config::{artifact_dir, write_meta, RunConfig};
use crate::error::{artifact_io, CliError};
use crate::pipeline::{read_score_csv, ScoreSidecar};
use crate::synth::effective_manifest_path;

/// Maximum polyline points per plot; longer series are bucketed by max so
/// score peaks survive downsampling.
const PLOT_BUCKETS: usize = 1200;

#[derive(Debug, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub series: String,
    pub threshold: f64,
    pub report: EvalReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanSummary {
    pub affiliation_p: f64,
    pub affiliation_r: f64,
    pub affiliation_f1: f64,
    pub auc_roc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub series: Vec<SeriesSummary>,
    pub mean: MeanSummary,
}

/// Collects score and evaluation artifacts for every test series and writes
/// `summary.json`, `summary.txt`, and one `<name>.svg` per series under
/// `<run_dir>/report`.
pub fn run_report(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let manifest = maskvar_core::dataset::load_manifest(&effective_manifest_path(cfg)?)?;
    let test_series = manifest.load_role(Role::Test)?;
    if test_series.is_empty() {
        return Err(CliError::Data("manifest has no test-role series".into()));
    }
    let score_dir = cfg.run_dir.join("score");
    let eval_dir = cfg.run_dir.join("eval");
    let dir = artifact_dir(cfg, "report")?;

    let mut rows = Vec::new();
    for ts in &test_series {
        let name = &ts.name;
        let report_path = eval_dir.join(format!("{name}.report.json"));
        if !report_path.exists() {
            return Err(CliError::Eval(format!(
                "{} missing; run evaluate before report",
                report_path.display()
            )));
        }
        let report: EvalReport = read_json(&report_path)?;
        let sidecar: ScoreSidecar = read_json(&score_dir.join(format!("{name}.json")))?;
        let (scores, _) = read_score_csv(&score_dir.join(format!("{name}.csv")))?;

        let svg = render_plot(name, &scores, sidecar.threshold, ts.labels.as_deref());
        let svg_path = dir.join(format!("{name}.svg"));
        fs::write(&svg_path, svg).map_err(|e| artifact_io(&svg_path, e))?;

        rows.push(SeriesSummary {
            series: name.clone(),
            threshold: sidecar.threshold,
            report,
        });
    }

    let n = rows.len() as f64;
    let mean = MeanSummary {
        affiliation_p: rows.iter().map(|r| r.report.affiliation_p).sum::<f64>() / n,
        affiliation_r: rows.iter().map(|r| r.report.affiliation_r).sum::<f64>() / n,
        affiliation_f1: rows.iter().map(|r| r.report.affiliation_f1).sum::<f64>() / n,
        auc_roc: rows.iter().map(|r| r.report.auc_roc).sum::<f64>() / n,
    };
    let summary = RunSummary { series: rows, mean };

    let json_path = dir.join("summary.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| artifact_io(&json_path, e))?;

    let txt_path = dir.join("summary.txt");
    fs::write(&txt_path, render_table(&summary)).map_err(|e| artifact_io(&txt_path, e))?;
    write_meta(&dir, "report", cfg)?;
    Ok(json_path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Eval(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Eval(format!("parsing {}: {e}", path.display())))
}

fn render_table(summary: &RunSummary) -> String {
    let name_w = summary
        .series
        .iter()
        .map(|r| r.series.len())
        .chain(["series".len(), "mean".len()])
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:name_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}  {:>10}",
        "series", "auc_roc", "aff_p", "aff_r", "aff_f1", "events", "threshold"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 2 + 8 * 4 + 2 * 4 + 9 + 2 + 10));
    for row in &summary.series {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{:name_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9}  {:>10.4}",
            row.series,
            r.auc_roc,
            r.affiliation_p,
            r.affiliation_r,
            r.affiliation_f1,
            format!("{}/{}", r.counts.tp_events, r.counts.total_events),
            row.threshold,
        );
    }
    let m = &summary.mean;
    let _ = writeln!(
        out,
        "{:name_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
        "mean", m.auc_roc, m.affiliation_p, m.affiliation_r, m.affiliation_f1
    );
    out
}

/// Bucket index range covering `n` points in at most [`PLOT_BUCKETS`] buckets.
fn bucket_maxima(scores: &[f64]) -> Vec<(f64, f64)> {
    let n = scores.len();
    let per = n.div_ceil(PLOT_BUCKETS).max(1);
    let mut pts = Vec::with_capacity(n.div_ceil(per));
    let mut start = 0;
    while start < n {
        let end = (start + per).min(n);
        let max = scores[start..end].iter().cloned().fold(f64::MIN, f64::max);
        let mid = (start + end - 1) as f64 / 2.0;
        pts.push((mid, max));
        start = end;
    }
    pts
}

/// Renders a self-contained SVG: score polyline (bucketed by max), dashed
/// threshold line, and shaded ground-truth regions. Output depends only on
/// the inputs, so re-runs are byte-identical.
fn render_plot(name: &str, scores: &[f64], threshold: f64, labels: Option<&[u8]>) -> String {
    const W: f64 = 1200.0;
    const H: f64 = 300.0;
    const ML: f64 = 60.0; // left margin for axis labels
    const MR: f64 = 15.0;
    const MT: f64 = 25.0;
    const MB: f64 = 30.0;
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let n = scores.len().max(1) as f64;

    let finite = scores.iter().cloned().filter(|v| v.is_finite());
    let mut lo = finite.clone().fold(f64::INFINITY, f64::min);
    let mut hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    lo = lo.min(threshold);
    hi = hi.max(threshold);
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let x = |t: f64| ML + pw * t / (n - 1.0).max(1.0);
    let y = |v: f64| MT + ph * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{ML}\" y=\"16\" fill=\"#333\">{} (threshold {:.4})</text>",
        xml_escape(name),
        threshold
    );

    // Ground-truth anomaly regions first, so the score line draws on top.
    if let Some(labels) = labels {
        for ev in binary_to_events(labels).events {
            let x0 = x(ev.0 as f64);
            let x1 = x(ev.1 as f64).max(x0 + 1.0);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{MT}\" width=\"{:.2}\" height=\"{ph}\" \
                 fill=\"#f4c7c3\"/>",
                x0,
                x1 - x0
            );
        }
    }

    // Frame and y-axis extremes.
    let _ = writeln!(
        svg,
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" \
         stroke=\"#999\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" fill=\"#333\">{:.3}</text>",
        MT + 4.0,
        hi
    );
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{:.2}\" fill=\"#333\">{:.3}</text>",
        MT + ph,
        lo
    );
    let _ = writeln!(
        svg,
        "<text x=\"{ML}\" y=\"{:.2}\" fill=\"#333\">0</text>",
        H - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"#333\">{}</text>",
        W - MR,
        H - 10.0,
        scores.len()
    );

    let ty = y(threshold);
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{ty:.2}\" x2=\"{:.2}\" y2=\"{ty:.2}\" stroke=\"#c0392b\" \
         stroke-dasharray=\"6 4\"/>",
        ML + pw
    );

    if !scores.is_empty() {
        let mut points = String::new();
        for (t, v) in bucket_maxima(scores) {
            let v = if v.is_finite() { v } else { lo };
            let _ = write!(points, "{:.2},{:.2} ", x(t), y(v));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#2c5f8a\" stroke-width=\"1\"/>",
            points.trim_end()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
