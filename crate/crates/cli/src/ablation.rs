//! The ablation command: trains and evaluates the full model next to
//! variants with one mechanism disabled, on the same data and seed, and
//! writes a comparison summary.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{artifact_io, CliError};
use crate::pipeline::{run_evaluate, run_pretrain, run_score};
use crate::synth::effective_manifest_path;

/// A mechanism the ablation can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Adabn,
    Adversarial,
    DualDecoders,
}

impl Toggle {
    pub const ALL: [Toggle; 3] = [Toggle::Adabn, Toggle::Adversarial, Toggle::DualDecoders];

    /// Variant directory name under `<run_dir>/ablation`.
    pub fn variant_name(self) -> &'static str {
        match self {
            Toggle::Adabn => "no_adabn",
            Toggle::Adversarial => "no_adversarial",
            Toggle::DualDecoders => "no_dual_decoders",
        }
    }

    fn apply(self, cfg: &mut RunConfig) {
        match self {
            Toggle::Adabn => cfg.net.use_adabn = false,
            Toggle::Adversarial => cfg.net.use_adversarial = false,
            Toggle::DualDecoders => cfg.net.dual_decoders = false,
        }
    }
}

impl FromStr for Toggle {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "adabn" => Ok(Toggle::Adabn),
            "adversarial" => Ok(Toggle::Adversarial),
            "dual_decoders" | "dual" => Ok(Toggle::DualDecoders),
            other => Err(CliError::Config(format!(
                "unknown ablation toggle {other:?}; expected adabn, adversarial, or dual_decoders"
            ))),
        }
    }
}

pub fn parse_toggles(spec: Option<&str>) -> Result<Vec<Toggle>, CliError> {
    match spec {
        None => Ok(Toggle::ALL.to_vec()),
        Some(list) => {
            let toggles: Vec<Toggle> = list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(Toggle::from_str)
                .collect::<Result<_, _>>()?;
            if toggles.is_empty() {
                return Err(CliError::Config("no ablation toggles given".into()));
            }
            Ok(toggles)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_affiliation_f1: f64,
    pub mean_auc_roc: f64,
    pub series: Vec<SeriesScore>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeriesScore {
    pub series: String,
    pub affiliation_f1: f64,
    pub auc_roc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: Vec<VariantSummary>,
}

/// Runs pretrain, score, and evaluate for the full model and each requested
/// single-mechanism ablation. Every variant sees the identical manifest and
/// seed; only the network configuration differs. Results land under
/// `<run_dir>/ablation/<variant>` with a combined `summary.json` on top.
pub fn run_ablation(cfg: &RunConfig, toggles: &[Toggle]) -> Result<PathBuf, CliError> {
    // Resolve the data once so variants cannot disagree about it. If this
    // run already has an injected corpus, all variants inherit it.
    let manifest = effective_manifest_path(cfg)?;
    let manifest = fs::canonicalize(&manifest)
        .map_err(|e| CliError::Data(format!("resolving {}: {e}", manifest.display())))?;
    let ablation_dir = cfg.run_dir.join("ablation");

    let mut variants: Vec<(String, Option<Toggle>)> = vec![("full".to_string(), None)];
    for &t in toggles {
        variants.push((t.variant_name().to_string(), Some(t)));
    }

    let mut results = Vec::new();
    for (name, toggle) in &variants {
        let mut vcfg = cfg.clone();
        vcfg.run_dir = ablation_dir.join(name);
        vcfg.dataset.manifest = Some(manifest.clone());
        if let Some(t) = toggle {
            t.apply(&mut vcfg);
        }
        run_pretrain(&vcfg, false)?;
        run_score(&vcfg, None)?;
        let reports = run_evaluate(&vcfg)?;

        let n = reports.len() as f64;
        let series: Vec<SeriesScore> = reports
            .iter()
            .map(|(s, r)| SeriesScore {
                series: s.clone(),
                affiliation_f1: r.affiliation_f1,
                auc_roc: r.auc_roc,
            })
            .collect();
        results.push(VariantSummary {
            variant: name.clone(),
            mean_affiliation_f1: series.iter().map(|s| s.affiliation_f1).sum::<f64>() / n,
            mean_auc_roc: series.iter().map(|s| s.auc_roc).sum::<f64>() / n,
            series,
        });
    }

    let summary = AblationSummary { variants: results };
    let json_path = ablation_dir.join("summary.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| artifact_io(&json_path, e))?;

    let txt_path = ablation_dir.join("summary.txt");
    fs::write(&txt_path, render_table(&summary)).map_err(|e| artifact_io(&txt_path, e))?;
    Ok(json_path)
}

fn render_table(summary: &AblationSummary) -> String {
    let name_w = summary
        .variants
        .iter()
        .map(|v| v.variant.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:name_w$}  {:>12}  {:>12}",
        "variant", "mean_aff_f1", "mean_auc_roc"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 2 + 12 + 2 + 12));
    for v in &summary.variants {
        let _ = writeln!(
            out,
            "{:name_w$}  {:>12.4}  {:>12.4}",
            v.variant, v.mean_affiliation_f1, v.mean_auc_roc
        );
    }
    out
}
