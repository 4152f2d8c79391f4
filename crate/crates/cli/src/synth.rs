//! Synthetic multi-domain corpus generation.
//!
//! Four univariate families with distinct temporal structure: plain
//! sinusoids, sawtooth waves riding a linear trend, first-order
//! autoregressive noise, and amplitude-modulated carriers. Three series per
//! family by default, each with its own period, amplitude, and phase, so a
//! model trained on three families is scored zero-shot on the fourth.

use std::fs;
use std::path::{Path, PathBuf};

use maskvar_core::dataset::{write_csv, DatasetManifest, ManifestEntry, Role, TimeSeries};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{artifact_dir, write_meta, RunConfig};
use crate::error::{artifact_io, CliError};

pub const FAMILIES: [&str; 4] = ["sine", "sawtooth_trend", "ar_noise", "amp_mod"];

/// Measurement noise shared by the deterministic families.
const NOISE_STD: f64 = 0.02;

fn family_rng(seed: u64, family: usize, series: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ ((family as u64 + 1) << 32) ^ ((series as u64 + 1) << 16),
    )
}

/// One clean series of the given family. `i` indexes the series within its
/// family and varies period, amplitude, and phase.
pub fn generate_series(family: &str, i: usize, points: usize, seed: u64) -> Vec<f64> {
    let fam_idx = FAMILIES
        .iter()
        .position(|&f| f == family)
        .expect("known family");
    let mut rng = family_rng(seed, fam_idx, i);
    let noise = |rng: &mut ChaCha8Rng| -> f64 { rng.sample::<f64, _>(StandardNormal) };
    let k = i as f64;
    match family {
        "sine" => {
            let period = 40.0 + 8.0 * k;
            let amp = 1.0 + 0.1 * k;
            let phase = 0.7 * k;
            (0..points)
                .map(|t| {
                    let x = amp * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
                    x + NOISE_STD * noise(&mut rng)
                })
                .collect()
        }
        "sawtooth_trend" => {
            let period = 50.0 + 10.0 * k;
            let amp = 1.0 + 0.1 * k;
            let slope = 1e-4 * (k + 1.0);
            (0..points)
                .map(|t| {
                    let frac = (t as f64 / period).fract();
                    amp * (2.0 * frac - 1.0) + slope * t as f64 + NOISE_STD * noise(&mut rng)
                })
                .collect()
        }
        "ar_noise" => {
            let phi = 0.98 + 0.005 * k;
            let innovation = 0.1;
            let mut x = 0.0f64;
            (0..points)
                .map(|_| {
                    x = phi * x + innovation * noise(&mut rng);
                    x
                })
                .collect()
        }
        "amp_mod" => {
            let carrier = 20.0 + 5.0 * k;
            let envelope = 400.0 + 100.0 * k;
            let depth = 0.7;
            let phase = 0.4 * k;
            (0..points)
                .map(|t| {
                    let t = t as f64;
                    let env = 1.0 + depth * (2.0 * std::f64::consts::PI * t / envelope).sin();
                    let x = env * (2.0 * std::f64::consts::PI * t / carrier + phase).sin();
                    x + NOISE_STD * noise(&mut rng)
                })
                .collect()
        }
        other => unreachable!("unknown family {other}"),
    }
}

/// Generates the corpus and its manifest. Returns the manifest path.
pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if !FAMILIES.contains(&cfg.synth.holdout.as_str()) {
        return Err(CliError::Config(format!(
            "synth.holdout {:?} is not one of {FAMILIES:?}",
            cfg.synth.holdout
        )));
    }
    let out_dir = match &cfg.synth.out_dir {
        Some(d) => d.clone(),
        None => cfg.run_dir.join("corpus"),
    };
    fs::create_dir_all(&out_dir).map_err(|e| artifact_io(&out_dir, e))?;

    let mut entries = Vec::new();
    for family in FAMILIES {
        for i in 0..cfg.synth.series_per_family {
            let name = format!("{family}_{i}");
            let values = generate_series(family, i, cfg.synth.points, cfg.seed);
            let ts = TimeSeries {
                name: name.clone(),
                domain_tag: family.to_string(),
                values: Array2::from_shape_vec((values.len(), 1), values)
                    .expect("column vector"),
                labels: None,
                sample_interval: None,
            };
            let file = format!("{name}.csv");
            write_csv(&ts, &out_dir.join(&file))?;
            let role = if family == cfg.synth.holdout {
                Role::Test
            } else {
                Role::Normal
            };
            entries.push(ManifestEntry {
                path: file,
                role,
                domain_tag: family.to_string(),
                format: "csv".to_string(),
            });
        }
    }

    let manifest = DatasetManifest {
        entries,
        seed: cfg.seed,
        base_dir: out_dir.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| artifact_io(&manifest_path, e))?;

    let meta_dir = artifact_dir(cfg, "synth")?;
    write_meta(&meta_dir, "synth", cfg)?;
    Ok(manifest_path)
}

/// The manifest a command should read: the injected manifest when the
/// inject step has run in this run directory, otherwise the configured one.
pub fn effective_manifest_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let injected = cfg.run_dir.join("inject").join("manifest.json");
    if injected.exists() {
        return Ok(injected);
    }
    Ok(cfg.manifest_path()?.to_path_buf())
}

/// Relative path from `base` (a directory) to `target` (an existing file),
/// built by stripping the shared prefix of their canonical forms.
pub fn relative_to(base: &Path, target: &Path) -> Result<PathBuf, CliError> {
    let canon = |p: &Path| {
        fs::canonicalize(p).map_err(|e| CliError::Data(format!("resolving {}: {e}", p.display())))
    };
    let base = canon(base)?;
    let target = canon(target)?;
    let mut b = base.components().peekable();
    let mut t = target.components().peekable();
    while let (Some(x), Some(y)) = (b.peek(), t.peek()) {
        if x == y {
            b.next();
            t.next();
        } else {
            break;
        }
    }
    let mut rel = PathBuf::new();
    for _ in b {
        rel.push("..");
    }
    for c in t {
        rel.push(c.as_os_str());
    }
    Ok(rel)
}
