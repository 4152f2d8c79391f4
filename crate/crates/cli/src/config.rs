//! Run configuration: one JSON document per run, dotted-key overrides, and
//! the meta.json stamp that ties every artifact to a config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use maskvar_core::inject::InjectionSpec;
use maskvar_core::net::{NetConfig, FORMAT_VERSION};
use maskvar_core::train::TrainConfig;
use maskvar_core::SpotConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Dataset wiring: where the corpus manifest lives and how densely training
/// windows are cut.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Corpus manifest path. Relative paths resolve against the process
    /// working directory.
    pub manifest: Option<PathBuf>,
    /// Step between consecutive training windows.
    pub stride: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: None,
            stride: 1,
        }
    }
}

/// Threshold calibration settings plus the mask-pair count used when
/// scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub q: f64,
    pub init_quantile: f64,
    pub init_fraction: f64,
    pub n_pairs: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        let spot = SpotConfig::default();
        Self {
            q: spot.q,
            init_quantile: spot.init_quantile,
            init_fraction: spot.init_fraction,
            n_pairs: 2,
        }
    }
}

impl DetectSection {
    pub fn spot(&self) -> SpotConfig {
        SpotConfig {
            q: self.q,
            init_quantile: self.init_quantile,
            init_fraction: self.init_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Top-fraction sizes for the quantile-hit protocol.
    pub alphas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.01, 0.03, 0.05],
        }
    }
}

/// Synthetic corpus shape. Defaults produce the full acceptance corpus:
/// four families, three series each, twenty thousand points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Output directory; `<run_dir>/corpus` when unset.
    pub out_dir: Option<PathBuf>,
    pub points: usize,
    pub series_per_family: usize,
    /// Family excluded from training and scored zero-shot.
    pub holdout: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            out_dir: None,
            points: 20_000,
            series_per_family: 3,
            holdout: "amp_mod".to_string(),
        }
    }
}

/// One JSON document describing a run. The top-level `seed` is the run
/// seed: it seeds training, scoring, and (unless an explicit `inject`
/// section provides its own seed) anomaly injection. A `train.seed` value
/// in the file is overridden by it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inject: Option<InjectionSpec>,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub synth: SynthSection,
}

impl RunConfig {
    /// Effective injection spec: the explicit section, or the default
    /// five-percent all-types spec seeded by the run seed.
    pub fn inject_spec(&self) -> InjectionSpec {
        self.inject
            .clone()
            .unwrap_or_else(|| InjectionSpec::new(0.05, self.seed))
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }

    /// Manifest path or a config error naming the missing key.
    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        self.dataset
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("dataset.manifest is not set".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.net
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.detect
            .spot()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(spec) = &self.inject {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.detect.n_pairs < 2 {
            return Err(CliError::Config(format!(
                "detect.n_pairs {} must be at least 2",
                self.detect.n_pairs
            )));
        }
        if self.dataset.stride == 0 {
            return Err(CliError::Config("dataset.stride must be positive".into()));
        }
        for &a in &self.eval.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::Config(format!(
                    "eval.alphas entry {a} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration, stable across re-runs.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a config file and applies `key.path=value` overrides before
/// deserializing, so unknown keys introduced by an override are rejected
/// exactly like unknown keys in the file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets one dotted key. The value parses as JSON when possible and falls
/// back to a plain string, so `--set train.epochs=5` and
/// `--set dataset.manifest=corpus/manifest.json` both work.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(CliError::Config(format!("override {spec:?} has an empty key")));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} crosses a non-object")))?;
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key:?} crosses a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
}

#[derive(Debug, Serialize)]
struct Versions {
    package: &'static str,
    checkpoint_format: u32,
}

/// Stamps a command's artifact directory. Contains no wallclock fields so
/// identical runs produce identical bytes.
pub fn write_meta(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let meta = Meta {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: Versions {
            package: env!("CARGO_PKG_VERSION"),
            checkpoint_format: FORMAT_VERSION,
        },
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| crate::error::artifact_io(&path, e))
}

/// Creates a command's artifact directory under the run directory.
pub fn artifact_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir.join(command);
    fs::create_dir_all(&dir).map_err(|e| crate::error::artifact_io(&dir, e))?;
    Ok(dir)
}
