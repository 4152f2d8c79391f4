//! Ingestion, channel splitting, windowing, and per-window normalization.
//!
//! Multivariate series are processed channel-independently: a T x C series
//! becomes C univariate views sharing the same point labels. Views are cut
//! into fixed-length windows (overlapping for training, tiling for test) and
//! z-scored per window so that series from different domains land on a
//! comparable scale.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("{path}: series has no rows")]
    EmptySeries { path: String },
    #[error("series of length {t} is shorter than window {w}")]
    SeriesTooShort { t: usize, w: usize },
    #[error("bad manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
}

/// Std floor for degenerate (constant) windows.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
}

/// A labeled multivariate series. After [`load`] the value matrix contains
/// no NaN or infinities; missing cells are linearly interpolated per channel
/// with edge values held constant.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub name: String,
    pub domain_tag: String,
    /// T x C.
    pub values: Array2<f64>,
    /// Point labels, shared across channels. 1 marks an anomalous timestamp.
    pub labels: Option<Vec<u8>>,
    pub sample_interval: Option<String>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// One channel of a parent series.
#[derive(Debug, Clone)]
pub struct ChannelView {
    pub parent: String,
    pub channel_index: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

/// Where a window came from; `padded` counts trailing positions filled by
/// repeating the final value (0 for a fully real window).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowOrigin {
    pub series: String,
    pub channel: usize,
    pub start: usize,
    pub padded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Stride as given; trailing remainder shorter than W is dropped.
    Train,
    /// Stride forced to W; trailing remainder padded so every timestamp is
    /// covered exactly once.
    Test,
}

#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// N x W.
    pub windows: Array2<f64>,
    /// N x W, present when the source view carried labels.
    pub labels: Option<Array2<u8>>,
    pub origin: Vec<WindowOrigin>,
    /// Per-window (mean, std), populated by [`normalize`].
    pub normalization_stats: Option<Vec<(f64, f64)>>,
}

impl WindowBatch {
    pub fn n_windows(&self) -> usize {
        self.windows.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.windows.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Normal,
    Abnormal,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
    pub domain_tag: String,
    pub format: String,
}

/// Corpus description: which files play which role, plus the seed governing
/// every random choice made over this corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    /// Directory the entry paths are relative to. Set on load, not stored.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolved_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entries_with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    /// Loads every entry with the given role, in manifest order.
    pub fn load_role(&self, role: Role) -> Result<Vec<TimeSeries>, DatasetError> {
        self.entries_with_role(role)
            .map(|e| {
                let path = self.resolved_path(e);
                let mut ts = load(&path, Format::Csv)?;
                ts.domain_tag = e.domain_tag.clone();
                Ok(ts)
            })
            .collect()
    }
}

/// Reads and validates a manifest; entry paths must resolve to readable
/// files relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for entry in &manifest.entries {
        if entry.format != "csv" {
            return Err(DatasetError::BadManifest {
                path: path.display().to_string(),
                reason: format!("unsupported format {:?} for {}", entry.format, entry.path),
            });
        }
        let resolved = manifest.resolved_path(entry);
        std::fs::File::open(&resolved).map_err(|source| DatasetError::Io {
            path: resolved.display().to_string(),
            source,
        })?;
    }
    Ok(manifest)
}

/// Loads a series. CSV schema: UTF-8 with a header row naming channel
/// columns `c0..c{C-1}` plus an optional final `label` column in {0, 1}.
/// Empty or NaN cells are imputed by per-channel linear interpolation.
pub fn load(path: &Path, format: Format) -> Result<TimeSeries, DatasetError> {
    match format {
        Format::Csv => load_csv(path),
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn load_csv(path: &Path) -> Result<TimeSeries, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<TimeSeries, DatasetError> {
    // CSV readers drop fully blank lines, but in a single-column file a
    // blank line is one missing cell. Mark such lines so they survive as
    // records; the cell loop below treats the marker as empty.
    const BLANK: &str = "\u{1}";
    let normalized: String = text
        .lines()
        .map(|l| if l.trim().is_empty() { BLANK } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(normalized.as_bytes());

    let headers = rdr
        .headers()
        .map_err(|e| malformed(path, format!("unreadable header: {e}")))?
        .clone();
    let mut names: Vec<&str> = headers.iter().collect();
    let has_label = names.last() == Some(&"label");
    if has_label {
        names.pop();
    }
    if names.is_empty() {
        return Err(malformed(path, "no channel columns"));
    }
    for (i, name) in names.iter().enumerate() {
        let expect = format!("c{i}");
        if *name != expect {
            return Err(malformed(
                path,
                format!("expected column {expect:?}, found {name:?}"),
            ));
        }
    }
    let c = names.len();

    let mut flat: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| malformed(path, format!("row {row_idx}: {e}")))?;
        let expected_len = c + usize::from(has_label);
        if record.len() != expected_len {
            return Err(malformed(
                path,
                format!(
                    "row {row_idx} has {} fields, expected {expected_len}",
                    record.len()
                ),
            ));
        }
        for cell in record.iter().take(c) {
            if cell.is_empty() || cell == BLANK {
                flat.push(f64::NAN);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| malformed(path, format!("row {row_idx}: bad value {cell:?}")))?;
                flat.push(v);
            }
        }
        if has_label {
            let cell = &record[c];
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(path, format!("row {row_idx}: bad label {cell:?}")))?;
            if v == 0.0 {
                labels.push(0);
            } else if v == 1.0 {
                labels.push(1);
            } else {
                return Err(malformed(
                    path,
                    format!("row {row_idx}: label {cell:?} not in {{0, 1}}"),
                ));
            }
        }
    }

    let t = flat.len() / c;
    if t == 0 {
        return Err(DatasetError::EmptySeries {
            path: path.display().to_string(),
        });
    }
    let mut values = Array2::from_shape_vec((t, c), flat).expect("row-major by construction");
    for ch in 0..c {
        impute_channel(&mut values, ch).map_err(|reason| malformed(path, reason))?;
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(TimeSeries {
        name,
        domain_tag: String::new(),
        values,
        labels: has_label.then_some(labels),
        sample_interval: None,
    })
}

/// Linear interpolation over missing cells of one column; edges held at the
/// nearest known value.
fn impute_channel(values: &mut Array2<f64>, ch: usize) -> Result<(), String> {
    let t = values.nrows();
    let known: Vec<usize> = (0..t).filter(|&i| values[[i, ch]].is_finite()).collect();
    if known.is_empty() {
        return Err(format!("channel c{ch} has no finite values"));
    }
    if known.len() == t {
        return Ok(());
    }
    for i in 0..t {
        if values[[i, ch]].is_finite() {
            continue;
        }
        let next = known.partition_point(|&k| k < i);
        let v = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(lo), Some(&hi)) => {
                let frac = (i - lo) as f64 / (hi - lo) as f64;
                values[[lo, ch]] + frac * (values[[hi, ch]] - values[[lo, ch]])
            }
            (None, Some(&hi)) => values[[hi, ch]],
            (Some(lo), None) => values[[lo, ch]],
            (None, None) => unreachable!("known is non-empty"),
        };
        values[[i, ch]] = v;
    }
    Ok(())
}

/// Writes a series in the same CSV schema that [`load`] reads.
pub fn write_csv(ts: &TimeSeries, path: &Path) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| DatasetError::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let c = ts.channels();
    let mut header: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    if ts.labels.is_some() {
        header.push("label".to_string());
    }
    let io_err = |e: csv::Error| DatasetError::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    wtr.write_record(&header).map_err(io_err)?;
    for i in 0..ts.len() {
        let mut row: Vec<String> = (0..c).map(|ch| ts.values[[i, ch]].to_string()).collect();
        if let Some(labels) = &ts.labels {
            row.push(labels[i].to_string());
        }
        wtr.write_record(&row).map_err(io_err)?;
    }
    wtr.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Splits a series into C univariate views sharing the point labels.
pub fn split_channels(ts: &TimeSeries) -> Vec<ChannelView> {
    (0..ts.channels())
        .map(|ch| ChannelView {
            parent: ts.name.clone(),
            channel_index: ch,
            values: ts.values.column(ch).to_vec(),
            labels: ts.labels.clone(),
        })
        .collect()
}

/// Cuts a channel into windows of length `w`.
///
/// Train mode slides by `stride` and drops any trailing remainder. Test mode
/// tiles with stride `w` and pads the final short window by repeating the
/// last value, recording the pad length in the window's origin.
pub fn make_windows(
    cv: &ChannelView,
    w: usize,
    stride: usize,
    mode: WindowMode,
) -> Result<WindowBatch, DatasetError> {
    assert!(w > 0, "window length must be positive");
    assert!(stride > 0, "stride must be positive");
    let t = cv.values.len();
    if t < w {
        return Err(DatasetError::SeriesTooShort { t, w });
    }
    let stride = match mode {
        WindowMode::Train => stride,
        WindowMode::Test => w,
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut label_rows: Vec<u8> = Vec::new();
    let mut origin = Vec::new();
    let mut start = 0usize;
    loop {
        match mode {
            WindowMode::Train => {
                if start + w > t {
                    break;
                }
            }
            WindowMode::Test => {
                if start >= t {
                    break;
                }
            }
        }
        let real_end = (start + w).min(t);
        let padded = start + w - real_end;
        rows.extend_from_slice(&cv.values[start..real_end]);
        for _ in 0..padded {
            rows.push(cv.values[t - 1]);
        }
        if let Some(labels) = &cv.labels {
            label_rows.extend_from_slice(&labels[start..real_end]);
            for _ in 0..padded {
                label_rows.push(labels[t - 1]);
            }
        }
        origin.push(WindowOrigin {
            series: cv.parent.clone(),
            channel: cv.channel_index,
            start,
            padded,
        });
        start += stride;
    }
    let n = origin.len();
    let windows = Array2::from_shape_vec((n, w), rows).expect("rows built per window");
    let labels = cv
        .labels
        .as_ref()
        .map(|_| Array2::from_shape_vec((n, w), label_rows).expect("labels built per window"));
    Ok(WindowBatch {
        windows,
        labels,
        origin,
        normalization_stats: None,
    })
}

/// Z-scores each window under its own mean and population std (floored at
/// [`STD_FLOOR`]), recording the stats for later de-normalization.
pub fn normalize(mut batch: WindowBatch) -> WindowBatch {
    let w = batch.window_len() as f64;
    let mut stats = Vec::with_capacity(batch.n_windows());
    for mut row in batch.windows.rows_mut() {
        let mean = row.sum() / w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w;
        let std = var.sqrt().max(STD_FLOOR);
        row.mapv_inplace(|v| (v - mean) / std);
        stats.push((mean, std));
    }
    batch.normalization_stats = Some(stats);
    batch
}

/// Maps normalized values back to the original scale of window `idx`.
pub fn denormalize_window(values: &[f64], stats: (f64, f64)) -> Vec<f64> {
    let (mean, std) = stats;
    values.iter().map(|&v| v * std + mean).collect()
}
