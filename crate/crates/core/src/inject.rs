//! Synthetic anomaly injection.
//!
//! Turns clean series into labeled abnormal series by corrupting randomly
//! chosen non-overlapping subsequences with one of eight operators: time
//! reversal, value reflection, amplitude scaling, point outliers, additive
//! Gaussian noise, temporal compression, temporal stretching, and pattern
//! replacement. Every operator preserves segment length so labels stay
//! aligned with timestamps.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InjectError {
    #[error("invalid injection spec: {0}")]
    BadSpec(String),
    #[error("series of length {t} is shorter than max subsequence length {max_len}")]
    SeriesTooShort { t: usize, max_len: usize },
    #[error(
        "retry budget exhausted after {attempts} attempts: covered {covered} of {needed} points"
    )]
    RetryBudgetExhausted {
        attempts: usize,
        covered: usize,
        needed: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyType {
    HMirror,
    VMirror,
    Scale,
    Outlier,
    Noise,
    Compress,
    Stretch,
    Pattern,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 8] = [
        AnomalyType::HMirror,
        AnomalyType::VMirror,
        AnomalyType::Scale,
        AnomalyType::Outlier,
        AnomalyType::Noise,
        AnomalyType::Compress,
        AnomalyType::Stretch,
        AnomalyType::Pattern,
    ];
}

/// Per-type parameter ranges, all inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionParams {
    /// Shrinking scale factors.
    pub scale_down: (f64, f64),
    /// Expanding scale factors; each draw picks one of the two subranges
    /// with equal probability.
    pub scale_up: (f64, f64),
    /// Noise std as a multiple of the segment std.
    pub noise_sigma: (f64, f64),
    /// Outlier displacement in segment stds.
    pub outlier_magnitude: (f64, f64),
    pub outlier_points: (usize, usize),
    /// Candidate compress/stretch factors.
    pub warp_factors: Vec<usize>,
}

impl Default for InjectionParams {
    fn default() -> Self {
        Self {
            scale_down: (0.2, 0.5),
            scale_up: (2.0, 5.0),
            noise_sigma: (0.3, 1.0),
            outlier_magnitude: (3.0, 6.0),
            outlier_points: (1, 5),
            warp_factors: vec![2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub types: Vec<AnomalyType>,
    pub target_ratio: f64,
    pub subseq_len_range: (usize, usize),
    #[serde(default)]
    pub params: InjectionParams,
    pub seed: u64,
}

impl InjectionSpec {
    /// All eight types with default parameter ranges and subsequence
    /// lengths 20..=100.
    pub fn new(target_ratio: f64, seed: u64) -> Self {
        Self {
            types: AnomalyType::ALL.to_vec(),
            target_ratio,
            subseq_len_range: (20, 100),
            params: InjectionParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), InjectError> {
        if self.types.is_empty() {
            return Err(InjectError::BadSpec("types must be non-empty".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(InjectError::BadSpec(format!(
                "target_ratio must lie in (0, 1), got {}",
                self.target_ratio
            )));
        }
        let (lo, hi) = self.subseq_len_range;
        if lo == 0 || lo > hi {
            return Err(InjectError::BadSpec(format!(
                "subseq_len_range ({lo}, {hi}) must satisfy 0 < min <= max"
            )));
        }
        let p = &self.params;
        for (name, (a, b)) in [
            ("scale_down", p.scale_down),
            ("scale_up", p.scale_up),
            ("noise_sigma", p.noise_sigma),
            ("outlier_magnitude", p.outlier_magnitude),
        ] {
            if !(a.is_finite() && b.is_finite()) || a > b {
                return Err(InjectError::BadSpec(format!("empty range for {name}")));
            }
        }
        if p.outlier_points.0 == 0 || p.outlier_points.0 > p.outlier_points.1 {
            return Err(InjectError::BadSpec("empty range for outlier_points".into()));
        }
        if p.warp_factors.is_empty() || p.warp_factors.iter().any(|&f| f == 0) {
            return Err(InjectError::BadSpec("warp_factors must be positive".into()));
        }
        Ok(())
    }
}

/// One injected segment: `[start, end)` plus the sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    pub kind: AnomalyType,
    pub start: usize,
    pub end: usize,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionResult {
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub log: Vec<InjectionEvent>,
}

fn seg_mean(seg: &[f64]) -> f64 {
    seg.iter().sum::<f64>() / seg.len() as f64
}

fn seg_std(seg: &[f64]) -> f64 {
    let m = seg_mean(seg);
    (seg.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / seg.len() as f64).sqrt()
}

/// Time reversal.
pub fn apply_hmirror(seg: &[f64]) -> Vec<f64> {
    seg.iter().rev().copied().collect()
}

/// Reflection about the segment mean: `2 * mean - x`.
pub fn apply_vmirror(seg: &[f64]) -> Vec<f64> {
    let m = seg_mean(seg);
    seg.iter().map(|&v| 2.0 * m - v).collect()
}

/// Scales the mean-centered segment by `factor`.
pub fn apply_scale(seg: &[f64], factor: f64) -> Vec<f64> {
    let m = seg_mean(seg);
    seg.iter().map(|&v| m + factor * (v - m)).collect()
}

/// Displaces `n_points` distinct random points by `±magnitude` segment stds.
pub fn apply_outlier<R: Rng>(
    seg: &[f64],
    magnitude: f64,
    n_points: usize,
    rng: &mut R,
) -> Vec<f64> {
    let std = seg_std(seg);
    let mut out = seg.to_vec();
    let n = n_points.min(seg.len());
    // Partial Fisher-Yates for distinct positions.
    let mut idx: Vec<usize> = (0..seg.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    for &i in idx.iter().take(n) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        out[i] += sign * magnitude * std;
    }
    out
}

/// Adds i.i.d. Gaussian noise with std `sigma * std(seg)`.
pub fn apply_noise<R: Rng>(seg: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let noise_std = sigma * seg_std(seg);
    if noise_std == 0.0 {
        return seg.to_vec();
    }
    let normal = Normal::new(0.0, noise_std).expect("std is finite and non-negative");
    seg.iter().map(|&v| v + normal.sample(rng)).collect()
}

/// Replaces the segment with an equal-length donor slice.
pub fn apply_pattern(seg: &[f64], donor: &[f64]) -> Vec<f64> {
    assert_eq!(seg.len(), donor.len(), "donor must match segment length");
    donor.to_vec()
}

/// Linear resize of `seq` to `len` points, endpoints mapped to endpoints.
fn resize_linear(seq: &[f64], len: usize) -> Vec<f64> {
    assert!(!seq.is_empty() && len > 0);
    if seq.len() == 1 {
        return vec![seq[0]; len];
    }
    if len == 1 {
        return vec![seq[0]];
    }
    let scale = (seq.len() - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|t| {
            let u = t as f64 * scale;
            let j = (u.floor() as usize).min(seq.len() - 2);
            let frac = u - j as f64;
            seq[j] * (1.0 - frac) + seq[j + 1] * frac
        })
        .collect()
}

/// Subsamples every `factor`-th point, then linearly re-interpolates the
/// subsampled sequence back to the original length.
pub fn apply_compress(seg: &[f64], factor: usize) -> Vec<f64> {
    assert!(factor >= 1);
    let kept: Vec<f64> = seg.iter().step_by(factor).copied().collect();
    resize_linear(&kept, seg.len())
}

/// Linearly interpolates the segment to `factor` times its length, then
/// crops back to the original length: the pattern slows by `factor`.
pub fn apply_stretch(seg: &[f64], factor: usize) -> Vec<f64> {
    assert!(factor >= 1);
    let long = resize_linear(seg, seg.len() * factor);
    long[..seg.len()].to_vec()
}

/// Corrupts random non-overlapping subsequences of `values` until the
/// labeled fraction reaches `spec.target_ratio`. Deterministic under
/// `spec.seed`.
pub fn inject(values: &[f64], spec: &InjectionSpec) -> Result<InjectionResult, InjectError> {
    spec.validate()?;
    let t = values.len();
    let (len_min, len_max) = spec.subseq_len_range;
    if t < len_max {
        return Err(InjectError::SeriesTooShort { t, max_len: len_max });
    }

    let needed = (spec.target_ratio * t as f64).ceil() as usize;
    let mean_len = (len_min + len_max) as f64 / 2.0;
    let expected_segments = (needed as f64 / mean_len).ceil().max(1.0) as usize;
    let budget = 100 * expected_segments;

    let original = values.to_vec();
    let mut out = values.to_vec();
    let mut labels = vec![0u8; t];
    let mut log = Vec::new();
    let mut covered = 0usize;
    let mut attempts = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    while (covered as f64) < spec.target_ratio * t as f64 {
        if attempts >= budget {
            return Err(InjectError::RetryBudgetExhausted {
                attempts,
                covered,
                needed,
            });
        }
        attempts += 1;
        let len = rng.gen_range(len_min..=len_max);
        let start = rng.gen_range(0..=t - len);
        let kind = spec.types[rng.gen_range(0..spec.types.len())];
        if labels[start..start + len].iter().any(|&b| b == 1) {
            continue;
        }
        let seg = &out[start..start + len];
        let p = &spec.params;
        let (new_seg, params) = match kind {
            AnomalyType::HMirror => (apply_hmirror(seg), serde_json::json!({})),
            AnomalyType::VMirror => (apply_vmirror(seg), serde_json::json!({})),
            AnomalyType::Scale => {
                let (lo, hi) = if rng.gen_bool(0.5) {
                    p.scale_down
                } else {
                    p.scale_up
                };
                let factor = rng.gen_range(lo..=hi);
                (apply_scale(seg, factor), serde_json::json!({ "factor": factor }))
            }
            AnomalyType::Outlier => {
                let magnitude = rng.gen_range(p.outlier_magnitude.0..=p.outlier_magnitude.1);
                let n_points = rng.gen_range(p.outlier_points.0..=p.outlier_points.1);
                (
                    apply_outlier(seg, magnitude, n_points, &mut rng),
                    serde_json::json!({ "magnitude": magnitude, "n_points": n_points }),
                )
            }
            AnomalyType::Noise => {
                let sigma = rng.gen_range(p.noise_sigma.0..=p.noise_sigma.1);
                (
                    apply_noise(seg, sigma, &mut rng),
                    serde_json::json!({ "sigma": sigma }),
                )
            }
            AnomalyType::Compress => {
                let factor = p.warp_factors[rng.gen_range(0..p.warp_factors.len())];
                (
                    apply_compress(seg, factor),
                    serde_json::json!({ "factor": factor }),
                )
            }
            AnomalyType::Stretch => {
                let factor = p.warp_factors[rng.gen_range(0..p.warp_factors.len())];
                (
                    apply_stretch(seg, factor),
                    serde_json::json!({ "factor": factor }),
                )
            }
            AnomalyType::Pattern => {
                let donor_start = rng.gen_range(0..=t - len);
                (
                    apply_pattern(seg, &original[donor_start..donor_start + len]),
                    serde_json::json!({ "donor_start": donor_start }),
                )
            }
        };
        out[start..start + len].copy_from_slice(&new_seg);
        for bit in &mut labels[start..start + len] {
            *bit = 1;
        }
        covered += len;
        log.push(InjectionEvent {
            kind,
            start,
            end: start + len,
            params,
        });
    }

    Ok(InjectionResult {
        values: out,
        labels,
        log,
    })
}
