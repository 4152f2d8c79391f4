//! Inference-time anomaly scoring and extreme-value thresholding.
//!
//! A window is scored by reconstructing it under several independent
//! complementary mask pairs (normal decoder only) and taking the variance
//! of the de-normalized reconstructions at each point: stable structure
//! reconstructs consistently regardless of what was hidden, anomalies do
//! not. The threshold comes from peaks-over-threshold calibration on
//! held-out scores: a Generalized Pareto fit to tail excesses extrapolates
//! the extreme quantile at risk level `q`.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_windows, split_channels, DatasetError, TimeSeries, WindowMode, STD_FLOOR};
use crate::mask::make_complementary_masks;
use crate::net::{forward_batch, DecoderKind, ModelParams, NetError};

/// Mask ratio used when drawing scoring mask pairs.
pub const SCORE_MASK_RATIO: f64 = 0.5;

/// Windows scored per batched forward pass.
const SCORE_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid detect config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotConfig {
    /// Risk level: the target probability of a calibration-distribution
    /// score exceeding the threshold.
    pub q: f64,
    /// Empirical quantile that sets the excess cutoff t0.
    pub init_quantile: f64,
    /// Leading fraction of a score stream used for calibration when no
    /// dedicated calibration split exists.
    pub init_fraction: f64,
}

impl Default for SpotConfig {
    fn default() -> Self {
        Self {
            q: 1e-3,
            init_quantile: 0.98,
            init_fraction: 0.2,
        }
    }
}

impl SpotConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let fail = |m: String| Err(DetectError::BadConfig(m));
        if !(self.init_quantile > 0.0 && self.init_quantile < 1.0) {
            return fail(format!("init_quantile {} must be in (0,1)", self.init_quantile));
        }
        if !(self.q > 0.0 && self.q < 1.0 - self.init_quantile) {
            return fail(format!(
                "q {} must satisfy 0 < q < 1 - init_quantile = {}",
                self.q,
                1.0 - self.init_quantile
            ));
        }
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return fail(format!(
                "init_fraction {} must be in (0,1]",
                self.init_fraction
            ));
        }
        Ok(())
    }
}

/// Threshold calibration result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpotFit {
    pub delta: f64,
    /// Excess cutoff (empirical init quantile).
    pub t0: f64,
    /// Fitted tail-shape parameter; 0 when the fallback path was taken.
    pub gamma: f64,
    /// Fitted tail scale; 0 when the fallback path was taken.
    pub sigma: f64,
    pub n_init: usize,
    pub n_excesses: usize,
    /// True when calibration fell back to the plain (1-q) empirical
    /// quantile (init set too small or too few excesses).
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub threshold: Option<f64>,
    /// decisions[t] = 1 exactly when scores[t] > threshold.
    pub decisions: Option<Vec<u8>>,
    /// T x C per-channel scores.
    pub per_channel_scores: Option<Array2<f64>>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mask seed for scoring pair `pair` under a window-level seed.
pub fn pair_mask_seed(seed: u64, pair: usize) -> u64 {
    splitmix64(seed.wrapping_add(1 + pair as u64))
}

/// Seed for a given (channel, window) position of a series-level seed.
pub fn window_seed(seed: u64, channel: usize, window_index: usize) -> u64 {
    splitmix64(seed ^ ((channel as u64) << 40) ^ window_index as u64)
}

/// Scores a chunk of raw windows in one batched forward pass. Row layout:
/// window `i`, pair `j` sits at row `i * n_pairs + j`.
fn score_chunk(
    params: &ModelParams,
    windows_raw: &ArrayView2<f64>,
    n_pairs: usize,
    seeds: &[u64],
) -> Result<Array2<f64>, DetectError> {
    let w = params.config.window;
    let p = params.config.n_patches();
    let n = windows_raw.nrows();
    assert_eq!(seeds.len(), n);

    // Per-window normalization; stats kept to de-normalize reconstructions.
    let mut stats = Vec::with_capacity(n);
    let mut rows = Array2::<f32>::zeros((n * n_pairs, w));
    let mut masks = Vec::with_capacity(n * n_pairs);
    for (i, win) in windows_raw.rows().into_iter().enumerate() {
        let mean = win.sum() / w as f64;
        let var = win.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let std = var.sqrt().max(STD_FLOOR);
        stats.push((mean, std));
        let normalized: Vec<f32> = win.iter().map(|&v| ((v - mean) / std) as f32).collect();
        for j in 0..n_pairs {
            rows.row_mut(i * n_pairs + j)
                .assign(&ndarray::ArrayView1::from(&normalized));
            masks.push(make_complementary_masks(
                p,
                SCORE_MASK_RATIO,
                pair_mask_seed(seeds[i], j),
            ));
        }
    }

    let out = forward_batch(params, &rows.view(), &masks, DecoderKind::Normal, false, None)?;

    // Variance across the n_pairs reconstructions at each point, in
    // de-normalized units. For n_pairs = 2 this is (r1 - r2)^2 / 2.
    let mut scores = Array2::<f64>::zeros((n, w));
    for i in 0..n {
        let (mean, std) = stats[i];
        for t in 0..w {
            let mut acc = 0.0f64;
            for j in 0..n_pairs {
                let v = out.xhat[(i * n_pairs + j, t)] as f64 * std + mean;
                acc += v;
            }
            let m = acc / n_pairs as f64;
            let mut ss = 0.0f64;
            for j in 0..n_pairs {
                let v = out.xhat[(i * n_pairs + j, t)] as f64 * std + mean;
                let d = v - m;
                ss += d * d;
            }
            scores[(i, t)] = ss / (n_pairs - 1) as f64;
        }
    }
    Ok(scores)
}

/// Per-point anomaly scores for one raw window: the spread of `n_pairs`
/// independent complementary-mask reconstructions.
pub fn score_window(
    window: &[f64],
    params: &ModelParams,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<f64>, DetectError> {
    if n_pairs < 2 {
        return Err(DetectError::BadConfig(format!(
            "n_pairs {n_pairs} must be at least 2"
        )));
    }
    if window.len() != params.config.window {
        return Err(DetectError::BadConfig(format!(
            "window length {} does not match model window {}",
            window.len(),
            params.config.window
        )));
    }
    let raw = ArrayView2::from_shape((1, window.len()), window).expect("contiguous");
    let scores = score_chunk(params, &raw, n_pairs, &[seed])?;
    Ok(scores.row(0).to_vec())
}

/// Scores every channel of a series independently over non-overlapping
/// tiled windows, then averages channels into the multivariate score.
pub fn score_series(
    ts: &TimeSeries,
    params: &ModelParams,
    n_pairs: usize,
    seed: u64,
) -> Result<ScoreSeries, DetectError> {
    if n_pairs < 2 {
        return Err(DetectError::BadConfig(format!(
            "n_pairs {n_pairs} must be at least 2"
        )));
    }
    let w = params.config.window;
    let t_len = ts.len();
    let c = ts.channels();
    let mut per_channel = Array2::<f64>::zeros((t_len, c));

    for (ch_idx, cv) in split_channels(ts).iter().enumerate() {
        let batch = make_windows(cv, w, w, WindowMode::Test)?;
        let n_windows = batch.n_windows();
        let mut channel_scores: Vec<f64> = Vec::with_capacity(t_len);
        let mut widx = 0usize;
        while widx < n_windows {
            let hi = (widx + SCORE_CHUNK).min(n_windows);
            let chunk = batch.windows.slice(s![widx..hi, ..]);
            let seeds: Vec<u64> = (widx..hi).map(|i| window_seed(seed, ch_idx, i)).collect();
            let scores = score_chunk(params, &chunk, n_pairs, &seeds)?;
            for (row, origin) in scores.rows().into_iter().zip(&batch.origin[widx..hi]) {
                let keep = w - origin.padded;
                channel_scores.extend(row.iter().take(keep));
            }
            widx = hi;
        }
        assert_eq!(channel_scores.len(), t_len, "cropped tiles cover the series");
        for (t, &v) in channel_scores.iter().enumerate() {
            per_channel[(t, ch_idx)] = v;
        }
    }

    let scores: Vec<f64> = (0..t_len)
        .map(|t| per_channel.row(t).sum() / c as f64)
        .collect();
    Ok(ScoreSeries {
        scores,
        threshold: None,
        decisions: None,
        per_channel_scores: Some(per_channel),
    })
}

/// Type-1 empirical quantile of ascending-sorted values.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!(p > 0.0 && p <= 1.0);
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Leading slice of a score stream used for threshold calibration.
pub fn calibration_slice<'a>(scores: &'a [f64], cfg: &SpotConfig) -> &'a [f64] {
    let n = ((scores.len() as f64 * cfg.init_fraction).ceil() as usize).min(scores.len());
    &scores[..n]
}

/// Generalized Pareto log-likelihood of excesses `y`.
fn gpd_log_likelihood(y: &[f64], gamma: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 || !sigma.is_finite() || !gamma.is_finite() {
        return f64::NEG_INFINITY;
    }
    let n = y.len() as f64;
    if gamma.abs() < 1e-12 {
        return -n * sigma.ln() - y.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &v in y {
        let a = 1.0 + gamma * v / sigma;
        if a <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += a.ln();
    }
    -n * sigma.ln() - (1.0 + 1.0 / gamma) * acc
}

/// Maximum-likelihood GPD fit via Grimshaw's reduction to one dimension:
/// roots x of u(x)v(x) = 1 with u = mean(1/(1+xy)), v = 1 + mean(ln(1+xy))
/// give candidates gamma = v(x) - 1, sigma = gamma / x; the exponential
/// limit and a method-of-moments candidate compete by likelihood.
fn gpd_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let var = y.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;

    let u = |x: f64| y.iter().map(|&v| 1.0 / (1.0 + x * v)).sum::<f64>() / n;
    let v_fn = |x: f64| 1.0 + y.iter().map(|&v| (1.0 + x * v).ln()).sum::<f64>() / n;
    let w = |x: f64| u(x) * v_fn(x) - 1.0;

    // Exponential limit is always a candidate.
    let mut candidates: Vec<(f64, f64)> = vec![(0.0, mean)];
    if var > 0.0 {
        let gamma_mom = 0.5 * (1.0 - mean * mean / var);
        let sigma_mom = mean * (1.0 - gamma_mom);
        candidates.push((gamma_mom, sigma_mom));
    }

    let mut bisect = |mut lo: f64, mut hi: f64| {
        let (wlo, whi) = (w(lo), w(hi));
        if !(wlo.is_finite() && whi.is_finite()) || wlo.signum() == whi.signum() {
            return;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if w(mid).signum() == wlo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        if x != 0.0 {
            let gamma = v_fn(x) - 1.0;
            let sigma = gamma / x;
            candidates.push((gamma, sigma));
        }
    };

    // Negative branch: x in (-1/max, 0); positive branch bounded by the
    // Grimshaw upper limit 2(mean - min)/min^2. Log-spaced magnitudes cope
    // with excesses spanning orders of magnitude.
    let grid = 48;
    if max > 0.0 {
        let neg_hi = (1.0 - 1e-9) / max;
        let neg_lo = 1e-9 / mean.max(1e-300);
        if neg_hi > neg_lo {
            let ratio = (neg_hi / neg_lo).ln();
            let mut prev = -neg_lo;
            for i in 1..=grid {
                let mag = neg_lo * (ratio * i as f64 / grid as f64).exp();
                let x = -mag;
                bisect(x, prev);
                prev = x;
            }
        }
    }
    if min > 0.0 && mean > min {
        let pos_lo = 1e-9 / mean;
        let pos_hi = (2.0 * (mean - min) / (min * min)).min(1e12 / mean);
        if pos_hi > pos_lo {
            let ratio = (pos_hi / pos_lo).ln();
            let mut prev = pos_lo;
            for i in 1..=grid {
                let x = pos_lo * (ratio * i as f64 / grid as f64).exp();
                bisect(prev, x);
                prev = x;
            }
        }
    }

    candidates
        .into_iter()
        .max_by(|a, b| {
            gpd_log_likelihood(y, a.0, a.1).total_cmp(&gpd_log_likelihood(y, b.0, b.1))
        })
        .expect("at least the exponential candidate")
}

/// Peaks-over-threshold calibration: fit tail excesses over the empirical
/// `init_quantile` and extrapolate the `1 - q` extreme quantile. Falls back
/// to the plain empirical quantile (flagged) when the init set is too
/// small or produces fewer than 10 excesses.
pub fn spot_threshold(init_scores: &[f64], cfg: &SpotConfig) -> Result<SpotFit, DetectError> {
    cfg.validate()?;
    if init_scores.is_empty() {
        return Err(DetectError::BadConfig("empty calibration set".into()));
    }
    if init_scores.iter().any(|v| !v.is_finite()) {
        return Err(DetectError::BadConfig(
            "calibration scores must be finite".into(),
        ));
    }
    let mut sorted = init_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let t0 = empirical_quantile(&sorted, cfg.init_quantile);
    let excesses: Vec<f64> = sorted
        .iter()
        .filter(|&&s| s > t0)
        .map(|&s| s - t0)
        .collect();
    let n_t = excesses.len();

    if n < 100 || n_t < 10 {
        return Ok(SpotFit {
            delta: empirical_quantile(&sorted, 1.0 - cfg.q),
            t0,
            gamma: 0.0,
            sigma: 0.0,
            n_init: n,
            n_excesses: n_t,
            fallback: true,
        });
    }

    let (gamma, sigma) = gpd_fit(&excesses);
    let ratio = cfg.q * n as f64 / n_t as f64;
    let delta = if gamma.abs() < 1e-9 {
        t0 - sigma * ratio.ln()
    } else {
        t0 + sigma / gamma * (ratio.powf(-gamma) - 1.0)
    };
    Ok(SpotFit {
        delta,
        t0,
        gamma,
        sigma,
        n_init: n,
        n_excesses: n_t,
        fallback: false,
    })
}

/// Applies a threshold: decisions are strict exceedances.
pub fn detect(mut ss: ScoreSeries, delta: f64) -> ScoreSeries {
    let decisions = ss.scores.iter().map(|&s| (s > delta) as u8).collect();
    ss.threshold = Some(delta);
    ss.decisions = Some(decisions);
    ss
}
