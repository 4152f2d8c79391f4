//! Event-aware evaluation: affiliation precision/recall/F1, AUC_ROC, and the
//! quantile-hit protocol.
//!
//! Affiliation metrics partition the timeline into zones, one around each
//! ground-truth event (every timestamp belongs to the zone of its nearest
//! event, ties going to the earlier event). Within a zone, each predicted
//! point is scored by the probability that a uniformly random point of the
//! zone would lie at least as far from the event (precision direction), and
//! each ground-truth point by the probability that a uniformly random point
//! would lie at least as far from the predicted set (recall direction).
//! Zone-level means are then macro-averaged. Random predictions therefore
//! score near 0.5 regardless of event lengths, and exact predictions score 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth contains no events")]
    NoGroundTruthEvents,
    #[error("labels contain a single class; AUC is undefined")]
    SingleClass,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid event list: {0}")]
    InvalidEvents(String),
}

/// Ordered disjoint half-open intervals `[start, end)` over `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLabels {
    pub events: Vec<(usize, usize)>,
}

impl EventLabels {
    /// Validates ordering, disjointness, and non-emptiness of each interval.
    pub fn from_events(events: Vec<(usize, usize)>) -> Result<Self, EvalError> {
        let mut prev_end = 0usize;
        for (i, &(s, e)) in events.iter().enumerate() {
            if s >= e {
                return Err(EvalError::InvalidEvents(format!(
                    "event {i} is empty: [{s}, {e})"
                )));
            }
            if i > 0 && s < prev_end {
                return Err(EvalError::InvalidEvents(format!(
                    "event {i} overlaps or is out of order at start {s}"
                )));
            }
            prev_end = e;
        }
        Ok(Self { events })
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Total number of labeled points.
    pub fn point_count(&self) -> usize {
        self.events.iter().map(|&(s, e)| e - s).sum()
    }

    pub fn to_binary(&self, t_len: usize) -> Vec<u8> {
        let mut y = vec![0u8; t_len];
        for &(s, e) in &self.events {
            for bit in y.iter_mut().take(e.min(t_len)).skip(s) {
                *bit = 1;
            }
        }
        y
    }

    pub fn contains(&self, t: usize) -> bool {
        self.events.iter().any(|&(s, e)| s <= t && t < e)
    }
}

/// Maximal runs of 1s become intervals.
pub fn binary_to_events(y: &[u8]) -> EventLabels {
    let mut events = Vec::new();
    let mut start = None;
    for (t, &bit) in y.iter().enumerate() {
        match (bit, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                events.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        events.push((s, y.len()));
    }
    EventLabels { events }
}

#[derive(Debug, Clone, Copy)]
struct Zone {
    lo: usize, // inclusive
    hi: usize, // inclusive
}

impl Zone {
    fn size(&self) -> usize {
        self.hi - self.lo + 1
    }
}

/// Distance from integer timestamp `t` to the interval `[s, e)`; zero inside.
fn dist_to_interval(t: usize, (s, e): (usize, usize)) -> usize {
    if t < s {
        s - t
    } else if t >= e {
        t - (e - 1)
    } else {
        0
    }
}

/// Nearest-event partition of `[0, T)`. The cut between consecutive events
/// places equidistant timestamps with the earlier event.
fn build_zones(gt: &[(usize, usize)], t_len: usize) -> Vec<Zone> {
    let n = gt.len();
    let mut zones = Vec::with_capacity(n);
    let mut lo = 0usize;
    for j in 0..n {
        let hi = if j + 1 < n {
            let last_j = gt[j].1 - 1;
            let next_s = gt[j + 1].0;
            (last_j + next_s) / 2
        } else {
            t_len - 1
        };
        zones.push(Zone { lo, hi });
        lo = hi + 1;
    }
    zones
}

/// Count of zone points whose distance to `ev` is at least `d`.
fn survival_count_event(z: &Zone, ev: (usize, usize), d: usize) -> usize {
    if d == 0 {
        return z.size();
    }
    let (s, e) = ev;
    let last = e - 1;
    let left = if s >= d && s - d >= z.lo {
        (s - d).min(z.hi) - z.lo + 1
    } else {
        0
    };
    let right = if last + d <= z.hi {
        z.hi - (last + d).max(z.lo) + 1
    } else {
        0
    };
    left + right
}

/// Count of zone points whose distance to the fixed timestamp `y` is at
/// least `d`.
fn survival_count_point(z: &Zone, y: usize, d: usize) -> usize {
    if d == 0 {
        return z.size();
    }
    let left = if y >= d && y - d >= z.lo {
        (y - d).min(z.hi) - z.lo + 1
    } else {
        0
    };
    let right = if y + d <= z.hi {
        z.hi - (y + d).max(z.lo) + 1
    } else {
        0
    };
    left + right
}

/// Affiliation precision, recall, and F1 of predicted events against ground
/// truth over a timeline of `t_len` points.
///
/// Empty predictions yield `(0, 0, 0)` by convention rather than an error so
/// batch evaluation never aborts.
pub fn affiliation_prf(
    pred: &EventLabels,
    gt: &EventLabels,
    t_len: usize,
) -> Result<(f64, f64, f64), EvalError> {
    if gt.is_empty() {
        return Err(EvalError::NoGroundTruthEvents);
    }
    if t_len == 0 {
        return Err(EvalError::InvalidEvents("timeline is empty".into()));
    }
    if let Some(&(_, e)) = gt.events.last() {
        if e > t_len {
            return Err(EvalError::InvalidEvents(format!(
                "ground-truth event ends at {e}, beyond T={t_len}"
            )));
        }
    }
    if let Some(&(_, e)) = pred.events.last() {
        if e > t_len {
            return Err(EvalError::InvalidEvents(format!(
                "predicted event ends at {e}, beyond T={t_len}"
            )));
        }
    }

    let zones = build_zones(&gt.events, t_len);
    let mut zone_p = Vec::new();
    let mut zone_r_sum = 0.0;

    for (j, z) in zones.iter().enumerate() {
        let ev = gt.events[j];
        let size = z.size() as f64;

        // Predicted intervals clipped to this zone.
        let clipped: Vec<(usize, usize)> = pred
            .events
            .iter()
            .filter_map(|&(s, e)| {
                let s2 = s.max(z.lo);
                let e2 = e.min(z.hi + 1);
                (s2 < e2).then_some((s2, e2))
            })
            .collect();

        if !clipped.is_empty() {
            // Precision direction: each predicted point against the event.
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(s2, e2) in &clipped {
                for x in s2..e2 {
                    let d = dist_to_interval(x, ev);
                    sum += survival_count_event(z, ev, d) as f64 / size;
                    count += 1;
                }
            }
            zone_p.push(sum / count as f64);
        }

        // Recall direction: each ground-truth point against the predicted set.
        if clipped.is_empty() {
            // No predictions in the zone: infinite distance, probability 0.
        } else {
            let mut sum = 0.0;
            for y in ev.0..ev.1 {
                let dy = clipped
                    .iter()
                    .map(|&iv| dist_to_interval(y, iv))
                    .min()
                    .expect("clipped is non-empty");
                sum += survival_count_point(z, y, dy) as f64 / size;
            }
            zone_r_sum += sum / (ev.1 - ev.0) as f64;
        }
    }

    let p = if zone_p.is_empty() {
        0.0
    } else {
        zone_p.iter().sum::<f64>() / zone_p.len() as f64
    };
    let r = zone_r_sum / zones.len() as f64;
    Ok((p, r, f1_score(p, r)))
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Probability that a random anomalous point outscores a random normal
/// point, ties counted 1/2 (Mann-Whitney rank formulation).
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks within tie groups, then sum positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Ranks scores descending and reports whether any of the top
/// `ceil(alpha * T)` timestamps falls inside a ground-truth interval.
pub fn quantile_hit(scores: &[f64], gt: &EventLabels, alpha: f64) -> bool {
    assert!(
        alpha > 0.0 && alpha <= 1.0,
        "alpha must lie in (0, 1], got {alpha}"
    );
    if scores.is_empty() || gt.is_empty() {
        return false;
    }
    let k = ((alpha * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending score, ascending index for determinism under ties.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().take(k).any(|&t| gt.contains(t))
}

/// Event and point tallies accompanying the headline metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Ground-truth events containing at least one predicted point.
    pub tp_events: usize,
    pub total_events: usize,
    pub predicted_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub affiliation_p: f64,
    pub affiliation_r: f64,
    pub affiliation_f1: f64,
    pub auc_roc: f64,
    pub counts: EvalCounts,
    /// Set when the decisions vector contained no positive points, in which
    /// case the affiliation fields are the (0, 0, 0) convention.
    pub empty_predictions: bool,
}

/// Full per-series evaluation of continuous scores plus thresholded
/// decisions against binary ground truth.
pub fn evaluate_series(
    scores: &[f64],
    decisions: &[u8],
    labels: &[u8],
) -> Result<EvalReport, EvalError> {
    if decisions.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            expected: scores.len(),
            got: decisions.len(),
        });
    }
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let gt = binary_to_events(labels);
    if gt.is_empty() {
        return Err(EvalError::NoGroundTruthEvents);
    }
    let pred = binary_to_events(decisions);
    let (p, r, f1) = affiliation_prf(&pred, &gt, scores.len())?;
    let auc = auc_roc(scores, labels)?;
    let tp_events = gt
        .events
        .iter()
        .filter(|&&(s, e)| pred.events.iter().any(|&(ps, pe)| ps < e && s < pe))
        .count();
    Ok(EvalReport {
        affiliation_p: p,
        affiliation_r: r,
        affiliation_f1: f1,
        auc_roc: auc,
        counts: EvalCounts {
            tp_events,
            total_events: gt.len(),
            predicted_points: pred.point_count(),
        },
        empty_predictions: pred.is_empty(),
    })
}
