//! Shared fixtures for the benchmarks: a desk-scale model, a deterministic
//! window batch, and synthetic score and event streams.

use maskvar_core::dataset::TimeSeries;
use maskvar_core::eval::EventLabels;
use maskvar_core::net::{ModelParams, NetConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk_params(seed: u64) -> ModelParams {
    ModelParams::init(&NetConfig::desk(), seed).expect("desk config is valid")
}

/// N windows of sinusoid-plus-noise, shaped for the model's window length.
pub fn window_batch(cfg: &NetConfig, n: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, cfg.window), |(i, t)| {
        let phase = (t as f32 + 13.0 * i as f32) / 9.0;
        phase.sin() + 0.05 * rng.gen::<f32>()
    })
}

/// A single-channel series with a few amplitude bursts, for scoring.
pub fn bench_series(len: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..len)
        .map(|t| {
            let base = (t as f64 / 11.0).sin();
            let burst = if t % 997 < 30 { 2.5 } else { 0.0 };
            base + burst + 0.05 * rng.gen::<f64>()
        })
        .collect();
    TimeSeries {
        name: "bench".into(),
        domain_tag: "bench".into(),
        values: Array2::from_shape_vec((len, 1), values).expect("column vector"),
        labels: None,
        sample_interval: None,
    }
}

/// Heavy-tailed positive scores, the shape SPOT calibration sees.
pub fn exponential_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect()
}

/// Random disjoint event sets over `t_len` timestamps.
pub fn random_events(t_len: usize, n_events: usize, seed: u64) -> EventLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(n_events);
    let gap = t_len / n_events.max(1);
    for i in 0..n_events {
        let lo = i * gap;
        let hi = ((i + 1) * gap).min(t_len).saturating_sub(1);
        if lo + 1 >= hi {
            continue;
        }
        let s = rng.gen_range(lo..hi - 1);
        let e = rng.gen_range(s + 1..hi);
        events.push((s, e));
    }
    EventLabels::from_events(events).expect("disjoint by construction")
}
