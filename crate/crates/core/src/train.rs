//! Losses and the adversarial training loop.
//!
//! One optimizer step consumes a normal sub-batch and an abnormal sub-batch.
//! The normal decoder minimizes reconstruction error everywhere; the
//! abnormal decoder minimizes error at labeled-anomalous points while the
//! gradient reversal boundary feeds the negated, lambda-scaled abnormal
//! gradient into the shared feature extractor. The net effect is the
//! two-player objective: shared features and the normal decoder descend
//! `loss_norm - lambda * loss_abnorm`, the abnormal decoder descends
//! `loss_abnorm`.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    make_windows, normalize, split_channels, DatasetError, DatasetManifest, Role,
    TimeSeries, WindowMode,
};
use crate::inject::{inject, InjectError, InjectionSpec};
use crate::mask::make_complementary_masks;
use crate::net::{
    backward_batch, forward_batch, DecoderKind, ModelParams, NetConfig, NetError,
    TrainState,
};
use crate::nn::AdamW;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("empty {0} stream")]
    EmptyStream(&'static str),
    #[error("non-finite {which} at step {step} (epoch {epoch}): {value}")]
    NonFiniteLoss {
        which: &'static str,
        step: u64,
        epoch: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_ratio: f64,
    /// Complementary mask pairs drawn per window per step.
    pub mask_pairs_train: usize,
    /// Share of each batch drawn from the abnormal stream.
    pub abnormal_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 128,
            epochs: 5,
            mask_ratio: 0.5,
            mask_pairs_train: 1,
            abnormal_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::BadConfig(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be > 0", self.lr));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio {} must be in (0,1)", self.mask_ratio));
        }
        if !(self.abnormal_fraction > 0.0 && self.abnormal_fraction < 1.0) {
            return fail(format!(
                "abnormal_fraction {} must be in (0,1)",
                self.abnormal_fraction
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.mask_pairs_train == 0 {
            return fail("mask_pairs_train must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0".into());
        }
        Ok(())
    }

    /// (normal, abnormal) window counts per batch; both at least 1.
    pub fn batch_split(&self) -> (usize, usize) {
        let n_abn = ((self.batch_size as f64 * self.abnormal_fraction).round() as usize)
            .clamp(1, self.batch_size - 1);
        (self.batch_size - n_abn, n_abn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub loss_norm: f64,
    pub loss_abnorm: f64,
}

/// Mean over windows of the summed squared reconstruction error.
pub fn loss_normal(x: &ArrayView2<f32>, xhat: &ArrayView2<f32>) -> f64 {
    assert_eq!(x.dim(), xhat.dim(), "loss shapes");
    let n = x.nrows() as f64;
    let mut total = 0.0f64;
    for (&a, &b) in x.iter().zip(xhat.iter()) {
        let d = (a - b) as f64;
        total += d * d;
    }
    total / n
}

/// Mean over windows of the squared error restricted to labeled-anomalous
/// points; values at unlabeled points never contribute.
pub fn loss_abnormal(x: &ArrayView2<f32>, xhat: &ArrayView2<f32>, y: &ArrayView2<u8>) -> f64 {
    assert_eq!(x.dim(), xhat.dim(), "loss shapes");
    assert_eq!(x.dim(), y.dim(), "label shape");
    let n = x.nrows() as f64;
    let mut total = 0.0f64;
    for ((&a, &b), &lab) in x.iter().zip(xhat.iter()).zip(y.iter()) {
        if lab != 0 {
            let d = (a - b) as f64;
            total += d * d;
        }
    }
    total / n
}

fn grad_normal(x: &ArrayView2<f32>, xhat: &ArrayView2<f32>) -> Array2<f32> {
    let n = x.nrows() as f32;
    let mut g = xhat - x;
    g.mapv_inplace(|v| 2.0 * v / n);
    g
}

fn grad_abnormal(x: &ArrayView2<f32>, xhat: &ArrayView2<f32>, y: &ArrayView2<u8>) -> Array2<f32> {
    let n = x.nrows() as f32;
    let mut g = xhat - x;
    ndarray::Zip::from(&mut g).and(y).for_each(|g, &lab| {
        *g = if lab != 0 { 2.0 * *g / n } else { 0.0 };
    });
    g
}

/// Stacks `m` copies of a batch so each window trains under `m` independent
/// mask pairs.
fn repeat_rows(x: &ArrayView2<f32>, m: usize) -> Array2<f32> {
    if m == 1 {
        return x.to_owned();
    }
    let mut out = Array2::zeros((x.nrows() * m, x.ncols()));
    for rep in 0..m {
        out.slice_mut(s![rep * x.nrows()..(rep + 1) * x.nrows(), ..])
            .assign(x);
    }
    out
}

fn repeat_rows_u8(x: &ArrayView2<u8>, m: usize) -> Array2<u8> {
    let mut out = Array2::zeros((x.nrows() * m, x.ncols()));
    for rep in 0..m {
        out.slice_mut(s![rep * x.nrows()..(rep + 1) * x.nrows(), ..])
            .assign(x);
    }
    out
}

/// One optimizer step over a normal and an abnormal sub-batch.
///
/// RNG protocol, in order: one `u64` mask seed per normal window row, then
/// router-noise draws for the normal forward pass, then one `u64` mask seed
/// per abnormal window row, then abnormal-pass noise draws. Everything a
/// step consumes comes from `rng`, so a restored stream position resumes
/// the run bit-identically.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch_n: &ArrayView2<f32>,
    batch_a: &ArrayView2<f32>,
    labels_a: &ArrayView2<u8>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<LossReport, TrainError> {
    assert!(batch_n.nrows() > 0, "normal sub-batch must be non-empty");
    assert!(batch_a.nrows() > 0, "abnormal sub-batch must be non-empty");
    let p = params.config.n_patches();
    let m = cfg.mask_pairs_train;
    let step = opt.step_count + 1;

    let check = |value: f64, which: &'static str| -> Result<f64, TrainError> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TrainError::NonFiniteLoss {
                which,
                step,
                epoch,
                value,
            })
        }
    };

    // Normal stream: plain reconstruction through the normal decoder.
    let xn = repeat_rows(batch_n, m);
    let masks_n: Vec<_> = (0..xn.nrows())
        .map(|_| make_complementary_masks(p, cfg.mask_ratio, rng.gen::<u64>()))
        .collect();
    let out_n = forward_batch(params, &xn.view(), &masks_n, DecoderKind::Normal, true, Some(rng))?;
    let l_n = check(loss_normal(&xn.view(), &out_n.xhat.view()), "loss_norm")?;
    let dxhat_n = grad_normal(&xn.view(), &out_n.xhat.view());
    let mut grads = backward_batch(params, &out_n.trace, &dxhat_n.view(), None);

    // Abnormal stream: adversarial reconstruction of labeled points.
    let xa = repeat_rows(batch_a, m);
    let ya = repeat_rows_u8(labels_a, m);
    let masks_a: Vec<_> = (0..xa.nrows())
        .map(|_| make_complementary_masks(p, cfg.mask_ratio, rng.gen::<u64>()))
        .collect();
    let out_a = forward_batch(params, &xa.view(), &masks_a, DecoderKind::Abnormal, true, Some(rng))?;
    let l_a = check(
        loss_abnormal(&xa.view(), &out_a.xhat.view(), &ya.view()),
        "loss_abnorm",
    )?;
    let dxhat_a = grad_abnormal(&xa.view(), &out_a.xhat.view(), &ya.view());
    let grads_a = if params.config.use_adversarial {
        backward_batch(params, &out_a.trace, &dxhat_a.view(), Some(params.config.grl_lambda))
    } else {
        // Degenerate variant: negated abnormal loss applied to every
        // parameter, the abnormal decoder included, with no reversal
        // boundary.
        let mut g = backward_batch(params, &out_a.trace, &dxhat_a.view(), None);
        g.scale(-1.0);
        g
    };
    grads.add_assign(&grads_a);

    let mut named_params = params.named_tensors_mut();
    opt.step(&mut named_params, &grads.named_tensors());

    Ok(LossReport {
        step,
        epoch,
        loss_norm: l_n,
        loss_abnorm: l_a,
    })
}

/// Window-level training streams: normalized f32 windows plus per-point
/// labels for the abnormal side.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub normal: Array2<f32>,
    pub abnormal: Array2<f32>,
    pub abnormal_labels: Array2<u8>,
}

impl TrainStreams {
    pub fn validate(&self, window: usize) -> Result<(), TrainError> {
        if self.normal.nrows() == 0 {
            return Err(TrainError::EmptyStream("normal"));
        }
        if self.abnormal.nrows() == 0 {
            return Err(TrainError::EmptyStream("abnormal"));
        }
        if self.normal.ncols() != window
            || self.abnormal.ncols() != window
            || self.abnormal_labels.dim() != self.abnormal.dim()
        {
            return Err(TrainError::BadConfig(format!(
                "stream window length mismatch (expected {window})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PretrainRun {
    pub params: ModelParams,
    pub reports: Vec<LossReport>,
    pub state: TrainState,
}

fn capture_state(
    epoch_done: usize,
    opt: &AdamW,
    seed: u64,
    rng: &ChaCha8Rng,
) -> TrainState {
    let (step_count, m, v, names) = opt.state();
    TrainState {
        epoch: epoch_done,
        step: step_count,
        rng_seed: seed,
        rng_word_pos: rng.get_word_pos(),
        opt_step_count: step_count,
        opt_m: names.iter().cloned().zip(m.iter().cloned()).collect(),
        opt_v: names.iter().cloned().zip(v.iter().cloned()).collect(),
    }
}

/// Epoch loop over interleaved normal/abnormal streams.
///
/// Each epoch reshuffles the normal stream and walks it in normal-sub-batch
/// chunks (remainder dropped); the abnormal stream is reshuffled per epoch
/// and cycled by index so smaller abnormal pools repeat. With `resume`, the
/// run continues from the recorded epoch boundary bit-identically to an
/// uninterrupted run.
pub fn pretrain(
    streams: &TrainStreams,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    resume: Option<(ModelParams, TrainState)>,
) -> Result<PretrainRun, TrainError> {
    cfg.validate()?;
    net_cfg.validate()?;
    streams.validate(net_cfg.window)?;

    let (mut params, mut opt, mut rng, start_epoch) = match resume {
        None => (
            ModelParams::init(net_cfg, cfg.seed)?,
            AdamW::new(cfg.lr, cfg.weight_decay),
            ChaCha8Rng::seed_from_u64(cfg.seed),
            0,
        ),
        Some((params, state)) => {
            if params.config != *net_cfg {
                return Err(TrainError::BadConfig(
                    "resume checkpoint config differs from requested net config".into(),
                ));
            }
            let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
            let names: Vec<String> = state.opt_m.iter().map(|(n, _)| n.clone()).collect();
            opt.restore_state(
                state.opt_step_count,
                state.opt_m.iter().map(|(_, v)| v.clone()).collect(),
                state.opt_v.iter().map(|(_, v)| v.clone()).collect(),
                names,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
            rng.set_word_pos(state.rng_word_pos);
            (params, opt, rng, state.epoch)
        }
    };

    let (want_norm, want_abn) = cfg.batch_split();
    let n_norm_pool = streams.normal.nrows();
    let n_abn_pool = streams.abnormal.nrows();
    // Short pools shrink the sub-batch rather than erroring: tiny smoke
    // datasets still take one step per epoch.
    let per_batch_norm = want_norm.min(n_norm_pool);
    let per_batch_abn = want_abn.min(n_abn_pool);
    let steps_per_epoch = (n_norm_pool / per_batch_norm).max(1);

    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut norm_order: Vec<usize> = (0..n_norm_pool).collect();
        norm_order.shuffle(&mut rng);
        let mut abn_order: Vec<usize> = (0..n_abn_pool).collect();
        abn_order.shuffle(&mut rng);

        for s in 0..steps_per_epoch {
            let norm_idx = &norm_order[s * per_batch_norm..(s + 1) * per_batch_norm];
            let mut batch_n = Array2::zeros((per_batch_norm, net_cfg.window));
            for (row, &i) in norm_idx.iter().enumerate() {
                batch_n.row_mut(row).assign(&streams.normal.row(i));
            }
            let mut batch_a = Array2::zeros((per_batch_abn, net_cfg.window));
            let mut labels_a = Array2::zeros((per_batch_abn, net_cfg.window));
            for row in 0..per_batch_abn {
                let i = abn_order[(s * per_batch_abn + row) % n_abn_pool];
                batch_a.row_mut(row).assign(&streams.abnormal.row(i));
                labels_a.row_mut(row).assign(&streams.abnormal_labels.row(i));
            }
            let report = train_step(
                &mut params,
                &mut opt,
                &batch_n.view(),
                &batch_a.view(),
                &labels_a.view(),
                cfg,
                &mut rng,
                epoch,
            )?;
            reports.push(report);
        }
    }

    let state = capture_state(cfg.epochs, &opt, cfg.seed, &rng);
    Ok(PretrainRun {
        params,
        reports,
        state,
    })
}

/// Continues training from existing parameters on a new stream; zero epochs
/// returns the parameters untouched.
pub fn finetune(
    params: ModelParams,
    streams: &TrainStreams,
    cfg: &TrainConfig,
) -> Result<PretrainRun, TrainError> {
    cfg.validate()?;
    params.config.validate()?;
    streams.validate(params.config.window)?;
    let net_cfg = params.config.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;

    let (want_norm, want_abn) = cfg.batch_split();
    let per_batch_norm = want_norm.min(streams.normal.nrows());
    let per_batch_abn = want_abn.min(streams.abnormal.nrows());
    let steps_per_epoch = (streams.normal.nrows() / per_batch_norm).max(1);

    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut norm_order: Vec<usize> = (0..streams.normal.nrows()).collect();
        norm_order.shuffle(&mut rng);
        let mut abn_order: Vec<usize> = (0..streams.abnormal.nrows()).collect();
        abn_order.shuffle(&mut rng);
        for s in 0..steps_per_epoch {
            let norm_idx = &norm_order[s * per_batch_norm..(s + 1) * per_batch_norm];
            let mut batch_n = Array2::zeros((per_batch_norm, net_cfg.window));
            for (row, &i) in norm_idx.iter().enumerate() {
                batch_n.row_mut(row).assign(&streams.normal.row(i));
            }
            let mut batch_a = Array2::zeros((per_batch_abn, net_cfg.window));
            let mut labels_a = Array2::zeros((per_batch_abn, net_cfg.window));
            for row in 0..per_batch_abn {
                let i = abn_order[(s * per_batch_abn + row) % streams.abnormal.nrows()];
                batch_a.row_mut(row).assign(&streams.abnormal.row(i));
                labels_a.row_mut(row).assign(&streams.abnormal_labels.row(i));
            }
            let report = train_step(
                &mut params,
                &mut opt,
                &batch_n.view(),
                &batch_a.view(),
                &labels_a.view(),
                cfg,
                &mut rng,
                epoch,
            )?;
            reports.push(report);
        }
    }
    let state = capture_state(cfg.epochs, &opt, cfg.seed, &rng);
    Ok(PretrainRun {
        params,
        reports,
        state,
    })
}

/// Builds training streams from a manifest: normal-role series supply
/// normal windows; the abnormal stream comes from labeled abnormal-role
/// series plus anomaly injection over every normal channel. Injected or
/// labeled windows without a single anomalous point are dropped from the
/// abnormal stream.
pub fn assemble_streams(
    manifest: &DatasetManifest,
    window: usize,
    stride: usize,
    inject_spec: &InjectionSpec,
) -> Result<TrainStreams, TrainError> {
    let mut normal_rows: Vec<f32> = Vec::new();
    let mut abn_rows: Vec<f32> = Vec::new();
    let mut abn_labels: Vec<u8> = Vec::new();

    let mut push_abnormal = |series: &TimeSeries| -> Result<(), TrainError> {
        for cv in split_channels(series) {
            let batch = normalize(make_windows(&cv, window, stride, WindowMode::Train)?);
            let labels = batch
                .labels
                .as_ref()
                .expect("abnormal series carry labels");
            for (row, lab) in batch.windows.rows().into_iter().zip(labels.rows()) {
                if lab.iter().any(|&l| l != 0) {
                    abn_rows.extend(row.iter().map(|&v| v as f32));
                    abn_labels.extend(lab.iter().copied());
                }
            }
        }
        Ok(())
    };

    let normal_series = manifest.load_role(Role::Normal)?;
    let mut channel_counter = 0u64;
    for series in &normal_series {
        for cv in split_channels(series) {
            let batch = normalize(make_windows(&cv, window, stride, WindowMode::Train)?);
            normal_rows.extend(batch.windows.iter().map(|&v| v as f32));

            // Synthesize the abnormal counterpart of this channel.
            let mut spec = inject_spec.clone();
            spec.seed = inject_spec
                .seed
                .wrapping_add(channel_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            channel_counter += 1;
            let injected = inject(&cv.values, &spec)?;
            let injected_series = TimeSeries {
                name: format!("{}#ch{}+inject", series.name, cv.channel_index),
                domain_tag: series.domain_tag.clone(),
                values: Array2::from_shape_vec(
                    (injected.values.len(), 1),
                    injected.values.clone(),
                )
                .expect("column vector"),
                labels: Some(injected.labels.clone()),
                sample_interval: series.sample_interval.clone(),
            };
            push_abnormal(&injected_series)?;
        }
    }
    for series in manifest.load_role(Role::Abnormal)? {
        if series.labels.is_none() {
            return Err(TrainError::BadConfig(format!(
                "abnormal-role series {:?} has no label column",
                series.name
            )));
        }
        push_abnormal(&series)?;
    }

    let n_norm = normal_rows.len() / window;
    let n_abn = abn_rows.len() / window;
    Ok(TrainStreams {
        normal: Array2::from_shape_vec((n_norm, window), normal_rows).expect("row-built"),
        abnormal: Array2::from_shape_vec((n_abn, window), abn_rows).expect("row-built"),
        abnormal_labels: Array2::from_shape_vec((n_abn, window), abn_labels).expect("row-built"),
    })
}

/// Manifest-level pretraining: assemble streams, then run the epoch loop.
pub fn pretrain_from_manifest(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    inject_spec: &InjectionSpec,
    stride: usize,
    resume: Option<(ModelParams, TrainState)>,
) -> Result<PretrainRun, TrainError> {
    let streams = assemble_streams(manifest, net_cfg.window, stride, inject_spec)?;
    pretrain(&streams, net_cfg, cfg, resume)
}

/// Manifest-level fine-tuning on a target domain.
pub fn finetune_from_manifest(
    params: ModelParams,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    inject_spec: &InjectionSpec,
    stride: usize,
) -> Result<PretrainRun, TrainError> {
    let streams = assemble_streams(manifest, params.config.window, stride, inject_spec)?;
    finetune(params, &streams, cfg)
}
