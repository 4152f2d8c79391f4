//! The reconstruction network: patch embedding, dilated-convolution encoder,
//! a pool of low-rank bottlenecks with a noisy top-k router, a parameter-free
//! norm clamp at the decoder interface, and two affine decoders with
//! disjoint parameters.
//!
//! A forward pass consumes a batch of windows plus one complementary mask
//! pair per window. Both branches of every pair run through the network in a
//! single stacked batch; the two reconstructions are then stitched so every
//! output value comes from the branch in which it was hidden. The abnormal
//! decoder trains adversarially: its reconstruction error on labeled
//! anomalies backpropagates into the shared feature extractor with reversed
//! sign (gradient reversal), pushing shared features toward reconstructing
//! only normal structure.
//!
//! Batched tensors are `(rows, width)` matrices where consecutive `P` rows
//! hold the patches of one branch pass; a batch of `N` windows yields `2N`
//! passes (masked, then complement, in window order).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState, FORMAT_VERSION};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::MaskPair;
use crate::nn::{gelu, gelu_grad, matmul, sigmoid, softplus, Affine, AffineGrads, ConvBlock, ConvCache, ConvGrads};

/// Flat view of a standard-layout matrix, for optimizer and checkpoint I/O.
fn flat(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bottleneck index {index} out of range (pool size {pool})")]
    BadBottleneckIndex { index: usize, pool: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Window length W; must be a multiple of `patch_size`.
    pub window: usize,
    /// Patch length d.
    pub patch_size: usize,
    /// Patch embedding width.
    pub d_model: usize,
    pub encoder_layers: usize,
    /// Representation width at the encoder output.
    pub d_r: usize,
    /// Bottleneck inner sizes; every entry must be < `d_r`.
    pub pool_sizes: Vec<usize>,
    /// Bottlenecks fused per window.
    pub k: usize,
    /// Gradient-reversal strength for the abnormal branch.
    pub grl_lambda: f32,
    /// Route among the bottleneck pool; when off, a single fixed bottleneck
    /// (the largest valid size) replaces the pool and no router exists.
    #[serde(default = "default_true")]
    pub use_adabn: bool,
    /// Reverse abnormal-branch gradients into the feature extractor; when
    /// off, the negated abnormal loss applies to all parameters directly.
    #[serde(default = "default_true")]
    pub use_adversarial: bool,
    /// Keep a separate abnormal decoder; when off, the normal decoder
    /// serves both losses.
    #[serde(default = "default_true")]
    pub dual_decoders: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            window: 100,
            patch_size: 5,
            d_model: 256,
            encoder_layers: 10,
            d_r: 512,
            pool_sizes: vec![16, 32, 64, 128, 192, 256],
            k: 3,
            grl_lambda: 1.0,
            use_adabn: true,
            use_adversarial: true,
            dual_decoders: true,
        }
    }
}

impl NetConfig {
    /// Laptop-scale preset: same architecture, narrower widths.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            d_r: 128,
            pool_sizes: vec![8, 16, 32, 48, 64, 96],
            ..Self::default()
        }
    }

    pub fn n_patches(&self) -> usize {
        self.window / self.patch_size
    }

    /// Bottleneck sizes actually instantiated: the configured pool, or a
    /// single fixed size when routing is disabled (256 as in the full-scale
    /// pool when that fits under `d_r`, else the largest configured size).
    pub fn effective_pool(&self) -> Vec<usize> {
        if self.use_adabn {
            self.pool_sizes.clone()
        } else {
            let fixed = if 256 < self.d_r {
                256
            } else {
                *self
                    .pool_sizes
                    .iter()
                    .max()
                    .expect("validated: pool_sizes non-empty")
            };
            vec![fixed]
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |msg: String| Err(NetError::BadConfig(msg));
        if self.patch_size == 0 || self.window == 0 || self.window % self.patch_size != 0 {
            return fail(format!(
                "window {} must be a positive multiple of patch_size {}",
                self.window, self.patch_size
            ));
        }
        if self.n_patches() < 2 {
            return fail("need at least 2 patches per window".into());
        }
        if self.d_model == 0 || self.d_r == 0 {
            return fail("widths must be positive".into());
        }
        if self.encoder_layers == 0 {
            return fail("encoder_layers must be >= 1".into());
        }
        if self.pool_sizes.is_empty() {
            return fail("pool_sizes must be non-empty".into());
        }
        if self.k == 0 || self.k > self.pool_sizes.len() {
            return fail(format!(
                "k = {} must satisfy 1 <= k <= {}",
                self.k,
                self.pool_sizes.len()
            ));
        }
        for (i, &d) in self.effective_pool().iter().enumerate() {
            if d == 0 || d >= self.d_r {
                return fail(format!(
                    "pool size {d} at index {i} must satisfy 0 < size < d_r = {}",
                    self.d_r
                ));
            }
        }
        if self.grl_lambda < 0.0 || !self.grl_lambda.is_finite() {
            return fail(format!("grl_lambda {} must be >= 0", self.grl_lambda));
        }
        Ok(())
    }

    /// Dilation of encoder layer `layer` for `p` patches: `2^layer`, capped
    /// at the sequence length.
    pub fn dilation(&self, layer: usize, p: usize) -> usize {
        (1usize << layer.min(31)).min(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// d_r x B.
    pub w: Array2<f32>,
    /// d_r x B, gates the per-slot training noise.
    pub w_noise: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub embed: Affine,
    pub encoder: Vec<ConvBlock>,
    /// (DownNet, UpNet) per bottleneck.
    pub pool: Vec<(Affine, Affine)>,
    /// Absent when routing is disabled.
    pub router: Option<Router>,
    pub dec_n: Affine,
    /// Absent when `dual_decoders` is off.
    pub dec_a: Option<Affine>,
}

impl ModelParams {
    /// Deterministic initialization from a seed. Router matrices start at
    /// zero: all logits tie, so before any training the first `k`
    /// bottlenecks are selected with uniform weights, and the training
    /// noise breaks the tie thereafter.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Affine::xavier(config.patch_size, config.d_model, &mut rng);
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for layer in 0..config.encoder_layers {
            let ch_in = if layer == 0 { config.d_model } else { config.d_r };
            encoder.push(ConvBlock::xavier(ch_in, config.d_r, &mut rng));
        }
        let pool = config
            .effective_pool()
            .iter()
            .map(|&d_i| {
                (
                    Affine::xavier(config.d_r, d_i, &mut rng),
                    Affine::xavier(d_i, config.d_r, &mut rng),
                )
            })
            .collect();
        let router = config.use_adabn.then(|| Router {
            w: Array2::zeros((config.d_r, config.pool_sizes.len())),
            w_noise: Array2::zeros((config.d_r, config.pool_sizes.len())),
        });
        let dec_n = Affine::xavier(config.d_r, config.patch_size, &mut rng);
        let dec_a = config
            .dual_decoders
            .then(|| Affine::xavier(config.d_r, config.patch_size, &mut rng));
        Ok(Self {
            config: config.clone(),
            embed,
            encoder,
            pool,
            router,
            dec_n,
            dec_a,
        })
    }

    pub fn n_bottlenecks(&self) -> usize {
        self.pool.len()
    }

    /// Canonical (name, flat slice) listing; the order defines optimizer
    /// state and checkpoint layout.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        out.push(("embed.w".into(), flat(&self.embed.w)));
        out.push(("embed.b".into(), self.embed.b.as_slice().unwrap()));
        for (l, block) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.L{l}.w0"), flat(&block.w[0])));
            out.push((format!("encoder.L{l}.w1"), flat(&block.w[1])));
            out.push((format!("encoder.L{l}.w2"), flat(&block.w[2])));
            out.push((format!("encoder.L{l}.b"), block.b.as_slice().unwrap()));
            if let Some(proj) = &block.proj {
                out.push((format!("encoder.L{l}.proj.w"), flat(&proj.w)));
                out.push((format!("encoder.L{l}.proj.b"), proj.b.as_slice().unwrap()));
            }
        }
        for (i, (down, up)) in self.pool.iter().enumerate() {
            out.push((format!("pool.{i}.down.w"), flat(&down.w)));
            out.push((format!("pool.{i}.down.b"), down.b.as_slice().unwrap()));
            out.push((format!("pool.{i}.up.w"), flat(&up.w)));
            out.push((format!("pool.{i}.up.b"), up.b.as_slice().unwrap()));
        }
        if let Some(router) = &self.router {
            out.push(("router.w".into(), flat(&router.w)));
            out.push(("router.w_noise".into(), flat(&router.w_noise)));
        }
        out.push(("dec_n.w".into(), flat(&self.dec_n.w)));
        out.push(("dec_n.b".into(), self.dec_n.b.as_slice().unwrap()));
        if let Some(dec_a) = &self.dec_a {
            out.push(("dec_a.w".into(), flat(&dec_a.w)));
            out.push(("dec_a.b".into(), dec_a.b.as_slice().unwrap()));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = Vec::new();
        out.push(("embed.w".into(), self.embed.w.as_slice_mut().unwrap()));
        out.push(("embed.b".into(), self.embed.b.as_slice_mut().unwrap()));
        for (l, block) in self.encoder.iter_mut().enumerate() {
            let [w0, w1, w2] = &mut block.w;
            out.push((format!("encoder.L{l}.w0"), w0.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.w1"), w1.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.w2"), w2.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.b"), block.b.as_slice_mut().unwrap()));
            if let Some(proj) = &mut block.proj {
                out.push((format!("encoder.L{l}.proj.w"), proj.w.as_slice_mut().unwrap()));
                out.push((format!("encoder.L{l}.proj.b"), proj.b.as_slice_mut().unwrap()));
            }
        }
        for (i, (down, up)) in self.pool.iter_mut().enumerate() {
            out.push((format!("pool.{i}.down.w"), down.w.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.down.b"), down.b.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.up.w"), up.w.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.up.b"), up.b.as_slice_mut().unwrap()));
        }
        if let Some(router) = &mut self.router {
            out.push(("router.w".into(), router.w.as_slice_mut().unwrap()));
            out.push(("router.w_noise".into(), router.w_noise.as_slice_mut().unwrap()));
        }
        out.push(("dec_n.w".into(), self.dec_n.w.as_slice_mut().unwrap()));
        out.push(("dec_n.b".into(), self.dec_n.b.as_slice_mut().unwrap()));
        if let Some(dec_a) = &mut self.dec_a {
            out.push(("dec_a.w".into(), dec_a.w.as_slice_mut().unwrap()));
            out.push(("dec_a.b".into(), dec_a.b.as_slice_mut().unwrap()));
        }
        out
    }

    pub fn total_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, s)| s.len()).sum()
    }
}

/// Which decoder reconstructs this batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Normal,
    Abnormal,
}

impl ModelParams {
    fn decoder(&self, kind: DecoderKind) -> &Affine {
        match kind {
            DecoderKind::Normal => &self.dec_n,
            // Single-decoder variant serves both branches with dec_n.
            DecoderKind::Abnormal => self.dec_a.as_ref().unwrap_or(&self.dec_n),
        }
    }
}

// ---------------------------------------------------------------------------
// Single-window operations. These are thin, cache-free views of the same
// math the batched pass uses; tests cross-check the two paths.
// ---------------------------------------------------------------------------

/// Affine patch embedding: P x d -> P x d_model.
pub fn embed_patches(params: &ModelParams, x: &crate::mask::PatchSequence) -> Result<Array2<f32>, NetError> {
    if x.patch_len() != params.config.patch_size {
        return Err(NetError::ShapeMismatch(format!(
            "patch length {} != configured {}",
            x.patch_len(),
            params.config.patch_size
        )));
    }
    Ok(params.embed.forward(&x.patches.view()))
}

/// Residual dilated-convolution stack: P x d_model -> P x d_r.
pub fn encode(params: &ModelParams, e: &ArrayView2<f32>) -> Array2<f32> {
    let p = e.nrows();
    let mut h = e.to_owned();
    for (layer, block) in params.encoder.iter().enumerate() {
        let dil = params.config.dilation(layer, p);
        let (out, _) = block.forward(&h.view(), p, dil);
        h = out;
    }
    h
}

/// `UpNet_i(gelu(DownNet_i(z)))`.
pub fn bottleneck_apply(
    params: &ModelParams,
    i: usize,
    z: &ArrayView2<f32>,
) -> Result<Array2<f32>, NetError> {
    let (down, up) = params
        .pool
        .get(i)
        .ok_or(NetError::BadBottleneckIndex {
            index: i,
            pool: params.pool.len(),
        })?;
    let mut hidden = down.forward(z);
    hidden.mapv_inplace(gelu);
    Ok(up.forward(&hidden.view()))
}

/// Router logits for one window: the patch-mean representation through
/// `w`, plus `eps * softplus(zbar w_noise)` noise when training.
pub fn route(
    params: &ModelParams,
    z: &ArrayView2<f32>,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array1<f32>, NetError> {
    let router = params
        .router
        .as_ref()
        .ok_or_else(|| NetError::BadConfig("routing disabled in this model".into()))?;
    let zbar = z.mean_axis(Axis(0)).expect("non-empty representation");
    let zbar2 = zbar.clone().insert_axis(Axis(0));
    let mut logits = matmul(&zbar2.view(), &router.w.view());
    if train_mode {
        let rng = rng.expect("training-mode routing requires an RNG");
        let noise_pre = matmul(&zbar2.view(), &router.w_noise.view());
        for (slot, l) in logits.iter_mut().enumerate() {
            let eps: f32 = rng.sample(StandardNormal);
            *l += eps * softplus(noise_pre[(0, slot)]);
        }
    }
    Ok(logits.row(0).to_owned())
}

/// Indices of the k largest logits, ties resolved toward lower indices.
fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax over the selected subset only.
fn softmax_over(logits: &[f32], selected: &[usize]) -> Vec<f32> {
    let max = selected
        .iter()
        .map(|&i| logits[i])
        .fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = selected.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Router decision for one window representation: the selected bottleneck
/// indices (ties toward lower index) and their softmax weights. This is the
/// routing step of [`adabn`] in inspectable form.
pub fn routing_weights(
    params: &ModelParams,
    z: &ArrayView2<f32>,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<usize>, Vec<f32>), NetError> {
    let logits = route(params, z, train_mode, rng)?;
    let selected = top_k(logits.as_slice().unwrap(), params.config.k);
    let weights = softmax_over(logits.as_slice().unwrap(), &selected);
    Ok((selected, weights))
}

/// Routed bottleneck fusion for one window: softmax-weighted sum of the
/// top-k bottleneck outputs, with the per-row norm clamp of
/// [`feature_clamp`] applied at the decoder interface.
pub fn adabn(
    params: &ModelParams,
    z: &ArrayView2<f32>,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<f32>, NetError> {
    if params.router.is_none() {
        // Fixed single bottleneck.
        let fused = bottleneck_apply(params, 0, z)?;
        return Ok(feature_clamp(&fused.view()));
    }
    let (selected, weights) = routing_weights(params, z, train_mode, rng)?;
    let mut out = Array2::zeros((z.nrows(), params.config.d_r));
    for (&i, &w) in selected.iter().zip(&weights) {
        out += &(bottleneck_apply(params, i, z)? * w);
    }
    Ok(feature_clamp(&out.view()))
}

/// Norm bound at the decoder interface: each patch representation is left
/// untouched while its Euclidean norm stays at or below `sqrt(d_r)` (unit
/// root-mean-square per feature) and is rescaled onto that sphere beyond it.
/// No learnable parameters.
///
/// The reversed gradient from the abnormal decoder *maximizes* an unbounded
/// squared error through the shared feature extractor; without a bound on
/// the representation scale that ascent has no finite optimum and training
/// eventually runs away. Capping the norm removes the radial escape route
/// while leaving representations inside the ball — including their scale —
/// fully trainable.
pub fn feature_clamp(h: &ArrayView2<f32>) -> Array2<f32> {
    feature_clamp_with_scale(h).0
}

/// [`feature_clamp`] plus the per-row scale factor (1 where the row was
/// inside the ball) needed by the backward pass.
fn feature_clamp_with_scale(h: &ArrayView2<f32>) -> (Array2<f32>, Array1<f32>) {
    let cap_sq = h.ncols() as f32;
    let mut out = h.to_owned();
    let mut scale = Array1::ones(h.nrows());
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm_sq = row.iter().map(|v| v * v).sum::<f32>();
        if norm_sq > cap_sq {
            let c = (cap_sq / norm_sq).sqrt();
            row.mapv_inplace(|v| v * c);
            scale[r] = c;
        }
    }
    (out, scale)
}

/// Backward of [`feature_clamp`]: identity for rows that were inside the
/// ball; for clamped rows, with `u` the row direction (the clamped output
/// divided by its norm `sqrt(d_r)`), the input gradient is
/// `c * (g - u * (u . g))` — the tangential component, scaled.
fn feature_clamp_backward(
    y: &ArrayView2<f32>,
    scale: &ArrayView1<f32>,
    g: &ArrayView2<f32>,
) -> Array2<f32> {
    let cap_sq = y.ncols() as f32;
    let mut out = g.to_owned();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let c = scale[r];
        if c == 1.0 {
            continue;
        }
        let y_row = y.row(r);
        let u_dot_g: f32 = row
            .iter()
            .zip(y_row.iter())
            .map(|(gv, yv)| gv * yv)
            .sum::<f32>()
            / cap_sq;
        for (v, &yv) in row.iter_mut().zip(y_row.iter()) {
            *v = c * (*v - yv * u_dot_g);
        }
    }
    out
}

/// Normal-decoder reconstruction: P x d_r -> W values.
pub fn decode_normal(params: &ModelParams, h: &ArrayView2<f32>) -> Vec<f32> {
    let patches = params.dec_n.forward(h);
    patches.iter().copied().collect()
}

/// Abnormal-decoder reconstruction (normal decoder when dual decoders are
/// disabled).
pub fn decode_abnormal(params: &ModelParams, h: &ArrayView2<f32>) -> Vec<f32> {
    let patches = params.decoder(DecoderKind::Abnormal).forward(h);
    patches.iter().copied().collect()
}

/// Gradient-reversal boundary. The forward pass is the identity; during
/// [`backward_batch`] the gradient crossing from the abnormal decoder into
/// the shared feature extractor is multiplied by `-lambda` while decoder
/// gradients pass unscaled.
pub fn grl_forward(h: Array2<f32>) -> Array2<f32> {
    h
}

// ---------------------------------------------------------------------------
// Batched forward/backward.
// ---------------------------------------------------------------------------

struct AdabnTrace {
    zbar: Array2<f32>,
    noise_pre: Option<Array2<f32>>,
    eps: Option<Array2<f32>>,
    /// 2N x B, zero outside the selected set.
    weights: Array2<f32>,
    selected: Vec<Vec<usize>>,
    down_pre: Vec<Array2<f32>>,
    down_act: Vec<Array2<f32>>,
    up: Vec<Array2<f32>>,
}

struct SingleBnTrace {
    down_pre: Array2<f32>,
    down_act: Array2<f32>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace {
    branch_x: Array2<f32>,
    enc_inputs: Vec<Array2<f32>>,
    enc_caches: Vec<ConvCache>,
    z: Array2<f32>,
    adabn: Option<AdabnTrace>,
    single: Option<SingleBnTrace>,
    /// Norm-clamped representation fed to the decoder.
    h: Array2<f32>,
    /// Per-row rescale factor applied by the norm clamp (1 = untouched).
    clamp_scale: Array1<f32>,
    dec_kind: DecoderKind,
    train_mode: bool,
    n_windows: usize,
    masks: Vec<MaskPair>,
}

pub struct BatchOutput {
    /// N x W combined reconstructions.
    pub xhat: Array2<f32>,
    pub trace: ForwardTrace,
}

/// Gradients in the shape of [`ModelParams`].
pub struct Gradients {
    pub embed: AffineGrads,
    pub encoder: Vec<ConvGrads>,
    pub pool: Vec<(AffineGrads, AffineGrads)>,
    pub router: Option<(Array2<f32>, Array2<f32>)>,
    pub dec_n: AffineGrads,
    pub dec_a: Option<AffineGrads>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zeros_affine = |a: &Affine| AffineGrads {
            dw: Array2::zeros(a.w.raw_dim()),
            db: Array1::zeros(a.b.len()),
        };
        Self {
            embed: zeros_affine(&params.embed),
            encoder: params
                .encoder
                .iter()
                .map(|b| ConvGrads {
                    dw: [
                        Array2::zeros(b.w[0].raw_dim()),
                        Array2::zeros(b.w[1].raw_dim()),
                        Array2::zeros(b.w[2].raw_dim()),
                    ],
                    db: Array1::zeros(b.b.len()),
                    dproj: b.proj.as_ref().map(zeros_affine),
                })
                .collect(),
            pool: params
                .pool
                .iter()
                .map(|(d, u)| (zeros_affine(d), zeros_affine(u)))
                .collect(),
            router: params
                .router
                .as_ref()
                .map(|r| (Array2::zeros(r.w.raw_dim()), Array2::zeros(r.w_noise.raw_dim()))),
            dec_n: zeros_affine(&params.dec_n),
            dec_a: params.dec_a.as_ref().map(zeros_affine),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        fn add_affine(a: &mut AffineGrads, b: &AffineGrads) {
            a.dw += &b.dw;
            a.db += &b.db;
        }
        add_affine(&mut self.embed, &other.embed);
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            for tap in 0..3 {
                a.dw[tap] += &b.dw[tap];
            }
            a.db += &b.db;
            if let (Some(ap), Some(bp)) = (a.dproj.as_mut(), b.dproj.as_ref()) {
                add_affine(ap, bp);
            }
        }
        for ((ad, au), (bd, bu)) in self.pool.iter_mut().zip(&other.pool) {
            add_affine(ad, bd);
            add_affine(au, bu);
        }
        if let (Some((aw, an)), Some((bw, bn))) = (self.router.as_mut(), other.router.as_ref()) {
            *aw += bw;
            *an += bn;
        }
        add_affine(&mut self.dec_n, &other.dec_n);
        if let (Some(a), Some(b)) = (self.dec_a.as_mut(), other.dec_a.as_ref()) {
            add_affine(a, b);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for (_, s) in self.named_tensors_mut_internal() {
            for v in s {
                *v *= factor;
            }
        }
    }

    fn named_tensors_mut_internal(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = Vec::new();
        out.push(("embed.w".into(), self.embed.dw.as_slice_mut().unwrap()));
        out.push(("embed.b".into(), self.embed.db.as_slice_mut().unwrap()));
        for (l, g) in self.encoder.iter_mut().enumerate() {
            let [w0, w1, w2] = &mut g.dw;
            out.push((format!("encoder.L{l}.w0"), w0.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.w1"), w1.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.w2"), w2.as_slice_mut().unwrap()));
            out.push((format!("encoder.L{l}.b"), g.db.as_slice_mut().unwrap()));
            if let Some(p) = &mut g.dproj {
                out.push((format!("encoder.L{l}.proj.w"), p.dw.as_slice_mut().unwrap()));
                out.push((format!("encoder.L{l}.proj.b"), p.db.as_slice_mut().unwrap()));
            }
        }
        for (i, (d, u)) in self.pool.iter_mut().enumerate() {
            out.push((format!("pool.{i}.down.w"), d.dw.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.down.b"), d.db.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.up.w"), u.dw.as_slice_mut().unwrap()));
            out.push((format!("pool.{i}.up.b"), u.db.as_slice_mut().unwrap()));
        }
        if let Some((w, n)) = &mut self.router {
            out.push(("router.w".into(), w.as_slice_mut().unwrap()));
            out.push(("router.w_noise".into(), n.as_slice_mut().unwrap()));
        }
        out.push(("dec_n.w".into(), self.dec_n.dw.as_slice_mut().unwrap()));
        out.push(("dec_n.b".into(), self.dec_n.db.as_slice_mut().unwrap()));
        if let Some(a) = &mut self.dec_a {
            out.push(("dec_a.w".into(), a.dw.as_slice_mut().unwrap()));
            out.push(("dec_a.b".into(), a.db.as_slice_mut().unwrap()));
        }
        out
    }

    /// (name, flat slice) listing aligned with
    /// [`ModelParams::named_tensors`].
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        out.push(("embed.w".into(), flat(&self.embed.dw)));
        out.push(("embed.b".into(), self.embed.db.as_slice().unwrap()));
        for (l, g) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.L{l}.w0"), flat(&g.dw[0])));
            out.push((format!("encoder.L{l}.w1"), flat(&g.dw[1])));
            out.push((format!("encoder.L{l}.w2"), flat(&g.dw[2])));
            out.push((format!("encoder.L{l}.b"), g.db.as_slice().unwrap()));
            if let Some(p) = &g.dproj {
                out.push((format!("encoder.L{l}.proj.w"), flat(&p.dw)));
                out.push((format!("encoder.L{l}.proj.b"), p.db.as_slice().unwrap()));
            }
        }
        for (i, (d, u)) in self.pool.iter().enumerate() {
            out.push((format!("pool.{i}.down.w"), flat(&d.dw)));
            out.push((format!("pool.{i}.down.b"), d.db.as_slice().unwrap()));
            out.push((format!("pool.{i}.up.w"), flat(&u.dw)));
            out.push((format!("pool.{i}.up.b"), u.db.as_slice().unwrap()));
        }
        if let Some((w, n)) = &self.router {
            out.push(("router.w".into(), flat(w)));
            out.push(("router.w_noise".into(), flat(n)));
        }
        out.push(("dec_n.w".into(), flat(&self.dec_n.dw)));
        out.push(("dec_n.b".into(), self.dec_n.db.as_slice().unwrap()));
        if let Some(a) = &self.dec_a {
            out.push(("dec_a.w".into(), flat(&a.dw)));
            out.push(("dec_a.b".into(), a.db.as_slice().unwrap()));
        }
        out
    }
}

/// Builds the stacked branch tensor: `2N` passes of `P` patch rows. Pass `w`
/// is window `w` with hidden patches zeroed under its mask; pass `N + w`
/// uses the complement.
fn branch_inputs(windows: &ArrayView2<f32>, masks: &[MaskPair], d: usize) -> Array2<f32> {
    let n = windows.nrows();
    let w_len = windows.ncols();
    let p = w_len / d;
    let mut x = Array2::zeros((2 * n * p, d));
    for (w, row) in windows.rows().into_iter().enumerate() {
        let mask = &masks[w].mask;
        for i in 0..p {
            let patch = row.slice(ndarray::s![i * d..(i + 1) * d]);
            if mask[i] == 1 {
                x.row_mut(w * p + i).assign(&patch);
            }
            if mask[i] == 0 {
                x.row_mut((n + w) * p + i).assign(&patch);
            }
        }
    }
    x
}

/// Full batched forward pass. `rng` supplies router noise and must be
/// present when `train_mode` is set and the model routes.
pub fn forward_batch(
    params: &ModelParams,
    windows: &ArrayView2<f32>,
    masks: &[MaskPair],
    dec_kind: DecoderKind,
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutput, NetError> {
    let cfg = &params.config;
    let n = windows.nrows();
    if windows.ncols() != cfg.window {
        return Err(NetError::ShapeMismatch(format!(
            "window length {} != configured {}",
            windows.ncols(),
            cfg.window
        )));
    }
    if masks.len() != n {
        return Err(NetError::ShapeMismatch(format!(
            "{} masks for {n} windows",
            masks.len()
        )));
    }
    let p = cfg.n_patches();
    let d = cfg.patch_size;
    for (i, m) in masks.iter().enumerate() {
        if m.mask.len() != p {
            return Err(NetError::ShapeMismatch(format!(
                "mask {i} has {} bits, expected {p}",
                m.mask.len()
            )));
        }
    }

    let branch_x = branch_inputs(windows, masks, d);
    let rows = branch_x.nrows();

    // Embed.
    let embedded = params.embed.forward(&branch_x.view());

    // Encoder stack.
    let mut enc_inputs = Vec::with_capacity(params.encoder.len());
    let mut enc_caches = Vec::with_capacity(params.encoder.len());
    let mut h = embedded;
    for (layer, block) in params.encoder.iter().enumerate() {
        let dil = cfg.dilation(layer, p);
        let (out, cache) = block.forward(&h.view(), p, dil);
        enc_inputs.push(h);
        enc_caches.push(cache);
        h = out;
    }
    let z = h;

    // Bottlenecks.
    let n_pass = rows / p;
    let (fused, adabn_trace, single_trace) = if let Some(router) = &params.router {
        // Window-level representation: mean over the P patch rows.
        let mut zbar = Array2::zeros((n_pass, cfg.d_r));
        for pass in 0..n_pass {
            let rows_slice = z.slice(ndarray::s![pass * p..(pass + 1) * p, ..]);
            zbar.row_mut(pass)
                .assign(&(rows_slice.sum_axis(Axis(0)) / p as f32));
        }
        let mut logits = matmul(&zbar.view(), &router.w.view());
        let (noise_pre, eps) = if train_mode {
            let rng = rng
                .as_deref_mut()
                .expect("training-mode forward requires an RNG for router noise");
            let noise_pre = matmul(&zbar.view(), &router.w_noise.view());
            let eps =
                Array2::from_shape_simple_fn(logits.raw_dim(), || rng.sample::<f32, _>(StandardNormal));
            for ((l, &npre), &e) in logits.iter_mut().zip(noise_pre.iter()).zip(eps.iter()) {
                *l += e * softplus(npre);
            }
            (Some(noise_pre), Some(eps))
        } else {
            (None, None)
        };

        let b = params.pool.len();
        let mut weights = Array2::zeros((n_pass, b));
        let mut selected = Vec::with_capacity(n_pass);
        for pass in 0..n_pass {
            let row = logits.row(pass);
            let sel = top_k(row.as_slice().unwrap(), cfg.k);
            let ws = softmax_over(row.as_slice().unwrap(), &sel);
            for (&i, &w) in sel.iter().zip(&ws) {
                weights[(pass, i)] = w;
            }
            selected.push(sel);
        }

        let mut down_pre = Vec::with_capacity(b);
        let mut down_act = Vec::with_capacity(b);
        let mut up = Vec::with_capacity(b);
        let mut fused = Array2::zeros((rows, cfg.d_r));
        for (i, (down, upnet)) in params.pool.iter().enumerate() {
            let pre = down.forward(&z.view());
            let mut act = pre.clone();
            act.mapv_inplace(gelu);
            let out = upnet.forward(&act.view());
            for pass in 0..n_pass {
                let w = weights[(pass, i)];
                if w != 0.0 {
                    let mut dst = fused.slice_mut(ndarray::s![pass * p..(pass + 1) * p, ..]);
                    dst.scaled_add(w, &out.slice(ndarray::s![pass * p..(pass + 1) * p, ..]));
                }
            }
            down_pre.push(pre);
            down_act.push(act);
            up.push(out);
        }
        (
            fused,
            Some(AdabnTrace {
                zbar,
                noise_pre,
                eps,
                weights,
                selected,
                down_pre,
                down_act,
                up,
            }),
            None,
        )
    } else {
        let (down, up) = &params.pool[0];
        let pre = down.forward(&z.view());
        let mut act = pre.clone();
        act.mapv_inplace(gelu);
        let fused = up.forward(&act.view());
        (
            fused,
            None,
            Some(SingleBnTrace {
                down_pre: pre,
                down_act: act,
            }),
        )
    };

    // Clamp the representation norm, then decode and stitch complementary
    // branches.
    let (h_ln, clamp_scale) = feature_clamp_with_scale(&fused.view());
    let dec_out = params.decoder(dec_kind).forward(&h_ln.view());
    let mut xhat = Array2::zeros((n, cfg.window));
    for w in 0..n {
        let mask = &masks[w].mask;
        for i in 0..p {
            // Take each patch from the pass that hid it.
            let src_pass = if mask[i] == 0 { w } else { n + w };
            let src = dec_out.row(src_pass * p + i);
            xhat.row_mut(w)
                .slice_mut(ndarray::s![i * d..(i + 1) * d])
                .assign(&src);
        }
    }

    Ok(BatchOutput {
        xhat,
        trace: ForwardTrace {
            branch_x,
            enc_inputs,
            enc_caches,
            z,
            adabn: adabn_trace,
            single: single_trace,
            h: h_ln,
            clamp_scale,
            dec_kind,
            train_mode,
            n_windows: n,
            masks: masks.to_vec(),
        },
    })
}

/// Backward pass for [`forward_batch`], from the gradient of a scalar loss
/// with respect to the combined reconstruction.
///
/// `grl` carries the gradient-reversal strength: when `Some(lambda)`, the
/// gradient flowing from the decoder into the shared feature extractor is
/// scaled by `-lambda` after the decoder's own gradients are taken, leaving
/// decoder parameters untouched by the reversal.
pub fn backward_batch(
    params: &ModelParams,
    trace: &ForwardTrace,
    dxhat: &ArrayView2<f32>,
    grl: Option<f32>,
) -> Gradients {
    let cfg = &params.config;
    let n = trace.n_windows;
    let p = cfg.n_patches();
    let d = cfg.patch_size;
    let rows = trace.branch_x.nrows();
    assert_eq!(dxhat.dim(), (n, cfg.window), "loss gradient shape");

    let mut grads = Gradients::zeros_like(params);

    // Scatter dxhat back to the branch pass that produced each patch.
    let mut d_dec_out = Array2::zeros((rows, d));
    for w in 0..n {
        let mask = &trace.masks[w].mask;
        for i in 0..p {
            let dst_pass = if mask[i] == 0 { w } else { n + w };
            let src = dxhat.slice(ndarray::s![w, i * d..(i + 1) * d]);
            d_dec_out.row_mut(dst_pass * p + i).assign(&src);
        }
    }

    // Decoder.
    let dec = params.decoder(trace.dec_kind);
    let (mut dh, dec_grads) = dec.backward(&trace.h.view(), &d_dec_out.view());
    match (trace.dec_kind, params.dec_a.is_some()) {
        (DecoderKind::Abnormal, true) => grads.dec_a = Some(dec_grads),
        _ => grads.dec_n = dec_grads,
    }

    // Gradient reversal at the extractor boundary.
    if let Some(lambda) = grl {
        dh.mapv_inplace(|v| -lambda * v);
    }

    // Norm-clamp backward, into the raw fused representation.
    let dh = feature_clamp_backward(&trace.h.view(), &trace.clamp_scale.view(), &dh.view());

    // Bottlenecks.
    let n_pass = rows / p;
    let mut dz: Array2<f32>;
    if let Some(adabn) = &trace.adabn {
        let router = params.router.as_ref().expect("trace and params agree");
        let b = params.pool.len();
        dz = Array2::zeros((rows, cfg.d_r));
        let mut dweights = Array2::<f32>::zeros((n_pass, b));
        for (i, (down, up)) in params.pool.iter().enumerate() {
            // d(up_i) = dh * weight, per window row.
            let mut d_up = Array2::zeros((rows, cfg.d_r));
            let mut any = false;
            for pass in 0..n_pass {
                let w = adabn.weights[(pass, i)];
                if w != 0.0 {
                    any = true;
                    let src = dh.slice(ndarray::s![pass * p..(pass + 1) * p, ..]);
                    d_up
                        .slice_mut(ndarray::s![pass * p..(pass + 1) * p, ..])
                        .assign(&(&src * w));
                    // dweight accumulates <dh, up_i> over the window rows.
                    let upw = adabn.up[i].slice(ndarray::s![pass * p..(pass + 1) * p, ..]);
                    dweights[(pass, i)] = (&src * &upw).sum();
                }
            }
            if !any {
                continue;
            }
            let (d_act, up_grads) = up.backward(&adabn.down_act[i].view(), &d_up.view());
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&adabn.down_pre[i], |g, &v| *g *= gelu_grad(v));
            let (dz_i, down_grads) = down.backward(&trace.z.view(), &d_pre.view());
            dz += &dz_i;
            grads.pool[i] = (down_grads, up_grads);
        }

        // Softmax-restricted-to-selection backward per pass.
        let mut dlogits = Array2::<f32>::zeros((n_pass, b));
        for pass in 0..n_pass {
            let sel = &adabn.selected[pass];
            let dot: f32 = sel
                .iter()
                .map(|&i| adabn.weights[(pass, i)] * dweights[(pass, i)])
                .sum();
            for &i in sel {
                let w = adabn.weights[(pass, i)];
                dlogits[(pass, i)] = w * (dweights[(pass, i)] - dot);
            }
        }

        // Router weight gradients and the path back into zbar.
        let (dw_router, dw_noise, dzbar) = {
            let dw = matmul(&adabn.zbar.t(), &dlogits.view());
            let mut dzbar = matmul(&dlogits.view(), &router.w.t());
            let mut dwn = Array2::zeros(router.w_noise.raw_dim());
            if trace.train_mode {
                let noise_pre = adabn.noise_pre.as_ref().expect("train-mode trace");
                let eps = adabn.eps.as_ref().expect("train-mode trace");
                let mut d_noise_pre = dlogits.clone();
                d_noise_pre
                    .zip_mut_with(eps, |g, &e| *g *= e);
                d_noise_pre.zip_mut_with(noise_pre, |g, &npre| *g *= sigmoid(npre));
                dwn = matmul(&adabn.zbar.t(), &d_noise_pre.view());
                dzbar += &matmul(&d_noise_pre.view(), &router.w_noise.t());
            }
            (dw, dwn, dzbar)
        };
        grads.router = Some((dw_router, dw_noise));

        // zbar was the mean over the window's P rows.
        for pass in 0..n_pass {
            let contribution = dzbar.row(pass).mapv(|v| v / p as f32);
            for t in 0..p {
                let mut row = dz.row_mut(pass * p + t);
                row += &contribution;
            }
        }
    } else {
        let single = trace.single.as_ref().expect("non-routed trace");
        let (down, up) = &params.pool[0];
        let (d_act, up_grads) = up.backward(&single.down_act.view(), &dh.view());
        let mut d_pre = d_act;
        d_pre.zip_mut_with(&single.down_pre, |g, &v| *g *= gelu_grad(v));
        let (dz_single, down_grads) = down.backward(&trace.z.view(), &d_pre.view());
        dz = dz_single;
        grads.pool[0] = (down_grads, up_grads);
    }

    // Encoder stack, reversed.
    let mut dcur = dz;
    for layer in (0..params.encoder.len()).rev() {
        let dil = cfg.dilation(layer, p);
        let (dprev, conv_grads) = params.encoder[layer].backward(
            &trace.enc_inputs[layer].view(),
            &trace.enc_caches[layer],
            &dcur.view(),
            p,
            dil,
        );
        grads.encoder[layer] = conv_grads;
        dcur = dprev;
    }

    // Patch embedding; input gradients are discarded.
    let (_, embed_grads) = params.embed.backward(&trace.branch_x.view(), &dcur.view());
    grads.embed = embed_grads;

    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{make_complementary_masks, patchify};
    use ndarray::array;

    fn toy_config() -> NetConfig {
        NetConfig {
            window: 20,
            patch_size: 4,
            d_model: 6,
            encoder_layers: 3,
            d_r: 8,
            pool_sizes: vec![2, 3, 5],
            k: 2,
            grl_lambda: 1.0,
            ..NetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert!(NetConfig::desk().validate().is_ok());
        let mut c = toy_config();
        assert!(c.validate().is_ok());
        c.k = 4;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.pool_sizes = vec![8];
        assert!(c.validate().is_err(), "pool size must stay below d_r");
        let mut c = toy_config();
        c.window = 21;
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_scale_no_adabn_uses_largest_pool_size() {
        let mut c = NetConfig::desk();
        c.use_adabn = false;
        assert_eq!(c.effective_pool(), vec![96]);
        assert!(c.validate().is_ok());
        let mut c = NetConfig::default();
        c.use_adabn = false;
        assert_eq!(c.effective_pool(), vec![256]);
    }

    #[test]
    fn embed_matches_hand_computation() {
        let cfg = NetConfig {
            window: 4,
            patch_size: 2,
            d_model: 2,
            encoder_layers: 1,
            d_r: 4,
            pool_sizes: vec![2],
            k: 1,
            ..NetConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        // Zero input, zero bias -> zero output.
        let zeros = patchify(&[0.0; 4], 2).unwrap();
        let out = embed_patches(&params, &zeros).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // Identity map (d == d_model).
        params.embed.w = array![[1.0, 0.0], [0.0, 1.0]];
        params.embed.b.fill(0.0);
        let ps = patchify(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let out = embed_patches(&params, &ps).unwrap();
        assert_eq!(out, ps.patches);
        // Random 2x2 against a hand multiply.
        params.embed.w = array![[2.0, -1.0], [0.5, 3.0]];
        params.embed.b = array![1.0, -2.0];
        let out = embed_patches(&params, &ps).unwrap();
        // Row [1, 2]: [1*2 + 2*0.5 + 1, 1*-1 + 2*3 - 2] = [4, 3].
        assert_eq!(out.row(0).to_vec(), vec![4.0, 3.0]);
        // Row [3, 4]: [3*2 + 4*0.5 + 1, -3 + 12 - 2] = [9, 7].
        assert_eq!(out.row(1).to_vec(), vec![9.0, 7.0]);
    }

    #[test]
    fn encoder_shape_receptive_field_and_determinism() {
        let cfg = NetConfig::desk();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let p = cfg.n_patches();
        let e = Array2::from_shape_simple_fn((p, cfg.d_model), || 0.3f32);
        let z1 = encode(&params, &e.view());
        let z2 = encode(&params, &e.view());
        assert_eq!(z1.dim(), (p, cfg.d_r));
        assert_eq!(z1, z2);
        // Receptive field 1 + sum (kernel-1) * dilation covers the window.
        let rf: usize = 1 + (0..cfg.encoder_layers)
            .map(|l| 2 * cfg.dilation(l, p))
            .sum::<usize>();
        assert!(rf >= p, "receptive field {rf} < {p}");
    }

    #[test]
    fn bottleneck_matches_hand_affine_chain() {
        let cfg = NetConfig {
            window: 4,
            patch_size: 2,
            d_model: 2,
            encoder_layers: 1,
            d_r: 2,
            pool_sizes: vec![1],
            k: 1,
            ..NetConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        params.pool[0].0.w = array![[1.0], [2.0]];
        params.pool[0].0.b = array![0.5];
        params.pool[0].1.w = array![[3.0, -1.0]];
        params.pool[0].1.b = array![0.0, 0.25];
        let z = array![[1.0f32, 1.0]];
        let out = bottleneck_apply(&params, 0, &z.view()).unwrap();
        // down: 1*1 + 1*2 + 0.5 = 3.5; act = gelu(3.5); up: [3a, -a + 0.25].
        let a = gelu(3.5);
        assert!((out[(0, 0)] - 3.0 * a).abs() < 1e-6);
        assert!((out[(0, 1)] - (-a + 0.25)).abs() < 1e-6);
        assert!(bottleneck_apply(&params, 1, &z.view()).is_err());
    }

    #[test]
    fn bottleneck_output_rank_is_at_most_inner_size() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array2::from_shape_simple_fn((16, cfg.d_r), || rng.gen_range(-1.0f32..1.0));
        // Rows of up-projected output live in a d_i-dimensional affine
        // subspace: verify via Gram-Schmidt on mean-centered rows.
        for (i, &d_i) in cfg.pool_sizes.iter().enumerate() {
            let out = bottleneck_apply(&params, i, &z.view()).unwrap();
            let mean = out.mean_axis(Axis(0)).unwrap();
            let centered = &out - &mean;
            let mut basis: Vec<ndarray::Array1<f32>> = Vec::new();
            for row in centered.rows() {
                let mut r = row.to_owned();
                for b in &basis {
                    let coef = r.dot(b);
                    r.scaled_add(-coef, b);
                }
                let norm = r.dot(&r).sqrt();
                if norm > 1e-3 {
                    basis.push(r / norm);
                }
            }
            assert!(
                basis.len() <= d_i,
                "bottleneck {i}: numerical rank {} > d_i {d_i}",
                basis.len()
            );
        }
    }

    #[test]
    fn route_is_linear_without_noise() {
        let cfg = toy_config();
        let mut params = ModelParams::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        params.router.as_mut().unwrap().w =
            Array2::from_shape_simple_fn((cfg.d_r, 3), || rng.gen_range(-1.0f32..1.0));
        let z = Array2::from_shape_simple_fn((cfg.n_patches(), cfg.d_r), || {
            rng.gen_range(-1.0f32..1.0)
        });
        let logits = route(&params, &z.view(), false, None).unwrap();
        let zbar = z.mean_axis(Axis(0)).unwrap();
        let expect = zbar.dot(&params.router.as_ref().unwrap().w);
        for (a, b) in logits.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Hugely negative noise weights silence the noise even in training.
        params.router.as_mut().unwrap().w_noise.fill(-100.0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = route(&params, &z.view(), true, Some(&mut noise_rng)).unwrap();
        for (a, b) in noisy.iter().zip(logits.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn route_noise_hand_case() {
        // 1x2 toy: z has a single patch and d_r = 2.
        let cfg = NetConfig {
            window: 4,
            patch_size: 2,
            d_model: 2,
            encoder_layers: 1,
            d_r: 2,
            pool_sizes: vec![1, 1],
            k: 1,
            ..NetConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        let router = params.router.as_mut().unwrap();
        router.w = array![[2.0, 0.0], [0.0, 1.0]];
        router.w_noise = array![[0.5, 0.0], [0.0, -0.25]];
        let z = array![[1.0f32, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let got = route(&params, &z.view(), true, Some(&mut rng)).unwrap();
        // Reproduce by hand with the same draws.
        let mut rng2 = ChaCha8Rng::seed_from_u64(77);
        let e0: f32 = rng2.sample(StandardNormal);
        let e1: f32 = rng2.sample(StandardNormal);
        let expect0 = 1.0 * 2.0 + e0 * softplus(1.0 * 0.5);
        let expect1 = 2.0 * 1.0 + e1 * softplus(2.0 * -0.25);
        assert!((got[0] - expect0).abs() < 1e-6);
        assert!((got[1] - expect1).abs() < 1e-6);
    }

    #[test]
    fn adabn_weight_cases() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array2::from_shape_simple_fn((cfg.n_patches(), cfg.d_r), || {
            rng.gen_range(-1.0f32..1.0)
        });

        // Zero-initialized router: all logits equal; with k = B the fusion
        // is the uniform average of all bottlenecks.
        let mut cfg_all = cfg.clone();
        cfg_all.k = 3;
        let mut params_all = ModelParams::init(&cfg_all, 6).unwrap();
        params_all.embed = params.embed.clone();
        let fused = adabn(&params_all, &z.view(), false, None).unwrap();
        let mut expect = Array2::zeros(fused.raw_dim());
        for i in 0..3 {
            expect += &bottleneck_apply(&params_all, i, &z.view()).unwrap();
        }
        expect /= 3.0;
        let expect = feature_clamp(&expect.view());
        for (a, b) in fused.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5);
        }

        // k = 1 picks the single top bottleneck with weight 1.
        let mut cfg_one = cfg.clone();
        cfg_one.k = 1;
        let mut params_one = ModelParams::init(&cfg_one, 6).unwrap();
        params_one.router.as_mut().unwrap().w.row_mut(0).assign(&array![0.0, 5.0, 0.0]);
        let z_pos = z.mapv(|v| v.abs() + 0.1); // ensure zbar[0] > 0
        let fused_one = adabn(&params_one, &z_pos.view(), false, None).unwrap();
        let expect_one = bottleneck_apply(&params_one, 1, &z_pos.view()).unwrap();
        let expect_one = feature_clamp(&expect_one.view());
        for (a, b) in fused_one.iter().zip(expect_one.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_softmax_reference_case() {
        // B = 3, k = 2, logits [2, 1, 0]: selection {0, 1} with weights
        // e/(e+1) and 1/(e+1).
        let logits = [2.0f32, 1.0, 0.0];
        let sel = top_k(&logits, 2);
        assert_eq!(sel, vec![0, 1]);
        let w = softmax_over(&logits, &sel);
        let e = std::f32::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((w[0] - 0.731).abs() < 1e-3);
        // Ties resolve toward lower indices.
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn decoders_have_disjoint_parameters() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Array2::from_shape_simple_fn((cfg.n_patches(), cfg.d_r), || {
            rng.gen_range(-1.0f32..1.0)
        });
        let rn = decode_normal(&params, &h.view());
        let ra = decode_abnormal(&params, &h.view());
        assert_eq!(rn.len(), cfg.window);
        assert_eq!(ra.len(), cfg.window);
        assert_ne!(rn, ra, "independently initialized decoders must differ");

        // Single-decoder variant reuses dec_n.
        let mut cfg_single = cfg.clone();
        cfg_single.dual_decoders = false;
        let params_single = ModelParams::init(&cfg_single, 10).unwrap();
        let rn = decode_normal(&params_single, &h.view());
        let ra = decode_abnormal(&params_single, &h.view());
        assert_eq!(rn, ra);
    }

    #[test]
    fn decode_hand_case_single_patch() {
        let cfg = NetConfig {
            window: 2,
            patch_size: 1,
            d_model: 2,
            encoder_layers: 1,
            d_r: 2,
            pool_sizes: vec![1],
            k: 1,
            ..NetConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        params.dec_n.w = array![[3.0], [-2.0]];
        params.dec_n.b = array![0.5];
        let h = array![[1.0f32, 2.0], [0.0, 1.0]];
        let out = decode_normal(&params, &h.view());
        // Rows: [3 - 4 + 0.5, -2 + 0.5].
        assert_eq!(out, vec![-0.5, -1.5]);
    }

    #[test]
    fn feature_clamp_bounds_row_norms() {
        // Inside the ball (norm <= sqrt(d)): exact identity.
        let inside = array![[0.5f32, -0.5, 0.25], [1.0, -1.0, 0.9]];
        let (out, scale) = feature_clamp_with_scale(&inside.view());
        assert_eq!(out, inside);
        assert!(scale.iter().all(|&c| c == 1.0));

        // Outside: rescaled onto the sphere of radius sqrt(d), direction
        // preserved; idempotent.
        let outside = array![[6.0f32, 0.0, -8.0], [30.0, 40.0, 0.0]];
        let (out, scale) = feature_clamp_with_scale(&outside.view());
        for r in 0..2 {
            let norm: f32 = out.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 3f32.sqrt()).abs() < 1e-5, "row {r} norm {norm}");
            assert!(scale[r] < 1.0);
            // Direction preserved: proportional to the input.
            let ratio0 = out[(r, 0)] / outside[(r, 0)].max(1e-9);
            for j in 0..3 {
                if outside[(r, j)] != 0.0 {
                    assert!((out[(r, j)] / outside[(r, j)] - ratio0).abs() < 1e-5);
                }
            }
        }
        let (again, _) = feature_clamp_with_scale(&out.view());
        for (a, b) in again.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_clamp_backward_matches_finite_differences() {
        // One row inside the ball, one clamped; backward against central
        // differences of an arbitrary linear functional of the output.
        let h = array![[0.4f32, -0.3, 0.2], [5.0, -7.0, 2.0]];
        let g = array![[0.7f32, -1.1, 0.4], [0.3, 0.9, -0.6]];
        let (y, scale) = feature_clamp_with_scale(&h.view());
        let dh = feature_clamp_backward(&y.view(), &scale.view(), &g.view());
        // Inside row: exact pass-through.
        assert_eq!(dh.row(0), g.row(0));
        let eps = 1e-2f32;
        for r in 0..2 {
            for j in 0..3 {
                let mut plus = h.clone();
                plus[(r, j)] += eps;
                let mut minus = h.clone();
                minus[(r, j)] -= eps;
                let f = |m: &Array2<f32>| -> f64 {
                    let (o, _) = feature_clamp_with_scale(&m.view());
                    o.iter()
                        .zip(g.iter())
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum()
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * f64::from(eps));
                assert!(
                    (f64::from(dh[(r, j)]) - fd).abs() < 1e-3 * fd.abs().max(1.0),
                    "row {r} col {j}: analytic {} vs fd {fd}",
                    dh[(r, j)]
                );
            }
        }
    }

    #[test]
    fn backward_handles_clamped_representations() {
        // Inflate the bottleneck up-projections so fused rows leave the
        // ball, then check a few shared coordinates against finite
        // differences of the normal loss. Exercises the clamped branch of
        // the interface backward inside the full batched pass.
        let cfg = toy_config();
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        for (_, up) in params.pool.iter_mut() {
            up.w.mapv_inplace(|v| v * 60.0);
            up.b.mapv_inplace(|v| v * 60.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2;
        let windows =
            Array2::from_shape_simple_fn((n, cfg.window), || rng.gen_range(-1.0f32..1.0));
        let masks: Vec<_> = (0..n)
            .map(|i| make_complementary_masks(cfg.n_patches(), 0.5, 40 + i as u64))
            .collect();

        let out = forward_batch(&params, &windows.view(), &masks, DecoderKind::Normal, false, None)
            .unwrap();
        assert!(
            out.trace.clamp_scale.iter().any(|&c| c < 1.0),
            "test setup must clamp at least one row"
        );

        let loss = |p: &ModelParams| -> f64 {
            let o = forward_batch(p, &windows.view(), &masks, DecoderKind::Normal, false, None)
                .unwrap();
            crate::train::loss_normal(&windows.view(), &o.xhat.view())
        };
        // d loss / d xhat = 2 (xhat - x) / n.
        let mut dxhat = &out.xhat - &windows;
        dxhat.mapv_inplace(|v| 2.0 * v / n as f32);
        let grads = backward_batch(&params, &out.trace, &dxhat.view(), None);

        let named_g = grads.named_tensors();
        for (name, idx) in [("embed.w", 0usize), ("encoder.L1.b", 1), ("pool.1.down.w", 2)] {
            let analytic = named_g.iter().find(|(n, _)| n == name).unwrap().1[idx] as f64;
            let h = 1e-3f32;
            let eval = |delta: f32| -> f64 {
                let mut p = params.clone();
                {
                    let mut named = p.named_tensors_mut();
                    let slot = named.iter_mut().find(|(n, _)| n == &name.to_string()).unwrap();
                    slot.1[idx] += delta;
                }
                loss(&p)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * f64::from(h));
            assert!(
                (analytic - fd).abs() < 2e-3 * fd.abs().max(0.5),
                "{name}[{idx}]: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grl_forward_is_identity() {
        let h = array![[1.0f32, -2.0], [0.5, 3.0]];
        assert_eq!(grl_forward(h.clone()), h);
    }

    #[test]
    fn forward_batch_matches_composed_single_ops() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 3;
        let windows = Array2::from_shape_simple_fn((n, cfg.window), || rng.gen_range(-1.0f32..1.0));
        let masks: Vec<MaskPair> = (0..n)
            .map(|i| make_complementary_masks(cfg.n_patches(), 0.5, 100 + i as u64))
            .collect();
        let out = forward_batch(&params, &windows.view(), &masks, DecoderKind::Normal, false, None)
            .unwrap();

        for w in 0..n {
            let window: Vec<f32> = windows.row(w).to_vec();
            let ps = patchify(&window, cfg.patch_size).unwrap();
            let branch = |mask: &[u8]| -> Vec<f32> {
                let masked = crate::mask::apply_mask(&ps, mask).unwrap();
                let e = embed_patches(&params, &masked).unwrap();
                let z = encode(&params, &e.view());
                let h = adabn(&params, &z.view(), false, None).unwrap();
                decode_normal(&params, &h.view())
            };
            let recon_m = branch(&masks[w].mask);
            let recon_bar = branch(&masks[w].complement());
            let combined = crate::mask::combine_reconstructions(
                &masks[w].mask,
                &recon_m,
                &recon_bar,
                cfg.patch_size,
            )
            .unwrap();
            for (t, (&a, &b)) in out.xhat.row(w).iter().zip(combined.iter()).enumerate() {
                assert!(
                    (a - b).abs() < 1e-5,
                    "window {w} position {t}: batched {a} vs composed {b}"
                );
            }
        }
    }

    #[test]
    fn forward_batch_is_permutation_equivariant() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4;
        let windows = Array2::from_shape_simple_fn((n, cfg.window), || rng.gen_range(-1.0f32..1.0));
        let masks: Vec<MaskPair> = (0..n)
            .map(|i| make_complementary_masks(cfg.n_patches(), 0.5, 200 + i as u64))
            .collect();
        let out = forward_batch(&params, &windows.view(), &masks, DecoderKind::Normal, false, None)
            .unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted_windows = Array2::from_shape_fn((n, cfg.window), |(i, j)| windows[(perm[i], j)]);
        let permuted_masks: Vec<MaskPair> = perm.iter().map(|&i| masks[i].clone()).collect();
        let out_perm = forward_batch(
            &params,
            &permuted_windows.view(),
            &permuted_masks,
            DecoderKind::Normal,
            false,
            None,
        )
        .unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(out_perm.xhat.row(i), out.xhat.row(src));
        }
    }

    #[test]
    fn router_weights_invariants_in_batch() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let windows = Array2::from_shape_simple_fn((n, cfg.window), || rng.gen_range(-1.0f32..1.0));
        let masks: Vec<MaskPair> = (0..n)
            .map(|i| make_complementary_masks(cfg.n_patches(), 0.5, i as u64))
            .collect();
        let mut train_rng = ChaCha8Rng::seed_from_u64(5);
        let out = forward_batch(
            &params,
            &windows.view(),
            &masks,
            DecoderKind::Normal,
            true,
            Some(&mut train_rng),
        )
        .unwrap();
        let trace = out.trace.adabn.as_ref().unwrap();
        for pass in 0..2 * n {
            let row = trace.weights.row(pass);
            let nonzero = row.iter().filter(|&&w| w != 0.0).count();
            assert_eq!(nonzero, cfg.k);
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(trace.selected[pass].len(), cfg.k);
        }
    }

    #[test]
    fn backward_batch_produces_full_gradient_structure() {
        let cfg = toy_config();
        let params = ModelParams::init(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 2;
        let windows = Array2::from_shape_simple_fn((n, cfg.window), || rng.gen_range(-1.0f32..1.0));
        let masks: Vec<MaskPair> = (0..n)
            .map(|i| make_complementary_masks(cfg.n_patches(), 0.5, 300 + i as u64))
            .collect();
        let mut train_rng = ChaCha8Rng::seed_from_u64(7);
        let out = forward_batch(
            &params,
            &windows.view(),
            &masks,
            DecoderKind::Abnormal,
            true,
            Some(&mut train_rng),
        )
        .unwrap();
        let dxhat = out.xhat.clone();
        let grads = backward_batch(&params, &out.trace, &dxhat.view(), Some(1.0));
        // Abnormal pass fills dec_a, leaves dec_n zero.
        assert!(grads.dec_a.as_ref().unwrap().dw.iter().any(|&v| v != 0.0));
        assert!(grads.dec_n.dw.iter().all(|&v| v == 0.0));
        assert!(grads.router.is_some());
        let names: Vec<String> = grads.named_tensors().into_iter().map(|(n, _)| n).collect();
        let pnames: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, pnames, "gradient naming must align with parameters");
    }
}
