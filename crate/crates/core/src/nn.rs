//! Internal neural-network building blocks: batched affine and dilated
//! convolution layers with explicit backward passes, the GELU nonlinearity,
//! and an AdamW optimizer over named flat parameter slices.
//!
//! All layer math is f32. Batches are row-major matrices whose rows are
//! per-patch vectors; consecutive `p` rows form one window, and convolution
//! never mixes rows across window boundaries.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

/// Row-chunk size for parallel GEMM. Fixed (not thread-count-dependent) so
/// results are identical regardless of the rayon pool size.
const PAR_CHUNK: usize = 512;

/// `a @ b`, splitting row chunks across threads when the batch is large.
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions must agree");
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    if a.nrows() > PAR_CHUNK && rayon::current_num_threads() > 1 {
        let pairs: Vec<_> = out
            .axis_chunks_iter_mut(Axis(0), PAR_CHUNK)
            .zip(a.axis_chunks_iter(Axis(0), PAR_CHUNK))
            .collect();
        pairs.into_par_iter().for_each(|(mut oc, ac)| {
            general_mat_mul(1.0, &ac, b, 0.0, &mut oc);
        });
    } else {
        general_mat_mul(1.0, a, b, 0.0, &mut out);
    }
    out
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f32) -> f32 {
    // Stable: ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dw: Array2<f32>,
    pub db: Array1<f32>,
}

impl Affine {
    pub fn xavier<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f32).sqrt();
        let w = Array2::from_shape_simple_fn((in_dim, out_dim), || rng.gen_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Array2::zeros((in_dim, out_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        let mut y = matmul(x, &self.w.view());
        y += &self.b;
        y
    }

    /// Returns (dx, gradients) for upstream gradient `dy` at input `x`.
    pub fn backward(&self, x: &ArrayView2<f32>, dy: &ArrayView2<f32>) -> (Array2<f32>, AffineGrads) {
        let dx = matmul(dy, &self.w.t());
        let dw = matmul(&x.t(), dy);
        let db = dy.sum_axis(Axis(0));
        (dx, AffineGrads { dw, db })
    }
}

/// Copies rows shifted by `offset` within each window of `p` rows,
/// zero-filling rows whose source falls outside the window:
/// `out[w*p + t] = x[w*p + t + offset]`.
pub fn shift_rows(x: &ArrayView2<f32>, p: usize, offset: isize) -> Array2<f32> {
    let rows = x.nrows();
    assert_eq!(rows % p, 0, "batch rows must be a multiple of the window size");
    let mut out = Array2::zeros(x.raw_dim());
    for w in (0..rows).step_by(p) {
        for t in 0..p {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < p {
                out.row_mut(w + t).assign(&x.row(w + src as usize));
            }
        }
    }
    out
}

/// Residual block around a kernel-3 dilated convolution along the patch
/// axis: `y = residual(x) + gelu(conv(x))`. The residual is the identity
/// when input and output widths match, otherwise a learned projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// Taps for offsets [-dilation, 0, +dilation], each `ch_in x ch_out`.
    pub w: [Array2<f32>; 3],
    pub b: Array1<f32>,
    pub proj: Option<Affine>,
}

/// Forward state needed by the backward pass (pre-activation values).
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub pre: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dw: [Array2<f32>; 3],
    pub db: Array1<f32>,
    pub dproj: Option<AffineGrads>,
}

impl ConvBlock {
    pub fn xavier<R: Rng>(ch_in: usize, ch_out: usize, rng: &mut R) -> Self {
        // Fan-in counts all three taps.
        let bound = (6.0 / (3 * ch_in + ch_out) as f32).sqrt();
        let mut tap = || {
            Array2::from_shape_simple_fn((ch_in, ch_out), || rng.gen_range(-bound..bound))
        };
        let w = [tap(), tap(), tap()];
        let proj = (ch_in != ch_out).then(|| Affine::xavier(ch_in, ch_out, rng));
        Self {
            w,
            b: Array1::zeros(ch_out),
            proj,
        }
    }

    pub fn forward(&self, x: &ArrayView2<f32>, p: usize, dilation: usize) -> (Array2<f32>, ConvCache) {
        let xm = shift_rows(x, p, -(dilation as isize));
        let xp = shift_rows(x, p, dilation as isize);
        let mut pre = matmul(&xm.view(), &self.w[0].view());
        pre += &matmul(x, &self.w[1].view());
        pre += &matmul(&xp.view(), &self.w[2].view());
        pre += &self.b;
        let mut y = match &self.proj {
            Some(proj) => proj.forward(x),
            None => x.to_owned(),
        };
        y.zip_mut_with(&pre, |out, &v| *out += gelu(v));
        (y, ConvCache { pre })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f32>,
        cache: &ConvCache,
        dy: &ArrayView2<f32>,
        p: usize,
        dilation: usize,
    ) -> (Array2<f32>, ConvGrads) {
        let mut dact = dy.to_owned();
        dact.zip_mut_with(&cache.pre, |g, &v| *g *= gelu_grad(v));
        let dact_view = dact.view();

        let xm = shift_rows(x, p, -(dilation as isize));
        let xp = shift_rows(x, p, dilation as isize);
        let dw = [
            matmul(&xm.t(), &dact_view),
            matmul(&x.t(), &dact_view),
            matmul(&xp.t(), &dact_view),
        ];
        let db = dact.sum_axis(Axis(0));

        // pre[t] uses x[t-dil] via w0, so dx[s] collects dact[s+dil] w0^T.
        let mut dx = shift_rows(&matmul(&dact_view, &self.w[0].t()).view(), p, dilation as isize);
        dx += &matmul(&dact_view, &self.w[1].t());
        dx += &shift_rows(
            &matmul(&dact_view, &self.w[2].t()).view(),
            p,
            -(dilation as isize),
        );

        let dproj = match &self.proj {
            Some(proj) => {
                let (dres, grads) = proj.backward(x, dy);
                dx += &dres;
                Some(grads)
            }
            None => {
                dx += dy;
                None
            }
        };
        (dx, ConvGrads { dw, db, dproj })
    }
}

/// Decoupled-weight-decay Adam over named flat parameter slices. State
/// tensors are kept by position; callers must present parameters in the
/// same order every step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    names: Vec<String>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must be aligned name-for-name.
    pub fn step(&mut self, params: &mut [(String, &mut [f32])], grads: &[(String, &[f32])]) {
        assert_eq!(params.len(), grads.len(), "param/grad tensor count mismatch");
        if self.m.is_empty() {
            self.names = params.iter().map(|(n, _)| n.clone()).collect();
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        assert_eq!(params.len(), self.m.len(), "optimizer state tensor count changed");
        self.step_count += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step_count as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step_count as i32);
        for (i, ((pname, p), (gname, g))) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(pname, gname, "param/grad name mismatch at index {i}");
            assert_eq!(&self.names[i], pname, "optimizer state name mismatch at index {i}");
            assert_eq!(p.len(), g.len());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + self.eps as f64);
                p[j] -= self.lr * (update as f32 + self.weight_decay * p[j]);
            }
        }
    }

    /// (step count, first-moment tensors, second-moment tensors).
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>], &[String]) {
        (self.step_count, &self.m, &self.v, &self.names)
    }

    pub fn restore_state(
        &mut self,
        step_count: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        names: Vec<String>,
    ) {
        assert_eq!(m.len(), v.len());
        assert_eq!(m.len(), names.len());
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        self.names = names;
    }
}
