//! Patch-level complementary masking.
//!
//! A window of length `W` is cut into `P = W / d` contiguous patches of
//! length `d`. A mask is a binary vector over patches: bit 1 means the patch
//! is visible to the encoder, bit 0 means it is hidden (zeroed). Each sampled
//! mask is paired with its complement so that every patch is hidden in
//! exactly one of the two passes; stitching the two reconstructions together
//! yields a full window in which every value was predicted from context
//! rather than copied.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("window length {window} is not divisible by patch size {patch}")]
    BadPatchSize { window: usize, patch: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// A window reshaped into `P x d` patches, row `i` holding values
/// `window[i*d .. (i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f32>,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.ncols()
    }
}

/// A sampled patch mask together with the inputs that produced it.
/// `mask[i] == 1` keeps patch `i` visible; the complement hides it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub mask: Vec<u8>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPair {
    pub fn complement(&self) -> Vec<u8> {
        self.mask.iter().map(|&b| 1 - b).collect()
    }

    pub fn ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b == 1).count()
    }
}

/// Cuts `window` into non-overlapping patches of length `d`.
pub fn patchify(window: &[f32], d: usize) -> Result<PatchSequence, MaskError> {
    if d == 0 || window.len() % d != 0 {
        return Err(MaskError::BadPatchSize {
            window: window.len(),
            patch: d,
        });
    }
    let p = window.len() / d;
    let patches = Array2::from_shape_vec((p, d), window.to_vec())
        .expect("shape checked by divisibility");
    Ok(PatchSequence { patches })
}

/// Flattens patches back into a window. Exact inverse of [`patchify`].
pub fn unpatchify(ps: &PatchSequence) -> Vec<f32> {
    ps.patches.iter().copied().collect()
}

/// Number of visible patches for a given ratio: `round_half_up(ratio * p)`.
pub fn mask_popcount(p: usize, ratio: f64) -> usize {
    (ratio * p as f64 + 0.5).floor() as usize
}

/// Samples a mask with exactly `round_half_up(ratio * p)` ones placed
/// uniformly at random. The same `(p, ratio, seed)` always yields the same
/// mask.
///
/// Requires `p >= 2` and `0 < ratio < 1`.
pub fn make_complementary_masks(p: usize, ratio: f64, seed: u64) -> MaskPair {
    assert!(p >= 2, "need at least two patches, got {p}");
    assert!(
        ratio > 0.0 && ratio < 1.0,
        "mask ratio must lie strictly between 0 and 1, got {ratio}"
    );
    let k = mask_popcount(p, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..p).collect();
    // Partial Fisher-Yates: after k swaps the first k entries are a uniform
    // k-subset of 0..p.
    for i in 0..k.min(p.saturating_sub(1)) {
        let j = rng.gen_range(i..p);
        idx.swap(i, j);
    }
    let mut mask = vec![0u8; p];
    for &i in idx.iter().take(k) {
        mask[i] = 1;
    }
    MaskPair { mask, ratio, seed }
}

/// Zeroes every patch whose mask bit is 0.
pub fn apply_mask(x: &PatchSequence, mask: &[u8]) -> Result<PatchSequence, MaskError> {
    if mask.len() != x.n_patches() {
        return Err(MaskError::LengthMismatch {
            expected: x.n_patches(),
            got: mask.len(),
        });
    }
    let mut patches = x.patches.clone();
    for (i, mut row) in patches.rows_mut().into_iter().enumerate() {
        if mask[i] == 0 {
            row.fill(0.0);
        }
    }
    Ok(PatchSequence { patches })
}

/// Stitches two complementary reconstructions into one window.
///
/// `recon_m` was produced with `mask` applied to the input, so only its
/// hidden patches (`mask[i] == 0`) carry predictions; they fill those
/// positions in the output. `recon_bar` fills the rest. Every output value
/// was therefore reconstructed from a pass in which it was hidden.
pub fn combine_reconstructions(
    mask: &[u8],
    recon_m: &[f32],
    recon_bar: &[f32],
    d: usize,
) -> Result<Vec<f32>, MaskError> {
    let w = mask.len() * d;
    if recon_m.len() != w {
        return Err(MaskError::LengthMismatch {
            expected: w,
            got: recon_m.len(),
        });
    }
    if recon_bar.len() != w {
        return Err(MaskError::LengthMismatch {
            expected: w,
            got: recon_bar.len(),
        });
    }
    let mut out = vec![0.0f32; w];
    for (i, &bit) in mask.iter().enumerate() {
        let src = if bit == 0 { recon_m } else { recon_bar };
        out[i * d..(i + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
    }
    Ok(out)
}
