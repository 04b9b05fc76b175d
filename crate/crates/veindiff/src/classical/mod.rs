//! Classical vein-probability extractors and majority-vote fusion.
//!
//! Four independent voters (Gabor bank, line max-curvature, Hessian
//! vesselness, adaptive threshold) each emit a soft [`ProbMask`]; the
//! binarized votes are fused with [`majority_vote`] (default 3-of-4) to
//! produce the training masks.

mod adaptive;
mod curvature;
mod gabor;

pub use adaptive::adaptive_threshold_extract;
pub use curvature::{enhanced_curvature_extract, max_curvature_extract};
pub use gabor::{gabor_extract, GaborBank};

use crate::error::{Result, VeinError};
use crate::synth::{BinaryMask, VeinImage};

/// Soft per-pixel vein score in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl ProbMask {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(VeinError::invariant(format!(
                "ProbMask buffer length {} != {h}x{w}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(VeinError::invariant("ProbMask values must be finite and in [0,1]"));
        }
        Ok(Self { h, w, pixels })
    }
}

/// Min-max normalize a raw score plane into a ProbMask; a (near-)constant
/// plane maps to all zeros instead of dividing by ~0.
pub(crate) fn normalize_scores(h: usize, w: usize, scores: Vec<f32>) -> Result<ProbMask> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &scores {
        if !v.is_finite() {
            return Err(VeinError::invariant("non-finite extractor score"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let pixels = if range <= 1e-12 {
        vec![0f32; scores.len()]
    } else {
        scores.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    };
    ProbMask::new(h, w, pixels)
}

#[inline]
pub(crate) fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Thresholding method for [`binarize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Otsu's method on a 256-bin histogram of the scores.
    Otsu,
    /// Fixed threshold; pixel = 1 iff score ≥ t.
    Fixed(f32),
}

/// Otsu threshold over [0,1] scores: the lowest bin edge maximizing the
/// inter-class variance. Returns None when the histogram is degenerate
/// (single occupied bin).
pub fn otsu_threshold(scores: &[f32]) -> Option<f32> {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for &v in scores {
        let b = ((v * BINS as f32) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total: u64 = scores.len() as u64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as f64 + 0.5) * c as f64)
        .sum();
    let mut w0 = 0u64;
    let mut sum0 = 0f64;
    let mut best = (0f64, None::<usize>);
    // split k: class 0 = bins [0, k), class 1 = bins [k, BINS)
    for k in 1..BINS {
        w0 += hist[k - 1];
        sum0 += (k as f64 - 0.5) * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if var > best.0 {
            best = (var, Some(k));
        }
    }
    best.1.map(|k| k as f32 / BINS as f32)
}

/// Binarize a soft mask. A constant mask under Otsu yields all zeros.
pub fn binarize(mask: &ProbMask, method: Threshold) -> BinaryMask {
    let t = match method {
        Threshold::Fixed(t) => Some(t),
        Threshold::Otsu => otsu_threshold(&mask.pixels),
    };
    let pixels = match t {
        Some(t) => mask.pixels.iter().map(|&v| u8::from(v >= t)).collect(),
        None => vec![0u8; mask.pixels.len()],
    };
    BinaryMask { h: mask.h, w: mask.w, pixels }
}

/// Pixel-wise vote fusion: 1 iff at least `threshold` voters say 1.
pub fn majority_vote(masks: &[BinaryMask], threshold: usize) -> Result<BinaryMask> {
    if masks.len() < 2 {
        return Err(VeinError::invariant("majority_vote needs at least 2 masks"));
    }
    if threshold < 1 || threshold > masks.len() {
        return Err(VeinError::invariant(format!(
            "vote threshold {} outside [1, {}]",
            threshold,
            masks.len()
        )));
    }
    let (h, w) = (masks[0].h, masks[0].w);
    for m in masks {
        if m.h != h || m.w != w {
            return Err(VeinError::invariant("majority_vote mask shapes differ"));
        }
    }
    let mut pixels = vec![0u8; h * w];
    for (i, out) in pixels.iter_mut().enumerate() {
        let votes: usize = masks.iter().map(|m| m.pixels[i] as usize).sum();
        *out = u8::from(votes >= threshold);
    }
    BinaryMask::new(h, w, pixels)
}

/// Knobs for the fused mask pipeline.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub bank: GaborBank,
    pub lmc_sigma: f32,
    pub emc_sigma: f32,
    pub window: usize,
    pub offset: f32,
    pub vote_threshold: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            bank: GaborBank::default(),
            lmc_sigma: 2.0,
            emc_sigma: 2.0,
            window: 15,
            offset: 0.02,
            vote_threshold: 3,
        }
    }
}

/// Run all four extractors, Otsu-binarize each, and fuse by vote. Also
/// returns the per-voter binary masks (for debugging dumps).
pub fn fuse_masks(image: &VeinImage, params: &FusionParams) -> Result<(BinaryMask, Vec<BinaryMask>)> {
    let voters = vec![
        binarize(&gabor_extract(image, &params.bank)?, Threshold::Otsu),
        binarize(&max_curvature_extract(image, params.lmc_sigma)?, Threshold::Otsu),
        binarize(&enhanced_curvature_extract(image, params.emc_sigma)?, Threshold::Otsu),
        binarize(
            &adaptive_threshold_extract(image, params.window, params.offset)?,
            Threshold::Otsu,
        ),
    ];
    let fused = majority_vote(&voters, params.vote_threshold)?;
    Ok((fused, voters))
}
