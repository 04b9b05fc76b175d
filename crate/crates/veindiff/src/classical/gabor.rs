//! Even-symmetric Gabor bank tuned for dark tubular structures.

use super::{normalize_scores, reflect, ProbMask};
use crate::error::{Result, VeinError};
use crate::synth::VeinImage;

/// Bank of even Gabor kernels sharing wavelength/sigma/aspect across
/// orientations.
#[derive(Debug, Clone)]
pub struct GaborBank {
    /// Orientations in radians, evenly spanning [0, π).
    pub orientations: Vec<f32>,
    /// Cosine wavelength λ in pixels.
    pub wavelength: f32,
    /// Gaussian envelope σ along the wave axis.
    pub sigma: f32,
    /// Spatial aspect ratio γ (envelope is σ/γ across the wave axis).
    pub aspect: f32,
}

impl Default for GaborBank {
    fn default() -> Self {
        Self {
            orientations: (0..8).map(|i| i as f32 * std::f32::consts::PI / 8.0).collect(),
            wavelength: 8.0,
            sigma: 3.0,
            aspect: 0.8,
        }
    }
}

impl GaborBank {
    pub fn validate(&self) -> Result<()> {
        if self.orientations.len() < 4 {
            return Err(VeinError::invariant("GaborBank needs at least 4 orientations"));
        }
        if self.wavelength <= 0.0 || self.sigma <= 0.0 || self.aspect <= 0.0 {
            return Err(VeinError::invariant("GaborBank parameters must be positive"));
        }
        let n = self.orientations.len() as f32;
        let step = std::f32::consts::PI / n;
        for (i, &theta) in self.orientations.iter().enumerate() {
            if (theta - i as f32 * step).abs() > 1e-4 {
                return Err(VeinError::invariant(
                    "orientations must evenly span [0, pi)",
                ));
            }
        }
        Ok(())
    }

    /// Even (cosine) kernel for one orientation, mean-subtracted so the
    /// response to any constant image is exactly zero.
    fn kernel(&self, theta: f32) -> (Vec<f32>, usize) {
        let radius = (2.5 * self.sigma * (1.0 / self.aspect).max(1.0)).ceil() as usize;
        let size = 2 * radius + 1;
        let (sin_t, cos_t) = theta.sin_cos();
        let mut k = Vec::with_capacity(size * size);
        let inv2s2 = 0.5 / (self.sigma * self.sigma);
        let g2 = self.aspect * self.aspect;
        let omega = 2.0 * std::f32::consts::PI / self.wavelength;
        for dy in -(radius as isize)..=radius as isize {
            for dx in -(radius as isize)..=radius as isize {
                let (x, y) = (dx as f32, dy as f32);
                let xr = x * cos_t + y * sin_t;
                let yr = -x * sin_t + y * cos_t;
                let env = (-(xr * xr + g2 * yr * yr) * inv2s2).exp();
                k.push(env * (omega * xr).cos());
            }
        }
        let mean = k.iter().sum::<f32>() / k.len() as f32;
        for v in &mut k {
            *v -= mean;
        }
        (k, radius)
    }
}

/// Max-over-orientations even-Gabor response to the inverted image
/// (veins are dark), min-max normalized.
pub fn gabor_extract(image: &VeinImage, bank: &GaborBank) -> Result<ProbMask> {
    bank.validate()?;
    let (h, w) = (image.h, image.w);
    let inverted: Vec<f32> = image.pixels.iter().map(|&v| 1.0 - v).collect();
    let mut best = vec![f32::NEG_INFINITY; h * w];
    for &theta in &bank.orientations {
        let (kernel, radius) = bank.kernel(theta);
        let size = 2 * radius + 1;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for ky in 0..size {
                    let sy = reflect(y as isize + ky as isize - radius as isize, h as isize);
                    let krow = &kernel[ky * size..(ky + 1) * size];
                    let irow = sy * w;
                    for (kx, &kv) in krow.iter().enumerate() {
                        let sx = reflect(x as isize + kx as isize - radius as isize, w as isize);
                        acc += kv * inverted[irow + sx];
                    }
                }
                let idx = y * w + x;
                if acc > best[idx] {
                    best[idx] = acc;
                }
            }
        }
    }
    // Negative best responses carry no vein evidence.
    for v in &mut best {
        *v = v.max(0.0);
    }
    normalize_scores(h, w, best)
}
