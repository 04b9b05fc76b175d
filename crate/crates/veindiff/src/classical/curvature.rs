//! Profile-curvature (LMC-style) and Hessian-vesselness (EMC-style)
//! extractors.

use super::{normalize_scores, ProbMask};
use crate::augment::gaussian_blur;
use crate::error::{Result, VeinError};
use crate::synth::VeinImage;

/// Pixel index paths for the four profile directions.
fn direction_profiles(h: usize, w: usize, dir: usize) -> Vec<Vec<usize>> {
    let mut profiles = Vec::new();
    match dir {
        // horizontal: rows
        0 => {
            for y in 0..h {
                profiles.push((0..w).map(|x| y * w + x).collect());
            }
        }
        // vertical: columns
        1 => {
            for x in 0..w {
                profiles.push((0..h).map(|y| y * w + x).collect());
            }
        }
        // diagonal ↘ (dy=1, dx=1)
        2 => {
            for start_x in 0..w {
                profiles.push(diag_path(h, w, 0, start_x, 1));
            }
            for start_y in 1..h {
                profiles.push(diag_path(h, w, start_y, 0, 1));
            }
        }
        // diagonal ↗ (dy=-1, dx=1) walked from the bottom edge
        _ => {
            for start_x in 0..w {
                profiles.push(diag_path(h, w, h - 1, start_x, -1));
            }
            for start_y in 0..h.saturating_sub(1) {
                profiles.push(diag_path(h, w, start_y, 0, -1));
            }
        }
    }
    profiles.retain(|p| p.len() >= 5);
    profiles
}

fn diag_path(h: usize, w: usize, mut y: usize, mut x: usize, step_y: isize) -> Vec<usize> {
    let mut path = Vec::new();
    loop {
        path.push(y * w + x);
        let ny = y as isize + step_y;
        if ny < 0 || ny >= h as isize || x + 1 >= w {
            break;
        }
        y = ny as usize;
        x += 1;
    }
    path
}

/// Line max-curvature: profile curvature κ = P″/(1+P′²)^{3/2} of the
/// smoothed inverted image along 4 directions; each local maximum of a
/// positive-κ region scores κ·region_width; directions combine by max.
pub fn max_curvature_extract(image: &VeinImage, sigma: f32) -> Result<ProbMask> {
    if sigma <= 0.0 {
        return Err(VeinError::config("max_curvature sigma must be > 0"));
    }
    let (h, w) = (image.h, image.w);
    // Veins are valleys of intensity = ridges of the inverted image; the
    // curvature of the *intensity* profile is positive inside a valley, so
    // work on the smoothed intensity directly.
    let smooth = gaussian_blur(&image.pixels, h, w, sigma);

    let mut combined = vec![0f32; h * w];
    for dir in 0..4 {
        let mut plane = vec![0f32; h * w];
        for profile in direction_profiles(h, w, dir) {
            let n = profile.len();
            let p: Vec<f32> = profile.iter().map(|&i| smooth[i]).collect();
            // central differences, unit spacing
            let mut kappa = vec![0f32; n];
            for i in 1..n - 1 {
                let d1 = (p[i + 1] - p[i - 1]) * 0.5;
                let d2 = p[i + 1] - 2.0 * p[i] + p[i - 1];
                kappa[i] = d2 / (1.0 + d1 * d1).powf(1.5);
            }
            // positive-κ regions
            let mut i = 1;
            while i < n - 1 {
                if kappa[i] <= 0.0 {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < n - 1 && kappa[i] > 0.0 {
                    i += 1;
                }
                let width = (i - start) as f32;
                for j in start..i {
                    let left = if j > start { kappa[j - 1] } else { 0.0 };
                    let right = if j + 1 < i { kappa[j + 1] } else { 0.0 };
                    if kappa[j] >= left && kappa[j] >= right {
                        plane[profile[j]] += kappa[j] * width;
                    }
                }
            }
        }
        for (c, p) in combined.iter_mut().zip(&plane) {
            *c = c.max(*p);
        }
    }
    normalize_scores(h, w, combined)
}

/// Hessian vesselness gated by gradient-orientation coherence.
pub fn enhanced_curvature_extract(image: &VeinImage, sigma: f32) -> Result<ProbMask> {
    if sigma <= 0.0 {
        return Err(VeinError::config("enhanced_curvature sigma must be > 0"));
    }
    let (h, w) = (image.h, image.w);
    let smooth = gaussian_blur(&image.pixels, h, w, sigma);

    let at = |buf: &[f32], y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        buf[yy * w + xx]
    };

    let mut lxx = vec![0f32; h * w];
    let mut lyy = vec![0f32; h * w];
    let mut lxy = vec![0f32; h * w];
    let mut gx = vec![0f32; h * w];
    let mut gy = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            lxx[i] = at(&smooth, y, x + 1) - 2.0 * at(&smooth, y, x) + at(&smooth, y, x - 1);
            lyy[i] = at(&smooth, y + 1, x) - 2.0 * at(&smooth, y, x) + at(&smooth, y - 1, x);
            lxy[i] = 0.25
                * (at(&smooth, y + 1, x + 1) - at(&smooth, y + 1, x - 1)
                    - at(&smooth, y - 1, x + 1)
                    + at(&smooth, y - 1, x - 1));
            gx[i] = 0.5 * (at(&smooth, y, x + 1) - at(&smooth, y, x - 1));
            gy[i] = 0.5 * (at(&smooth, y + 1, x) - at(&smooth, y - 1, x));
        }
    }

    // structure tensor smoothed at ρ = 2σ for the coherence gate
    let rho = 2.0 * sigma;
    let jxx = gaussian_blur(&gx.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, rho);
    let jyy = gaussian_blur(&gy.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, rho);
    let jxy = gaussian_blur(
        &gx.iter().zip(&gy).map(|(a, b)| a * b).collect::<Vec<_>>(),
        h,
        w,
        rho,
    );

    let mut scores = vec![0f32; h * w];
    for i in 0..h * w {
        // larger Hessian eigenvalue: positive across a dark tube
        let tr = lxx[i] + lyy[i];
        let det_term = ((lxx[i] - lyy[i]).powi(2) + 4.0 * lxy[i] * lxy[i]).sqrt();
        let lambda_max = 0.5 * (tr + det_term);
        let coherence = {
            let num = ((jxx[i] - jyy[i]).powi(2) + 4.0 * jxy[i] * jxy[i]).sqrt();
            let den = jxx[i] + jyy[i] + 1e-9;
            (num / den).clamp(0.0, 1.0)
        };
        scores[i] = lambda_max.max(0.0) * coherence;
    }
    normalize_scores(h, w, scores)
}
