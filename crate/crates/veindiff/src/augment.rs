//! Training-time augmentation: square crop → bilinear resize → photometric
//! jitter. The crop/resize is shared between image and mask; contrast and
//! blur touch only the image, and the mask is re-binarized at 0.5 so it
//! stays exactly {0,1} after interpolation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VeinError};
use crate::synth::{BinaryMask, VeinImage};

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Randomize the horizontal/vertical crop position. When false the
    /// window is the centered full-height square.
    pub random_crop: bool,
    /// Contrast multiplier range around the image mean.
    pub contrast: (f32, f32),
    /// Gaussian blur sigma range in pixels; 0 disables blur.
    pub blur_sigma: (f32, f32),
    /// Output side length.
    pub out_size: usize,
}

impl AugmentParams {
    /// The paper-style training jitter.
    pub fn train() -> Self {
        Self { random_crop: true, contrast: (0.7, 1.3), blur_sigma: (0.0, 1.5), out_size: 224 }
    }

    /// Deterministic variant used at evaluation: centered square crop and
    /// resize only.
    pub fn identity() -> Self {
        Self { random_crop: false, contrast: (1.0, 1.0), blur_sigma: (0.0, 0.0), out_size: 224 }
    }
}

/// Bilinear resample of a row-major f32 buffer (half-pixel-center convention).
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0f32; dh * dw];
    let sy = sh as f32 / dh as f32;
    let sx = sw as f32 / dw as f32;
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Separable Gaussian blur with kernel radius ceil(3σ), reflective edges.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 1e-3 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = -0.5 / (sigma * sigma);
    for i in -radius..=radius {
        kernel.push(((i * i) as f32 * inv).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - radius, w as isize);
                s += kv * src[y * w + xi];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - radius, h as isize);
                s += kv * tmp[yi * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn crop(src: &[f32], w: usize, y0: usize, x0: usize, side: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        out.extend_from_slice(&src[y * w + x0..y * w + x0 + side]);
    }
    out
}

/// Apply the full pipeline to an (image, mask) pair.
pub fn augment(
    image: &VeinImage,
    mask: &BinaryMask,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<(VeinImage, BinaryMask)> {
    if image.h != mask.h || image.w != mask.w {
        return Err(VeinError::invariant(format!(
            "image {}x{} and mask {}x{} shapes differ",
            image.h, image.w, mask.h, mask.w
        )));
    }
    if image.h.min(image.w) < 64 {
        return Err(VeinError::invariant("augment needs min(H, W) >= 64"));
    }
    let side = image.h.min(image.w);
    let (max_y, max_x) = (image.h - side, image.w - side);
    let (y0, x0) = if params.random_crop {
        (
            if max_y > 0 { rng.random_range(0..=max_y) } else { 0 },
            if max_x > 0 { rng.random_range(0..=max_x) } else { 0 },
        )
    } else {
        (max_y / 2, max_x / 2)
    };

    let img_crop = crop(&image.pixels, image.w, y0, x0, side);
    let mask_crop: Vec<f32> = {
        let m = crop(
            &mask.pixels.iter().map(|&v| v as f32).collect::<Vec<_>>(),
            mask.w,
            y0,
            x0,
            side,
        );
        m
    };

    let out = params.out_size;
    let mut img_out = resize_bilinear(&img_crop, side, side, out, out);
    let mask_resized = resize_bilinear(&mask_crop, side, side, out, out);

    // contrast about the image mean (identity when the range collapses to 1)
    let c = if (params.contrast.1 - params.contrast.0).abs() > 0.0 {
        rng.random_range(params.contrast.0..=params.contrast.1)
    } else {
        params.contrast.0
    };
    if (c - 1.0).abs() > 0.0 {
        let pivot = img_out.iter().sum::<f32>() / img_out.len() as f32;
        for v in &mut img_out {
            *v = (pivot + (*v - pivot) * c).clamp(0.0, 1.0);
        }
    }

    let sigma = if (params.blur_sigma.1 - params.blur_sigma.0).abs() > 0.0 {
        rng.random_range(params.blur_sigma.0..=params.blur_sigma.1)
    } else {
        params.blur_sigma.0
    };
    if sigma > 1e-3 {
        img_out = gaussian_blur(&img_out, out, out, sigma);
        for v in &mut img_out {
            *v = v.clamp(0.0, 1.0);
        }
    }

    let mask_bits: Vec<u8> = mask_resized.iter().map(|&v| u8::from(v >= 0.5)).collect();
    Ok((
        VeinImage::new(out, out, img_out)?,
        BinaryMask::new(out, out, mask_bits)?,
    ))
}
