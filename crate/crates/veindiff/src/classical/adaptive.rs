//! Dark-below-local-mean detector via an integral image.

use super::{normalize_scores, ProbMask};
use crate::error::{Result, VeinError};
use crate::synth::VeinImage;

/// score = max(0, local_mean(window) − pixel − offset), min-max normalized.
pub fn adaptive_threshold_extract(image: &VeinImage, window: usize, offset: f32) -> Result<ProbMask> {
    if window < 3 || window % 2 == 0 {
        return Err(VeinError::config(format!(
            "adaptive threshold window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = (image.h, image.w);
    let r = window as isize / 2;

    // summed-area table with one padding row/col of zeros
    let mut sat = vec![0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += image.pixels[y * w + x] as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let rect = |y0: isize, x0: isize, y1: isize, x1: isize| -> (f64, f64) {
        // inclusive clamped rectangle sum and area
        let y0 = y0.max(0) as usize;
        let x0 = x0.max(0) as usize;
        let y1 = (y1.min(h as isize - 1)) as usize;
        let x1 = (x1.min(w as isize - 1)) as usize;
        let s = sat[(y1 + 1) * (w + 1) + x1 + 1] - sat[y0 * (w + 1) + x1 + 1]
            - sat[(y1 + 1) * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        (s, ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64)
    };

    let mut scores = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (s, area) = rect(y - r, x - r, y + r, x + r);
            let mean = (s / area) as f32;
            let v = mean - image.pixels[y as usize * w + x as usize] - offset;
            scores[y as usize * w + x as usize] = v.max(0.0);
        }
    }
    normalize_scores(h, w, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_zero() {
        let img = VeinImage::new(32, 32, vec![0.7; 1024]).unwrap();
        let out = adaptive_threshold_extract(&img, 7, 0.02).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dark_pixel_scores_positive() {
        let mut px = vec![0.8f32; 33 * 33];
        px[16 * 33 + 16] = 0.8 - 0.1; // darker than neighborhood by 2*offset
        let img = VeinImage::new(33, 33, px).unwrap();
        let out = adaptive_threshold_extract(&img, 7, 0.05).unwrap();
        assert!(out.pixels[16 * 33 + 16] > 0.0);
        assert_eq!(out.pixels[0], 0.0);
    }

    #[test]
    fn checkerboard_dark_squares_score_higher() {
        let (h, w) = (32, 32);
        let mut px = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                px[y * w + x] = if (x / 4 + y / 4) % 2 == 0 { 0.3 } else { 0.8 };
            }
        }
        let img = VeinImage::new(h, w, px.clone()).unwrap();
        let out = adaptive_threshold_extract(&img, 9, 0.0).unwrap();
        let mut dark_sum = 0f32;
        let mut dark_n = 0usize;
        let mut bright_sum = 0f32;
        let mut bright_n = 0usize;
        for i in 0..h * w {
            if px[i] < 0.5 {
                dark_sum += out.pixels[i];
                dark_n += 1;
            } else {
                bright_sum += out.pixels[i];
                bright_n += 1;
            }
        }
        assert!(dark_sum / dark_n as f32 > bright_sum / bright_n as f32);
    }

    #[test]
    fn even_window_rejected() {
        let img = VeinImage::new(32, 32, vec![0.5; 1024]).unwrap();
        assert!(adaptive_threshold_extract(&img, 8, 0.02).is_err());
        assert!(adaptive_threshold_extract(&img, 1, 0.02).is_err());
    }
}
