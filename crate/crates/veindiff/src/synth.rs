//! Synthetic finger-vein dataset: templates, rendering, manifests.
//!
//! Each class gets one [`VeinTemplate`] (a handful of smooth dark tubes),
//! rendered `2 × samples_per_session` times with small per-sample jitter.
//! Session 2 uses a larger jitter draw than session 1 to model an
//! acquisition gap, so "train on session 1, test on session 2" is a real
//! generalization split rather than a resample of the same pixels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VeinError};
use crate::rng::{substream, Stream};

// ---------------------------------------------------------------------------
// Core raster types
// ---------------------------------------------------------------------------

/// Grayscale image, row-major, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct VeinImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl VeinImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if h < 32 || w < 32 {
            return Err(VeinError::invariant(format!(
                "VeinImage must be at least 32x32, got {h}x{w}"
            )));
        }
        if pixels.len() != h * w {
            return Err(VeinError::invariant(format!(
                "VeinImage buffer length {} != {h}x{w}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VeinError::invariant("VeinImage values must lie in [0,1]"));
        }
        Ok(Self { h, w, pixels })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    pub fn mean(&self) -> f32 {
        self.pixels.iter().sum::<f32>() / self.pixels.len() as f32
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        VeinImage::new(h, w, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes)
            .expect("buffer length checked by constructor");
        img.save(path)?;
        Ok(())
    }
}

/// Binary mask paired with an image; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(VeinError::invariant(format!(
                "BinaryMask buffer length {} != {h}x{w}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(VeinError::invariant("BinaryMask values must be 0 or 1"));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, pixels: vec![0; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.w + x]
    }

    pub fn count_foreground(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.as_raw().iter().map(|&b| u8::from(b >= 128)).collect();
        BinaryMask::new(h, w, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes)
            .expect("buffer length checked by constructor");
        img.save(path)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Per-class vascular identity: smooth centerline curves in normalized
/// [0,1]² coordinates plus a stroke width per curve.
#[derive(Debug, Clone)]
pub struct VeinTemplate {
    pub class_id: usize,
    pub centerlines: Vec<Vec<(f32, f32)>>,
    pub widths: Vec<f32>,
}

impl VeinTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.centerlines.len() < 2 {
            return Err(VeinError::invariant("template needs at least 2 curves"));
        }
        if self.centerlines.len() != self.widths.len() {
            return Err(VeinError::invariant("one width per curve required"));
        }
        for w in &self.widths {
            if !(1.5..=8.0).contains(w) {
                return Err(VeinError::invariant(format!("stroke width {w} outside [1.5, 8]")));
            }
        }
        for curve in &self.centerlines {
            for &(x, y) in curve {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(VeinError::invariant("control point outside unit square"));
                }
            }
        }
        Ok(())
    }
}

/// Draw a template: 3–5 roughly horizontal tubes through 4–6 control
/// points each, with occasional curves branching off an earlier one.
pub fn sample_template(class_id: usize, rng: &mut ChaCha8Rng) -> VeinTemplate {
    let n_curves = rng.random_range(3..=5usize);
    let mut centerlines: Vec<Vec<(f32, f32)>> = Vec::with_capacity(n_curves);
    let mut widths = Vec::with_capacity(n_curves);
    for c in 0..n_curves {
        let n_pts = rng.random_range(4..=6usize);
        let mut pts = Vec::with_capacity(n_pts);
        // Branch: start on a previously drawn curve half the time.
        let branched = c > 0 && rng.random_range(0.0..1.0f32) < 0.5;
        let mut y = if branched {
            let parent: &Vec<(f32, f32)> = &centerlines[rng.random_range(0..c)];
            let k = rng.random_range(0..parent.len());
            pts.push(parent[k]);
            parent[k].1
        } else {
            rng.random_range(0.15..0.85f32)
        };
        let start = pts.len();
        for i in start..n_pts {
            let x = (i as f32 / (n_pts - 1) as f32 + rng.random_range(-0.06..0.06f32))
                .clamp(0.02, 0.98);
            y = (y + rng.random_range(-0.22..0.22f32)).clamp(0.1, 0.9);
            pts.push((x, y));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        centerlines.push(pts);
        widths.push(rng.random_range(2.0..6.0f32));
    }
    VeinTemplate { class_id, centerlines, widths }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Intra-class jitter applied to a template before rasterization.
#[derive(Debug, Clone, Copy)]
pub struct PerturbParams {
    /// Rotation about the template center, radians.
    pub rotation: f32,
    /// Translation as a fraction of the unit square.
    pub translate: (f32, f32),
    /// Isotropic scale about the center.
    pub scale: f32,
    /// Additive background brightness shift.
    pub brightness: f32,
    /// Multiplier on stroke widths.
    pub width_scale: f32,
    /// Gaussian pixel-noise sigma (0 disables noise).
    pub noise_sigma: f32,
}

impl PerturbParams {
    /// Identity jitter, no noise — renders become exactly repeatable.
    pub fn zero() -> Self {
        Self {
            rotation: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            brightness: 0.0,
            width_scale: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Draw jitter for a session; session 2 widens the ranges 1.5x to act
    /// as a second acquisition campaign.
    pub fn sample(session: u8, rng: &mut ChaCha8Rng) -> Self {
        let k = if session >= 2 { 1.5 } else { 1.0 };
        Self {
            rotation: rng.random_range(-0.05..0.05f32) * k,
            translate: (
                rng.random_range(-0.02..0.02f32) * k,
                rng.random_range(-0.02..0.02f32) * k,
            ),
            scale: 1.0 + rng.random_range(-0.03..0.03f32) * k,
            brightness: rng.random_range(-0.04..0.04f32) * k,
            width_scale: 1.0 + rng.random_range(-0.08..0.08f32) * k,
            noise_sigma: 0.03,
        }
    }
}

fn catmull_rom(p0: (f32, f32), p1: (f32, f32), p2: (f32, f32), p3: (f32, f32), t: f32) -> (f32, f32) {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f32, b: f32, c: f32, d: f32| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
            + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

/// Sample a clamped Catmull-Rom spline through `pts` (pixel coordinates)
/// densely enough that consecutive samples are < 0.5 px apart.
fn spline_polyline(pts: &[(f32, f32)]) -> Vec<(f32, f32)> {
    let n = pts.len();
    let mut out = Vec::new();
    for i in 0..n - 1 {
        let p0 = pts[i.saturating_sub(1)];
        let p1 = pts[i];
        let p2 = pts[i + 1];
        let p3 = pts[(i + 2).min(n - 1)];
        let chord = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let steps = (chord / 0.5).ceil().max(1.0) as usize;
        for s in 0..steps {
            out.push(catmull_rom(p0, p1, p2, p3, s as f32 / steps as f32));
        }
    }
    out.push(*pts.last().unwrap());
    out
}

fn dist_point_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 <= 1e-12 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Render one sample. The image is a bright vertically-graded background
/// minus dark tubular strokes along the (jittered) centerlines plus
/// Gaussian noise; the mask marks exactly the pixels within width/2 of a
/// centerline.
pub fn render_sample(
    template: &VeinTemplate,
    perturb: &PerturbParams,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(VeinImage, BinaryMask)> {
    template.validate()?;
    let (sin_r, cos_r) = perturb.rotation.sin_cos();

    // signed distance to nearest stroke boundary (min over curves of d - r)
    let mut sd = vec![f32::INFINITY; h * w];
    // soft darkness accumulator for the intensity profile
    let mut dark = vec![0f32; h * w];

    for (curve, &base_width) in template.centerlines.iter().zip(&template.widths) {
        let width = (base_width * perturb.width_scale).clamp(1.0, 10.0);
        let r = width * 0.5;
        let soft = (0.6 * r).max(0.5);
        let reach = r + 3.0 * soft;

        // jitter in normalized coordinates, then scale to pixels
        let pts: Vec<(f32, f32)> = curve
            .iter()
            .map(|&(x, y)| {
                let (cx, cy) = (x - 0.5, y - 0.5);
                let rx = cx * cos_r - cy * sin_r;
                let ry = cx * sin_r + cy * cos_r;
                let nx = (rx * perturb.scale + 0.5 + perturb.translate.0).clamp(0.0, 1.0);
                let ny = (ry * perturb.scale + 0.5 + perturb.translate.1).clamp(0.0, 1.0);
                (nx * (w - 1) as f32, ny * (h - 1) as f32)
            })
            .collect();

        let poly = spline_polyline(&pts);
        for seg in poly.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let x1 = (a.0.max(b.0) + reach).ceil().min((w - 1) as f32) as usize;
            let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let y1 = (a.1.max(b.1) + reach).ceil().min((h - 1) as f32) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = dist_point_segment((x as f32, y as f32), a, b);
                    let idx = y * w + x;
                    sd[idx] = sd[idx].min(d - r);
                    let t = d / soft;
                    if t < 9.0 {
                        let v = (-0.5 * t * t).exp();
                        if v > dark[idx] {
                            dark[idx] = v;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut pixels = vec![0f32; h * w];
    for y in 0..h {
        let bg = 0.85 - 0.10 * (y as f32 / h.max(2) as f32) + perturb.brightness;
        for x in 0..w {
            let idx = y * w + x;
            let mut v = bg - 0.35 * dark[idx];
            if perturb.noise_sigma > 0.0 {
                v += perturb.noise_sigma * noise.sample(rng);
            }
            pixels[idx] = v.clamp(0.0, 1.0);
        }
    }

    let mask_pixels = sd.iter().map(|&d| u8::from(d <= 0.0)).collect();
    Ok((VeinImage::new(h, w, pixels)?, BinaryMask::new(h, w, mask_pixels)?))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub relpath: String,
    pub maskpath: String,
    pub class_id: usize,
    pub session: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

impl DatasetManifest {
    /// Per-entry sanity: class ids in range, sessions valid. Holds for both
    /// full manifests and single-session splits.
    pub fn validate_entries(&self) -> Result<()> {
        for entry in &self.entries {
            if entry.class_id >= self.num_classes {
                return Err(VeinError::invariant(format!(
                    "entry {} has class {} >= num_classes {}",
                    entry.relpath, entry.class_id, self.num_classes
                )));
            }
            if entry.session != 1 && entry.session != 2 {
                return Err(VeinError::invariant("session must be 1 or 2"));
            }
        }
        Ok(())
    }

    /// Check the session/class coverage invariants of a full manifest.
    pub fn validate(&self) -> Result<()> {
        self.validate_entries()?;
        let mut counts = vec![[0usize; 2]; self.num_classes];
        for entry in &self.entries {
            counts[entry.class_id][entry.session as usize - 1] += 1;
        }
        let expect = counts.first().copied().unwrap_or([0, 0]);
        for (class, c) in counts.iter().enumerate() {
            if c[0] == 0 || c[1] == 0 {
                return Err(VeinError::invariant(format!(
                    "class {class} missing from a session"
                )));
            }
            if *c != expect {
                return Err(VeinError::invariant(format!(
                    "class {class} has uneven session counts {c:?} (expected {expect:?})"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = String::new();
        for e in &self.entries {
            writeln!(text, "{},{},{},{}", e.relpath, e.maskpath, e.class_id, e.session)
                .expect("string write");
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VeinError::Dataset {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut entries = Vec::new();
        let mut max_class = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(VeinError::Dataset {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected 4 comma-separated fields", lineno + 1),
                });
            }
            let class_id: usize = parts[2].trim().parse().map_err(|_| VeinError::Dataset {
                path: path.to_path_buf(),
                msg: format!("line {}: bad class id {:?}", lineno + 1, parts[2]),
            })?;
            let session: u8 = parts[3].trim().parse().map_err(|_| VeinError::Dataset {
                path: path.to_path_buf(),
                msg: format!("line {}: bad session {:?}", lineno + 1, parts[3]),
            })?;
            max_class = max_class.max(class_id);
            entries.push(ManifestEntry {
                relpath: parts[0].trim().to_string(),
                maskpath: parts[1].trim().to_string(),
                class_id,
                session,
            });
        }
        let manifest = DatasetManifest { entries, num_classes: max_class + 1 };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Split into (session-1 train, session-2 test) manifests.
pub fn split_by_session(manifest: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
    manifest.validate()?;
    let pick = |session: u8| DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.session == session)
            .cloned()
            .collect(),
        num_classes: manifest.num_classes,
    };
    let (train, test) = (pick(1), pick(2));
    for (name, side) in [("train", &train), ("test", &test)] {
        let mut seen = vec![false; manifest.num_classes];
        for e in &side.entries {
            seen[e.class_id] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(VeinError::invariant(format!(
                "class {class} missing from {name} split"
            )));
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Generate the full two-session dataset under `root` and write the
/// manifest to `<root>/manifest.txt`. Deterministic given `seed`.
pub fn generate_dataset(
    root: &Path,
    num_classes: usize,
    samples_per_session: usize,
    image_h: usize,
    image_w: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_classes < 2 {
        return Err(VeinError::config("need at least 2 classes"));
    }
    if samples_per_session < 1 {
        return Err(VeinError::config("need at least 1 sample per session"));
    }
    if image_h < 64 || image_w < 64 {
        return Err(VeinError::config(format!(
            "image dims must be at least 64, got {image_h}x{image_w}"
        )));
    }

    let mut entries = Vec::with_capacity(num_classes * samples_per_session * 2);
    for class_id in 0..num_classes {
        let mut trng = substream(seed, Stream::Template, &[class_id as u64]);
        let template = sample_template(class_id, &mut trng);
        for session in [1u8, 2u8] {
            for k in 0..samples_per_session {
                let mut rrng = substream(
                    seed,
                    Stream::Render,
                    &[class_id as u64, session as u64, k as u64],
                );
                let perturb = PerturbParams::sample(session, &mut rrng);
                let (image, mask) = render_sample(&template, &perturb, image_h, image_w, &mut rrng)?;
                let relpath = format!("session{session}/class_{class_id}/sample_{k}.png");
                let maskpath = format!("session{session}/class_{class_id}/mask_{k}.png");
                image.save_png(&root.join(&relpath))?;
                mask.save_png(&root.join(&maskpath))?;
                entries.push(ManifestEntry { relpath, maskpath, class_id, session });
            }
        }
    }

    let manifest = DatasetManifest { entries, num_classes };
    manifest.validate()?;
    manifest.save(&root.join("manifest.txt"))?;
    Ok(manifest)
}

/// Absolute image/mask paths for an entry.
pub fn entry_paths(root: &Path, entry: &ManifestEntry) -> (PathBuf, PathBuf) {
    (root.join(&entry.relpath), root.join(&entry.maskpath))
}
