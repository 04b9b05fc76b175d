//! Segmentation and biometric evaluation metrics.
//!
//! Pure scalar functions: Dice/accuracy/AUC/mIoU over masks, centerline Dice
//! with morphological thinning, DET sweeps with interpolated EER, and the
//! serializable [`MetricsReport`] emitted by evaluation runs.

use std::fmt::Write as _;

use crate::classical::ProbMask;
use crate::error::{Result, VeinError};
use crate::synth::BinaryMask;

/// One point of a DET sweep. `far` is non-increasing and `frr` non-decreasing
/// in `threshold` by construction of [`det_curve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Hard-mask segmentation scores plus soft-score AUC, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceSuite {
    pub dice: f64,
    pub pixel_acc: f64,
    pub auc: f64,
    pub miou: f64,
}

/// Aggregated evaluation results with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub identification_acc: f64,
    pub dice: f64,
    pub cl_dice: f64,
    pub pixel_acc: f64,
    pub auc: f64,
    pub miou: f64,
    pub dataset: String,
    pub checkpoint: String,
    pub t_steps: usize,
}

/// Dice, pixel accuracy, soft-score AUC and mean IoU of `pred` against `gt`.
///
/// `pred` is binarized at `threshold` (>= keeps a pixel) for dice, accuracy
/// and mIoU; AUC ranks the raw soft scores. Conventions for degenerate
/// inputs: dice of two empty masks is 1, an IoU with an empty union is 1,
/// and AUC is 1 when the ground truth has only one class (nothing can be
/// misranked).
pub fn dice_suite(pred: &ProbMask, gt: &BinaryMask, threshold: f32) -> Result<DiceSuite> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(VeinError::invariant(format!(
            "dice_suite shape mismatch: pred {}x{} vs gt {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let n = pred.pixels.len();
    let (mut tp, mut fp, mut fne, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        let p = pred.pixels[i] >= threshold;
        let g = gt.pixels[i] != 0;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let dice = if tp + fp + fne == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fne as f64)
    };
    let pixel_acc = (tp + tn) as f64 / n as f64;
    let iou = |inter: u64, union: u64| {
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let fg_iou = iou(tp, tp + fp + fne);
    let bg_iou = iou(tn, tn + fp + fne);
    let miou = 0.5 * (fg_iou + bg_iou);
    let auc = ranked_auc(&pred.pixels, &gt.pixels);
    Ok(DiceSuite {
        dice,
        pixel_acc,
        auc,
        miou,
    })
}

/// Mann-Whitney AUC with tie-averaged ranks; 1.0 if either class is empty.
fn ranked_auc(scores: &[f32], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank of their block
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Skeleton of a binary mask by Zhang-Suen two-subiteration thinning.
///
/// Deletes border pixels in two alternating passes until a fixed point;
/// preserves 8-connectivity, so every nonempty connected component keeps at
/// least one pixel.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut px = mask.pixels.clone();
    let at = |px: &[u8], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            px[y as usize * w + x as usize]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut kill = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&px, y, x) == 0 {
                        continue;
                    }
                    // neighbours P2..P9 clockwise from north
                    let nb = [
                        at(&px, y - 1, x),
                        at(&px, y - 1, x + 1),
                        at(&px, y, x + 1),
                        at(&px, y + 1, x + 1),
                        at(&px, y + 1, x),
                        at(&px, y + 1, x - 1),
                        at(&px, y, x - 1),
                        at(&px, y - 1, x - 1),
                    ];
                    let b: u8 = nb.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let transitions = (0..8)
                        .filter(|&k| nb[k] == 0 && nb[(k + 1) % 8] == 1)
                        .count();
                    if transitions != 1 {
                        continue;
                    }
                    let (c1, c2) = if pass == 0 {
                        (nb[0] * nb[2] * nb[4], nb[2] * nb[4] * nb[6])
                    } else {
                        (nb[0] * nb[2] * nb[6], nb[0] * nb[4] * nb[6])
                    };
                    if c1 == 0 && c2 == 0 {
                        kill.push(y as usize * w + x as usize);
                    }
                }
            }
            if !kill.is_empty() {
                changed = true;
                for i in kill {
                    px[i] = 0;
                }
            }
        }
        if !changed {
            return BinaryMask {
                h,
                w,
                pixels: px,
            };
        }
    }
}

/// Centerline Dice: topology-sensitive overlap of skeletons with masks.
///
/// `Tprec = |skel(pred) ∩ gt| / |skel(pred)|`, `Tsens = |skel(gt) ∩ pred| /
/// |skel(gt)|`, combined harmonically. Both skeletons empty gives 1, exactly
/// one empty gives 0.
pub fn cl_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(VeinError::invariant(format!(
            "cl_dice shape mismatch: pred {}x{} vs gt {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    let count = |a: &[u8], b: &[u8]| -> (f64, f64) {
        let total = a.iter().filter(|&&v| v != 0).count() as f64;
        let hit = a
            .iter()
            .zip(b)
            .filter(|&(&s, &m)| s != 0 && m != 0)
            .count() as f64;
        (hit, total)
    };
    let (p_hit, p_total) = count(&sp.pixels, &gt.pixels);
    let (g_hit, g_total) = count(&sg.pixels, &pred.pixels);
    if p_total == 0.0 && g_total == 0.0 {
        return Ok(1.0);
    }
    if p_total == 0.0 || g_total == 0.0 {
        return Ok(0.0);
    }
    let tprec = p_hit / p_total;
    let tsens = g_hit / g_total;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// DET sweep over the sorted union of all scores plus bracketing sentinels.
///
/// Higher score means more genuine. `FAR(θ)` is the fraction of impostor
/// scores `>= θ`; `FRR(θ)` the fraction of genuine scores `< θ`. Sentinels
/// below the minimum and above the maximum pin the endpoints at
/// `(FAR, FRR) = (1, 0)` and `(0, 1)` so an EER crossing always exists.
pub fn det_curve(genuine: &[f32], impostor: &[f32]) -> Result<Vec<DetPoint>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(VeinError::invariant(
            "det_curve requires nonempty genuine and impostor score lists",
        ));
    }
    if genuine
        .iter()
        .chain(impostor)
        .any(|v| !v.is_finite())
    {
        return Err(VeinError::invariant("det_curve scores must be finite"));
    }
    let mut thresholds: Vec<f64> = genuine
        .iter()
        .chain(impostor)
        .map(|&v| v as f64)
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0] - 1.0;
    let hi = thresholds[thresholds.len() - 1] + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);
    let points = thresholds
        .into_iter()
        .map(|t| {
            let far = impostor.iter().filter(|&&s| s as f64 >= t).count() as f64
                / impostor.len() as f64;
            let frr = genuine.iter().filter(|&&s| (s as f64) < t).count() as f64
                / genuine.len() as f64;
            DetPoint {
                threshold: t,
                far,
                frr,
            }
        })
        .collect();
    Ok(points)
}

/// Equal error rate from a DET sweep by piecewise-linear interpolation.
///
/// Finds the segment where `FAR - FRR` changes sign and returns the common
/// interpolated value at the crossing, clamped to `[0, 1]`. Falls back to the
/// sample point minimizing `|FAR - FRR|` when no sign change exists.
pub fn eer(points: &[DetPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(VeinError::invariant("eer requires a nonempty DET sweep"));
    }
    let diff = |p: &DetPoint| p.far - p.frr;
    for pair in points.windows(2) {
        let (d0, d1) = (diff(&pair[0]), diff(&pair[1]));
        if d0 == 0.0 {
            return Ok(pair[0].far.clamp(0.0, 1.0));
        }
        if d0 * d1 < 0.0 {
            let t = d0 / (d0 - d1);
            let value = pair[0].far + t * (pair[1].far - pair[0].far);
            return Ok(value.clamp(0.0, 1.0));
        }
    }
    let last = points.last().expect("nonempty");
    if diff(last) == 0.0 {
        return Ok(last.far.clamp(0.0, 1.0));
    }
    let best = points
        .iter()
        .min_by(|a, b| diff(a).abs().total_cmp(&diff(b).abs()))
        .expect("nonempty");
    Ok((0.5 * (best.far + best.frr)).clamp(0.0, 1.0))
}

/// Fraction of predictions equal to the actual class ids.
pub fn identification_acc(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(VeinError::invariant(format!(
            "identification_acc needs equal nonempty lengths, got {} vs {}",
            predicted.len(),
            actual.len()
        )));
    }
    let hits = predicted
        .iter()
        .zip(actual)
        .filter(|&(p, a)| p == a)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Serialize a DET sweep as CSV lines `threshold,far,frr` with a header row.
pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", p.threshold, p.far, p.frr);
    }
    out
}

impl MetricsReport {
    /// Structured text with fixed keys, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "eer={:.6}", self.eer);
        let _ = writeln!(out, "identification_acc={:.6}", self.identification_acc);
        let _ = writeln!(out, "dice={:.6}", self.dice);
        let _ = writeln!(out, "cl_dice={:.6}", self.cl_dice);
        let _ = writeln!(out, "pixel_acc={:.6}", self.pixel_acc);
        let _ = writeln!(out, "auc={:.6}", self.auc);
        let _ = writeln!(out, "miou={:.6}", self.miou);
        let _ = writeln!(out, "dataset={}", self.dataset);
        let _ = writeln!(out, "checkpoint={}", self.checkpoint);
        let _ = writeln!(out, "T={}", self.t_steps);
        out
    }

    /// Parse the `to_text` format back; unknown or missing keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = MetricsReport {
            eer: f64::NAN,
            identification_acc: f64::NAN,
            dice: f64::NAN,
            cl_dice: f64::NAN,
            pixel_acc: f64::NAN,
            auc: f64::NAN,
            miou: f64::NAN,
            dataset: String::new(),
            checkpoint: String::new(),
            t_steps: usize::MAX,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VeinError::invariant(format!("metrics report line without '=': {line}"))
            })?;
            let parse = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| VeinError::invariant(format!("bad metric value: {v}")))
            };
            match key {
                "eer" => report.eer = parse(value)?,
                "identification_acc" => report.identification_acc = parse(value)?,
                "dice" => report.dice = parse(value)?,
                "cl_dice" => report.cl_dice = parse(value)?,
                "pixel_acc" => report.pixel_acc = parse(value)?,
                "auc" => report.auc = parse(value)?,
                "miou" => report.miou = parse(value)?,
                "dataset" => report.dataset = value.to_string(),
                "checkpoint" => report.checkpoint = value.to_string(),
                "T" => {
                    report.t_steps = value.parse().map_err(|_| {
                        VeinError::invariant(format!("bad T value: {value}"))
                    })?
                }
                other => {
                    return Err(VeinError::invariant(format!(
                        "unknown metrics report key: {other}"
                    )))
                }
            }
        }
        let floats = [
            report.eer,
            report.identification_acc,
            report.dice,
            report.cl_dice,
            report.pixel_acc,
            report.auc,
            report.miou,
        ];
        if floats.iter().any(|v| v.is_nan()) || report.t_steps == usize::MAX {
            return Err(VeinError::invariant("metrics report missing keys"));
        }
        Ok(report)
    }
}
