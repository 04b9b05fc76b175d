//! Training losses: global SSIM, FourierSIM, diffusion, segmentation, and
//! circle loss.
//!
//! Everything returns a rank-0 tensor inside the autograd graph. The SSIM
//! dynamic-range constants are themselves tensor expressions of the inputs
//! (max − min over the joint pair, floored at 1e-3), so analytic gradients
//! agree with finite differences even when a perturbed element is the
//! range-defining extremum.

use candle_core::Tensor;

use crate::error::{Result, VeinError};
use crate::tensor::ops;

/// Amplitude/phase decomposition of a real signal's DFT. Amplitude is the
/// modulus (non-negative); phase is the principal-value argument.
pub struct SpectrumPair {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

fn require_finite(name: &str, t: &Tensor) -> Result<()> {
    let v: Vec<f64> = t
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(VeinError::invariant(format!("{name} contains non-finite values")))
    }
}

/// DFT of the last dimension; accepts rank 1 `(n,)` or rank 2 `(b, n)`.
pub fn spectrum(x: &Tensor) -> Result<SpectrumPair> {
    let n = *x.dims().last().ok_or_else(|| VeinError::invariant("empty tensor"))?;
    if n < 2 {
        return Err(VeinError::invariant("spectrum needs length >= 2"));
    }
    let rank1 = x.rank() == 1;
    let rows = if rank1 { x.reshape((1, n))? } else { x.clone() };
    let (c, s) = ops::dft_matrices(n, x.dtype(), x.device())?;
    let (re, im) = ops::dft_rows(&rows, &c, &s)?;
    let amplitude = (re.sqr()? + im.sqr()?)?.sqrt()?;
    let phase = ops::atan2(&im, &re)?;
    if rank1 {
        Ok(SpectrumPair {
            amplitude: amplitude.reshape((n,))?,
            phase: phase.reshape((n,))?,
        })
    } else {
        Ok(SpectrumPair { amplitude, phase })
    }
}

/// Joint dynamic range of a pair as an in-graph scalar: `max − min` over
/// both tensors, floored at 1e-3 via `c + relu(r − c)`. The extremum is
/// picked by index so the gradient routes to exactly one element even when
/// values tie (real-signal DFT amplitudes tie structurally in conjugate
/// pairs, and a reduce-max backward would double-count them).
fn pair_range(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let all = Tensor::cat(&[x.flatten_all()?, y.flatten_all()?], 0)?;
    let pick = |want_max: bool| -> Result<Tensor> {
        let idx = if want_max { all.argmax(0)? } else { all.argmin(0)? };
        Ok(all.index_select(&idx.reshape((1,))?, 0)?.squeeze(0)?)
    };
    let r = (pick(true)? - pick(false)?)?;
    Ok(((r - 1e-3)?.relu()? + 1e-3)?)
}

fn ssim_core(x: &Tensor, y: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<Tensor> {
    let mu_x = x.mean_all()?;
    let mu_y = y.mean_all()?;
    let xc = x.broadcast_sub(&mu_x)?;
    let yc = y.broadcast_sub(&mu_y)?;
    let var_x = xc.sqr()?.mean_all()?;
    let var_y = yc.sqr()?.mean_all()?;
    let cov = xc.mul(&yc)?.mean_all()?;
    let num = (((&mu_x * &mu_y)? * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_x.sqr()? + mu_y.sqr()?)? + c1)?.mul(&(((var_x + var_y)?) + c2)?)?;
    Ok((num / den)?)
}

/// Global (single-window) SSIM with population statistics and explicit
/// constants. Inputs are flattened to vectors; lengths must match and be ≥ 2.
pub fn ssim_global(x: &Tensor, y: &Tensor, c1: f64, c2: f64) -> Result<Tensor> {
    let (x, y) = (x.flatten_all()?, y.flatten_all()?);
    if x.dims() != y.dims() {
        return Err(VeinError::invariant("ssim_global inputs differ in length"));
    }
    if x.elem_count() < 2 {
        return Err(VeinError::invariant("ssim_global needs length >= 2"));
    }
    let scalar = |v: f64| {
        Tensor::from_vec(vec![v], (1,), x.device())?
            .to_dtype(x.dtype())?
            .squeeze(0)
    };
    ssim_core(&x, &y, &scalar(c1)?, &scalar(c2)?)
}

/// `1 − SSIM(x, y)` with the standard range-derived constants
/// `C1 = (0.01R)², C2 = (0.03R)²` computed in-graph from the pair.
fn ssim_loss_ranged(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let r = pair_range(x, y)?;
    let c1 = (r.clone() * 0.01)?.sqr()?;
    let c2 = (r * 0.03)?.sqr()?;
    Ok((ssim_core(x, y, &c1, &c2)?.neg()? + 1.0)?)
}

fn fouriersim_row(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    let s = spectrum(eps)?;
    let s_hat = spectrum(eps_hat)?;
    let amp_term = ssim_loss_ranged(&s.amplitude, &s_hat.amplitude)?;
    let phase_term = ssim_loss_ranged(&s.phase, &s_hat.phase)?;
    Ok((amp_term + phase_term)?)
}

/// FourierSIM loss (Eq. 12): `(1−SSIM)` on DFT amplitudes plus `(1−SSIM)` on
/// principal-branch phases. Rank-2 inputs are averaged over rows.
pub fn fouriersim_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(VeinError::invariant("fouriersim_loss shape mismatch"));
    }
    require_finite("eps", eps)?;
    require_finite("eps_hat", eps_hat)?;
    match eps.rank() {
        1 => fouriersim_row(eps, eps_hat),
        2 => {
            let b = eps.dims()[0];
            let mut acc = fouriersim_row(
                &eps.narrow(0, 0, 1)?.flatten_all()?,
                &eps_hat.narrow(0, 0, 1)?.flatten_all()?,
            )?;
            for i in 1..b {
                let term = fouriersim_row(
                    &eps.narrow(0, i, 1)?.flatten_all()?,
                    &eps_hat.narrow(0, i, 1)?.flatten_all()?,
                )?;
                acc = (acc + term)?;
            }
            Ok((acc / b as f64)?)
        }
        r => Err(VeinError::invariant(format!(
            "fouriersim_loss expects rank 1 or 2, got {r}"
        ))),
    }
}

/// Total diffusion loss (Eq. 13): `MSE(ε, ε̂) + λ·FourierSIM`.
pub fn diff_loss(eps: &Tensor, eps_hat: &Tensor, lambda: f64) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(VeinError::invariant("diff_loss shape mismatch"));
    }
    let mse = (eps - eps_hat)?.sqr()?.mean_all()?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    Ok((mse + (fouriersim_loss(eps, eps_hat)? * lambda)?)?)
}

/// Segmentation loss (Eq. 1): soft Dice (smoothing 1.0) + α·BCE on sigmoid
/// probabilities. `gt` must be strictly {0,1}-valued.
pub fn seg_loss(mask_logits: &Tensor, gt_mask: &Tensor, alpha: f64) -> Result<Tensor> {
    if mask_logits.dims() != gt_mask.dims() {
        return Err(VeinError::invariant("seg_loss shape mismatch"));
    }
    let gt_vals: Vec<f64> = gt_mask
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    if !gt_vals.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(VeinError::invariant("seg_loss ground truth is not binary"));
    }
    let gt = gt_mask.to_dtype(mask_logits.dtype())?;
    let p = ops::sigmoid(mask_logits)?;
    let inter = p.mul(&gt)?.sum_all()?;
    let dice = (((inter * 2.0)? + 1.0)? / ((p.sum_all()? + gt.sum_all()?)? + 1.0)?)?;
    let dice_term = (dice.neg()? + 1.0)?;
    let bce = ops::bce_with_logits(mask_logits, &gt)?;
    Ok((dice_term + (bce * alpha)?)?)
}

/// Circle-loss core on explicit pair similarities (both non-empty rank-1):
/// `log(1 + Σ_n exp(γ·α_n(s_n−Δ_n)) · Σ_p exp(−γ·α_p(s_p−Δ_p)))` with
/// `α_p = relu(1+m − s_p)`, `α_n = relu(s_n + m)`, `m = Δ_n`, evaluated as
/// `softplus(LSE_n + LSE_p)` for stability.
pub fn circle_loss_from_sims(
    s_p: &Tensor,
    s_n: &Tensor,
    gamma: f64,
    delta_p: f64,
    delta_n: f64,
) -> Result<Tensor> {
    if s_p.elem_count() == 0 || s_n.elem_count() == 0 {
        return Err(VeinError::invariant("circle_loss_from_sims needs non-empty pair sets"));
    }
    let m = delta_n;
    let alpha_p = ((s_p.neg()? + (1.0 + m))?).relu()?;
    let alpha_n = ((s_n + m)?).relu()?;
    let logit_p = (alpha_p.mul(&(s_p - delta_p)?)? * (-gamma))?;
    let logit_n = (alpha_n.mul(&(s_n - delta_n)?)? * gamma)?;
    let lse_p = ops::log_sum_exp_keepdim(&logit_p)?;
    let lse_n = ops::log_sum_exp_keepdim(&logit_n)?;
    Ok(ops::softplus(&(lse_p + lse_n)?)?.squeeze(0)?)
}

/// Circle loss over a batch of embeddings (Eq. 2). Embeddings are
/// L2-normalized internally; pairs are the unordered index pairs i < j,
/// split by label equality. A batch with no intra-class or no inter-class
/// pair contributes zero loss (empty sum).
pub fn circle_loss(
    embeddings: &Tensor,
    labels: &[usize],
    gamma: f64,
    delta_p: f64,
    delta_n: f64,
) -> Result<Tensor> {
    let (b, _d) = embeddings
        .dims2()
        .map_err(|_| VeinError::invariant("circle_loss expects (B, D) embeddings"))?;
    if b < 2 || labels.len() != b {
        return Err(VeinError::invariant(format!(
            "circle_loss needs batch >= 2 with matching labels, got B={b}, labels={}",
            labels.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            let flat = (i * b + j) as u32;
            if labels[i] == labels[j] {
                pos.push(flat);
            } else {
                neg.push(flat);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Ok(Tensor::zeros((), embeddings.dtype(), embeddings.device())?);
    }
    let norm = (embeddings.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?;
    let unit = embeddings.broadcast_div(&norm)?;
    let sims = unit.matmul(&unit.t()?)?.flatten_all()?;
    let idx = |v: Vec<u32>| Tensor::from_vec(v.clone(), (v.len(),), embeddings.device());
    let s_p = sims.index_select(&idx(pos)?, 0)?;
    let s_n = sims.index_select(&idx(neg)?, 0)?;
    circle_loss_from_sims(&s_p, &s_n, gamma, delta_p, delta_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use candle_core::{DType, Device, Var};
    use rand::Rng;

    fn vec_t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(v, (n,), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    /// Max relative error between analytic gradient (backward) and central
    /// finite differences of `f` w.r.t. the flattened variable.
    fn fd_rel_err<F>(f: F, at: &Tensor) -> f64
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let var = Var::from_tensor(at).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .expect("missing gradient")
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base: Vec<f64> = at.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, at.dims(), &Device::Cpu).unwrap();
                scalar(&f(&t))
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn ssim_identity_and_spec_example() {
        let x = vec_t(vec![0.3, -1.2, 0.8, 2.0, -0.1]);
        assert!((scalar(&ssim_global(&x, &x, 1e-4, 1e-4).unwrap()) - 1.0).abs() < 1e-12);

        let a = vec_t(vec![1.0, -1.0]);
        let b = vec_t(vec![-1.0, 1.0]);
        let got = scalar(&ssim_global(&a, &b, 1e-4, 1e-4).unwrap());
        let want = (1e-4) * (-2.0 + 1e-4) / ((1e-4) * (2.0 + 1e-4));
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((got + 0.9999).abs() < 1e-4);
    }

    #[test]
    fn ssim_scale_invariant_in_small_constant_limit() {
        let x = vec_t(vec![0.5, 1.5, -0.7, 0.2]);
        let y = vec_t(vec![0.4, 1.2, -0.5, 0.3]);
        let s1 = scalar(&ssim_global(&x, &y, 1e-12, 1e-12).unwrap());
        let s10 = scalar(
            &ssim_global(&(&x * 10.0).unwrap(), &(&y * 10.0).unwrap(), 1e-12, 1e-12).unwrap(),
        );
        assert!((s1 - s10).abs() <= 1e-6, "{s1} vs {s10}");
        assert!(ssim_global(&x, &vec_t(vec![1.0]), 1e-4, 1e-4).is_err());
        assert!(ssim_global(&vec_t(vec![1.0]), &vec_t(vec![1.0]), 1e-4, 1e-4).is_err());
    }

    #[test]
    fn fouriersim_identity_zero_and_negation_phase_only() {
        let eps = vec_t(vec![1.0, 2.0, -1.0, 0.5]);
        let zero = scalar(&fouriersim_loss(&eps, &eps).unwrap());
        assert!(zero.abs() < 1e-12, "identity loss {zero}");

        let neg = eps.neg().unwrap();
        let s = spectrum(&eps).unwrap();
        let s_neg = spectrum(&neg).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = (
            s.amplitude.to_vec1().unwrap(),
            s_neg.amplitude.to_vec1().unwrap(),
        );
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-9, "amplitudes differ at {i}");
            assert!(a[i] >= 0.0);
        }
        let amp_term = scalar(&ssim_loss_ranged(&s.amplitude, &s_neg.amplitude).unwrap());
        assert!(amp_term.abs() < 1e-9, "amplitude term {amp_term}");
        let total = scalar(&fouriersim_loss(&eps, &neg).unwrap());
        assert!(total > 1e-3, "negation loss should be phase-dominated, got {total}");

        // phases stay on the principal branch
        let ph: Vec<f64> = s.phase.to_vec1().unwrap();
        for p in ph {
            assert!(p > -std::f64::consts::PI - 1e-12 && p <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn fouriersim_nonnegative_and_rejects_nonfinite() {
        let mut rng = substream(11, Stream::Diffusion, &[7]);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = scalar(&fouriersim_loss(&vec_t(x), &vec_t(y)).unwrap());
            assert!(l >= -1e-12, "loss {l} negative");
        }
        let bad = vec_t(vec![1.0, f64::NAN, 0.0]);
        assert!(fouriersim_loss(&bad, &vec_t(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn fouriersim_gradient_matches_finite_differences() {
        let eps = vec_t(vec![0.52, 0.21, -0.33, 0.84, 0.11, -0.6]);
        let eps_hat_at = vec_t(vec![0.40, 0.35, -0.21, 0.66, 0.25, -0.4]);
        let err = fd_rel_err(
            |eh| fouriersim_loss(&eps, eh).unwrap(),
            &eps_hat_at,
        );
        assert!(err <= 1e-4, "fouriersim grad rel err {err}");
        // and w.r.t. the first argument
        let err2 = fd_rel_err(|e| fouriersim_loss(e, &eps_hat_at).unwrap(), &eps);
        assert!(err2 <= 1e-4, "fouriersim grad (arg 1) rel err {err2}");
    }

    #[test]
    fn diff_loss_examples_and_gradient() {
        let eps = vec_t(vec![1.0, 0.0, 0.0, 0.0]);
        let zero = vec_t(vec![0.0; 4]);
        assert!(scalar(&diff_loss(&eps, &eps, 0.5).unwrap()).abs() < 1e-12);
        let mse_only = scalar(&diff_loss(&eps, &zero, 0.0).unwrap());
        assert!((mse_only - 0.25).abs() < 1e-12);

        // composition: diff = mse + 0.5 * fouriersim. Sums differ so the
        // joint spectral range extremes are attained uniquely (a tie across
        // the pair is a genuine kink where no gradient exists).
        let a = vec_t(vec![0.3, -0.4, 0.9, 0.1, -0.2]);
        let b = vec_t(vec![0.12, -0.31, 0.72, 0.28, -0.14]);
        let total = scalar(&diff_loss(&a, &b, 0.5).unwrap());
        let mse = scalar(&(&a - &b).unwrap().sqr().unwrap().mean_all().unwrap());
        let four = scalar(&fouriersim_loss(&a, &b).unwrap());
        assert!((total - (mse + 0.5 * four)).abs() < 1e-12);

        let err = fd_rel_err(|bh| diff_loss(&a, bh, 0.5).unwrap(), &b);
        assert!(err <= 1e-4, "diff_loss grad rel err {err}");

        // batched rows average the per-row losses
        let batch_a = Tensor::cat(&[a.reshape((1, 5)).unwrap(), a.reshape((1, 5)).unwrap()], 0).unwrap();
        let batch_b = Tensor::cat(&[b.reshape((1, 5)).unwrap(), a.reshape((1, 5)).unwrap()], 0).unwrap();
        let lb = scalar(&fouriersim_loss(&batch_a, &batch_b).unwrap());
        assert!((lb - four / 2.0).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_examples_and_gradient() {
        // all-zero gt, logits 0 -> p = 0.5 everywhere on 4x4
        let logits = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let gt = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let bce = scalar(&ops::bce_with_logits(&logits, &gt).unwrap());
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-9);
        let total = scalar(&seg_loss(&logits, &gt, 0.8).unwrap());
        let want = (1.0 - 1.0 / 9.0) + 0.8 * std::f64::consts::LN_2;
        assert!((total - want).abs() < 1e-9, "got {total}, want {want}");

        // saturated logits matching gt -> loss near 0
        let gt_v: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let logit_v: Vec<f64> = gt_v.iter().map(|&g| if g > 0.5 { 30.0 } else { -30.0 }).collect();
        let gt_t = Tensor::from_vec(gt_v, (2, 4), &Device::Cpu).unwrap();
        let lg_t = Tensor::from_vec(logit_v, (2, 4), &Device::Cpu).unwrap();
        assert!(scalar(&seg_loss(&lg_t, &gt_t, 0.8).unwrap()) < 1e-4);

        // non-binary gt rejected
        let bad = Tensor::from_vec(vec![0.5f64; 8], (2, 4), &Device::Cpu).unwrap();
        assert!(seg_loss(&lg_t, &bad, 0.8).is_err());

        // finite differences on a 4x4 toy mask
        let mut rng = substream(12, Stream::Diffusion, &[8]);
        let lv: Vec<f64> = (0..16).map(|_| rng.random_range(-1.5..1.5)).collect();
        let gv: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2u32))).collect();
        let gt4 = Tensor::from_vec(gv, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let at = Tensor::from_vec(lv, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let err = fd_rel_err(|l| seg_loss(l, &gt4, 0.8).unwrap(), &at);
        assert!(err <= 1e-4, "seg_loss grad rel err {err}");
    }

    #[test]
    fn circle_loss_margin_example_and_monotonicity() {
        let ln2 = std::f64::consts::LN_2;
        let l = scalar(
            &circle_loss_from_sims(&vec_t(vec![0.95]), &vec_t(vec![0.05]), 128.0, 0.95, 0.05)
                .unwrap(),
        );
        assert!((l - ln2).abs() < 1e-12, "margin loss {l} vs ln2");

        let at_005 = scalar(
            &circle_loss_from_sims(&vec_t(vec![0.5]), &vec_t(vec![0.05]), 128.0, 0.95, 0.05)
                .unwrap(),
        );
        let at_010 = scalar(
            &circle_loss_from_sims(&vec_t(vec![0.5]), &vec_t(vec![0.10]), 128.0, 0.95, 0.05)
                .unwrap(),
        );
        assert!(at_010 > at_005, "{at_010} should exceed {at_005}");
    }

    #[test]
    fn circle_loss_degenerate_batches_and_validation() {
        let e = Tensor::from_vec(
            vec![1.0f64, 0.0, 0.0, 1.0, 0.5, 0.5],
            (3, 2),
            &Device::Cpu,
        )
        .unwrap();
        // all same label: no negative pairs -> 0
        let l = scalar(&circle_loss(&e, &[4, 4, 4], 128.0, 0.95, 0.05).unwrap());
        assert_eq!(l, 0.0);
        // all distinct labels: no positive pairs -> 0
        let l = scalar(&circle_loss(&e, &[0, 1, 2], 128.0, 0.95, 0.05).unwrap());
        assert_eq!(l, 0.0);
        // batch of one / label mismatch rejected
        let single = Tensor::from_vec(vec![1.0f64, 0.0], (1, 2), &Device::Cpu).unwrap();
        assert!(circle_loss(&single, &[0], 128.0, 0.95, 0.05).is_err());
        assert!(circle_loss(&e, &[0, 1], 128.0, 0.95, 0.05).is_err());
    }

    #[test]
    fn circle_loss_rotation_invariance_and_gradient() {
        let mut rng = substream(13, Stream::Diffusion, &[9]);
        let b = 5;
        let d = 8;
        let data: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = Tensor::from_vec(data, (b, d), &Device::Cpu).unwrap();
        let labels = [0usize, 0, 1, 2, 2];
        let base = scalar(&circle_loss(&e, &labels, 128.0, 0.95, 0.05).unwrap());
        assert!(base.is_finite() && base >= 0.0);

        // Householder reflection: orthogonal, preserves cosines
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        let mut h = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] = f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / vnorm2;
            }
        }
        let h = Tensor::from_vec(h, (d, d), &Device::Cpu).unwrap();
        let rotated = e.matmul(&h).unwrap();
        let rot = scalar(&circle_loss(&rotated, &labels, 128.0, 0.95, 0.05).unwrap());
        assert!((base - rot).abs() < 1e-9, "rotation changed loss: {base} vs {rot}");

        // FD check at gamma = 128 needs pair similarities near the margins
        // (s_p ≈ Δp, s_n ≈ Δn), otherwise the exponentials saturate and the
        // loss is too large for central differences to resolve in f64.
        // Build class-aligned unit vectors: intra-class cosine = cos²θ with
        // small per-vector noise.
        let theta = 0.96f64.sqrt().acos();
        let (c, s) = (theta.cos(), theta.sin());
        let mut rows = vec![vec![0.0f64; 6]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            let class = i / 2;
            row[class] = c; // class direction e0 or e1
            row[2 + i] = s; // distinct orthogonal residual per vector
            for v in row.iter_mut() {
                *v += rng.random_range(-0.005..0.005);
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let e4 = Tensor::from_vec(flat, (4, 6), &Device::Cpu).unwrap();
        let loss_at = scalar(&circle_loss(&e4, &[0, 0, 1, 1], 128.0, 0.95, 0.05).unwrap());
        assert!(
            loss_at.is_finite() && loss_at < 20.0,
            "test point saturated: loss {loss_at}"
        );
        let err = fd_rel_err(
            |x| circle_loss(x, &[0, 0, 1, 1], 128.0, 0.95, 0.05).unwrap(),
            &e4,
        );
        assert!(err <= 1e-4, "circle_loss grad rel err {err}");
    }
}
