//! Prior-shifted label-space diffusion.
//!
//! The classification branch diffuses one-hot labels rather than images: the
//! forward kernel mixes the clean label toward the segmentation-informed
//! class prior while adding Gaussian noise,
//!
//! ```text
//! y_t = √ᾱ_t·y_0 + √(1−ᾱ_t)·ε + (1−√ᾱ_t)·ŷ_v
//! ```
//!
//! so the terminal distribution is `N(ŷ_v, I)` centered on the prior instead
//! of zero. Sampling runs the deterministic x0-prediction reverse update
//! (no per-step noise injection): each step reconstructs `ŷ_0` by inverting
//! the kernel with the predicted noise and re-applies the forward map at
//! `t−1`, with `ᾱ_0 ≡ 1` so the last step lands exactly on the estimate.
//!
//! All maps are affine in `(y_t, ε̂, ŷ_v)` with schedule-only coefficients
//! and stay inside the autograd graph, so the prior receives gradients from
//! the diffusion loss during joint training.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VeinError};

/// Linear β schedule with cached ᾱ products. Indices are 1-based like the
/// paper's t; `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit β values (strictly increasing, each in (0,1)).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(VeinError::config("noise schedule needs T >= 2"));
        }
        for pair in beta.windows(2) {
            if pair[1] <= pair[0] {
                return Err(VeinError::config("beta must be strictly increasing"));
            }
        }
        if beta[0] <= 0.0 || beta[beta.len() - 1] >= 1.0 {
            return Err(VeinError::config("beta values must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0f64;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.beta.len(), "beta index {t} out of range");
        self.beta[t - 1]
    }

    /// α_t = 1 − β_t for 1-based t.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t = Π_{s≤t} α_s for 0 ≤ t ≤ T, with ᾱ_0 ≡ 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.alpha_bar.len(), "alpha_bar index {t} out of range");
        self.alpha_bar[t - 1]
    }
}

/// Default linear-β endpoints used by training and evaluation.
pub const BETA_1: f64 = 1e-4;
pub const BETA_T: f64 = 0.02;

/// The default linear schedule: β from [`BETA_1`] to [`BETA_T`] over `t_max`
/// steps.
pub fn default_schedule(t_max: usize) -> Result<NoiseSchedule> {
    make_schedule(t_max, BETA_1, BETA_T)
}

/// Linear schedule over `t_max` steps inclusive of both endpoints.
pub fn make_schedule(t_max: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(VeinError::config(format!(
            "noise schedule needs T >= 2, got {t_max}"
        )));
    }
    if !(beta1 > 0.0 && beta1 < beta_t && beta_t < 1.0) {
        return Err(VeinError::config(format!(
            "need 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={beta_t}"
        )));
    }
    let step = (beta_t - beta1) / (t_max - 1) as f64;
    let beta: Vec<f64> = (0..t_max).map(|i| beta1 + step * i as f64).collect();
    NoiseSchedule::from_betas(beta)
}

/// Entries non-negative and each row summing to 1 within 1e-6.
pub fn validate_prior(prior: &Tensor) -> Result<()> {
    let flat = to_f64_rows(prior)?;
    for row in &flat {
        let mut sum = 0.0;
        for &v in row {
            if !(v.is_finite() && v >= -1e-9) {
                return Err(VeinError::invariant(format!(
                    "class prior entry {v} outside the simplex"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(VeinError::invariant(format!(
                "class prior sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_t(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t < 1 || t > sched.t_max() {
        return Err(VeinError::invariant(format!(
            "diffusion step t={t} outside [1, {}]",
            sched.t_max()
        )));
    }
    Ok(())
}

fn check_same_shape(parts: &[(&str, &Tensor)]) -> Result<()> {
    let first = parts[0].1.dims();
    for (name, t) in parts.iter().skip(1) {
        if t.dims() != first {
            return Err(VeinError::invariant(format!(
                "{name} shape {:?} differs from {} {:?}",
                t.dims(),
                parts[0].0,
                first
            )));
        }
    }
    Ok(())
}

/// Forward diffusion kernel (Eq. 3): differentiable in all tensor inputs.
pub fn forward_sample(
    y0: &Tensor,
    prior: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_t(t, sched)?;
    check_same_shape(&[("y0", y0), ("prior", prior), ("eps", eps)])?;
    let ab = sched.alpha_bar(t);
    let sab = ab.sqrt();
    let y = ((y0 * sab)? + (eps * (1.0 - ab).sqrt())?)?;
    Ok((y + (prior * (1.0 - sab))?)?)
}

/// Algebraic inverse of the forward kernel:
/// `ŷ_0 = (y_t − √(1−ᾱ_t)·ε̂ − (1−√ᾱ_t)·ŷ_v) / √ᾱ_t`.
pub fn x0_from_noise(
    y_t: &Tensor,
    eps_hat: &Tensor,
    prior: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_t(t, sched)?;
    check_same_shape(&[("y_t", y_t), ("eps_hat", eps_hat), ("prior", prior)])?;
    let ab = sched.alpha_bar(t);
    let sab = ab.sqrt();
    let num = ((y_t - (eps_hat * (1.0 - ab).sqrt())?)? - (prior * (1.0 - sab))?)?;
    Ok((num / sab)?)
}

/// One deterministic reverse step: reconstruct `ŷ_0`, then re-apply the
/// forward map at `t−1` with the same predicted noise (`ᾱ_0 ≡ 1` makes the
/// t=1 step return `ŷ_0` exactly).
pub fn reverse_step(
    y_t: &Tensor,
    eps_hat: &Tensor,
    prior: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let y0_hat = x0_from_noise(y_t, eps_hat, prior, t, sched)?;
    let ab_prev = sched.alpha_bar(t - 1);
    let sab = ab_prev.sqrt();
    let y = ((y0_hat * sab)? + (prior * (1.0 - sab))?)?;
    Ok((y + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
}

fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = t.detach().to_dtype(candle_core::DType::F64)?;
    match t.rank() {
        1 => Ok(vec![t.to_vec1()?]),
        2 => Ok(t.to_vec2()?),
        r => Err(VeinError::invariant(format!(
            "expected rank 1 or 2 label tensor, got rank {r}"
        ))),
    }
}

fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_rows(t)?
        .iter()
        .all(|row| row.iter().all(|v| v.is_finite())))
}

/// Full reverse trajectory from an explicit terminal sample `y_T`.
///
/// `denoiser(y_t, t)` predicts ε̂ at each step; any conditioning (the fused
/// feature vector) is captured by the closure. Returns the final `ŷ_0` and
/// the argmax class per row.
pub fn sample_prediction_from<F>(
    denoiser: &mut F,
    y_terminal: Tensor,
    prior: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Vec<usize>)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    check_same_shape(&[("y_T", &y_terminal), ("prior", prior)])?;
    let mut y = y_terminal;
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = denoiser(&y, t)?;
        if eps_hat.dims() != y.dims() || !all_finite(&eps_hat)? {
            return Err(VeinError::Sampling { step: t });
        }
        y = reverse_step(&y, &eps_hat, prior, t, sched)?;
        if !all_finite(&y)? {
            return Err(VeinError::Sampling { step: t });
        }
    }
    let classes = to_f64_rows(&y)?
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    Ok((y, classes))
}

/// Draw `y_T ~ N(ŷ_v, I)` with the given rng, then run the reverse
/// trajectory. Fixed rng state gives identical predictions.
pub fn sample_prediction<F>(
    denoiser: &mut F,
    prior: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let n: usize = prior.dims().iter().product();
    let normal: Vec<f64> = (0..n)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let eps = Tensor::from_vec(normal, prior.dims(), prior.device())?
        .to_dtype(prior.dtype())?;
    let y_terminal = (prior + eps)?;
    sample_prediction_from(denoiser, y_terminal, prior, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use candle_core::{DType, Device};
    use rand::Rng;

    fn vec_tensor(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(v, (n,), &Device::Cpu).unwrap()
    }

    fn as_vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn schedule_matches_frozen_values() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        // beta[50] (1-based) = 1e-4 + (49/99)(0.02 - 1e-4)
        let want = 1e-4 + (49.0 / 99.0) * (0.02 - 1e-4);
        assert!((s.beta(50) - want).abs() < 1e-15);
        assert!((s.beta(50) - 0.009949).abs() < 1e-6);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(100), 0.02);

        // alpha_bar[100] against a direct product oracle
        let mut prod = 1.0;
        for t in 1..=100 {
            prod *= 1.0 - (1e-4 + (t as f64 - 1.0) / 99.0 * (0.02 - 1e-4));
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-12);
        assert!((s.alpha_bar(100) - 0.3636).abs() < 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_t2_and_validation() {
        let s = make_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(2), 0.02);
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn forward_sample_spec_example() {
        // alpha_bar(2) = (1-0.36)(1-0.609375) = 0.64*0.390625 = 0.25
        let s = NoiseSchedule::from_betas(vec![0.36, 0.609375]).unwrap();
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-12);
        let y0 = vec_tensor(vec![1.0, 0.0, 0.0, 0.0]);
        let prior = vec_tensor(vec![0.25; 4]);
        let eps = vec_tensor(vec![0.0; 4]);
        let y = forward_sample(&y0, &prior, 2, &eps, &s).unwrap();
        let got = as_vec(&y);
        for (g, w) in got.iter().zip([0.625, 0.125, 0.125, 0.125]) {
            assert!((g - w).abs() < 1e-9, "got {got:?}");
        }
        // degenerate check: t out of range
        assert!(forward_sample(&y0, &prior, 3, &eps, &s).is_err());
        assert!(forward_sample(&y0, &prior, 0, &eps, &s).is_err());
    }

    #[test]
    fn x0_round_trip_is_identity() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = substream(3, Stream::Diffusion, &[1]);
        for trial in 0..1000u64 {
            let n = 6;
            let y0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let mut prior: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let z: f64 = prior.iter().sum();
            prior.iter_mut().for_each(|p| *p /= z);
            let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(1..=100);

            // f32 end-to-end per the spec property
            let to32 = |v: &[f64]| {
                Tensor::from_vec(v.iter().map(|&x| x as f32).collect::<Vec<f32>>(), (n,), &Device::Cpu)
                    .unwrap()
            };
            let (y0t, priort, epst) = (to32(&y0), to32(&prior), to32(&eps));
            let yt = forward_sample(&y0t, &priort, t, &epst, &s).unwrap();
            let back = x0_from_noise(&yt, &epst, &priort, t, &s).unwrap();
            let err = as_vec(&back)
                .iter()
                .zip(&y0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err <= 1e-6, "trial {trial}: round-trip error {err}");
        }
    }

    #[test]
    fn x0_zero_recovery_example() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let t = 7;
        let sab = s.alpha_bar(t).sqrt();
        let prior = vec_tensor(vec![0.7, 0.2, 0.1]);
        let y_t = (prior.clone() * (1.0 - sab)).unwrap();
        let zero = vec_tensor(vec![0.0; 3]);
        let y0 = x0_from_noise(&y_t, &zero, &prior, t, &s).unwrap();
        for v in as_vec(&y0) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_t1_returns_x0_estimate() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let y_t = vec_tensor(vec![0.3, -0.2, 0.9]);
        let eps = vec_tensor(vec![0.5, 0.1, -0.4]);
        let prior = vec_tensor(vec![0.5, 0.3, 0.2]);
        let step = reverse_step(&y_t, &eps, &prior, 1, &s).unwrap();
        let x0 = x0_from_noise(&y_t, &eps, &prior, 1, &s).unwrap();
        let (a, b) = (as_vec(&step), as_vec(&x0));
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_with_oracle_noise_inverts_forward() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = substream(4, Stream::Diffusion, &[2]);
        let n = 5;
        let y0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let prior: Vec<f64> = vec![0.2; 5];
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (y0t, priort, epst) = (
            vec_tensor(y0.clone()),
            vec_tensor(prior),
            vec_tensor(eps),
        );
        let mut y = forward_sample(&y0t, &priort, 50, &epst, &s).unwrap();
        for t in (1..=50).rev() {
            y = reverse_step(&y, &epst, &priort, t, &s).unwrap();
        }
        let err = as_vec(&y)
            .iter()
            .zip(&y0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-5, "full reverse error {err}");
    }

    #[test]
    fn marginal_statistics_match_kernel() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let n = 4;
        let trials = 100_000;
        let y0 = [1.0, 0.0, 0.0, 0.0];
        let prior = [0.4, 0.3, 0.2, 0.1];
        let ab = s.alpha_bar(t);
        let sab = ab.sqrt();
        let want_mean: Vec<f64> = (0..n)
            .map(|i| sab * y0[i] + (1.0 - sab) * prior[i])
            .collect();
        let noise_var = 1.0 - ab;

        let mut rng = substream(5, Stream::Diffusion, &[3]);
        let mut sum = vec![0.0f64; n];
        let mut sum_sq = vec![0.0f64; n];
        let mut sum_cross = 0.0f64; // covariance of dims 0 and 1
        let y0t = vec_tensor(y0.to_vec());
        let priort = vec_tensor(prior.to_vec());
        for _ in 0..trials {
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = forward_sample(&y0t, &priort, t, &vec_tensor(eps), &s).unwrap();
            let v = as_vec(&y);
            for i in 0..n {
                sum[i] += v[i];
                sum_sq[i] += (v[i] - want_mean[i]).powi(2);
            }
            sum_cross += (v[0] - want_mean[0]) * (v[1] - want_mean[1]);
        }
        let m = trials as f64;
        let se = (noise_var / m).sqrt();
        for i in 0..n {
            let mean = sum[i] / m;
            assert!(
                (mean - want_mean[i]).abs() < 4.0 * se,
                "dim {i}: mean {mean} vs {} (se {se})",
                want_mean[i]
            );
            let var = sum_sq[i] / m;
            assert!(
                (var / noise_var - 1.0).abs() < 0.05,
                "dim {i}: var {var} vs {noise_var}"
            );
        }
        assert!(
            (sum_cross / m).abs() < 0.05 * noise_var,
            "off-diagonal covariance too large"
        );
    }

    #[test]
    fn sampler_zero_denoiser_matches_closed_form_and_prior_dominates() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let prior = vec_tensor(vec![0.9, 0.1]);
        let mut zero_den =
            |y: &Tensor, _t: usize| -> Result<Tensor> { Ok(y.zeros_like()?) };
        // zero-noise draw: y_T = prior exactly
        let (y0, classes) =
            sample_prediction_from(&mut zero_den, prior.clone(), &prior, &s).unwrap();
        assert_eq!(classes, vec![0]);

        // independent closed-form iteration oracle
        let mut y = as_vec(&prior);
        let pr = as_vec(&prior);
        for t in (1..=20usize).rev() {
            let sab_t = s.alpha_bar(t).sqrt();
            let sab_p = s.alpha_bar(t - 1).sqrt();
            let x0: Vec<f64> = y
                .iter()
                .zip(&pr)
                .map(|(&yt, &p)| (yt - (1.0 - sab_t) * p) / sab_t)
                .collect();
            y = x0
                .iter()
                .zip(&pr)
                .map(|(&x, &p)| sab_p * x + (1.0 - sab_p) * p)
                .collect();
        }
        let got = as_vec(&y0);
        for i in 0..2 {
            assert!((got[i] - y[i]).abs() < 1e-9, "oracle mismatch {got:?} vs {y:?}");
        }
    }

    #[test]
    fn sampler_is_deterministic_and_batched() {
        let s = make_schedule(15, 1e-4, 0.02).unwrap();
        let prior = Tensor::from_vec(
            vec![0.8f64, 0.1, 0.1, 0.2, 0.3, 0.5],
            (2, 3),
            &Device::Cpu,
        )
        .unwrap();
        let den = |y: &Tensor, _t: usize| -> Result<Tensor> { Ok((y * 0.01)?) };
        let run = || {
            let mut rng = substream(9, Stream::Sampler, &[0]);
            sample_prediction(&mut den.clone(), &prior, &s, &mut rng).unwrap()
        };
        let (y_a, cls_a) = run();
        let (y_b, cls_b) = run();
        assert_eq!(as_vec(&y_a), as_vec(&y_b));
        assert_eq!(cls_a, cls_b);
        assert_eq!(cls_a.len(), 2);
    }

    #[test]
    fn sampler_rejects_nonfinite_denoiser() {
        let s = make_schedule(5, 1e-4, 0.02).unwrap();
        let prior = vec_tensor(vec![0.5, 0.5]);
        let mut bad = |y: &Tensor, t: usize| -> Result<Tensor> {
            if t == 3 {
                Ok((y * f64::NAN)?)
            } else {
                Ok(y.zeros_like()?)
            }
        };
        let err = sample_prediction_from(&mut bad, prior.clone(), &prior, &s).unwrap_err();
        match err {
            VeinError::Sampling { step } => assert_eq!(step, 3),
            other => panic!("expected sampling error, got {other}"),
        }
    }

    #[test]
    fn prior_validation() {
        assert!(validate_prior(&vec_tensor(vec![0.5, 0.5])).is_ok());
        assert!(validate_prior(&vec_tensor(vec![0.6, 0.6])).is_err());
        assert!(validate_prior(&vec_tensor(vec![-0.1, 1.1])).is_err());
        let batch = Tensor::from_vec(vec![0.3f64, 0.7, 1.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        assert!(validate_prior(&batch).is_ok());
    }
}
