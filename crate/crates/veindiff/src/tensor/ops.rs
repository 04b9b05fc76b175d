//! Numerically stable elementwise building blocks and Fourier helpers.

use candle_core::{bail, CpuStorage, CustomOp2, DType, Device, Layout, Result, Shape, Tensor};

/// Stable softplus: `max(x, 0) + log(1 + exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

/// Stable elementwise binary cross-entropy with logits:
/// `max(z, 0) - z*y + log(1 + exp(-|z|))`. Mean over all elements.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_elem = ((logits.relu()? - logits.mul(targets)?)? + tail)?;
    per_elem.mean_all()
}

/// Log-sum-exp over the last dimension, keeping it with size 1.
/// Shifted by the detached row max for stability.
pub fn log_sum_exp_keepdim(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let m = x.max_keepdim(last)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let s = shifted.exp()?.sum_keepdim(last)?.log()?;
    s + m
}

/// Row-vector linear layer: `x (.., F_in) @ w^T (F_in, F_out) + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    y.broadcast_add(b)
}

/// Four-quadrant arctangent `atan2(y, x)` with manual backward
/// (`d/dy = x/r²`, `d/dx = -y/r²`); f32 and f64.
pub fn atan2(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)
}

struct Atan2;

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            bail!(
                "atan2 shape mismatch: {:?} vs {:?}",
                l1.shape(),
                l2.shape()
            );
        }
        let shape = l1.shape().clone();
        let range = |l: &Layout| {
            l.contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("atan2 requires contiguous input".into()))
        };
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (s1o, e1) = range(l1)?;
                let (s2o, e2) = range(l2)?;
                let out: Vec<f32> = a[s1o..e1]
                    .iter()
                    .zip(&b[s2o..e2])
                    .map(|(&yy, &xx)| yy.atan2(xx))
                    .collect();
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (s1o, e1) = range(l1)?;
                let (s2o, e2) = range(l2)?;
                let out: Vec<f64> = a[s1o..e1]
                    .iter()
                    .zip(&b[s2o..e2])
                    .map(|(&yy, &xx)| yy.atan2(xx))
                    .collect();
                Ok((CpuStorage::F64(out), shape))
            }
            _ => bail!("atan2 supports f32/f64 with matching dtypes"),
        }
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (y.sqr()? + x.sqr()?)?;
        let dy = grad.mul(&x.div(&r2)?)?;
        let dx = grad.mul(&y.div(&r2)?.neg()?)?;
        Ok((Some(dy), Some(dx)))
    }
}

/// Constant DFT matrices `(C, S)` with `C[j,k] = cos(2πjk/n)`,
/// `S[j,k] = sin(2πjk/n)`. For a row vector `x` of length `n`,
/// `Re(DFT x) = x @ C` and `Im(DFT x) = -(x @ S)`.
pub fn dft_matrices(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut cos_v = Vec::with_capacity(n * n);
    let mut sin_v = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            let ang = 2.0 * std::f64::consts::PI * (j as f64) * (k as f64) / (n as f64);
            cos_v.push(ang.cos());
            sin_v.push(ang.sin());
        }
    }
    let c = Tensor::from_vec(cos_v, (n, n), device)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(sin_v, (n, n), device)?.to_dtype(dtype)?;
    Ok((c, s))
}

/// DFT of rows: `x (.., n)` -> `(re, im)`, each `(.., n)`, using matmuls so
/// gradients flow.
pub fn dft_rows(x: &Tensor, cos_m: &Tensor, sin_m: &Tensor) -> Result<(Tensor, Tensor)> {
    let re = x.broadcast_matmul(cos_m)?;
    let im = x.broadcast_matmul(sin_m)?.neg()?;
    Ok((re, im))
}

/// Global average pooling over the two spatial dims of (B, C, H, W).
pub fn gap2d(x: &Tensor) -> Result<Tensor> {
    let (b, c, _h, _w) = x.dims4()?;
    x.mean_keepdim((2, 3))?.reshape((b, c))
}

/// Sigmoid via the stable softplus identity: `σ(x) = exp(-softplus(-x))`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(&x.neg()?)?.neg()?.exp()
}
