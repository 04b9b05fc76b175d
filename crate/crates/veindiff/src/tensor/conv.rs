//! Same-padding convolutions as candle custom ops.
//!
//! All convolutions here are stride-1 cross-correlations with zero padding
//! `k/2` so spatial dimensions are preserved; stride-2 layers subsample the
//! stride-1 result via [`subsample2`], which is equivalent to a strided
//! convolution with the same padding.
//!
//! The ubiquitous f32 3×3 case runs on a hand-written AVX-512 kernel over a
//! packed, padded layout (rows padded to `align16(W) + 16` so 16-lane loads
//! never leave the buffer). Every other case — other kernel sizes, f64 for
//! finite-difference tests, machines without AVX-512 — takes a scalar path
//! with a different loop structure, which doubles as the oracle the AVX
//! kernels are tested against.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[inline]
fn align16(x: usize) -> usize {
    x.div_ceil(16) * 16
}

fn avx512_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE.get_or_init(|| std::arch::is_x86_feature_detected!("avx512f"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Dims of a contiguous (B, C, H, W) activation and (Co, Ci, kh, kw) weight.
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn check_dims(l1: &Layout, l2: &Layout, kh: usize, kw: usize) -> Result<ConvDims> {
    let xd = l1.shape().dims();
    let wd = l2.shape().dims();
    if xd.len() != 4 || wd.len() != 4 {
        bail!("conv expects 4-D input and weight, got {xd:?} and {wd:?}");
    }
    if wd[2] != kh || wd[3] != kw || kh % 2 == 0 || kw % 2 == 0 {
        bail!("conv kernel must be odd {kh}x{kw}, weight is {wd:?}");
    }
    if xd[1] != wd[1] {
        bail!("conv channel mismatch: input {xd:?} vs weight {wd:?}");
    }
    Ok(ConvDims {
        b: xd[0],
        cin: xd[1],
        cout: wd[0],
        h: xd[2],
        w: xd[3],
    })
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("conv requires contiguous {what}"),
    }
}

/// Scalar same-padding cross-correlation, kernel-offset-outer loop order.
fn conv_same_scalar<T>(x: &[T], w: &[T], d: &ConvDims, kh: usize, kw: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    let (ph, pw) = (kh / 2, kw / 2);
    let (h, wd) = (d.h, d.w);
    let mut out = vec![T::default(); d.b * d.cout * h * wd];
    for bi in 0..d.b {
        for co in 0..d.cout {
            let ob = (bi * d.cout + co) * h * wd;
            for ci in 0..d.cin {
                let xb = (bi * d.cin + ci) * h * wd;
                let wb = (co * d.cin + ci) * kh * kw;
                for ky in 0..kh {
                    let y0 = ph.saturating_sub(ky);
                    let y1 = (h + ph).saturating_sub(ky).min(h);
                    for kx in 0..kw {
                        let wv = w[wb + ky * kw + kx];
                        let x0 = pw.saturating_sub(kx);
                        let x1 = (wd + pw).saturating_sub(kx).min(wd);
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let orow = ob + y * wd;
                            let irow = xb + iy * wd;
                            for xx in x0..x1 {
                                out[orow + xx] += wv * x[irow + xx + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scalar weight gradient: dW[co,ci,ky,kx] = Σ dY[b,co,y,x]·Xpad[b,ci,y+ky,x+kx].
fn conv_dw_scalar<T>(x: &[T], dy: &[T], d: &ConvDims, kh: usize, kw: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    let (ph, pw) = (kh / 2, kw / 2);
    let (h, wd) = (d.h, d.w);
    let mut dw = vec![T::default(); d.cout * d.cin * kh * kw];
    for bi in 0..d.b {
        for co in 0..d.cout {
            let gb = (bi * d.cout + co) * h * wd;
            for ci in 0..d.cin {
                let xb = (bi * d.cin + ci) * h * wd;
                let wb = (co * d.cin + ci) * kh * kw;
                for ky in 0..kh {
                    let y0 = ph.saturating_sub(ky);
                    let y1 = (h + ph).saturating_sub(ky).min(h);
                    for kx in 0..kw {
                        let x0 = pw.saturating_sub(kx);
                        let x1 = (wd + pw).saturating_sub(kx).min(wd);
                        let mut acc = T::default();
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let grow = gb + y * wd;
                            let irow = xb + iy * wd;
                            for xx in x0..x1 {
                                acc += dy[grow + xx] * x[irow + xx + kx - pw];
                            }
                        }
                        dw[wb + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Pack one sample (Cin, H, W) into the padded AVX layout (Cin, H+2, Ws)
/// with one zero pad row top/bottom, one zero pad column left, and zeroed
/// slack columns on the right. The buffer is reused across samples; only
/// the real columns are rewritten, pad stays zero.
#[cfg(target_arch = "x86_64")]
fn pack_padded(x: &[f32], cin: usize, h: usize, w: usize, ws: usize, buf: &mut [f32]) {
    let hp = h + 2;
    debug_assert_eq!(buf.len(), cin * hp * ws);
    for ci in 0..cin {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..][..w];
            let dst = &mut buf[ci * hp * ws + (y + 1) * ws + 1..][..w];
            dst.copy_from_slice(src);
        }
    }
}

/// Pack dY (Cout, H, W) rows into (Cout, H, Wos) zeroing slack columns so the
/// dW kernel's full-width loads only see real gradient values.
#[cfg(target_arch = "x86_64")]
fn pack_rows(dy: &[f32], cout: usize, h: usize, w: usize, wos: usize, buf: &mut [f32]) {
    debug_assert_eq!(buf.len(), cout * h * wos);
    for c in 0..cout {
        for y in 0..h {
            let src = &dy[(c * h + y) * w..][..w];
            let dst = &mut buf[(c * h + y) * wos..][..w];
            dst.copy_from_slice(src);
        }
    }
}

/// AVX-512 3×3 forward over the packed layout; four output channels per
/// block, 16 output columns per iteration, weights broadcast per tap.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn conv3x3_fwd_avx(
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
    cin: usize,
    cout_p: usize,
    h: usize,
    wo: usize,
) {
    use core::arch::x86_64::*;
    let ws = align16(wo) + 16;
    let wos = align16(wo);
    let hp = h + 2;
    let xp = x.as_ptr();
    let wp = w.as_ptr();
    let op = out.as_mut_ptr();
    for co in (0..cout_p).step_by(4) {
        for y in 0..h {
            for x0 in (0..wo).step_by(16) {
                let mut a0 = _mm512_setzero_ps();
                let mut a1 = _mm512_setzero_ps();
                let mut a2 = _mm512_setzero_ps();
                let mut a3 = _mm512_setzero_ps();
                for ci in 0..cin {
                    let xb = xp.add(ci * hp * ws + y * ws + x0);
                    let wb = wp.add(co * cin * 9 + ci * 9);
                    for dy in 0..3 {
                        let row = xb.add(dy * ws);
                        for dx in 0..3 {
                            let xv = _mm512_loadu_ps(row.add(dx));
                            let k = dy * 3 + dx;
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(*wb.add(k)), xv, a0);
                            a1 = _mm512_fmadd_ps(_mm512_set1_ps(*wb.add(cin * 9 + k)), xv, a1);
                            a2 = _mm512_fmadd_ps(_mm512_set1_ps(*wb.add(2 * cin * 9 + k)), xv, a2);
                            a3 = _mm512_fmadd_ps(_mm512_set1_ps(*wb.add(3 * cin * 9 + k)), xv, a3);
                        }
                    }
                }
                let ob = y * wos + x0;
                _mm512_storeu_ps(op.add(co * h * wos + ob), a0);
                _mm512_storeu_ps(op.add((co + 1) * h * wos + ob), a1);
                _mm512_storeu_ps(op.add((co + 2) * h * wos + ob), a2);
                _mm512_storeu_ps(op.add((co + 3) * h * wos + ob), a3);
            }
        }
    }
}

/// AVX-512 3×3 weight gradient: nine vector accumulators, one per kernel tap,
/// horizontally reduced once per (co, ci) pair. Requires slack columns of the
/// packed dY to be zero.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn conv3x3_dw_avx(
    x: &[f32],
    g: &[f32],
    dw: &mut [f32],
    cin: usize,
    cout: usize,
    h: usize,
    wo: usize,
) {
    use core::arch::x86_64::*;
    let ws = align16(wo) + 16;
    let wos = align16(wo);
    let hp = h + 2;
    let xp = x.as_ptr();
    let gp = g.as_ptr();
    for co in 0..cout {
        for ci in 0..cin {
            let mut acc = [_mm512_setzero_ps(); 9];
            for y in 0..h {
                let gb = gp.add(co * h * wos + y * wos);
                let xb = xp.add(ci * hp * ws + y * ws);
                for x0 in (0..wo).step_by(16) {
                    let gv = _mm512_loadu_ps(gb.add(x0));
                    let r0 = xb.add(x0);
                    let r1 = xb.add(ws + x0);
                    let r2 = xb.add(2 * ws + x0);
                    acc[0] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0), acc[0]);
                    acc[1] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0.add(1)), acc[1]);
                    acc[2] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0.add(2)), acc[2]);
                    acc[3] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1), acc[3]);
                    acc[4] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1.add(1)), acc[4]);
                    acc[5] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1.add(2)), acc[5]);
                    acc[6] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2), acc[6]);
                    acc[7] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2.add(1)), acc[7]);
                    acc[8] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2.add(2)), acc[8]);
                }
            }
            let base = co * cin * 9 + ci * 9;
            for k in 0..9 {
                dw[base + k] += _mm512_reduce_add_ps(acc[k]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn conv3x3_fwd_avx_batched(x: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let (h, wo) = (d.h, d.w);
    let ws = align16(wo) + 16;
    let wos = align16(wo);
    let cout_p = d.cout.div_ceil(4) * 4;
    let mut w_p = vec![0f32; cout_p * d.cin * 9];
    w_p[..d.cout * d.cin * 9].copy_from_slice(w);
    let mut packed = vec![0f32; d.cin * (h + 2) * ws];
    let mut out_p = vec![0f32; cout_p * h * wos];
    let mut out = vec![0f32; d.b * d.cout * h * wo];
    for bi in 0..d.b {
        pack_padded(&x[bi * d.cin * h * wo..], d.cin, h, wo, ws, &mut packed);
        unsafe { conv3x3_fwd_avx(&packed, &w_p, &mut out_p, d.cin, cout_p, h, wo) };
        for co in 0..d.cout {
            for y in 0..h {
                let src = &out_p[(co * h + y) * wos..][..wo];
                let dst = &mut out[((bi * d.cout + co) * h + y) * wo..][..wo];
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
fn conv3x3_dw_avx_batched(x: &[f32], dy: &[f32], d: &ConvDims) -> Vec<f32> {
    let (h, wo) = (d.h, d.w);
    let ws = align16(wo) + 16;
    let wos = align16(wo);
    let mut packed_x = vec![0f32; d.cin * (h + 2) * ws];
    let mut packed_g = vec![0f32; d.cout * h * wos];
    let mut dw = vec![0f32; d.cout * d.cin * 9];
    for bi in 0..d.b {
        pack_padded(&x[bi * d.cin * h * wo..], d.cin, h, wo, ws, &mut packed_x);
        pack_rows(&dy[bi * d.cout * h * wo..], d.cout, h, wo, wos, &mut packed_g);
        unsafe { conv3x3_dw_avx(&packed_x, &packed_g, &mut dw, d.cin, d.cout, h, wo) };
    }
    dw
}

/// Same-padding stride-1 convolution forward op with full backward.
struct ConvSame {
    kh: usize,
    kw: usize,
}

impl CustomOp2 for ConvSame {
    fn name(&self) -> &'static str {
        "conv-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = check_dims(l1, l2, self.kh, self.kw)?;
        let shape = Shape::from((d.b, d.cout, d.h, d.w));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let w = contiguous_slice(w, l2, "weight")?;
                #[cfg(target_arch = "x86_64")]
                let out = if self.kh == 3 && self.kw == 3 && avx512_available() {
                    conv3x3_fwd_avx_batched(x, w, &d)
                } else {
                    conv_same_scalar(x, w, &d, self.kh, self.kw)
                };
                #[cfg(not(target_arch = "x86_64"))]
                let out = conv_same_scalar(x, w, &d, self.kh, self.kw);
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let w = contiguous_slice(w, l2, "weight")?;
                Ok((
                    CpuStorage::F64(conv_same_scalar(x, w, &d, self.kh, self.kw)),
                    shape,
                ))
            }
            _ => bail!("conv-same supports f32/f64 with matching dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        // dX = conv_same(dY, W flipped spatially with channels swapped)
        let wt = w.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(
            &wt,
            &ConvSame {
                kh: self.kh,
                kw: self.kw,
            },
        )?;
        let dw = x.contiguous()?.apply_op2_no_bwd(
            &dy,
            &ConvSameDw {
                kh: self.kh,
                kw: self.kw,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Weight-gradient op: (X, dY) -> dW. Only ever applied inside
/// [`ConvSame::bwd`], so it carries no backward of its own.
struct ConvSameDw {
    kh: usize,
    kw: usize,
}

impl CustomOp2 for ConvSameDw {
    fn name(&self) -> &'static str {
        "conv-same-dw"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let xd = l1.shape().dims();
        let gd = l2.shape().dims();
        if xd.len() != 4 || gd.len() != 4 || xd[0] != gd[0] || xd[2..] != gd[2..] {
            bail!("conv-same-dw shape mismatch: {xd:?} vs {gd:?}");
        }
        let d = ConvDims {
            b: xd[0],
            cin: xd[1],
            cout: gd[1],
            h: xd[2],
            w: xd[3],
        };
        let shape = Shape::from((d.cout, d.cin, self.kh, self.kw));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let g = contiguous_slice(g, l2, "grad")?;
                #[cfg(target_arch = "x86_64")]
                let dw = if self.kh == 3 && self.kw == 3 && avx512_available() {
                    conv3x3_dw_avx_batched(x, g, &d)
                } else {
                    conv_dw_scalar(x, g, &d, self.kh, self.kw)
                };
                #[cfg(not(target_arch = "x86_64"))]
                let dw = conv_dw_scalar(x, g, &d, self.kh, self.kw);
                Ok((CpuStorage::F32(dw), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let g = contiguous_slice(g, l2, "grad")?;
                Ok((
                    CpuStorage::F64(conv_dw_scalar(x, g, &d, self.kh, self.kw)),
                    shape,
                ))
            }
            _ => bail!("conv-same-dw supports f32/f64 with matching dtypes"),
        }
    }
}

/// Stride-1 same-padding convolution: `x (B,Ci,H,W) ⊛ w (Co,Ci,kh,kw)` with
/// odd kernel sizes, differentiable in both arguments.
pub fn conv_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let kh = w.dim(2)?;
    let kw = w.dim(3)?;
    x.contiguous()?
        .apply_op2(&w.contiguous()?, ConvSame { kh, kw })
}

/// Pointwise convolution as a batched matmul: `w (Co,Ci)` applied across all
/// spatial positions of `x (B,Ci,H,W)`.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, _c, h, wd) = x.dims4()?;
    let cout = w.dim(0)?;
    let flat = x.flatten_from(2)?;
    let out = w.unsqueeze(0)?.broadcast_matmul(&flat)?;
    out.reshape((b, cout, h, wd))
}

/// Depthwise same-padding convolution: each channel of `x (B,C,H,W)` is
/// convolved with its own `k (C,kh,kw)` slice. Differentiable in both.
pub fn depthwise_same(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let kh = k.dim(1)?;
    let kw = k.dim(2)?;
    x.contiguous()?
        .apply_op2(&k.contiguous()?, DepthwiseSame { kh, kw })
}

fn depthwise_scalar<T>(
    x: &[T],
    k: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::default(); b * c * h * w];
    for bc in 0..b * c {
        let ci = bc % c;
        let xb = bc * h * w;
        let kb = ci * kh * kw;
        for ky in 0..kh {
            let y0 = ph.saturating_sub(ky);
            let y1 = (h + ph).saturating_sub(ky).min(h);
            for kx in 0..kw {
                let kv = k[kb + ky * kw + kx];
                let x0 = pw.saturating_sub(kx);
                let x1 = (w + pw).saturating_sub(kx).min(w);
                for y in y0..y1 {
                    let iy = y + ky - ph;
                    for xx in x0..x1 {
                        out[xb + y * w + xx] += kv * x[xb + iy * w + xx + kx - pw];
                    }
                }
            }
        }
    }
    out
}

fn depthwise_dk_scalar<T>(
    x: &[T],
    dy: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dk = vec![T::default(); c * kh * kw];
    for bc in 0..b * c {
        let ci = bc % c;
        let base = bc * h * w;
        for ky in 0..kh {
            let y0 = ph.saturating_sub(ky);
            let y1 = (h + ph).saturating_sub(ky).min(h);
            for kx in 0..kw {
                let x0 = pw.saturating_sub(kx);
                let x1 = (w + pw).saturating_sub(kx).min(w);
                let mut acc = T::default();
                for y in y0..y1 {
                    let iy = y + ky - ph;
                    for xx in x0..x1 {
                        acc += dy[base + y * w + xx] * x[base + iy * w + xx + kx - pw];
                    }
                }
                dk[ci * kh * kw + ky * kw + kx] += acc;
            }
        }
    }
    dk
}

struct DepthwiseSame {
    kh: usize,
    kw: usize,
}

fn depthwise_dims(l1: &Layout, l2: &Layout, kh: usize, kw: usize) -> Result<(usize, usize, usize, usize)> {
    let xd = l1.shape().dims();
    let kd = l2.shape().dims();
    if xd.len() != 4 || kd.len() != 3 {
        bail!("depthwise expects (B,C,H,W) and (C,kh,kw), got {xd:?} and {kd:?}");
    }
    if kd[0] != xd[1] || kd[1] != kh || kd[2] != kw || kh % 2 == 0 || kw % 2 == 0 {
        bail!("depthwise kernel mismatch: input {xd:?}, kernel {kd:?} ({kh}x{kw})");
    }
    Ok((xd[0], xd[1], xd[2], xd[3]))
}

impl CustomOp2 for DepthwiseSame {
    fn name(&self) -> &'static str {
        "depthwise-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = depthwise_dims(l1, l2, self.kh, self.kw)?;
        let shape = Shape::from((b, c, h, w));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let k = contiguous_slice(k, l2, "kernel")?;
                Ok((
                    CpuStorage::F32(depthwise_scalar(x, k, b, c, h, w, self.kh, self.kw)),
                    shape,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let k = contiguous_slice(k, l2, "kernel")?;
                Ok((
                    CpuStorage::F64(depthwise_scalar(x, k, b, c, h, w, self.kh, self.kw)),
                    shape,
                ))
            }
            _ => bail!("depthwise-same supports f32/f64 with matching dtypes"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let kf = k.flip(&[1, 2])?.contiguous()?;
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(
            &kf,
            &DepthwiseSame {
                kh: self.kh,
                kw: self.kw,
            },
        )?;
        let dk = x.contiguous()?.apply_op2_no_bwd(
            &dy,
            &DepthwiseDk {
                kh: self.kh,
                kw: self.kw,
            },
        )?;
        Ok((Some(dx), Some(dk)))
    }
}

struct DepthwiseDk {
    kh: usize,
    kw: usize,
}

impl CustomOp2 for DepthwiseDk {
    fn name(&self) -> &'static str {
        "depthwise-dk"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let xd = l1.shape().dims();
        let gd = l2.shape().dims();
        if xd != gd || xd.len() != 4 {
            bail!("depthwise-dk shape mismatch: {xd:?} vs {gd:?}");
        }
        let (b, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let shape = Shape::from((c, self.kh, self.kw));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let g = contiguous_slice(g, l2, "grad")?;
                Ok((
                    CpuStorage::F32(depthwise_dk_scalar(x, g, b, c, h, w, self.kh, self.kw)),
                    shape,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let x = contiguous_slice(x, l1, "input")?;
                let g = contiguous_slice(g, l2, "grad")?;
                Ok((
                    CpuStorage::F64(depthwise_dk_scalar(x, g, b, c, h, w, self.kh, self.kw)),
                    shape,
                ))
            }
            _ => bail!("depthwise-dk supports f32/f64 with matching dtypes"),
        }
    }
}

/// Keep every second row and column of a (B,C,H,W) tensor, starting at 0.
/// `conv_same` followed by this equals a stride-2 padded convolution.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    let idx_h: Vec<u32> = (0..h as u32).step_by(2).collect();
    let idx_w: Vec<u32> = (0..w as u32).step_by(2).collect();
    let ih = Tensor::from_vec(idx_h, ((h + 1) / 2,), x.device())?;
    let iw = Tensor::from_vec(idx_w, ((w + 1) / 2,), x.device())?;
    x.index_select(&ih, 2)?.index_select(&iw, 3)
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    x.upsample_nearest2d(2 * h, 2 * w)
}
