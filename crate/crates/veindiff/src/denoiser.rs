//! Denoising network ε_d with timestep conditioning and the mask-condition
//! pathway that injects segmentation semantics.
//!
//! Pipeline (Eq. 7): `f_d = Lin_in([y_t, ŷ_v])`, encoder
//! `E = softplus(BN(FC1((f_d + cond) ⊙ temb)))`, decoder
//! `D = softplus(BN(FC2(·) ⊙ temb))`, output `ε̂ = Lin_out(d_2)` with no
//! normalization/activation on the head. `d_1 = f_d` and `d_2` (last hidden)
//! are exposed for the SD-Former.
//!
//! The mask condition (Eq. 4–6) enhances the segmentation feature map with a
//! learnable Gaussian smooth + elementwise max, applies channel-then-spatial
//! attention, max-pools to 8×8 and projects with a 1×1 convolution so the
//! flattened vector length equals the denoiser latent width (the condition
//! is added to `f_d`, so the two widths must match; hence `D_c ≡ 0 mod 64`).

use candle_core::Tensor;

use crate::error::{Result, VeinError};
use crate::tensor::{conv, norm::BatchNorm, ops, Init, ParamStore};

/// Sinusoidal timestep features before the learnable affine map:
/// interleaved `(sin(t/ω_k), cos(t/ω_k))` over `d/2` geometric frequencies
/// `ω_k = 10000^(2k/d)`.
pub fn timestep_features(t: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(VeinError::config(format!(
            "timestep embedding dimension must be even and positive, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let omega = 10_000f64.powf(2.0 * k as f64 / d as f64);
        let x = t as f64 / omega;
        out.push(x.sin());
        out.push(x.cos());
    }
    Ok(out)
}

/// Learnable affine map over the sinusoidal features.
pub struct TimestepEmbed {
    w: Tensor,
    b: Tensor,
    d: usize,
}

impl TimestepEmbed {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(VeinError::config("timestep embedding dimension must be even"));
        }
        let w = store.param(
            &format!("{prefix}.w"),
            &[d, d],
            Init::XavierUniform { fan_in: d, fan_out: d },
        )?;
        let b = store.param(&format!("{prefix}.b"), &[d], Init::Zeros)?;
        Ok(Self { w, b, d })
    }

    /// Embeddings for a batch of timesteps, shape `(B, D)`.
    pub fn embed_batch(&self, ts: &[usize]) -> Result<Tensor> {
        if ts.is_empty() {
            return Err(VeinError::invariant("empty timestep batch"));
        }
        let mut flat = Vec::with_capacity(ts.len() * self.d);
        for &t in ts {
            flat.extend(timestep_features(t, self.d)?);
        }
        let feats = Tensor::from_vec(flat, (ts.len(), self.d), self.w.device())?
            .to_dtype(self.w.dtype())?;
        Ok(ops::linear(&feats, &self.w, &self.b)?)
    }
}

/// Channel-then-spatial attention (the cited CBAM construction): channel
/// gate from a shared reduction-`r` MLP over average- and max-pooled
/// descriptors; spatial gate from a 7×7 convolution over the channel mean
/// and max maps.
pub struct Cbam {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    spatial_w: Tensor,
    spatial_b: Tensor,
}

impl Cbam {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        let w1 = store.param(
            &format!("{prefix}.mlp1.w"),
            &[hidden, channels],
            Init::KaimingNormal { fan_in: channels },
        )?;
        let b1 = store.param(&format!("{prefix}.mlp1.b"), &[hidden], Init::Zeros)?;
        let w2 = store.param(
            &format!("{prefix}.mlp2.w"),
            &[channels, hidden],
            Init::KaimingNormal { fan_in: hidden },
        )?;
        let b2 = store.param(&format!("{prefix}.mlp2.b"), &[channels], Init::Zeros)?;
        let spatial_w = store.param(
            &format!("{prefix}.spatial.w"),
            &[1, 2, 7, 7],
            Init::KaimingNormal { fan_in: 2 * 49 },
        )?;
        let spatial_b = store.param(&format!("{prefix}.spatial.b"), &[1], Init::Zeros)?;
        Ok(Self { w1, b1, w2, b2, spatial_w, spatial_b })
    }

    fn mlp(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = ops::linear(pooled, &self.w1, &self.b1)?.relu()?;
        Ok(ops::linear(&h, &self.w2, &self.b2)?)
    }

    /// Channel gate, shape `(B, C, 1, 1)`.
    pub fn channel_gate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _h, _w) = x.dims4()?;
        let avg = ops::gap2d(x)?;
        let mx = x.max(3)?.max(2)?;
        let gate = ops::sigmoid(&(self.mlp(&avg)? + self.mlp(&mx)?)?)?;
        Ok(gate.reshape((b, c, 1, 1))?)
    }

    /// Spatial gate, shape `(B, 1, H, W)`.
    pub fn spatial_gate(&self, x: &Tensor) -> Result<Tensor> {
        let mean_c = x.mean_keepdim(1)?;
        let max_c = x.max_keepdim(1)?;
        let stacked = Tensor::cat(&[mean_c, max_c], 1)?;
        let conv = conv::conv_same(&stacked, &self.spatial_w)?;
        let conv = conv.broadcast_add(&self.spatial_b.reshape((1, 1, 1, 1))?)?;
        Ok(ops::sigmoid(&conv)?)
    }

    /// `f'' = M_s(f') ⊙ f'` where `f' = M_c(f) ⊙ f`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fc1 = x.broadcast_mul(&self.channel_gate(x)?)?;
        Ok(fc1.broadcast_mul(&self.spatial_gate(&fc1)?)?)
    }
}

/// Discrete 5×5 Gaussian (σ = 1) normalized to sum 1, replicated per channel.
fn gaussian_kernel_init(channels: usize) -> Vec<f64> {
    let mut base = Vec::with_capacity(25);
    let mut sum = 0.0;
    for y in -2i32..=2 {
        for x in -2i32..=2 {
            let v = (-f64::from(y * y + x * x) / 2.0).exp();
            base.push(v);
            sum += v;
        }
    }
    for v in &mut base {
        *v /= sum;
    }
    let mut all = Vec::with_capacity(channels * 25);
    for _ in 0..channels {
        all.extend_from_slice(&base);
    }
    all
}

/// Mask-condition pathway (Eq. 4–6): learnable Gaussian smooth + elementwise
/// max, CBAM, adaptive max-pool to 8×8, 1×1 convolution to `d_c/64`
/// channels, flatten to the `d_c`-dim condition vector.
pub struct MaskCondition {
    gauss: Tensor,
    cbam: Cbam,
    conv_w: Tensor,
    conv_b: Tensor,
    channels: usize,
    d_c: usize,
}

impl MaskCondition {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, d_c: usize) -> Result<Self> {
        if d_c % 64 != 0 || d_c == 0 {
            return Err(VeinError::config(format!(
                "condition dimension must be a positive multiple of 64 (8x8 pool), got {d_c}"
            )));
        }
        let gauss = store.param(
            &format!("{prefix}.gauss"),
            &[channels, 5, 5],
            Init::Fixed(gaussian_kernel_init(channels)),
        )?;
        let cbam = Cbam::new(store, &format!("{prefix}.cbam"), channels, 4)?;
        let c_out = d_c / 64;
        let conv_w = store.param(
            &format!("{prefix}.proj.w"),
            &[c_out, channels],
            Init::XavierUniform { fan_in: channels, fan_out: c_out },
        )?;
        let conv_b = store.param(&format!("{prefix}.proj.b"), &[c_out], Init::Zeros)?;
        Ok(Self { gauss, cbam, conv_w, conv_b, channels, d_c })
    }

    /// `f_c = max(f_s ∗ k_Gauss, f_s)`, elementwise (never below `f_s`).
    fn enhanced(&self, f_s: &Tensor) -> Result<Tensor> {
        let smoothed = conv::depthwise_same(f_s, &self.gauss)?;
        Ok((f_s + (smoothed - f_s)?.relu()?)?)
    }

    pub fn output_dim(&self) -> usize {
        self.d_c
    }

    /// Condition vector, shape `(B, d_c)`.
    pub fn forward(&self, f_s: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = f_s.dims4()?;
        if c != self.channels || h % 8 != 0 || w % 8 != 0 {
            return Err(VeinError::invariant(format!(
                "mask_condition expects (B, {}, 8k, 8k), got ({b}, {c}, {h}, {w})",
                self.channels
            )));
        }
        let f_c = self.enhanced(f_s)?;
        let f_cpp = self.cbam.forward(&f_c)?;
        let pooled = f_cpp.max_pool2d((h / 8, w / 8))?;
        let projected = conv::conv1x1(&pooled, &self.conv_w)?
            .broadcast_add(&self.conv_b.reshape((1, self.d_c / 64, 1, 1))?)?;
        Ok(projected.reshape((b, self.d_c))?)
    }
}

/// Everything `denoise_forward` emits: the noise estimate plus the first and
/// last hidden embeddings consumed by the SD-Former.
pub struct DenoiseOut {
    pub eps_hat: Tensor,
    pub d1: Tensor,
    pub d2: Tensor,
}

/// FC denoiser ε_d (Eq. 7).
pub struct DenoiseNet {
    in_w: Tensor,
    in_b: Tensor,
    temb: TimestepEmbed,
    fc1_w: Tensor,
    fc1_b: Tensor,
    bn1: BatchNorm,
    fc2_w: Tensor,
    fc2_b: Tensor,
    bn2: BatchNorm,
    out_w: Tensor,
    out_b: Tensor,
    n_classes: usize,
    d_lat: usize,
}

impl DenoiseNet {
    pub fn new(store: &mut ParamStore, prefix: &str, n_classes: usize, d_lat: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(VeinError::config("denoiser needs at least one class"));
        }
        let lin = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<(Tensor, Tensor)> {
            let w = store.param(
                &format!("{prefix}.{name}.w"),
                &[fan_out, fan_in],
                Init::KaimingNormal { fan_in },
            )?;
            let b = store.param(&format!("{prefix}.{name}.b"), &[fan_out], Init::Zeros)?;
            Ok((w, b))
        };
        let (in_w, in_b) = lin(store, "lin_in", 2 * n_classes, d_lat)?;
        let temb = TimestepEmbed::new(store, &format!("{prefix}.temb"), d_lat)?;
        let (fc1_w, fc1_b) = lin(store, "fc1", d_lat, d_lat)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), d_lat)?;
        let (fc2_w, fc2_b) = lin(store, "fc2", d_lat, d_lat)?;
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), d_lat)?;
        let (out_w, out_b) = lin(store, "lin_out", d_lat, n_classes)?;
        Ok(Self {
            in_w, in_b, temb, fc1_w, fc1_b, bn1, fc2_w, fc2_b, bn2, out_w, out_b,
            n_classes, d_lat,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.d_lat
    }

    /// Predict ε̂ for a batch. `y_t`, `prior`: `(B, N)`; `cond`: optional
    /// `(B, D_lat)` (absent = unconditioned, identical to a zero vector);
    /// `ts`: one timestep per row. `train` selects batch-norm behavior.
    pub fn forward(
        &self,
        y_t: &Tensor,
        prior: &Tensor,
        cond: Option<&Tensor>,
        ts: &[usize],
        train: bool,
    ) -> Result<DenoiseOut> {
        let (b, n) = y_t
            .dims2()
            .map_err(|_| VeinError::invariant("denoise_forward expects (B, N) inputs"))?;
        if n != self.n_classes || prior.dims() != y_t.dims() || ts.len() != b {
            return Err(VeinError::invariant(format!(
                "denoise_forward dims: y_t {:?}, prior {:?}, ts {}",
                y_t.dims(),
                prior.dims(),
                ts.len()
            )));
        }
        for (name, t) in [("y_t", y_t), ("prior", prior)] {
            check_finite(name, t)?;
        }
        if let Some(c) = cond {
            if c.dims() != [b, self.d_lat] {
                return Err(VeinError::invariant(format!(
                    "condition shape {:?}, expected ({b}, {})",
                    c.dims(),
                    self.d_lat
                )));
            }
            check_finite("cond", c)?;
        }

        let temb = self.temb.embed_batch(ts)?;
        let joint = Tensor::cat(&[y_t, prior], 1)?;
        let d1 = ops::linear(&joint, &self.in_w, &self.in_b)?;
        let mut h = match cond {
            Some(c) => (&d1 + c)?,
            None => d1.clone(),
        };
        h = h.mul(&temb)?;
        h = ops::linear(&h, &self.fc1_w, &self.fc1_b)?;
        h = ops::softplus(&self.bn1.forward(&h, train)?)?;
        h = ops::linear(&h, &self.fc2_w, &self.fc2_b)?;
        h = h.mul(&temb)?;
        let d2 = ops::softplus(&self.bn2.forward(&h, train)?)?;
        let eps_hat = ops::linear(&d2, &self.out_w, &self.out_b)?;
        Ok(DenoiseOut { eps_hat, d1, d2 })
    }
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use candle_core::{DType, Device, Var};
    use rand::Rng;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, 42)
    }

    fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn timestep_features_basics() {
        // t = 0: alternating (sin 0, cos 0) = (0, 1)
        let f = timestep_features(0, 8).unwrap();
        for (i, v) in f.iter().enumerate() {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, want, "index {i}");
        }
        assert!(timestep_features(3, 7).is_err());
        assert!(timestep_features(3, 0).is_err());
        // determinism
        assert_eq!(timestep_features(17, 16).unwrap(), timestep_features(17, 16).unwrap());
        // all t pairs in [0, 100] produce distinct embeddings
        let embs: Vec<Vec<f64>> = (0..=100).map(|t| timestep_features(t, 16).unwrap()).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let diff = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff > 1e-9, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn timestep_embed_shape_and_determinism() {
        let mut st = store();
        let emb = TimestepEmbed::new(&mut st, "temb", 12).unwrap();
        let a = emb.embed_batch(&[0, 5, 99]).unwrap();
        assert_eq!(a.dims(), &[3, 12]);
        let b = emb.embed_batch(&[0, 5, 99]).unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        assert!(emb.embed_batch(&[]).is_err());
    }

    #[test]
    fn cbam_saturated_gates_are_identity() {
        let mut st = store();
        let cbam = Cbam::new(&mut st, "cb", 4, 4).unwrap();
        // push both sigmoid gates to ~1 via huge biases
        let big = Tensor::full(40.0f64, (4,), &Device::Cpu).unwrap();
        st.set("cb.mlp2.b", &big).unwrap();
        let big1 = Tensor::full(40.0f64, (1,), &Device::Cpu).unwrap();
        st.set("cb.spatial.b", &big1).unwrap();
        let mut rng = substream(1, Stream::Diffusion, &[20]);
        let x = rand_t(&mut rng, &[2, 4, 8, 8]);
        let y = cbam.forward(&x).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = (
            x.flatten_all().unwrap().to_vec1().unwrap(),
            y.flatten_all().unwrap().to_vec1().unwrap(),
        );
        for i in 0..xs.len() {
            assert!((xs[i] - ys[i]).abs() < 1e-9, "saturated CBAM not identity at {i}");
        }
    }

    #[test]
    fn mask_condition_enhancement_and_zero_input() {
        let mut st = store();
        let mc = MaskCondition::new(&mut st, "cond", 4, 128).unwrap();
        let mut rng = substream(2, Stream::Diffusion, &[21]);
        let f_s = rand_t(&mut rng, &[2, 4, 16, 16]);
        // f_c >= f_s elementwise
        let f_c = mc.enhanced(&f_s).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = (
            f_s.flatten_all().unwrap().to_vec1().unwrap(),
            f_c.flatten_all().unwrap().to_vec1().unwrap(),
        );
        for i in 0..a.len() {
            assert!(b[i] >= a[i] - 1e-12, "enhancement dipped below input at {i}");
        }
        // shape contract
        let out = mc.forward(&f_s).unwrap();
        assert_eq!(out.dims(), &[2, 128]);
        // zero input -> zero condition (all biases zero at init)
        let zero = Tensor::zeros((2, 4, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let out0 = mc.forward(&zero).unwrap();
        let v: Vec<f64> = out0.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-12), "zero input gave nonzero condition");
        // invalid d_c rejected
        assert!(MaskCondition::new(&mut store(), "c2", 4, 100).is_err());
        // shape mismatch rejected
        assert!(mc.forward(&rand_t(&mut rng, &[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn mask_condition_gradient_matches_fd() {
        let mut st = store();
        let mc = MaskCondition::new(&mut st, "cond", 3, 64).unwrap();
        let mut rng = substream(3, Stream::Diffusion, &[22]);
        let at = rand_t(&mut rng, &[1, 3, 8, 8]);
        // weighted sum so every output coordinate matters
        let w: Vec<f64> = (0..64).map(|i| 0.05 * i as f64 - 1.3).collect();
        let wt = Tensor::from_vec(w, (1, 64), &Device::Cpu).unwrap();
        let f = |x: &Tensor| mc.forward(x).unwrap().mul(&wt).unwrap().sum_all().unwrap();

        let var = Var::from_tensor(&at).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let an: Vec<f64> = grads
            .get(var.as_tensor())
            .expect("missing grad")
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base: Vec<f64> = at.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let ev = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, at.dims(), &Device::Cpu).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (ev(eps) - ev(-eps)) / (2.0 * eps);
            let den = an[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((an[i] - fd).abs() / den);
        }
        assert!(worst <= 1e-4, "mask_condition grad rel err {worst}");
    }

    #[test]
    fn denoise_forward_shapes_and_cond_identity() {
        let mut st = store();
        let net = DenoiseNet::new(&mut st, "den", 12, 64).unwrap();
        let mut rng = substream(4, Stream::Diffusion, &[23]);
        let y_t = rand_t(&mut rng, &[3, 12]);
        let prior = rand_t(&mut rng, &[3, 12]);
        let out = net.forward(&y_t, &prior, None, &[5, 50, 99], false).unwrap();
        assert_eq!(out.eps_hat.dims(), &[3, 12]);
        assert_eq!(out.d1.dims(), &[3, 64]);
        assert_eq!(out.d2.dims(), &[3, 64]);

        // cond = None is exactly cond = zero vector
        let zero_cond = Tensor::zeros((3, 64), DType::F64, &Device::Cpu).unwrap();
        let out_zero = net
            .forward(&y_t, &prior, Some(&zero_cond), &[5, 50, 99], false)
            .unwrap();
        assert_eq!(
            out.eps_hat.to_vec2::<f64>().unwrap(),
            out_zero.eps_hat.to_vec2::<f64>().unwrap()
        );

        // deterministic in eval mode
        let again = net.forward(&y_t, &prior, None, &[5, 50, 99], false).unwrap();
        assert_eq!(
            out.eps_hat.to_vec2::<f64>().unwrap(),
            again.eps_hat.to_vec2::<f64>().unwrap()
        );

        // internal consistency: eps_hat = Lin_out(d2)
        let manual = ops::linear(&out.d2, &net.out_w, &net.out_b).unwrap();
        assert_eq!(
            manual.to_vec2::<f64>().unwrap(),
            out.eps_hat.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn denoise_forward_rejects_bad_inputs() {
        let mut st = store();
        let net = DenoiseNet::new(&mut st, "den", 4, 32).unwrap();
        let mut rng = substream(5, Stream::Diffusion, &[24]);
        let y = rand_t(&mut rng, &[2, 4]);
        let p = rand_t(&mut rng, &[2, 4]);
        // NaN input
        let bad = Tensor::from_vec(vec![f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], (2, 4), &Device::Cpu).unwrap();
        assert!(net.forward(&bad, &p, None, &[1, 2], false).is_err());
        // timestep count mismatch
        assert!(net.forward(&y, &p, None, &[1], false).is_err());
        // wrong condition width
        let c = rand_t(&mut rng, &[2, 16]);
        assert!(net.forward(&y, &p, Some(&c), &[1, 2], false).is_err());
        // wrong class count
        let y5 = rand_t(&mut rng, &[2, 5]);
        assert!(net.forward(&y5, &y5, None, &[1, 2], false).is_err());
    }

    #[test]
    fn denoise_forward_gradient_matches_fd() {
        let mut st = store();
        let net = DenoiseNet::new(&mut st, "den", 5, 32).unwrap();
        let mut rng = substream(6, Stream::Diffusion, &[25]);
        let prior = rand_t(&mut rng, &[2, 5]);
        let cond = rand_t(&mut rng, &[2, 32]);
        let at = rand_t(&mut rng, &[2, 5]);
        let f = |y: &Tensor| {
            net.forward(y, &prior, Some(&cond), &[7, 42], false)
                .unwrap()
                .eps_hat
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let var = Var::from_tensor(&at).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let an: Vec<f64> = grads
            .get(var.as_tensor())
            .expect("missing grad")
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base: Vec<f64> = at.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let ev = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, at.dims(), &Device::Cpu).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (ev(eps) - ev(-eps)) / (2.0 * eps);
            let den = an[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((an[i] - fd).abs() / den);
        }
        assert!(worst <= 1e-4, "denoise_forward grad rel err {worst}");
    }
}
