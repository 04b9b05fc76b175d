//! Segmentation U-Net (Table I) and authentication head (Table II).
//!
//! `Convolution` means conv → batch norm → ReLU; `Convolution*` stacks two of
//! those. The expanding path consumes `s_2 = s_1 + d_f` (pure additive fusion
//! with the SD-Former map; `d_f` absent ⇒ `s_2 = s_1`). The final `SegOut`
//! convolution keeps its batch norm but drops the trailing ReLU so mask
//! logits can go negative. The auth head refines `s_2` through two residual
//! stages of bottleneck blocks, global-average-pools to a 1024-d embedding,
//! and maps it linearly to `N` class logits.

use candle_core::Tensor;

use crate::error::{Result, VeinError};
use crate::tensor::{conv, norm::BatchNorm, Init, ParamStore};

/// Input side length the layer tables are written for.
pub const INPUT_SIDE: usize = 224;
/// Channels of the bottleneck feature `s_1` (and of the fused `s_2`).
pub const S1_CHANNELS: usize = 128;
/// Spatial side of `s_1`.
pub const S1_SIDE: usize = 28;
/// Width of the authentication embedding.
pub const EMBED_DIM: usize = 1024;

/// conv(3×3 or 1×1, no bias) → batch norm → optional ReLU.
struct ConvBnRelu {
    w: Tensor,
    bn: BatchNorm,
    relu: bool,
    one_by_one: bool,
}

impl ConvBnRelu {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        relu: bool,
    ) -> Result<Self> {
        let one_by_one = kernel == 1;
        let shape: &[usize] = if one_by_one {
            &[c_out, c_in]
        } else {
            &[c_out, c_in, kernel, kernel]
        };
        let w = store.param(
            &format!("{prefix}.w"),
            shape,
            Init::KaimingNormal { fan_in: c_in * kernel * kernel },
        )?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), c_out)?;
        Ok(Self { w, bn, relu, one_by_one })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = if self.one_by_one {
            conv::conv1x1(x, &self.w)?
        } else {
            conv::conv_same(x, &self.w)?
        };
        let y = self.bn.forward(&y, train)?;
        if self.relu {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

/// Two stacked Convolutions (the table's `Convolution*`).
struct DoubleConv {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBnRelu::new(store, &format!("{prefix}.0"), c_in, c_out, 3, true)?,
            b: ConvBnRelu::new(store, &format!("{prefix}.1"), c_out, c_out, 3, true)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x, train)?, train)
    }
}

/// Outputs of a segmentation forward pass.
pub struct SegForward {
    /// Pre-sigmoid mask logits, `(B, 1, 224, 224)`.
    pub mask_logits: Tensor,
    /// Expand3 output `f_s`, `(B, 16, 224, 224)`.
    pub f_s: Tensor,
    /// Contract3 output `s_1`, `(B, 128, 28, 28)`.
    pub s_1: Tensor,
    /// Fused bottleneck `s_2 = s_1 + d_f`, input to the expanding path.
    pub s_2: Tensor,
}

/// The segmentation U-Net of Table I.
pub struct SegNet {
    conv0: DoubleConv,
    contract: Vec<DoubleConv>, // after 2×2 max pooling
    expand: Vec<DoubleConv>,   // after 2× nearest upsampling
    seg_out: ConvBnRelu,       // 1×1, batch norm, no ReLU
}

impl SegNet {
    pub fn new(store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let conv0 = DoubleConv::new(store, &format!("{prefix}.conv0"), 1, 16)?;
        let contract = vec![
            DoubleConv::new(store, &format!("{prefix}.contract1"), 16, 32)?,
            DoubleConv::new(store, &format!("{prefix}.contract2"), 32, 64)?,
            DoubleConv::new(store, &format!("{prefix}.contract3"), 64, 128)?,
        ];
        let expand = vec![
            DoubleConv::new(store, &format!("{prefix}.expand1"), 128, 64)?,
            DoubleConv::new(store, &format!("{prefix}.expand2"), 64, 32)?,
            DoubleConv::new(store, &format!("{prefix}.expand3"), 32, 16)?,
        ];
        let seg_out = ConvBnRelu::new(store, &format!("{prefix}.segout"), 16, 1, 1, false)?;
        Ok(Self { conv0, contract, expand, seg_out })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_b, c, h, w) = x
            .dims4()
            .map_err(|_| VeinError::invariant("seg input must be (B, 1, 224, 224)"))?;
        if c != 1 || h != INPUT_SIDE || w != INPUT_SIDE {
            return Err(VeinError::invariant(format!(
                "seg input shape ({c}, {h}, {w}) != (1, {INPUT_SIDE}, {INPUT_SIDE})"
            )));
        }
        Ok(())
    }

    /// Contracting path only: Conv0 → Contract1–3, returning `s_1`.
    pub fn contract(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.conv0.forward(x, train)?;
        for block in &self.contract {
            let pooled = h.max_pool2d(2)?;
            h = block.forward(&pooled, train)?;
        }
        let (_b, c, hh, ww) = h.dims4()?;
        if c != S1_CHANNELS || hh != S1_SIDE || ww != S1_SIDE {
            return Err(VeinError::invariant(format!(
                "s_1 shape ({c}, {hh}, {ww}) != ({S1_CHANNELS}, {S1_SIDE}, {S1_SIDE})"
            )));
        }
        Ok(h)
    }

    /// Expanding path: Expand1–3 + SegOut on the fused bottleneck.
    pub fn expand(&self, s_2: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let mut h = s_2.clone();
        for block in &self.expand {
            let up = conv::upsample2x(&h)?;
            h = block.forward(&up, train)?;
        }
        let f_s = h;
        let (_b, c, hh, ww) = f_s.dims4()?;
        if c != 16 || hh != INPUT_SIDE || ww != INPUT_SIDE {
            return Err(VeinError::invariant(format!(
                "f_s shape ({c}, {hh}, {ww}) != (16, {INPUT_SIDE}, {INPUT_SIDE})"
            )));
        }
        let logits = self.seg_out.forward(&f_s, train)?;
        Ok((logits, f_s))
    }

    /// Full forward pass with optional SD-Former fusion map `d_f`.
    pub fn forward(&self, x: &Tensor, d_f: Option<&Tensor>, train: bool) -> Result<SegForward> {
        let s_1 = self.contract(x, train)?;
        let s_2 = match d_f {
            Some(d) => {
                if d.dims() != s_1.dims() {
                    return Err(VeinError::invariant(format!(
                        "d_f shape {:?} != s_1 shape {:?}",
                        d.dims(),
                        s_1.dims()
                    )));
                }
                (&s_1 + d)?
            }
            None => s_1.clone(),
        };
        let (mask_logits, f_s) = self.expand(&s_2, train)?;
        Ok(SegForward { mask_logits, f_s, s_1, s_2 })
    }
}

/// 1×1 reduce → 3×3 (optionally stride 2) → 1×1 expand, with identity or
/// strided-projection shortcut.
struct Bottleneck {
    reduce: ConvBnRelu,
    mid: ConvBnRelu,
    expand_w: Tensor,
    expand_bn: BatchNorm,
    proj: Option<(Tensor, BatchNorm)>,
    stride2: bool,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        stride2: bool,
    ) -> Result<Self> {
        let reduce = ConvBnRelu::new(store, &format!("{prefix}.reduce"), c_in, c_mid, 1, true)?;
        let mid = ConvBnRelu::new(store, &format!("{prefix}.mid"), c_mid, c_mid, 3, true)?;
        let expand_w = store.param(
            &format!("{prefix}.expand.w"),
            &[c_out, c_mid],
            Init::KaimingNormal { fan_in: c_mid },
        )?;
        let expand_bn = BatchNorm::new(store, &format!("{prefix}.expand.bn"), c_out)?;
        let proj = if stride2 || c_in != c_out {
            let w = store.param(
                &format!("{prefix}.proj.w"),
                &[c_out, c_in],
                Init::KaimingNormal { fan_in: c_in },
            )?;
            let bn = BatchNorm::new(store, &format!("{prefix}.proj.bn"), c_out)?;
            Some((w, bn))
        } else {
            None
        };
        Ok(Self { reduce, mid, expand_w, expand_bn, proj, stride2 })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.reduce.forward(x, train)?;
        let mut h = self.mid.forward(&h, train)?;
        if self.stride2 {
            h = conv::subsample2(&h)?;
        }
        let main = self.expand_bn.forward(&conv::conv1x1(&h, &self.expand_w)?, train)?;
        let short = match &self.proj {
            Some((w, bn)) => {
                let mut s = conv::conv1x1(x, w)?;
                if self.stride2 {
                    s = conv::subsample2(&s)?;
                }
                bn.forward(&s, train)?
            }
            None => x.clone(),
        };
        Ok((main + short)?.relu()?)
    }
}

/// Authentication output: 1024-d embedding and N-way logits `ŷ_v`.
pub struct AuthOut {
    pub embedding: Tensor,
    pub logits: Tensor,
}

/// Table II: two residual stages of bottlenecks, GAP, linear classifier.
pub struct AuthHead {
    res1: Vec<Bottleneck>,
    res2: Vec<Bottleneck>,
    fc_w: Tensor,
    fc_b: Tensor,
    n_classes: usize,
}

impl AuthHead {
    pub fn new(store: &mut ParamStore, prefix: &str, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(VeinError::config("auth head needs at least one class"));
        }
        let mut res1 = Vec::with_capacity(6);
        res1.push(Bottleneck::new(store, &format!("{prefix}.res1.0"), 128, 128, 512, true)?);
        for i in 1..6 {
            res1.push(Bottleneck::new(
                store,
                &format!("{prefix}.res1.{i}"),
                512,
                128,
                512,
                false,
            )?);
        }
        let mut res2 = Vec::with_capacity(3);
        res2.push(Bottleneck::new(store, &format!("{prefix}.res2.0"), 512, 256, 1024, true)?);
        for i in 1..3 {
            res2.push(Bottleneck::new(
                store,
                &format!("{prefix}.res2.{i}"),
                1024,
                256,
                1024,
                false,
            )?);
        }
        let fc_w = store.param(
            &format!("{prefix}.fc.w"),
            &[n_classes, EMBED_DIM],
            Init::XavierUniform { fan_in: EMBED_DIM, fan_out: n_classes },
        )?;
        let fc_b = store.param(&format!("{prefix}.fc.b"), &[n_classes], Init::Zeros)?;
        Ok(Self { res1, res2, fc_w, fc_b, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Forward pass that also returns the two residual-stage outputs so the
    /// Table II shape chain can be asserted.
    pub fn forward_parts(&self, s_2: &Tensor, train: bool) -> Result<(Tensor, Tensor, AuthOut)> {
        let (_b, c, h, w) = s_2
            .dims4()
            .map_err(|_| VeinError::invariant("auth input must be (B, 128, 28, 28)"))?;
        if c != S1_CHANNELS || h != S1_SIDE || w != S1_SIDE {
            return Err(VeinError::invariant(format!(
                "auth input shape ({c}, {h}, {w}) != ({S1_CHANNELS}, {S1_SIDE}, {S1_SIDE})"
            )));
        }
        let mut r1 = s_2.clone();
        for b in &self.res1 {
            r1 = b.forward(&r1, train)?;
        }
        let mut r2 = r1.clone();
        for b in &self.res2 {
            r2 = b.forward(&r2, train)?;
        }
        let embedding = r2.mean(3)?.mean(2)?; // global average pool -> (B, 1024)
        let logits = crate::tensor::ops::linear(&embedding, &self.fc_w, &self.fc_b)?;
        Ok((r1, r2, AuthOut { embedding, logits }))
    }

    pub fn forward(&self, s_2: &Tensor, train: bool) -> Result<AuthOut> {
        Ok(self.forward_parts(s_2, train)?.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use candle_core::{DType, Device};
    use rand::Rng;

    fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn to_vec(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn table_shape_chain_and_determinism() {
        let mut st = ParamStore::new(DType::F32, 11);
        let seg = SegNet::new(&mut st, "seg").unwrap();
        let auth = AuthHead::new(&mut st, "auth", 5).unwrap();
        let mut rng = substream(1, Stream::Augment, &[40]);
        let x = rand_t(&mut rng, &[1, 1, 224, 224]);

        let out = seg.forward(&x, None, false).unwrap();
        assert_eq!(out.mask_logits.dims(), &[1, 1, 224, 224]);
        assert_eq!(out.s_1.dims(), &[1, 128, 28, 28]);
        assert_eq!(out.f_s.dims(), &[1, 16, 224, 224]);
        assert_eq!(out.s_2.dims(), &[1, 128, 28, 28]);

        let (r1, r2, a) = auth.forward_parts(&out.s_2, false).unwrap();
        assert_eq!(r1.dims(), &[1, 512, 14, 14]);
        assert_eq!(r2.dims(), &[1, 1024, 7, 7]);
        assert_eq!(a.embedding.dims(), &[1, 1024]);
        assert_eq!(a.logits.dims(), &[1, 5]);

        // eval-mode forward is bit-identical across calls
        let again = seg.forward(&x, None, false).unwrap();
        assert_eq!(to_vec(&out.mask_logits), to_vec(&again.mask_logits));
        assert_eq!(to_vec(&out.f_s), to_vec(&again.f_s));

        // all outputs finite
        for t in [&out.mask_logits, &out.f_s, &a.embedding, &a.logits] {
            assert!(to_vec(t).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_fusion_map_is_identity_and_fusion_is_additive() {
        let mut st = ParamStore::new(DType::F32, 12);
        let seg = SegNet::new(&mut st, "seg").unwrap();
        let mut rng = substream(2, Stream::Augment, &[41]);
        let x = rand_t(&mut rng, &[1, 1, 224, 224]);

        let plain = seg.forward(&x, None, false).unwrap();
        let zeros = Tensor::zeros((1, 128, 28, 28), DType::F32, &Device::Cpu).unwrap();
        let fused = seg.forward(&x, Some(&zeros), false).unwrap();
        assert_eq!(to_vec(&plain.mask_logits), to_vec(&fused.mask_logits));
        assert_eq!(to_vec(&plain.f_s), to_vec(&fused.f_s));

        // s_2 = s_1 + d_f exactly
        let d_f = rand_t(&mut rng, &[1, 128, 28, 28]);
        let shifted = seg.forward(&x, Some(&d_f), false).unwrap();
        let expect = (&shifted.s_1 + &d_f).unwrap();
        assert_eq!(to_vec(&shifted.s_2), to_vec(&expect));
    }

    #[test]
    fn zeroed_auth_weights_give_zero_embedding() {
        let mut st = ParamStore::new(DType::F32, 13);
        let auth = AuthHead::new(&mut st, "auth", 4).unwrap();
        // zero every auth parameter; the strided entry bottleneck has a
        // projection shortcut, so the whole stream collapses to zero
        for (name, var) in st.trainable_with_prefixes(&["auth."]) {
            let z = Tensor::zeros(var.dims(), DType::F32, &Device::Cpu).unwrap();
            st.set(&name, &z).unwrap();
        }
        let mut rng = substream(3, Stream::Augment, &[42]);
        let s2 = rand_t(&mut rng, &[2, 128, 28, 28]);
        let out = auth.forward(&s2, false).unwrap();
        assert!(to_vec(&out.embedding).iter().all(|v| *v == 0.0));
        assert!(to_vec(&out.logits).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_validation() {
        let mut st = ParamStore::new(DType::F32, 14);
        let seg = SegNet::new(&mut st, "seg").unwrap();
        let auth = AuthHead::new(&mut st, "auth", 3).unwrap();
        let bad = Tensor::zeros((1, 1, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert!(seg.forward(&bad, None, false).is_err());
        let x = Tensor::zeros((1, 1, 224, 224), DType::F32, &Device::Cpu).unwrap();
        let bad_df = Tensor::zeros((1, 64, 28, 28), DType::F32, &Device::Cpu).unwrap();
        assert!(seg.forward(&x, Some(&bad_df), false).is_err());
        let bad_s2 = Tensor::zeros((1, 128, 14, 14), DType::F32, &Device::Cpu).unwrap();
        assert!(auth.forward(&bad_s2, false).is_err());
        assert!(AuthHead::new(&mut ParamStore::new(DType::F32, 15), "a", 0).is_err());
    }
}
