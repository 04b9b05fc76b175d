//! The full dual-branch model: segmentation U-Net + auth head on one side,
//! mask-conditioned label denoiser + SD-Former on the other, wired per the
//! bidirectional exchange protocol.
//!
//! Parameter groups (checkpoint names): `segmentation.*`, `auth_head.*`,
//! `denoiser.*`, `mask_condition.*`, `sdformer.*`.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{DenoiseNet, MaskCondition};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Result, VeinError};
use crate::sdformer::{SdFormer, SdFormerCfg};
use crate::seg::{AuthHead, AuthOut, SegForward, SegNet};
use crate::tensor::ParamStore;

/// Latent width shared by the denoiser embeddings and the mask condition.
pub const D_LAT: usize = 512;
/// Channels of the expanding-path feature `f_s` the mask condition consumes.
pub const F_S_CHANNELS: usize = 16;

/// Parameter-group prefixes, split by learning rate: the segmentation side
/// trains at `lr_seg`, the denoising side at `lr_denoise`.
pub const SEG_GROUPS: [&str; 2] = ["segmentation.", "auth_head."];
pub const DENOISE_GROUPS: [&str; 3] = ["denoiser.", "mask_condition.", "sdformer."];

/// Which branches participate in a forward pass (ablation switches).
#[derive(Debug, Clone, Copy)]
pub struct AblationFlags {
    pub diffusion: bool,
    pub mask_condition: bool,
    pub sdformer: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self { diffusion: true, mask_condition: true, sdformer: true }
    }

    /// The no-diffusion baseline: segmentation + auth head only.
    pub fn basic() -> Self {
        Self { diffusion: false, mask_condition: false, sdformer: false }
    }

    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            diffusion: cfg.use_diffusion,
            // the dependent modules only exist on top of the diffusion branch
            mask_condition: cfg.use_diffusion && cfg.use_mask_condition,
            sdformer: cfg.use_diffusion && cfg.use_sdformer,
        }
    }
}

/// Everything a joint-training step produces.
pub struct JointOut {
    pub seg: SegForward,
    pub auth: AuthOut,
    /// Softmaxed class prior ŷ_v, `(B, N)`, still attached to the graph.
    pub prior: Tensor,
    /// Predicted noise, present when the diffusion branch is active.
    pub eps_hat: Option<Tensor>,
}

/// Inference outputs for one batch.
pub struct EvalOut {
    /// Mask logits from the final (fused when SD-Former is active) pass.
    pub mask_logits: Tensor,
    /// Verification embedding from the same pass, `(B, 1024)`.
    pub embedding: Tensor,
    /// Identified class per row: reverse-diffusion argmax, or auth-logit
    /// argmax in basic mode.
    pub predicted: Vec<usize>,
    /// Final denoised label vector ŷ_0 when the diffusion branch ran.
    pub y0_hat: Option<Tensor>,
}

/// Row-wise argmax of a `(B, N)` tensor.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect())
}

fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

/// The assembled DiffVein model. All parameters live in the owned
/// [`ParamStore`]; submodules hold live handles into it, so `store.set`,
/// optimizer steps and checkpoint loads are visible immediately.
pub struct DiffVein {
    pub store: ParamStore,
    pub seg: SegNet,
    pub auth: AuthHead,
    pub denoiser: DenoiseNet,
    pub cond: MaskCondition,
    pub sdformer: SdFormer,
    n_classes: usize,
}

impl DiffVein {
    pub fn new(dtype: DType, seed: u64, n_classes: usize) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let seg = SegNet::new(&mut store, "segmentation")?;
        let auth = AuthHead::new(&mut store, "auth_head", n_classes)?;
        let denoiser = DenoiseNet::new(&mut store, "denoiser", n_classes, D_LAT)?;
        let cond = MaskCondition::new(&mut store, "mask_condition", F_S_CHANNELS, D_LAT)?;
        let sdformer = SdFormer::new(&mut store, "sdformer", SdFormerCfg::default())?;
        Ok(Self { store, seg, auth, denoiser, cond, sdformer, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Pretraining forward: segmentation without fusion, auth on `s_2 = s_1`.
    pub fn pretrain_forward(&self, images: &Tensor, train: bool) -> Result<(SegForward, AuthOut)> {
        let seg = self.seg.forward(images, None, train)?;
        let auth = self.auth.forward(&seg.s_2, train)?;
        Ok((seg, auth))
    }

    /// One joint forward pass at a sampled `(t, eps)`.
    ///
    /// When diffusion + SD-Former are active, a gradient-free preliminary
    /// pass (unfused segmentation → prior⁰/condition⁰ → denoiser) supplies
    /// `(d_1, d_2)`; their fused map enters the main segmentation pass. The
    /// main denoiser pass reuses the same `(t, eps)` with the main prior and
    /// condition, both left attached so `L_diff` reaches the segmenter.
    pub fn joint_forward(
        &self,
        images: &Tensor,
        y0: &Tensor,
        t: usize,
        eps: &Tensor,
        sched: &NoiseSchedule,
        flags: AblationFlags,
        train: bool,
    ) -> Result<JointOut> {
        let b = images.dim(0)?;
        if y0.dims() != [b, self.n_classes] || eps.dims() != y0.dims() {
            return Err(VeinError::invariant(format!(
                "joint_forward expects y0/eps of shape ({b}, {})",
                self.n_classes
            )));
        }
        let ts = vec![t; b];

        let d_f = if flags.diffusion && flags.sdformer {
            let pre_seg = self.seg.forward(images, None, false)?;
            let pre_auth = self.auth.forward(&pre_seg.s_2, false)?;
            let pre_prior = softmax_rows(&pre_auth.logits)?.detach();
            let pre_cond = if flags.mask_condition {
                Some(self.cond.forward(&pre_seg.f_s)?)
            } else {
                None
            };
            let y_t0 = diffusion::forward_sample(y0, &pre_prior, t, eps, sched)?;
            let pre = self
                .denoiser
                .forward(&y_t0, &pre_prior, pre_cond.as_ref(), &ts, false)?;
            Some(self.sdformer.fuse(&pre.d1.detach(), &pre.d2.detach())?)
        } else {
            None
        };

        let seg = self.seg.forward(images, d_f.as_ref(), train)?;
        let auth = self.auth.forward(&seg.s_2, train)?;
        let prior = softmax_rows(&auth.logits)?;

        let eps_hat = if flags.diffusion {
            let cond = if flags.mask_condition {
                Some(self.cond.forward(&seg.f_s)?)
            } else {
                None
            };
            let y_t = diffusion::forward_sample(y0, &prior, t, eps, sched)?;
            let out = self.denoiser.forward(&y_t, &prior, cond.as_ref(), &ts, train)?;
            Some(out.eps_hat)
        } else {
            None
        };

        Ok(JointOut { seg, auth, prior, eps_hat })
    }

    /// Inference for one batch: unfused pass → prior/condition → full
    /// deterministic reverse trajectory (identification) → final fused pass
    /// using the last reverse step's `(d_1, d_2)` (mask + embedding).
    pub fn eval_forward(
        &self,
        images: &Tensor,
        sched: &NoiseSchedule,
        flags: AblationFlags,
        rng: &mut ChaCha8Rng,
    ) -> Result<EvalOut> {
        let b = images.dim(0)?;
        let pre_seg = self.seg.forward(images, None, false)?;
        let pre_auth = self.auth.forward(&pre_seg.s_2, false)?;

        if !flags.diffusion {
            return Ok(EvalOut {
                predicted: argmax_rows(&pre_auth.logits)?,
                mask_logits: pre_seg.mask_logits,
                embedding: pre_auth.embedding,
                y0_hat: None,
            });
        }

        let prior = softmax_rows(&pre_auth.logits)?.detach();
        let cond = if flags.mask_condition {
            Some(self.cond.forward(&pre_seg.f_s)?.detach())
        } else {
            None
        };

        let mut last_d: Option<(Tensor, Tensor)> = None;
        let mut den = |y: &Tensor, t: usize| -> Result<Tensor> {
            let out = self
                .denoiser
                .forward(y, &prior, cond.as_ref(), &vec![t; b], false)?;
            if t == 1 {
                last_d = Some((out.d1.detach(), out.d2.detach()));
            }
            Ok(out.eps_hat)
        };
        let (y0_hat, predicted) = diffusion::sample_prediction(&mut den, &prior, sched, rng)?;

        let (mask_logits, embedding) = if flags.sdformer {
            let (d1, d2) = last_d.ok_or_else(|| {
                VeinError::invariant("reverse trajectory did not reach t = 1")
            })?;
            let d_f = self.sdformer.fuse(&d1, &d2)?;
            let seg = self.seg.forward(images, Some(&d_f), false)?;
            let auth = self.auth.forward(&seg.s_2, false)?;
            (seg.mask_logits, auth.embedding)
        } else {
            (pre_seg.mask_logits, pre_auth.embedding)
        };

        Ok(EvalOut { mask_logits, embedding, predicted, y0_hat: Some(y0_hat) })
    }
}
