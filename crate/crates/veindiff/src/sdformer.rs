//! Semantic Difference Transformer: Fourier-space self- and cross-attention
//! blocks that fuse the denoiser embeddings `d_1`, `d_2` into a correction
//! map added to the segmentation bottleneck `s_1`.
//!
//! Complex handling: the token stream is DFT'd along the token axis; the
//! Q/K/V maps act on concatenated (real, imag) channels of width `2·D_tok`;
//! attention scores are the real part of `Q·K^H` scaled by `1/√D_tok`;
//! the activation `a·sin(ω·(scores·V))` applies elementwise to both parts;
//! the output is the real part of the inverse DFT followed by an
//! aggregation map. Cross-attention takes queries from the evolving stream
//! (`x2`) and keys/values from the `d_2` tokens (`x1`); self-attention is
//! the `x1 = x2` special case of the same computation.

use candle_core::Tensor;

use crate::error::{Result, VeinError};
use crate::tensor::{norm::LayerNorm, ops, Init, ParamStore};

/// Shape of the segmentation bottleneck `s_1` the fused map must match.
pub const FUSE_SHAPE: (usize, usize, usize) = (128, 28, 28);

#[derive(Debug, Clone, Copy)]
pub struct SdFormerCfg {
    pub d_lat: usize,
    pub tokens: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for SdFormerCfg {
    fn default() -> Self {
        Self { d_lat: 512, tokens: 16, heads: 4, blocks: 3 }
    }
}

/// One Fourier-space attention module (used for both FSA and FCA).
pub struct FourierAttention {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wout: Tensor,
    wout_b: Tensor,
    a: Tensor,
    omega: Tensor,
    cos_m: Tensor,
    sin_m: Tensor,
    tokens: usize,
    d_tok: usize,
    heads: usize,
}

impl FourierAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        tokens: usize,
        d_tok: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_tok % heads != 0 {
            return Err(VeinError::config(format!(
                "head count {heads} must divide token width {d_tok}"
            )));
        }
        if tokens == 0 {
            return Err(VeinError::config("need at least one token"));
        }
        let two_d = 2 * d_tok;
        let cmap = |store: &mut ParamStore, name: &str| -> Result<Tensor> {
            store.param(
                &format!("{prefix}.{name}"),
                &[two_d, two_d],
                Init::XavierUniform { fan_in: two_d, fan_out: two_d },
            )
        };
        let wq = cmap(store, "wq")?;
        let wk = cmap(store, "wk")?;
        let wv = cmap(store, "wv")?;
        let wout = store.param(
            &format!("{prefix}.wout.w"),
            &[d_tok, d_tok],
            Init::XavierUniform { fan_in: d_tok, fan_out: d_tok },
        )?;
        let wout_b = store.param(&format!("{prefix}.wout.b"), &[d_tok], Init::Zeros)?;
        let a = store.param(&format!("{prefix}.a"), &[], Init::Ones)?;
        let omega = store.param(&format!("{prefix}.omega"), &[], Init::Ones)?;
        let (cos_m, sin_m) = ops::dft_matrices(tokens, store.dtype(), store.device())?;
        Ok(Self { wq, wk, wv, wout, wout_b, a, omega, cos_m, sin_m, tokens, d_tok, heads })
    }

    /// DFT along the token axis: `X[k] = Σ_j x[j]·e^(−2πijk/P)`, exploiting
    /// the symmetry of the cos/sin matrices to left-multiply.
    fn dft_tokens(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let re = self.cos_m.broadcast_matmul(x)?;
        let im = self.sin_m.broadcast_matmul(x)?.neg()?;
        Ok((re, im))
    }

    /// Apply a `2D×2D` map to the stacked (real, imag) channels.
    fn complex_map(&self, re: &Tensor, im: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
        let stacked = Tensor::cat(&[re, im], 2)?;
        let mapped = stacked.broadcast_matmul(&w.t()?)?;
        let out_re = mapped.narrow(2, 0, self.d_tok)?.contiguous()?;
        let out_im = mapped.narrow(2, self.d_tok, self.d_tok)?.contiguous()?;
        Ok((out_re, out_im))
    }

    /// `(B, P, D) -> (B, h, P, D/h)`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, p, _d) = x.dims3()?;
        let dh = self.d_tok / self.heads;
        Ok(x.reshape((b, p, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _h, p, _dh) = x.dims4()?;
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, p, self.d_tok))?)
    }

    fn check_tokens(&self, name: &str, x: &Tensor) -> Result<()> {
        let (_b, p, d) = x.dims3().map_err(|_| {
            VeinError::invariant(format!("{name} must be (B, P, D_tok) tokens"))
        })?;
        if p != self.tokens || d != self.d_tok {
            return Err(VeinError::invariant(format!(
                "{name} token shape ({p}, {d}) != ({}, {})",
                self.tokens, self.d_tok
            )));
        }
        Ok(())
    }

    /// Attention with queries from `q_src` and keys/values from `kv_src`
    /// (`q_src = kv_src` gives self-attention). Returns the real output and
    /// the discarded imaginary residue of the inverse DFT.
    fn forward_parts(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_tokens("q_src", q_src)?;
        self.check_tokens("kv_src", kv_src)?;
        if q_src.dims() != kv_src.dims() {
            return Err(VeinError::invariant("attention input batches differ"));
        }
        let (x2_re, x2_im) = self.dft_tokens(q_src)?;
        let (x1_re, x1_im) = self.dft_tokens(kv_src)?;
        let (q_re, q_im) = self.complex_map(&x2_re, &x2_im, &self.wq)?;
        let (k_re, k_im) = self.complex_map(&x1_re, &x1_im, &self.wk)?;
        let (v_re, v_im) = self.complex_map(&x1_re, &x1_im, &self.wv)?;

        let (q_re, q_im) = (self.split_heads(&q_re)?, self.split_heads(&q_im)?);
        let (k_re, k_im) = (self.split_heads(&k_re)?, self.split_heads(&k_im)?);
        let (v_re, v_im) = (self.split_heads(&v_re)?, self.split_heads(&v_im)?);

        // real part of Q·K^H = Qre·Kreᵀ + Qim·Kimᵀ, scaled by 1/√D_tok
        let scale = 1.0 / (self.d_tok as f64).sqrt();
        let scores = ((q_re.matmul(&k_re.t()?)? + q_im.matmul(&k_im.t()?)?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, 3)?;

        let sv_re = attn.matmul(&v_re)?;
        let sv_im = attn.matmul(&v_im)?;
        let act = |z: &Tensor| -> Result<Tensor> {
            Ok(z.broadcast_mul(&self.omega)?.sin()?.broadcast_mul(&self.a)?)
        };
        let m_re = self.merge_heads(&act(&sv_re)?)?;
        let m_im = self.merge_heads(&act(&sv_im)?)?;

        // inverse DFT along tokens; keep both parts so tests can assert the
        // imaginary residue vanishes under symmetry-preserving maps
        let p = self.tokens as f64;
        let out_re = ((self.cos_m.broadcast_matmul(&m_re)? - self.sin_m.broadcast_matmul(&m_im)?)? / p)?;
        let out_im = ((self.sin_m.broadcast_matmul(&m_re)? + self.cos_m.broadcast_matmul(&m_im)?)? / p)?;

        let out = ops::linear(&out_re, &self.wout, &self.wout_b)?;
        Ok((out, out_im))
    }

    pub fn forward(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(q_src, kv_src)?.0)
    }
}

struct Block {
    fsa: FourierAttention,
    fca: FourierAttention,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
    ff1_w: Tensor,
    ff1_b: Tensor,
    ff2_w: Tensor,
    ff2_b: Tensor,
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, tokens: usize, d_tok: usize, heads: usize) -> Result<Self> {
        let fsa = FourierAttention::new(store, &format!("{prefix}.fsa"), tokens, d_tok, heads)?;
        let fca = FourierAttention::new(store, &format!("{prefix}.fca"), tokens, d_tok, heads)?;
        let ln1 = LayerNorm::new(store, &format!("{prefix}.ln1"), d_tok)?;
        let ln2 = LayerNorm::new(store, &format!("{prefix}.ln2"), d_tok)?;
        let ln3 = LayerNorm::new(store, &format!("{prefix}.ln3"), d_tok)?;
        let hidden = 4 * d_tok;
        let ff1_w = store.param(
            &format!("{prefix}.ff1.w"),
            &[hidden, d_tok],
            Init::KaimingNormal { fan_in: d_tok },
        )?;
        let ff1_b = store.param(&format!("{prefix}.ff1.b"), &[hidden], Init::Zeros)?;
        let ff2_w = store.param(
            &format!("{prefix}.ff2.w"),
            &[d_tok, hidden],
            Init::XavierUniform { fan_in: hidden, fan_out: d_tok },
        )?;
        let ff2_b = store.param(&format!("{prefix}.ff2.b"), &[d_tok], Init::Zeros)?;
        Ok(Self { fsa, fca, ln1, ln2, ln3, ff1_w, ff1_b, ff2_w, ff2_b })
    }

    fn forward(&self, u: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
        let u = self.ln1.forward(&(u + self.fsa.forward(u, u)?)?)?;
        let u = self.ln2.forward(&(&u + self.fca.forward(&u, kv_tokens)?)?)?;
        let ff = ops::linear(&u, &self.ff1_w, &self.ff1_b)?.relu()?;
        let ff = ops::linear(&ff, &self.ff2_w, &self.ff2_b)?;
        Ok(self.ln3.forward(&(u + ff)?)?)
    }
}

/// The full SD-Former: tokenize, run the attention blocks, project each
/// token to its slice of the `128×28×28` fusion map (zero-initialized so
/// joint training starts exactly from the pretrained behavior).
pub struct SdFormer {
    blocks: Vec<Block>,
    out_w: Tensor,
    out_b: Tensor,
    cfg: SdFormerCfg,
}

impl SdFormer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: SdFormerCfg) -> Result<Self> {
        if cfg.tokens == 0 || cfg.d_lat % cfg.tokens != 0 {
            return Err(VeinError::config(format!(
                "latent width {} not divisible into {} tokens",
                cfg.d_lat, cfg.tokens
            )));
        }
        let d_tok = cfg.d_lat / cfg.tokens;
        let fuse_len = FUSE_SHAPE.0 * FUSE_SHAPE.1 * FUSE_SHAPE.2;
        if fuse_len % cfg.tokens != 0 {
            return Err(VeinError::config(format!(
                "{} tokens cannot tile the {fuse_len}-element fusion map",
                cfg.tokens
            )));
        }
        if cfg.blocks == 0 {
            return Err(VeinError::config("need at least one SD-Former block"));
        }
        let per_token = fuse_len / cfg.tokens;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push(Block::new(store, &format!("{prefix}.b{i}"), cfg.tokens, d_tok, cfg.heads)?);
        }
        let out_w = store.param(&format!("{prefix}.out.w"), &[per_token, d_tok], Init::Zeros)?;
        let out_b = store.param(&format!("{prefix}.out.b"), &[per_token], Init::Zeros)?;
        Ok(Self { blocks, out_w, out_b, cfg })
    }

    pub fn cfg(&self) -> SdFormerCfg {
        self.cfg
    }

    /// Length of each token's slice of the flattened fusion map.
    pub fn per_token(&self) -> usize {
        (FUSE_SHAPE.0 * FUSE_SHAPE.1 * FUSE_SHAPE.2) / self.cfg.tokens
    }

    fn tokenize(&self, v: &Tensor, name: &str) -> Result<Tensor> {
        let (b, d) = v
            .dims2()
            .map_err(|_| VeinError::invariant(format!("{name} must be (B, D_lat)")))?;
        if d != self.cfg.d_lat {
            return Err(VeinError::invariant(format!(
                "{name} width {d} != latent {}",
                self.cfg.d_lat
            )));
        }
        Ok(v.reshape((b, self.cfg.tokens, self.cfg.d_lat / self.cfg.tokens))?)
    }

    /// Fuse the two denoiser embeddings into a `(B, 128, 28, 28)` map.
    pub fn fuse(&self, d1: &Tensor, d2: &Tensor) -> Result<Tensor> {
        let mut u = self.tokenize(d1, "d1")?;
        let kv = self.tokenize(d2, "d2")?;
        for block in &self.blocks {
            u = block.forward(&u, &kv)?;
        }
        let out = ops::linear(&u, &self.out_w, &self.out_b)?; // (B, P, per_token)
        let b = out.dim(0)?;
        Ok(out.reshape((b, FUSE_SHAPE.0, FUSE_SHAPE.1, FUSE_SHAPE.2))?)
    }
}
