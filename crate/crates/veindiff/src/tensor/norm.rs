//! Batch and layer normalization with serializable state.
//!
//! Both live on top of [`ParamStore`]: the affine weights are trainable
//! parameters, batch-norm running statistics are buffers updated in place
//! during training forwards, so a checkpoint of the store captures
//! normalization state exactly.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::tensor::params::{Init, ParamStore};

/// Batch normalization over the channel dim of (B, C, H, W) or the feature
/// dim of (B, F). Training mode normalizes with biased batch statistics
/// (gradients flow through them) and folds unbiased statistics into the
/// running buffers with momentum; eval mode normalizes with the buffers.
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
    channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let gamma = store.param(&format!("{prefix}.gamma"), &[channels], Init::Ones)?;
        let beta = store.param(&format!("{prefix}.beta"), &[channels], Init::Zeros)?;
        store.buffer(&format!("{prefix}.running_mean"), &[channels], Init::Zeros)?;
        store.buffer(&format!("{prefix}.running_var"), &[channels], Init::Ones)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: store.var(&format!("{prefix}.running_mean"))?,
            running_var: store.var(&format!("{prefix}.running_var"))?,
            momentum: 0.1,
            eps: 1e-5,
            channels,
        })
    }

    /// Reshape a per-channel vector so it broadcasts against `x`.
    fn channel_shape(&self, rank: usize) -> Vec<usize> {
        let mut shape = vec![1; rank];
        shape[1] = self.channels;
        shape
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        if !(rank == 2 || rank == 4) || x.dim(1)? != self.channels {
            return Err(crate::error::VeinError::invariant(format!(
                "batchnorm expects (B,{c}) or (B,{c},H,W), got {:?}",
                x.dims(),
                c = self.channels
            )));
        }
        let reduce_dims: Vec<usize> = if rank == 2 { vec![0] } else { vec![0, 2, 3] };
        let n: usize = reduce_dims.iter().map(|&d| x.dim(d).unwrap_or(1)).product();
        let cs = self.channel_shape(rank);

        let (mean, var) = if train {
            let mean = x.mean_keepdim(reduce_dims.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce_dims.as_slice())?;
            // fold unbiased statistics into the running buffers
            let unbias = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            let new_mean = (self.running_mean.as_tensor() * (1.0 - self.momentum))?
                .add(&(mean.detach().flatten_all()? * self.momentum)?)?;
            let new_var = (self.running_var.as_tensor() * (1.0 - self.momentum))?
                .add(&(var.detach().flatten_all()? * (self.momentum * unbias))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(cs.as_slice())?,
                self.running_var.as_tensor().reshape(cs.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape(cs.as_slice())?)?
            .broadcast_add(&self.beta.reshape(cs.as_slice())?)?)
    }
}

/// Layer normalization over the last dimension with learnable affine.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
    dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.param(&format!("{prefix}.gamma"), &[dim], Init::Ones)?;
        let beta = store.param(&format!("{prefix}.beta"), &[dim], Init::Zeros)?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        if x.dim(last)? != self.dim {
            return Err(crate::error::VeinError::invariant(format!(
                "layernorm expects last dim {}, got {:?}",
                self.dim,
                x.dims()
            )));
        }
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}
