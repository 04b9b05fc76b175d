//! Tensor engine: candle-based autograd plus hand-tuned CPU kernels.
//!
//! candle provides tensors, broadcasting, matmul and reverse-mode autodiff;
//! everything performance- or semantics-critical on top is owned here:
//! same-padding convolutions as custom ops with an AVX-512 fast path
//! ([`conv`]), numerically stable activations / losses building blocks and a
//! differentiable `atan2` ([`ops`]), batch/layer normalization with
//! serializable running statistics ([`norm`]), a named parameter store with
//! order-independent deterministic initialization ([`params`]) and a
//! serializable AdamW optimizer ([`adamw`]).

pub mod adamw;
pub mod conv;
pub mod norm;
pub mod ops;
pub mod params;

pub use adamw::AdamW;
pub use conv::{conv1x1, conv_same, depthwise_same, subsample2, upsample2x};
pub use norm::{BatchNorm, LayerNorm};
pub use params::{Init, ParamStore};
