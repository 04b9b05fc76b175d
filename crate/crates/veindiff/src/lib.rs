//! Dual-branch finger-vein modeling bench.
//!
//! The crate bundles four loosely coupled layers:
//!
//! * [`synth`] / [`augment`] — a reproducible synthetic finger-vein dataset
//!   generator (two acquisition sessions per class) plus the square-crop /
//!   resize / jitter augmentation pipeline used by training.
//! * [`classical`] — classical vein-probability extractors (Gabor bank,
//!   line-curvature, Hessian vesselness, adaptive threshold) fused by
//!   majority vote into training masks.
//! * [`tensor`], [`seg`], [`denoiser`], [`sdformer`], [`diffusion`],
//!   [`losses`] — the learned model: a segmentation U-Net with an auth
//!   head, a label-space diffusion classifier conditioned on segmentation
//!   features, and a Fourier-domain attention module that feeds denoiser
//!   embeddings back into the segmentation decoder.
//! * [`trainer`], [`config`], [`checkpoint`], [`metrics`], [`cli`] — the
//!   training/evaluation loops, flat-text configuration, bit-exact
//!   checkpointing, and the verification / segmentation metric suite.
//!
//! Everything is deterministic given the config seed: RNG streams are
//! derived per purpose (template, render, augment, init, diffusion) from
//! ChaCha8 substreams, and all tensor work runs on a single CPU thread.

pub mod augment;
pub mod checkpoint;
pub mod classical;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sdformer;
pub mod seg;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Result, VeinError};
