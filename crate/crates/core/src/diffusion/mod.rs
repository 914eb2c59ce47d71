//! Latent diffusion backbone: schedule, codecs, the toy denoiser and DDIM.

pub mod codec;
pub mod ddim;
pub mod pretrain;
pub mod schedule;
pub mod unet;

use alloc::vec::Vec;

pub use codec::{CodecKind, LatentCodec, TinyAutoencoder};
pub use ddim::{check_targets, ddim_invert, ddim_reconstruct, inversion_path};
pub use pretrain::{pretrain_denoiser, PretrainConfig, PretrainReport};
pub use schedule::{ddim_move, ddim_step, forward_noise, NoiseSchedule};
pub use unet::{ConditioningContext, DenoiserConfig, ToyUNet};

use crate::error::Result;
use crate::real::Real;
use crate::taps::{Captures, TapPoint, TapRequest};
use crate::tensor::Tensor;

/// A frozen noise predictor exposing tappable intermediate activations.
///
/// Third-party backbones plug in by implementing this trait; extraction and
/// fusion only rely on the tap contract: activations at 1-based scale `s`
/// have spatial size `(H0 / 2^(s-1), W0 / 2^(s-1))`.
pub trait Denoiser<T: Real> {
    /// `(C0, H0, W0)`.
    fn latent_geometry(&self) -> (usize, usize, usize);

    fn num_scales(&self) -> usize;

    /// Every activation that may be requested, sorted.
    fn tap_points(&self) -> Vec<TapPoint>;

    /// Predicted noise for `x_t` (shape `(B, C0, H0, W0)`) at timestep `t`,
    /// plus any requested captures. Must be a pure function of the inputs.
    fn predict(&self, x_t: &Tensor<T>, t: usize, context: &ConditioningContext<T>, taps: &TapRequest) -> Result<(Tensor<T>, Captures<T>)>;

    /// Digest of the weights, used to prove they stay frozen.
    fn checksum(&self) -> [u8; 32];
}
