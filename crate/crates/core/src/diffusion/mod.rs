//! Diffusion machinery: DDPM/DDIM schedules and steps, two-model DDIB translation,
//! consistency-model parametrization and the Brownian bridge (BBDM).
//!
//! Everything here works in the `[−1, 1]` pixel domain; use [`to_model_domain`] and
//! [`from_model_domain`] at the boundary.

mod bridge;
mod consistency;
mod ddpm;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub use bridge::{bbdm_forward_sample, bbdm_reverse_step, bbdm_sample, bbdm_training_target, BridgeSchedule};
pub use consistency::{
    adjacent_pair, cm_apply, cm_evaluate, cm_sample, cm_training_step, ConsistencyConfig, SigmaSchedule,
};
pub use ddpm::{
    ddib_translate, ddib_translate_to_depth, ddim_decode_path, ddim_encode, ddim_encode_path, ddim_sample, ddim_step,
    ddim_transfer, ddpm_forward_sample, stride_steps, AlphaSchedule, ENCODE_REFINEMENTS,
};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("step {t} outside [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("step order violated: {t} must not be below {t_prev}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("sigma {sigma} below sigma_min {sigma_min}")]
    SigmaBelowMin { sigma: f64, sigma_min: f64 },
    #[error("sigmas ({0}, {1}) are not an adjacent pair of the discretization")]
    NonAdjacentSigmas(f64, f64),
    #[error("model produced non-finite output at step {0}")]
    NonFiniteOutput(usize),
}

/// A denoising network: `(x, step, condition) → prediction` of the same shape as `x`.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, t: usize, condition: Option<&Tensor>) -> Tensor;
}

impl<F: Fn(&Tensor, usize, Option<&Tensor>) -> Tensor> Denoiser for F {
    fn denoise(&self, x: &Tensor, t: usize, condition: Option<&Tensor>) -> Tensor {
        self(x, t, condition)
    }
}

pub fn to_model_domain(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Maps back to `[0, 1]`, clamping overshoot.
pub fn from_model_domain(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn standard_normal(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect())
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DiffusionError::ShapeMismatch(a.shape(), b.shape()))
    }
}

fn checked_output(out: Tensor, x: &Tensor, t: usize) -> Result<Tensor, DiffusionError> {
    check_same(&out, x)?;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(DiffusionError::NonFiniteOutput(t))
    }
}
