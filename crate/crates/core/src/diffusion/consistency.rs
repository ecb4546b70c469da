//! Consistency models: boundary-preserving parametrization, Karras noise discretization,
//! consistency-training loss and single-step sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{check_same, checked_output, standard_normal, Denoiser, DiffusionError};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    /// Number of noise levels in the discretization.
    pub levels: usize,
    pub ema_decay: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { sigma_min: 0.002, sigma_max: 80.0, sigma_data: 0.5, rho: 7.0, levels: 18, ema_decay: 0.99 }
    }
}

impl ConsistencyConfig {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let d = sigma - self.sigma_min;
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (d * d + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        (sigma - self.sigma_min) * self.sigma_data / (self.sigma_data * self.sigma_data + sigma * sigma).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn schedule(&self) -> Result<SigmaSchedule, DiffusionError> {
        SigmaSchedule::karras(self)
    }
}

/// Ascending noise levels `σ_0 = σ_min < … < σ_{N−1} = σ_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn karras(c: &ConsistencyConfig) -> Result<Self, DiffusionError> {
        if c.levels < 2 || !(c.sigma_min > 0.0 && c.sigma_min < c.sigma_max) || !(c.rho > 0.0) {
            return Err(DiffusionError::InvalidSchedule(format!("invalid consistency config {c:?}")));
        }
        let (lo, hi) = (c.sigma_min.powf(1.0 / c.rho), c.sigma_max.powf(1.0 / c.rho));
        let n = c.levels - 1;
        let mut sigmas: Vec<f64> = (0..=n).map(|i| (lo + i as f64 / n as f64 * (hi - lo)).powf(c.rho)).collect();
        sigmas[0] = c.sigma_min;
        sigmas[n] = c.sigma_max;
        Ok(SigmaSchedule { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn index_of(&self, sigma: f64) -> Option<usize> {
        self.sigmas.iter().position(|&s| s == sigma)
    }
}

/// `c_skip(σ)·x + c_out(σ)·raw`; returns `x` unchanged at `σ_min`.
pub fn cm_apply(x: &Tensor, sigma: f64, raw: &Tensor, config: &ConsistencyConfig) -> Result<Tensor, DiffusionError> {
    check_same(x, raw)?;
    if sigma < config.sigma_min || sigma.is_nan() {
        return Err(DiffusionError::SigmaBelowMin { sigma, sigma_min: config.sigma_min });
    }
    if sigma == config.sigma_min {
        return Ok(x.clone());
    }
    let (cs, co) = (config.c_skip(sigma), config.c_out(sigma));
    Ok(x.zip_map(raw, |x, r| cs * x + co * r))
}

/// Consistency function `f(x, σ)` evaluated through `model`, which sees the scaled input,
/// the discretization index and the condition.
pub fn cm_evaluate(
    model: &dyn Denoiser,
    x: &Tensor,
    sigma: f64,
    index: usize,
    condition: Option<&Tensor>,
    config: &ConsistencyConfig,
) -> Result<Tensor, DiffusionError> {
    let c_in = config.c_in(sigma);
    let raw = checked_output(model.denoise(&x.map(|v| c_in * v), index, condition), x, index)?;
    cm_apply(x, sigma, &raw, config)
}

/// Squared distance between the online model at `σ_a` and the EMA model at `σ_b`
/// on the trajectory points `x0 + σ·noise`. The pair must be adjacent levels of the
/// discretization (or the same level).
#[allow(clippy::too_many_arguments)]
pub fn cm_training_step(
    x0: &Tensor,
    condition: Option<&Tensor>,
    sigmas: (f64, f64),
    noise: &Tensor,
    model: &dyn Denoiser,
    ema_model: &dyn Denoiser,
    config: &ConsistencyConfig,
) -> Result<f64, DiffusionError> {
    check_same(x0, noise)?;
    let (ia, ib) = adjacent_pair(sigmas, config)?;
    let xa = x0.zip_map(noise, |x, z| x + sigmas.0 * z);
    let xb = x0.zip_map(noise, |x, z| x + sigmas.1 * z);
    let fa = cm_evaluate(model, &xa, sigmas.0, ia, condition, config)?;
    let fb = cm_evaluate(ema_model, &xb, sigmas.1, ib, condition, config)?;
    Ok(fa.zip_map(&fb, |a, b| (a - b) * (a - b)).mean())
}

/// Discretization indices of a valid training pair.
pub fn adjacent_pair(sigmas: (f64, f64), config: &ConsistencyConfig) -> Result<(usize, usize), DiffusionError> {
    let (sa, sb) = sigmas;
    if sb < config.sigma_min || sb.is_nan() {
        return Err(DiffusionError::SigmaBelowMin { sigma: sb, sigma_min: config.sigma_min });
    }
    let sched = config.schedule()?;
    match (sched.index_of(sa), sched.index_of(sb)) {
        (Some(ia), Some(ib)) if ia == ib || ia == ib + 1 => Ok((ia, ib)),
        _ => Err(DiffusionError::NonAdjacentSigmas(sa, sb)),
    }
}

/// One-step generation from `σ_max·z`.
pub fn cm_sample(
    shape: Shape,
    model: &dyn Denoiser,
    condition: Option<&Tensor>,
    config: &ConsistencyConfig,
    seed: u64,
) -> Result<Tensor, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = standard_normal(shape, &mut rng).map(|z| z * config.sigma_max);
    cm_evaluate(model, &x, config.sigma_max, config.levels - 1, condition, config)
}
