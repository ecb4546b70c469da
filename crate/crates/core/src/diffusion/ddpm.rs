//! Noise schedules, the DDPM forward process, deterministic DDIM steps and DDIB.

use crate::diffusion::{check_same, checked_output, Denoiser, DiffusionError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSchedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl AlphaSchedule {
    /// `betas[i]` is β at step `i + 1`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(AlphaSchedule { steps: betas.len(), betas, alpha_bars })
    }

    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if steps == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need T >= 1 and 0 < beta_min <= beta_max < 1, got T={steps}, [{beta_min}, {beta_max}]"
            )));
        }
        let betas =
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_0 .. ᾱ_T` with `ᾱ_0 = 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<(), DiffusionError> {
        if t < lo || t > self.steps {
            Err(DiffusionError::StepOutOfRange { t, lo, hi: self.steps })
        } else {
            Ok(())
        }
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn ddpm_forward_sample(
    x0: &Tensor,
    t: usize,
    schedule: &AlphaSchedule,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    check_same(x0, noise)?;
    schedule.check_step(t, 1)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// Deterministic (η = 0) DDIM move between any two steps, in either direction.
pub fn ddim_transfer(
    x: &Tensor,
    from: usize,
    to: usize,
    eps_hat: &Tensor,
    schedule: &AlphaSchedule,
) -> Result<Tensor, DiffusionError> {
    check_same(x, eps_hat)?;
    schedule.check_step(from, 0)?;
    schedule.check_step(to, 0)?;
    if from == to {
        return Ok(x.clone());
    }
    let (af, at) = (schedule.alpha_bar(from), schedule.alpha_bar(to));
    let (sf, st) = ((1.0 - af).sqrt(), (1.0 - at).sqrt());
    let (rf, rt) = (af.sqrt(), at.sqrt());
    Ok(x.zip_map(eps_hat, |x, e| rt * ((x - sf * e) / rf) + st * e))
}

/// One reverse DDIM step from `t` to `t_prev ≤ t`.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    schedule: &AlphaSchedule,
) -> Result<Tensor, DiffusionError> {
    if t_prev > t {
        return Err(DiffusionError::StepOrder { t, t_prev });
    }
    ddim_transfer(x_t, t, t_prev, eps_hat, schedule)
}

/// `steps + 1` ascending step indices from 0 to `total` with uniform stride.
pub fn stride_steps(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > total {
        return Err(DiffusionError::InvalidSchedule(format!("{steps} sampling steps for T={total}")));
    }
    Ok((0..=steps).map(|i| (i * total + steps / 2) / steps).collect())
}

/// Fixed-point refinements per encoding step.
pub const ENCODE_REFINEMENTS: usize = 6;

/// Encodes along ascending steps `ts`. Each step solves
/// `x_t = transfer(x_s, s → t, ε(x_t, t))` by fixed-point iteration, so it inverts the
/// matching decoding step rather than approximating it.
pub fn ddim_encode_path(
    x0: &Tensor,
    ts: &[usize],
    model: &dyn Denoiser,
    schedule: &AlphaSchedule,
    condition: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    let mut x = x0.clone();
    for w in ts.windows(2) {
        let (from, to) = (w[0], w[1]);
        if to < from {
            return Err(DiffusionError::StepOrder { t: to, t_prev: from });
        }
        let mut next = x.clone();
        for _ in 0..=ENCODE_REFINEMENTS {
            let eps = checked_output(model.denoise(&next, to, condition), &x, to)?;
            next = ddim_transfer(&x, from, to, &eps, schedule)?;
        }
        x = next;
    }
    Ok(x)
}

/// Decodes along ascending steps `ts`, starting from the last one.
pub fn ddim_decode_path(
    x: &Tensor,
    ts: &[usize],
    model: &dyn Denoiser,
    schedule: &AlphaSchedule,
    condition: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    let mut x = x.clone();
    for w in ts.windows(2).rev() {
        let (to, from) = (w[0], w[1]);
        let eps = checked_output(model.denoise(&x, from, condition), &x, from)?;
        x = ddim_step(&x, from, to, &eps, schedule)?;
    }
    Ok(x)
}

/// Deterministic encoding from data (step 0) to the latent at step T.
pub fn ddim_encode(
    x0: &Tensor,
    model: &dyn Denoiser,
    schedule: &AlphaSchedule,
    steps: usize,
    condition: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    ddim_encode_path(x0, &stride_steps(schedule.steps(), steps)?, model, schedule, condition)
}

/// Deterministic decoding from a latent at step T to data.
pub fn ddim_sample(
    x_t: &Tensor,
    model: &dyn Denoiser,
    schedule: &AlphaSchedule,
    steps: usize,
    condition: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    ddim_decode_path(x_t, &stride_steps(schedule.steps(), steps)?, model, schedule, condition)
}

/// Encodes with the source-domain model, then decodes the latent with the target-domain model.
pub fn ddib_translate(
    x_src: &Tensor,
    model_src: &dyn Denoiser,
    model_tgt: &dyn Denoiser,
    schedule: &AlphaSchedule,
    steps: usize,
) -> Result<Tensor, DiffusionError> {
    let ts = stride_steps(schedule.steps(), steps)?;
    let latent = ddim_encode_path(x_src, &ts, model_src, schedule, None)?;
    ddim_decode_path(&latent, &ts, model_tgt, schedule, None)
}

/// DDIB through the intermediate latent at step `depth` using unit steps; `depth = 0`
/// returns the input and `depth = T` is the full bridge.
pub fn ddib_translate_to_depth(
    x_src: &Tensor,
    model_src: &dyn Denoiser,
    model_tgt: &dyn Denoiser,
    schedule: &AlphaSchedule,
    depth: usize,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(depth, 0)?;
    let ts: Vec<usize> = (0..=depth).collect();
    let latent = ddim_encode_path(x_src, &ts, model_src, schedule, None)?;
    ddim_decode_path(&latent, &ts, model_tgt, schedule, None)
}
