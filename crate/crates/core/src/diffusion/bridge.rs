//! Brownian bridge diffusion between a source image (t = T) and a target image (t = 0).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{check_same, checked_output, standard_normal, stride_steps, Denoiser, DiffusionError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
}

impl BridgeSchedule {
    /// `m_t = t/T`, `δ_t = 2s(m_t − m_t²)`.
    pub fn new(steps: usize, scale: f64) -> Result<Self, DiffusionError> {
        if steps == 0 || !(scale > 0.0) || !scale.is_finite() {
            return Err(DiffusionError::InvalidSchedule(format!("bridge with T={steps}, s={scale}")));
        }
        let m: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        let delta = m.iter().map(|&m| 2.0 * scale * (m - m * m)).collect();
        Ok(BridgeSchedule { steps, scale, m, delta })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.steps {
            Err(DiffusionError::StepOutOfRange { t, lo: 0, hi: self.steps })
        } else {
            Ok(())
        }
    }
}

fn check_inputs(x0: &Tensor, y: &Tensor, noise: &Tensor, t: usize, s: &BridgeSchedule) -> Result<(), DiffusionError> {
    check_same(x0, y)?;
    check_same(x0, noise)?;
    s.check_step(t)
}

/// `(1−m_t)·x0 + m_t·y + √δ_t·noise`; endpoints are returned verbatim.
pub fn bbdm_forward_sample(
    x0_target: &Tensor,
    xt_source: &Tensor,
    t: usize,
    schedule: &BridgeSchedule,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    check_inputs(x0_target, xt_source, noise, t, schedule)?;
    if t == 0 {
        return Ok(x0_target.clone());
    }
    if t == schedule.steps {
        return Ok(xt_source.clone());
    }
    let (m, sd) = (schedule.m(t), schedule.delta(t).sqrt());
    let mixed = x0_target.zip_map(xt_source, |x, y| (1.0 - m) * x + m * y);
    Ok(mixed.zip_map(noise, |v, e| v + sd * e))
}

/// `m_t·(y − x0) + √δ_t·noise`, so that `x_t − target = x0`.
pub fn bbdm_training_target(
    x0_target: &Tensor,
    xt_source: &Tensor,
    t: usize,
    schedule: &BridgeSchedule,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    check_inputs(x0_target, xt_source, noise, t, schedule)?;
    let (m, sd) = (schedule.m(t), schedule.delta(t).sqrt());
    let drift = xt_source.zip_map(x0_target, |y, x| m * (y - x));
    Ok(drift.zip_map(noise, |d, e| d + sd * e))
}

/// Draw of `x_s` given `x_t`, the clean estimate and the source, `s < t`.
///
/// Uses the Gaussian posterior of the forward bridge; from `t = T` (where `δ_T = 0`)
/// it falls back to the forward marginal at `s`.
pub fn bbdm_reverse_step(
    x_t: &Tensor,
    t: usize,
    s: usize,
    x0_hat: &Tensor,
    y: &Tensor,
    schedule: &BridgeSchedule,
    noise: &Tensor,
) -> Result<Tensor, DiffusionError> {
    check_inputs(x0_hat, y, noise, t, schedule)?;
    check_same(x_t, y)?;
    if s >= t {
        return Err(DiffusionError::StepOrder { t: s, t_prev: t });
    }
    if s == 0 {
        return Ok(x0_hat.clone());
    }
    let (ms, ds) = (schedule.m(s), schedule.delta(s));
    let dt = schedule.delta(t);
    if dt == 0.0 {
        return bbdm_forward_sample(x0_hat, y, s, schedule, noise);
    }
    let (at, as_) = (1.0 - schedule.m(t), 1.0 - ms);
    let k = at / as_;
    let c = schedule.m(t) - k * ms;
    let dts = (dt - k * k * ds).max(0.0);
    let sd = (ds * dts / dt).sqrt();
    let mut out = Tensor::zeros(x_t.shape());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let (xt, x0, yy) = (x_t.data()[i], x0_hat.data()[i], y.data()[i]);
        let mean = (dts * (as_ * x0 + ms * yy) + k * ds * (xt - c * yy)) / dt;
        *o = mean + sd * noise.data()[i];
    }
    Ok(out)
}

/// Reverse bridge sampler from `x_T = source` with `steps` uniform-stride substeps.
/// The model predicts the training target, so `x̂0 = x_t − model(x_t, t, source)`.
pub fn bbdm_sample(
    xt_source: &Tensor,
    model: &dyn Denoiser,
    schedule: &BridgeSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor, DiffusionError> {
    let ts = stride_steps(schedule.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = xt_source.clone();
    for w in ts.windows(2).rev() {
        let (s, t) = (w[0], w[1]);
        let pred = checked_output(model.denoise(&x, t, Some(xt_source)), &x, t)?;
        let x0_hat = x.zip_map(&pred, |a, b| a - b);
        let noise = standard_normal(x.shape(), &mut rng);
        x = bbdm_reverse_step(&x, t, s, &x0_hat, xt_source, schedule, &noise)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn rand(shape: Shape, seed: u64) -> Tensor {
        standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn schedule_boundaries() {
        let s = BridgeSchedule::new(50, 1.0).unwrap();
        assert_eq!((s.m(0), s.m(50), s.delta(0), s.delta(50)), (0.0, 1.0, 0.0, 0.0));
        assert!((1..50).all(|t| s.delta(t) > 0.0));
        assert!((s.delta(25) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn endpoints_are_bit_exact() {
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        let sh = Shape::new(1, 3, 4, 4);
        let (x0, y, e) = (rand(sh, 1), rand(sh, 2), rand(sh, 3));
        assert_eq!(bbdm_forward_sample(&x0, &y, 0, &s, &e).unwrap(), x0);
        assert_eq!(bbdm_forward_sample(&x0, &y, 10, &s, &e).unwrap(), y);
        assert!(bbdm_forward_sample(&x0, &y, 11, &s, &e).is_err());
    }

    #[test]
    fn target_boundaries_and_reconstruction() {
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        let sh = Shape::new(1, 2, 3, 3);
        let (x0, y, e) = (rand(sh, 4), rand(sh, 5), rand(sh, 6));
        assert!(bbdm_training_target(&x0, &y, 0, &s, &e).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor::zeros(sh);
        let full = bbdm_training_target(&x0, &y, 10, &s, &z).unwrap();
        assert_eq!(full, y.zip_map(&x0, |a, b| a - b));
        for t in 0..=10 {
            let xt = bbdm_forward_sample(&x0, &y, t, &s, &e).unwrap();
            let target = bbdm_training_target(&x0, &y, t, &s, &e).unwrap();
            let rec = xt.zip_map(&target, |a, b| a - b);
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oracle_model_recovers_x0_every_step() {
        let s = BridgeSchedule::new(20, 1.0).unwrap();
        let sh = Shape::new(1, 1, 2, 2);
        let (x0, y) = (rand(sh, 7), rand(sh, 8));
        let oracle = |x: &Tensor, _: usize, _: Option<&Tensor>| x.zip_map(&x0, |a, b| a - b);
        let out = bbdm_sample(&y, &oracle, &s, 20, 0).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(bbdm_sample(&y, &oracle, &s, 5, 9).unwrap(), bbdm_sample(&y, &oracle, &s, 5, 9).unwrap());
    }

    #[test]
    fn nan_model_is_an_error() {
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        let y = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let bad = |x: &Tensor, _: usize, _: Option<&Tensor>| x.map(|_| f64::NAN);
        assert_eq!(bbdm_sample(&y, &bad, &s, 4, 0), Err(DiffusionError::NonFiniteOutput(4)));
    }
}
