//! Training objectives of the adversarial frameworks: pyramidal L1, PatchNCE and its
//! adaptive supervised (ASP) variant, the conditional GAN loss and the BCIstainer
//! composite.
//!
//! Each objective has a tape form (`*_var`) used during training and a value form that
//! builds a throwaway tape. Value forms with a `_grad` suffix also return the gradient with
//! respect to the first (generated) input.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Padding, Tape, Var};
use crate::imaging::Her2Score;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("image {shape} too small for {what}")]
    TooSmall { shape: Shape, what: String },
    #[error("need at least 2 feature locations, got {0}")]
    TooFewLocations(usize),
    #[error("non-finite discriminator logits")]
    NonFinite,
    #[error("class label {label} outside {classes} logits")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn check_same(a: Shape, b: Shape) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a, b))
    }
}

/// Normalized odd-width 2-D Gaussian kernel, row-major.
pub fn gaussian_kernel(width: usize, sigma: f64) -> Vec<f64> {
    let r = (width / 2) as f64;
    let g: Vec<f64> = (0..width).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut k = Vec::with_capacity(width * width);
    for a in &g {
        for b in &g {
            k.push(a * b);
        }
    }
    k
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    pub num_scales: usize,
    pub weights: Vec<f64>,
    /// Odd kernel width; 1 disables smoothing.
    pub blur_width: usize,
    pub sigma: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { num_scales: 4, weights: vec![1.0; 4], blur_width: 3, sigma: 1.0 }
    }
}

impl PyramidConfig {
    pub fn equal(num_scales: usize, blur_width: usize, sigma: f64) -> Self {
        PyramidConfig { num_scales, weights: vec![1.0; num_scales], blur_width, sigma }
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.num_scales == 0 || self.weights.len() != self.num_scales {
            return Err(LossError::InvalidConfig(format!(
                "{} weights for {} scales",
                self.weights.len(),
                self.num_scales
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::InvalidConfig("pyramid weights must be nonnegative".into()));
        }
        if self.blur_width.is_multiple_of(2) || !(self.sigma > 0.0) {
            return Err(LossError::InvalidConfig("blur width must be odd and sigma positive".into()));
        }
        Ok(())
    }
}

/// Level 1 is the input; level `k+1` is level `k` blurred (edge-replicated) then decimated 2×.
pub fn pyramid_var(tape: &mut Tape, x: Var, config: &PyramidConfig) -> Result<Vec<Var>, LossError> {
    config.validate()?;
    let kernel = Rc::new(gaussian_kernel(config.blur_width, config.sigma));
    let mut levels = vec![x];
    for _ in 1..config.num_scales {
        let prev = *levels.last().unwrap();
        let s = tape.shape(prev);
        if s.h <= config.blur_width || s.w <= config.blur_width {
            return Err(LossError::TooSmall {
                shape: tape.shape(x),
                what: format!("{} pyramid scales", config.num_scales),
            });
        }
        let blurred = tape.depthwise(prev, kernel.clone(), config.blur_width, Padding::Replicate);
        levels.push(tape.decimate2(blurred));
    }
    Ok(levels)
}

pub fn gaussian_pyramid(image: &Tensor, config: &PyramidConfig) -> Result<Vec<Tensor>, LossError> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let levels = pyramid_var(&mut tape, x, config)?;
    Ok(levels.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// `Σ_k w_k · mean |pyr(fake)_k − pyr(real)_k|`.
pub fn pyramidal_l1_var(tape: &mut Tape, fake: Var, real: Var, config: &PyramidConfig) -> Result<Var, LossError> {
    check_same(tape.shape(fake), tape.shape(real))?;
    let pf = pyramid_var(tape, fake, config)?;
    let pr = pyramid_var(tape, real, config)?;
    let mut total: Option<Var> = None;
    for ((f, r), w) in pf.into_iter().zip(pr).zip(&config.weights) {
        let d = tape.sub(f, r);
        let a = tape.abs(d);
        let m = tape.mean(a);
        let term = tape.scale(m, *w);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

pub fn pyramidal_l1_loss(fake: &Tensor, real: &Tensor, config: &PyramidConfig) -> Result<f64, LossError> {
    Ok(pyramidal_l1_loss_grad(fake, real, config)?.0)
}

pub fn pyramidal_l1_loss_grad(
    fake: &Tensor,
    real: &Tensor,
    config: &PyramidConfig,
) -> Result<(f64, Tensor), LossError> {
    with_grad(fake, |tape, f| {
        let r = tape.leaf(real.clone());
        pyramidal_l1_var(tape, f, r, config)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub patches_per_image: usize,
    pub feature_layers: Vec<usize>,
    /// Seed for location sampling when a map has more locations than `patches_per_image`.
    pub sample_seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.07, patches_per_image: 256, feature_layers: vec![0, 1], sample_seed: 0 }
    }
}

impl ContrastiveConfig {
    fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::InvalidConfig("temperature must be positive".into()));
        }
        if self.patches_per_image < 2 {
            return Err(LossError::InvalidConfig("patches_per_image must be at least 2".into()));
        }
        Ok(())
    }

    /// Sorted flat locations: all of them if the map is small enough, else a seeded sample.
    pub fn locations(&self, shape: Shape) -> Vec<usize> {
        let total = shape.plane();
        if total <= self.patches_per_image {
            (0..total).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
            let mut v = sample(&mut rng, total, self.patches_per_image).into_vec();
            v.sort_unstable();
            v
        }
    }
}

/// Per-location PatchNCE terms `[1, 1, N, 1]`: `logsumexp_j(s_ij) − s_ii`, `s_ij = q̂_i·k̂_j / τ`.
pub fn patchnce_terms_var(
    tape: &mut Tape,
    query: Var,
    key: Var,
    config: &ContrastiveConfig,
    locations: &[usize],
) -> Result<Var, LossError> {
    config.validate()?;
    let (sq, sk) = (tape.shape(query), tape.shape(key));
    check_same(sq, sk)?;
    if sq.n != 1 {
        return Err(LossError::InvalidConfig(format!("feature maps must be a batch of one, got {sq}")));
    }
    if locations.len() < 2 {
        return Err(LossError::TooFewLocations(locations.len()));
    }
    let q = tape.select_locations(query, locations.to_vec());
    let k = tape.select_locations(key, locations.to_vec());
    let q = tape.normalize_channels(q);
    let k = tape.normalize_channels(k);
    let sim = tape.gram(q, k);
    let logits = tape.scale(sim, 1.0 / config.temperature);
    let lse = tape.logsumexp_channels(logits);
    let pos = tape.pick_channel(logits, (0..locations.len()).collect());
    Ok(tape.sub(lse, pos))
}

pub fn patchnce_var(tape: &mut Tape, query: Var, key: Var, config: &ContrastiveConfig) -> Result<Var, LossError> {
    let locs = config.locations(tape.shape(query));
    let terms = patchnce_terms_var(tape, query, key, config, &locs)?;
    Ok(tape.mean(terms))
}

pub fn patchnce_loss(query: &Tensor, key: &Tensor, config: &ContrastiveConfig) -> Result<f64, LossError> {
    Ok(patchnce_loss_grad(query, key, config)?.0)
}

pub fn patchnce_loss_grad(
    query: &Tensor,
    key: &Tensor,
    config: &ContrastiveConfig,
) -> Result<(f64, Tensor), LossError> {
    with_grad(query, |tape, q| {
        let k = tape.leaf(key.clone());
        patchnce_var(tape, q, k, config)
    })
}

/// Per-location anchor weights `max(0, cos(fake_i, real_i))`, as constants.
pub fn asp_weights(fake: &Tensor, real: &Tensor, locations: &[usize]) -> Tensor {
    let s = fake.shape();
    let plane = s.plane();
    let w: Vec<f64> = locations
        .iter()
        .map(|&loc| {
            let (mut dot, mut nf, mut nr) = (0.0, 0.0, 0.0);
            for c in 0..s.c {
                let (a, b) = (fake.data()[c * plane + loc], real.data()[c * plane + loc]);
                dot += a * b;
                nf += a * a;
                nr += b * b;
            }
            let denom = nf.sqrt() * nr.sqrt();
            if denom > 0.0 {
                (dot / denom).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(Shape::new(1, 1, locations.len(), 1), w)
}

/// Weighted sum of PatchNCE terms for (fake, real) and (fake, source) pairs, averaged over
/// locations. The weights do not carry gradient.
pub fn asp_var(tape: &mut Tape, fake: Var, real: Var, src: Var, config: &ContrastiveConfig) -> Result<Var, LossError> {
    check_same(tape.shape(fake), tape.shape(real))?;
    let locs = config.locations(tape.shape(fake));
    let weights = asp_weights(tape.value(fake), tape.value(real), &locs);
    asp_weighted_var(tape, fake, real, src, config, weights)
}

/// [`asp_var`] with given per-location anchor weights `[1, 1, N, 1]`.
pub fn asp_weighted_var(
    tape: &mut Tape,
    fake: Var,
    real: Var,
    src: Var,
    config: &ContrastiveConfig,
    weights: Tensor,
) -> Result<Var, LossError> {
    check_same(tape.shape(fake), tape.shape(real))?;
    check_same(tape.shape(fake), tape.shape(src))?;
    let locs = config.locations(tape.shape(fake));
    if weights.shape() != Shape::new(1, 1, locs.len(), 1) {
        return Err(LossError::ShapeMismatch(weights.shape(), Shape::new(1, 1, locs.len(), 1)));
    }
    let to_real = patchnce_terms_var(tape, fake, real, config, &locs)?;
    let to_src = patchnce_terms_var(tape, fake, src, config, &locs)?;
    let both = tape.add(to_real, to_src);
    let weighted = tape.mul_const(both, weights);
    Ok(tape.mean(weighted))
}

pub fn asp_loss(fake: &Tensor, real: &Tensor, src: &Tensor, config: &ContrastiveConfig) -> Result<f64, LossError> {
    Ok(asp_loss_grad(fake, real, src, config)?.0)
}

pub fn asp_loss_grad(
    fake: &Tensor,
    real: &Tensor,
    src: &Tensor,
    config: &ContrastiveConfig,
) -> Result<(f64, Tensor), LossError> {
    with_grad(fake, |tape, f| {
        let r = tape.leaf(real.clone());
        let s = tape.leaf(src.clone());
        asp_var(tape, f, r, s, config)
    })
}

/// Non-saturating generator loss `−mean log σ(d_fake)`.
pub fn generator_adv_var(tape: &mut Tape, d_fake: Var) -> Result<Var, LossError> {
    if !tape.value(d_fake).is_finite() {
        return Err(LossError::NonFinite);
    }
    let ls = tape.log_sigmoid(d_fake);
    let m = tape.mean(ls);
    Ok(tape.neg(m))
}

/// `−mean[log σ(d_real) + log(1 − σ(d_fake))]`.
pub fn discriminator_var(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var, LossError> {
    check_same(tape.shape(d_real), tape.shape(d_fake))?;
    if !tape.value(d_real).is_finite() || !tape.value(d_fake).is_finite() {
        return Err(LossError::NonFinite);
    }
    let real_term = tape.log_sigmoid(d_real);
    let neg_fake = tape.neg(d_fake);
    let fake_term = tape.log_sigmoid(neg_fake);
    let sum = tape.add(real_term, fake_term);
    let m = tape.mean(sum);
    Ok(tape.neg(m))
}

/// Generator and discriminator BCE losses from raw patch logits.
pub fn cgan_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(f64, f64), LossError> {
    let mut tape = Tape::new();
    let r = tape.leaf(d_real.clone());
    let f = tape.leaf(d_fake.clone());
    let g = generator_adv_var(&mut tape, f)?;
    let d = discriminator_var(&mut tape, r, f)?;
    Ok((tape.scalar_value(g), tape.scalar_value(d)))
}

/// Gradients of the generator loss w.r.t. `d_fake` and of the discriminator loss
/// w.r.t. `(d_real, d_fake)`.
pub fn cgan_losses_grad(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor, Tensor), LossError> {
    let mut tape = Tape::new();
    let r = tape.leaf(d_real.clone());
    let f = tape.leaf(d_fake.clone());
    let g = generator_adv_var(&mut tape, f)?;
    let d = discriminator_var(&mut tape, r, f)?;
    let gg = tape.backward(g);
    let gd = tape.backward(d);
    Ok((gg.get(f), gd.get(r), gd.get(f)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

/// Mean SSIM over the valid Gaussian-windowed map, averaged across channels and batch.
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var, config: &SsimConfig) -> Result<Var, LossError> {
    let s = tape.shape(a);
    check_same(s, tape.shape(b))?;
    if s.h < config.window || s.w < config.window {
        return Err(LossError::TooSmall { shape: s, what: format!("{}-pixel SSIM window", config.window) });
    }
    let k = Rc::new(gaussian_kernel(config.window, config.sigma));
    let filt = |t: &mut Tape, v: Var| t.depthwise(v, k.clone(), config.window, Padding::Valid);
    let mu_a = filt(tape, a);
    let mu_b = filt(tape, b);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = filt(tape, aa);
    let e_bb = filt(tape, bb);
    let e_ab = filt(tape, ab);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);

    let two_mu = tape.scale(mu_ab, 2.0);
    let lum_num = tape.add_scalar(two_mu, config.c1);
    let two_cov = tape.scale(cov, 2.0);
    let cs_num = tape.add_scalar(two_cov, config.c2);
    let mu_sum = tape.add(mu_aa, mu_bb);
    let lum_den = tape.add_scalar(mu_sum, config.c1);
    let var_sum = tape.add(var_a, var_b);
    let cs_den = tape.add_scalar(var_sum, config.c2);
    let num = tape.mul(lum_num, cs_num);
    let den = tape.mul(lum_den, cs_den);
    let map = tape.div(num, den);
    Ok(tape.mean(map))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeWeights {
    pub lambda_adv: f64,
    pub lambda_mae: f64,
    pub lambda_ssim: f64,
    pub lambda_cls: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        CompositeWeights { lambda_adv: 1.0, lambda_mae: 10.0, lambda_ssim: 1.0, lambda_cls: 0.1 }
    }
}

impl CompositeWeights {
    fn validate(&self) -> Result<(), LossError> {
        let w = [self.lambda_adv, self.lambda_mae, self.lambda_ssim, self.lambda_cls];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(LossError::InvalidConfig(format!("invalid composite weights {w:?}")));
        }
        Ok(())
    }
}

/// Cross-entropy of `[1, K, 1, 1]` class logits against `label`.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, label: usize) -> Result<Var, LossError> {
    let s = tape.shape(logits);
    if label >= s.c {
        return Err(LossError::InvalidLabel { label, classes: s.c });
    }
    if s.n != 1 || s.h != 1 || s.w != 1 {
        return Err(LossError::InvalidConfig(format!("class logits must be [1, K, 1, 1], got {s}")));
    }
    let lse = tape.logsumexp_channels(logits);
    let picked = tape.pick_channel(logits, vec![label]);
    let ce = tape.sub(lse, picked);
    Ok(tape.sum(ce))
}

/// `λ_adv·g_adv + λ_mae·MAE + λ_ssim·(1 − SSIM) + λ_cls·CE`.
#[allow(clippy::too_many_arguments)]
pub fn bcistainer_composite_var(
    tape: &mut Tape,
    fake: Var,
    real: Var,
    d_fake: Var,
    cls_logits: Var,
    cls_label: Her2Score,
    weights: &CompositeWeights,
    ssim: &SsimConfig,
) -> Result<Var, LossError> {
    weights.validate()?;
    check_same(tape.shape(fake), tape.shape(real))?;
    let adv = generator_adv_var(tape, d_fake)?;
    let diff = tape.sub(fake, real);
    let abs = tape.abs(diff);
    let mae = tape.mean(abs);
    let s = ssim_var(tape, fake, real, ssim)?;
    let neg = tape.neg(s);
    let dssim = tape.add_scalar(neg, 1.0);
    let ce = cross_entropy_var(tape, cls_logits, cls_label.class_index())?;
    let terms =
        [(adv, weights.lambda_adv), (mae, weights.lambda_mae), (dssim, weights.lambda_ssim), (ce, weights.lambda_cls)];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for (v, w) in &terms[1..] {
        let t = tape.scale(*v, *w);
        total = tape.add(total, t);
    }
    Ok(total)
}

#[derive(Clone, Copy)]
pub struct CompositeInputs<'a> {
    pub fake: &'a Tensor,
    pub real: &'a Tensor,
    pub d_fake: &'a Tensor,
    pub cls_logits: &'a Tensor,
    pub cls_label: Her2Score,
}

pub fn bcistainer_composite(inputs: &CompositeInputs<'_>, weights: &CompositeWeights) -> Result<f64, LossError> {
    Ok(bcistainer_composite_grad(inputs, weights)?.0)
}

pub fn bcistainer_composite_grad(
    inputs: &CompositeInputs<'_>,
    weights: &CompositeWeights,
) -> Result<(f64, Tensor), LossError> {
    with_grad(inputs.fake, |tape, f| {
        let r = tape.leaf(inputs.real.clone());
        let d = tape.leaf(inputs.d_fake.clone());
        let c = tape.leaf(inputs.cls_logits.clone());
        bcistainer_composite_var(tape, f, r, d, c, inputs.cls_label, weights, &SsimConfig::default())
    })
}

fn with_grad(
    x: &Tensor,
    build: impl FnOnce(&mut Tape, Var) -> Result<Var, LossError>,
) -> Result<(f64, Tensor), LossError> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&mut tape, v)?;
    let g = tape.backward(loss).get(v);
    Ok((tape.scalar_value(loss), g))
}
