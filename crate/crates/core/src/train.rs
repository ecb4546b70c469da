//! Training objectives with exact parameter gradients and desk-scale training loops for
//! the six translation frameworks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::backbone::{flatten_grads, Adam, BackboneError, NetInput, SmallUNet, UNetConfig};
use crate::diffusion::{
    bbdm_forward_sample, bbdm_sample, bbdm_training_target, cm_evaluate, cm_sample, ddib_translate,
    ddpm_forward_sample, standard_normal, AlphaSchedule, BridgeSchedule, ConsistencyConfig, DiffusionError,
};
use crate::imaging::Her2Score;
use crate::lmm::Framework;
use crate::losses::{
    asp_var, asp_weighted_var, asp_weights, bcistainer_composite_var, discriminator_var, generator_adv_var,
    pyramidal_l1_var, CompositeWeights, ContrastiveConfig, LossError, PyramidConfig, SsimConfig,
};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("model does not match framework {0}")]
    WrongModel(Architecture),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Architecture {
    Ppx2px,
    Asp,
    Bcistainer,
    Ddib,
    Cm,
    Bbdm,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Ppx2px,
        Architecture::Asp,
        Architecture::Bcistainer,
        Architecture::Ddib,
        Architecture::Cm,
        Architecture::Bbdm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Ppx2px => "ppx2px",
            Architecture::Asp => "asp",
            Architecture::Bcistainer => "bcistainer",
            Architecture::Ddib => "ddib",
            Architecture::Cm => "cm",
            Architecture::Bbdm => "bbdm",
        }
    }

    pub fn family(self) -> Framework {
        match self {
            Architecture::Ppx2px | Architecture::Asp | Architecture::Bcistainer => Framework::Gan,
            _ => Framework::Dm,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown framework '{s}' (ppx2px|asp|bcistainer|ddib|cm|bbdm)"))
    }
}

/// Paired source/target images, each `[1, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    sources: Vec<Tensor>,
    targets: Vec<Tensor>,
    scores: Vec<Her2Score>,
}

/// Stacked mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Tensor,
    pub target: Tensor,
    pub scores: Vec<Her2Score>,
}

impl PairSet {
    pub fn new(sources: Vec<Tensor>, targets: Vec<Tensor>, scores: Vec<Her2Score>) -> Result<Self, TrainError> {
        if sources.is_empty() {
            return Err(TrainError::Data("no pairs".into()));
        }
        if sources.len() != targets.len() || sources.len() != scores.len() {
            return Err(TrainError::Data("sources, targets and scores differ in length".into()));
        }
        let s = sources[0].shape();
        if s.n != 1 {
            return Err(TrainError::Data(format!("pairs must be single images, got {s}")));
        }
        if let Some(bad) = sources.iter().chain(&targets).find(|t| t.shape() != s) {
            return Err(TrainError::Data(format!("shape {} differs from {s}", bad.shape())));
        }
        if sources.iter().chain(&targets).any(|t| !t.is_finite()) {
            return Err(TrainError::Data("non-finite pixel".into()));
        }
        Ok(PairSet { sources, targets, scores })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn image_shape(&self) -> Shape {
        self.sources[0].shape()
    }

    pub fn sources(&self) -> &[Tensor] {
        &self.sources
    }

    pub fn targets(&self) -> &[Tensor] {
        &self.targets
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let pick = |v: &[Tensor]| Tensor::stack(&indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        Batch {
            source: pick(&self.sources),
            target: pick(&self.targets),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Two-domain 1×2 toy: sources ≡ 0, targets ≡ 1 plus uniform jitter in `[−jitter, jitter]`.
pub fn two_pixel_toy(pairs: usize, jitter: f64, seed: u64) -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(1, 1, 1, 2);
    let mut targets = Vec::new();
    for _ in 0..pairs {
        let v: Vec<f64> = (0..2).map(|_| 1.0 + jitter * rng.random_range(-1.0..=1.0)).collect();
        targets.push(Tensor::from_vec(s, v));
    }
    PairSet::new(vec![Tensor::zeros(s); pairs], targets, vec![Her2Score::Zero; pairs]).expect("valid toy")
}

/// Smooth random sources in `[0, 1]` with targets given by a fixed channel remix,
/// `target_c = 1 − source_{(c+1) mod C}`.
pub fn paired_toy(pairs: usize, channels: usize, size: usize, seed: u64) -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(1, channels, size, size);
    let (mut sources, mut targets, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..pairs {
        let waves: Vec<[f64; 4]> = (0..channels)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.2..0.45),
                ]
            })
            .collect();
        let mut src = Tensor::zeros(s);
        for (c, [fy, fx, ph, amp]) in waves.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let u = (y as f64 * fy + x as f64 * fx) / size as f64 * std::f64::consts::TAU + ph;
                    src.data_mut()[s.index(0, c, y, x)] = 0.5 + amp * u.sin();
                }
            }
        }
        let mut tgt = Tensor::zeros(s);
        for c in 0..channels {
            let from = (c + 1) % channels;
            for p in 0..s.plane() {
                tgt.data_mut()[c * s.plane() + p] = 1.0 - src.data()[from * s.plane() + p];
            }
        }
        sources.push(src);
        targets.push(tgt);
        scores.push(Her2Score::from_class_index(i % 4).expect("four classes"));
    }
    PairSet::new(sources, targets, scores).expect("valid toy")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub framework: Architecture,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub width: usize,
    pub levels: usize,
    pub time_dim: usize,
    pub lambda_pyramid: f64,
    pub pyramid: PyramidConfig,
    pub lambda_nce: f64,
    pub contrastive: ContrastiveConfig,
    pub composite: CompositeWeights,
    pub ddpm_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    pub bridge_steps: usize,
    pub bridge_scale: f64,
    pub consistency: ConsistencyConfig,
    /// Condition the consistency model on the source image.
    pub cm_conditional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            framework: Architecture::Bbdm,
            steps: 200,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            width: 8,
            levels: 2,
            time_dim: 16,
            lambda_pyramid: 10.0,
            pyramid: PyramidConfig::default(),
            lambda_nce: 1.0,
            contrastive: ContrastiveConfig::default(),
            composite: CompositeWeights::default(),
            ddpm_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            sample_steps: 50,
            bridge_steps: 50,
            bridge_scale: 1.0,
            consistency: ConsistencyConfig::default(),
            cm_conditional: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be positive".into());
        }
        Ok(())
    }

    pub fn alpha_schedule(&self) -> Result<AlphaSchedule, TrainError> {
        Ok(AlphaSchedule::linear(self.ddpm_steps, self.beta_min, self.beta_max)?)
    }

    pub fn bridge_schedule(&self) -> Result<BridgeSchedule, TrainError> {
        Ok(BridgeSchedule::new(self.bridge_steps, self.bridge_scale)?)
    }

    /// Named network configurations for images with `channels` channels.
    pub fn networks(&self, channels: usize) -> Vec<(&'static str, UNetConfig)> {
        let base = UNetConfig {
            in_channels: channels,
            cond_channels: 0,
            out_channels: channels,
            levels: self.levels,
            width: self.width,
            time_dim: 0,
            num_classes: 0,
            zero_init_output: false,
            seed: self.seed,
        };
        let small = (self.width / 2).max(2);
        let disc = UNetConfig {
            cond_channels: channels,
            out_channels: 1,
            levels: 1,
            width: small,
            seed: self.seed ^ 0xD15C,
            ..base.clone()
        };
        let timed = UNetConfig { time_dim: self.time_dim, zero_init_output: true, ..base.clone() };
        match self.framework {
            Architecture::Ppx2px | Architecture::Asp => vec![("generator", base), ("discriminator", disc)],
            Architecture::Bcistainer => {
                let cls =
                    UNetConfig { out_channels: 4, levels: 1, width: small, seed: self.seed ^ 0xC1A5, ..base.clone() };
                vec![("generator", base), ("discriminator", disc), ("classifier", cls)]
            }
            Architecture::Ddib => vec![
                ("source", UNetConfig { seed: self.seed ^ 0x5AC, ..timed.clone() }),
                ("target", UNetConfig { seed: self.seed ^ 0x7A6, ..timed }),
            ],
            Architecture::Cm => {
                let cond = if self.cm_conditional { channels } else { 0 };
                let net = UNetConfig { cond_channels: cond, zero_init_output: false, ..timed };
                vec![("model", net.clone()), ("ema", net)]
            }
            Architecture::Bbdm => vec![("model", UNetConfig { cond_channels: channels, ..timed })],
        }
    }
}

/// Generator-side objective of a GAN framework. The gradient covers the generator
/// parameters followed by the classifier parameters (BCIstainer only).
pub fn gan_generator_objective(
    config: &TrainConfig,
    generator: &SmallUNet,
    discriminator: &SmallUNet,
    classifier: Option<&SmallUNet>,
    batch: &Batch,
) -> Result<(f64, Vec<f64>), TrainError> {
    generator_objective(config, generator, discriminator, classifier, batch, None)
}

/// ASP anchor weights of each batch item at the current generator parameters.
pub fn asp_anchor_weights(
    config: &TrainConfig,
    generator: &SmallUNet,
    batch: &Batch,
) -> Result<Vec<Tensor>, TrainError> {
    let plain = NetInput::default();
    (0..batch.source.shape().n)
        .map(|i| {
            let fake = generator.predict(&batch.source.item(i), &plain)?;
            let feats = |x: &Tensor| -> Result<Tensor, TrainError> {
                let mut pass = generator.forward(x, &plain)?;
                let f = pass.features()[0];
                Ok(pass.tape_mut().value(f).clone())
            };
            let (q, k) = (feats(&fake)?, feats(&batch.target.item(i))?);
            Ok(asp_weights(&q, &k, &config.contrastive.locations(q.shape())))
        })
        .collect()
}

/// [`gan_generator_objective`] for ASP with anchor weights held at `weights`.
pub fn asp_objective_frozen(
    config: &TrainConfig,
    generator: &SmallUNet,
    discriminator: &SmallUNet,
    batch: &Batch,
    weights: &[Tensor],
) -> Result<(f64, Vec<f64>), TrainError> {
    if config.framework != Architecture::Asp {
        return Err(TrainError::WrongModel(config.framework));
    }
    generator_objective(config, generator, discriminator, None, batch, Some(weights))
}

fn generator_objective(
    config: &TrainConfig,
    generator: &SmallUNet,
    discriminator: &SmallUNet,
    classifier: Option<&SmallUNet>,
    batch: &Batch,
    frozen: Option<&[Tensor]>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let arch = config.framework;
    if arch.family() != Framework::Gan {
        return Err(TrainError::WrongModel(arch));
    }
    let n = batch.source.shape().n;
    let mut tape = Tape::new();
    let gp = generator.leaf_params(&mut tape);
    let dp = discriminator.leaf_params(&mut tape);
    let cp = classifier.map(|c| c.leaf_params(&mut tape));
    let plain = NetInput::default();
    let mut terms = Vec::new();
    for i in 0..n {
        let src_t = batch.source.item(i);
        let src = tape.leaf(src_t.clone());
        let real = tape.leaf(batch.target.item(i));
        let fake = generator.build(&mut tape, &gp, src, &plain)?.output;
        let cond = NetInput { condition: Some(&src_t), ..plain };
        let d_fake = discriminator.build(&mut tape, &dp, fake, &cond)?.output;
        let total = match arch {
            Architecture::Ppx2px => {
                let adv = generator_adv_var(&mut tape, d_fake)?;
                let rec = pyramidal_l1_var(&mut tape, fake, real, &config.pyramid)?;
                let rec = tape.scale(rec, config.lambda_pyramid);
                tape.add(adv, rec)
            }
            Architecture::Asp => {
                let adv = generator_adv_var(&mut tape, d_fake)?;
                let q = generator.build(&mut tape, &gp, fake, &plain)?.features[0];
                let k = generator.build(&mut tape, &gp, real, &plain)?.features[0];
                let s = generator.build(&mut tape, &gp, src, &plain)?.features[0];
                let nce = match frozen {
                    Some(w) => asp_weighted_var(&mut tape, q, k, s, &config.contrastive, w[i].clone())?,
                    None => asp_var(&mut tape, q, k, s, &config.contrastive)?,
                };
                let nce = tape.scale(nce, config.lambda_nce);
                tape.add(adv, nce)
            }
            _ => {
                let cls = classifier.ok_or(TrainError::WrongModel(arch))?;
                let cp = cp.as_ref().expect("classifier params");
                let map = cls.build(&mut tape, cp, fake, &plain)?.output;
                let logits = tape.spatial_mean(map);
                bcistainer_composite_var(
                    &mut tape,
                    fake,
                    real,
                    d_fake,
                    logits,
                    batch.scores[i],
                    &config.composite,
                    &SsimConfig::default(),
                )?
            }
        };
        terms.push(total);
    }
    let loss = mean_of(&mut tape, &terms);
    let grads = tape.backward(loss);
    let mut g = flatten_grads(&grads, &gp);
    if let Some(cp) = &cp {
        g.extend(flatten_grads(&grads, cp));
    }
    Ok((tape.scalar_value(loss), g))
}

/// Conditional discriminator objective with generator outputs held fixed.
pub fn discriminator_objective(
    generator: &SmallUNet,
    discriminator: &SmallUNet,
    batch: &Batch,
) -> Result<(f64, Vec<f64>), TrainError> {
    let fake = generator.predict(&batch.source, &NetInput::default())?;
    let mut tape = Tape::new();
    let dp = discriminator.leaf_params(&mut tape);
    let cond = NetInput { condition: Some(&batch.source), ..Default::default() };
    let real = tape.leaf(batch.target.clone());
    let fake = tape.leaf(fake);
    let d_real = discriminator.build(&mut tape, &dp, real, &cond)?.output;
    let d_fake = discriminator.build(&mut tape, &dp, fake, &cond)?.output;
    let loss = discriminator_var(&mut tape, d_real, d_fake)?;
    Ok((tape.scalar_value(loss), flatten_grads(&tape.backward(loss), &dp)))
}

/// Noise-prediction objective `mean((ε̂(x_t, t) − ε)²)` with one step per batch item.
pub fn ddpm_objective(
    net: &SmallUNet,
    x0: &Tensor,
    steps: &[usize],
    noise: &Tensor,
    schedule: &AlphaSchedule,
) -> Result<(f64, Vec<f64>), TrainError> {
    let items = per_item(x0, steps, |i, t| ddpm_forward_sample(&x0.item(i), t, schedule, &noise.item(i)))?;
    let input = NetInput { steps: Some(steps), ..Default::default() };
    mse_objective(net, &items, &input, noise)
}

/// Bridge objective: the network sees `(x_t, t, source)` and regresses the training target.
pub fn bbdm_objective(
    net: &SmallUNet,
    x0_target: &Tensor,
    source: &Tensor,
    steps: &[usize],
    noise: &Tensor,
    schedule: &BridgeSchedule,
) -> Result<(f64, Vec<f64>), TrainError> {
    let (ni, si) = (|i| noise.item(i), |i| source.item(i));
    let xt = per_item(x0_target, steps, |i, t| bbdm_forward_sample(&x0_target.item(i), &si(i), t, schedule, &ni(i)))?;
    let target =
        per_item(x0_target, steps, |i, t| bbdm_training_target(&x0_target.item(i), &si(i), t, schedule, &ni(i)))?;
    let input = NetInput { steps: Some(steps), condition: Some(source), ..Default::default() };
    mse_objective(net, &xt, &input, &target)
}

/// Consistency-training objective for pairs `(σ_{k+1}, σ_k)` with `k = lower[i]` per item;
/// the EMA branch is a constant target. Matches `cm_training_step` for a single item.
pub fn cm_objective(
    net: &SmallUNet,
    ema: &SmallUNet,
    x0: &Tensor,
    condition: Option<&Tensor>,
    lower: &[usize],
    noise: &Tensor,
    config: &ConsistencyConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let sched = config.schedule()?;
    let sig = sched.sigmas();
    let s = x0.shape();
    if lower.len() != s.n || lower.iter().any(|&k| k + 1 >= sig.len()) {
        return Err(TrainError::Config(format!("need {} pair indices below {}", s.n, sig.len() - 1)));
    }
    if noise.shape() != s {
        return Err(TrainError::Data(format!("noise {} does not match {s}", noise.shape())));
    }
    let per = s.numel() / s.n;
    let coef = |i: usize| {
        let k = i / per;
        (sig[lower[k] + 1], sig[lower[k]])
    };
    let xa = Tensor::from_vec(s, (0..s.numel()).map(|i| x0.data()[i] + coef(i).0 * noise.data()[i]).collect());
    let mut targets = Vec::with_capacity(s.n);
    for (k, &lo) in lower.iter().enumerate() {
        let xb = x0.item(k).zip_map(&noise.item(k), |x, z| x + sig[lo] * z);
        let cond = condition.map(|c| c.item(k));
        targets.push(cm_evaluate(ema, &xb, sig[lo], lo, cond.as_ref(), config)?);
    }
    let target = Tensor::stack(&targets);
    let c_in = Tensor::from_vec(s, (0..s.numel()).map(|i| config.c_in(coef(i).0)).collect());
    let c_out = Tensor::from_vec(s, (0..s.numel()).map(|i| config.c_out(coef(i).0)).collect());
    let skip = Tensor::from_vec(s, (0..s.numel()).map(|i| config.c_skip(coef(i).0) * xa.data()[i]).collect());
    let upper: Vec<usize> = lower.iter().map(|k| k + 1).collect();

    let mut tape = Tape::new();
    let params = net.leaf_params(&mut tape);
    let x_in = tape.leaf(xa.zip_map(&c_in, |x, c| x * c));
    let input = NetInput { steps: Some(&upper), condition, ..Default::default() };
    let raw = net.build(&mut tape, &params, x_in, &input)?.output;
    let out = tape.mul_const(raw, c_out);
    let skip = tape.leaf(skip);
    let f = tape.add(out, skip);
    let t = tape.leaf(target);
    let diff = tape.sub(f, t);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    Ok((tape.scalar_value(loss), flatten_grads(&tape.backward(loss), &params)))
}

fn per_item(
    x: &Tensor,
    steps: &[usize],
    f: impl Fn(usize, usize) -> Result<Tensor, DiffusionError>,
) -> Result<Tensor, TrainError> {
    if steps.len() != x.shape().n {
        return Err(TrainError::Config(format!("need {} steps, got {}", x.shape().n, steps.len())));
    }
    let items = steps.iter().enumerate().map(|(i, &t)| f(i, t)).collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::stack(&items))
}

fn mse_objective(
    net: &SmallUNet,
    x: &Tensor,
    input: &NetInput<'_>,
    target: &Tensor,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let params = net.leaf_params(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = net.build(&mut tape, &params, xv, input)?.output;
    let t = tape.leaf(target.clone());
    let diff = tape.sub(out, t);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    Ok((tape.scalar_value(loss), flatten_grads(&tape.backward(loss), &params)))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Gan { generator: SmallUNet, discriminator: SmallUNet, classifier: Option<SmallUNet> },
    Ddib { source: SmallUNet, target: SmallUNet },
    Cm { model: SmallUNet, ema: SmallUNet },
    Bbdm { model: SmallUNet },
}

impl TrainedModel {
    fn init(config: &TrainConfig, channels: usize) -> Result<Self, TrainError> {
        let nets =
            config.networks(channels).into_iter().map(|(_, c)| SmallUNet::new(c)).collect::<Result<Vec<_>, _>>()?;
        Self::from_networks(config.framework, nets)
    }

    /// Rebuilds a model from networks in the order of [`TrainConfig::networks`].
    pub fn from_networks(arch: Architecture, nets: Vec<SmallUNet>) -> Result<Self, TrainError> {
        let mut it = nets.into_iter();
        let mut next = || it.next().ok_or(TrainError::WrongModel(arch));
        Ok(match arch {
            Architecture::Ppx2px | Architecture::Asp => {
                TrainedModel::Gan { generator: next()?, discriminator: next()?, classifier: None }
            }
            Architecture::Bcistainer => {
                TrainedModel::Gan { generator: next()?, discriminator: next()?, classifier: Some(next()?) }
            }
            Architecture::Ddib => TrainedModel::Ddib { source: next()?, target: next()? },
            Architecture::Cm => {
                let model = next()?;
                let ema = next()?;
                TrainedModel::Cm { model, ema }
            }
            Architecture::Bbdm => TrainedModel::Bbdm { model: next()? },
        })
    }

    /// Networks in the order of [`TrainConfig::networks`].
    pub fn networks(&self) -> Vec<&SmallUNet> {
        match self {
            TrainedModel::Gan { generator, discriminator, classifier } => {
                let mut v = vec![generator, discriminator];
                v.extend(classifier.as_ref());
                v
            }
            TrainedModel::Ddib { source, target } => vec![source, target],
            TrainedModel::Cm { model, ema } => vec![model, ema],
            TrainedModel::Bbdm { model } => vec![model],
        }
    }

    /// Translates a batch of source images; stochastic samplers draw from `seed`.
    pub fn translate(&self, config: &TrainConfig, source: &Tensor, seed: u64) -> Result<Tensor, TrainError> {
        Ok(match self {
            TrainedModel::Gan { generator, .. } => generator.predict(source, &NetInput::default())?,
            TrainedModel::Ddib { source: s, target: t } => {
                ddib_translate(source, s, t, &config.alpha_schedule()?, config.sample_steps.min(config.ddpm_steps))?
            }
            TrainedModel::Cm { ema, .. } => {
                let cond = config.cm_conditional.then_some(source);
                cm_sample(source.shape(), ema, cond, &config.consistency, seed)?
            }
            TrainedModel::Bbdm { model } => bbdm_sample(
                source,
                model,
                &config.bridge_schedule()?,
                config.sample_steps.min(config.bridge_steps),
                seed,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Tracked objective per step: the generator objective for GANs, the mean of both
    /// denoiser losses for DDIB, and the training loss otherwise.
    pub losses: Vec<f64>,
}

/// Moving average over `window` steps.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.clamp(1, losses.len().max(1));
    losses.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

pub fn train(data: &PairSet, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let channels = data.image_shape().c;
    let mut model = TrainedModel::init(config, channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adams: Vec<Adam> =
        model.networks().iter().map(|n| Adam::new(n.param_count(), config.learning_rate)).collect();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch = data.batch(&idx);
        let n = idx.len();
        let loss = match &mut model {
            TrainedModel::Gan { generator, discriminator, classifier } => {
                let (_, gd) = discriminator_objective(generator, discriminator, &batch)?;
                adams[1].step(discriminator.params_mut(), &gd)?;
                let (l, g) = gan_generator_objective(config, generator, discriminator, classifier.as_ref(), &batch)?;
                let split = generator.param_count();
                adams[0].step(generator.params_mut(), &g[..split])?;
                if let Some(c) = classifier {
                    adams[2].step(c.params_mut(), &g[split..])?;
                }
                l
            }
            TrainedModel::Ddib { source, target } => {
                let sched = config.alpha_schedule()?;
                let mut total = 0.0;
                for (k, (net, x0)) in [(source, &batch.source), (target, &batch.target)].into_iter().enumerate() {
                    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
                    let noise = standard_normal(x0.shape(), &mut rng);
                    let (l, g) = ddpm_objective(net, x0, &steps, &noise, &sched)?;
                    adams[k].step(net.params_mut(), &g)?;
                    total += 0.5 * l;
                }
                total
            }
            TrainedModel::Cm { model, ema } => {
                let c = &config.consistency;
                let lower: Vec<usize> = (0..n).map(|_| rng.random_range(0..c.levels - 1)).collect();
                let noise = standard_normal(batch.target.shape(), &mut rng);
                let cond = config.cm_conditional.then_some(&batch.source);
                let (l, g) = cm_objective(model, ema, &batch.target, cond, &lower, &noise, c)?;
                adams[0].step(model.params_mut(), &g)?;
                crate::backbone::ema_update(ema.params_mut(), model.params(), c.ema_decay);
                l
            }
            TrainedModel::Bbdm { model } => {
                let sched = config.bridge_schedule()?;
                let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
                let noise = standard_normal(batch.target.shape(), &mut rng);
                let (l, g) = bbdm_objective(model, &batch.target, &batch.source, &steps, &noise, &sched)?;
                adams[0].step(model.params_mut(), &g)?;
                l
            }
        };
        if !loss.is_finite() {
            return Err(TrainError::Data("training loss became non-finite".into()));
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}
