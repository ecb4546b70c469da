//! A small U-Net with a flat parameter vector, reverse-mode gradients through the tape,
//! and an Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Var};
use crate::diffusion::Denoiser;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("input shape {got} incompatible with network ({reason})")]
    Shape { got: Shape, reason: String },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels of an image condition concatenated to the input; 0 for none.
    pub cond_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub width: usize,
    /// Sinusoidal step-embedding size (even); 0 disables it.
    pub time_dim: usize,
    /// Number of classes for the learned bottleneck bias; 0 disables it.
    pub num_classes: usize,
    pub zero_init_output: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            cond_channels: 0,
            out_channels: 3,
            levels: 2,
            width: 16,
            time_dim: 0,
            num_classes: 0,
            zero_init_output: false,
            seed: 0,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: &str| Err(BackboneError::InvalidConfig(m.to_string()));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.levels == 0 || self.width == 0 {
            return bad("levels and width must be positive");
        }
        if !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even");
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> usize {
        self.width << level
    }

    fn bottleneck(&self) -> usize {
        self.level_width(self.levels - 1)
    }

    /// Spatial sizes must halve cleanly `levels − 1` times.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Shape,
    pub offset: usize,
}

fn layout(c: &UNetConfig) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, shape: Shape| {
        slots.push(ParamSlot { name, shape, offset });
        offset += shape.numel();
    };
    let conv = |co: usize, ci: usize, k: usize| Shape::new(co, ci, k, k);
    let bias = |co: usize| Shape::new(1, co, 1, 1);
    let mut cin = c.in_channels + c.cond_channels;
    for l in 0..c.levels {
        let w = c.level_width(l);
        add(format!("enc{l}.w"), conv(w, cin, 3));
        add(format!("enc{l}.b"), bias(w));
        cin = w;
    }
    let wb = c.bottleneck();
    if c.time_dim > 0 {
        add("time1.w".into(), conv(wb, c.time_dim, 1));
        add("time1.b".into(), bias(wb));
        add("time2.w".into(), conv(wb, wb, 1));
        add("time2.b".into(), bias(wb));
    }
    if c.num_classes > 0 {
        add("class.w".into(), conv(wb, c.num_classes, 1));
    }
    add("mid.w".into(), conv(wb, wb, 3));
    add("mid.b".into(), bias(wb));
    for l in (0..c.levels - 1).rev() {
        let w = c.level_width(l);
        add(format!("dec{l}.w"), conv(w, c.level_width(l + 1) + w, 3));
        add(format!("dec{l}.b"), bias(w));
    }
    add("out.w".into(), conv(c.out_channels, c.width, 3));
    add("out.b".into(), bias(c.out_channels));
    slots
}

/// Sinusoidal embedding `[sin(t·f_k), cos(t·f_k)]`, `f_k = 10000^(−k/half)`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(Shape::new(steps.len(), dim, 1, 1));
    for (n, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let f = (-(10000f64).ln() * k as f64 / half as f64).exp();
            out.data_mut()[n * dim + k] = (t as f64 * f).sin();
            out.data_mut()[n * dim + half + k] = (t as f64 * f).cos();
        }
    }
    out
}

/// Network inputs beyond the image itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct NetInput<'a> {
    /// One step index per batch item.
    pub steps: Option<&'a [usize]>,
    pub condition: Option<&'a Tensor>,
    /// One class index per batch item.
    pub classes: Option<&'a [usize]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallUNet {
    config: UNetConfig,
    slots: Vec<ParamSlot>,
    params: Vec<f64>,
}

/// Tape variables of one forward pass.
pub struct Built {
    pub output: Var,
    /// Encoder activations, shallowest first.
    pub features: Vec<Var>,
}

impl SmallUNet {
    pub fn new(config: UNetConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let slots = layout(&config);
        let total = slots.last().map_or(0, |s| s.offset + s.shape.numel());
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for s in &slots {
            if s.name.ends_with(".b") || (s.name == "out.w" && config.zero_init_output) {
                continue;
            }
            let fan_in = s.shape.c * s.shape.h * s.shape.w;
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[s.offset..s.offset + s.shape.numel()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(SmallUNet { config, slots, params })
    }

    pub fn from_params(config: UNetConfig, params: Vec<f64>) -> Result<Self, BackboneError> {
        let mut net = SmallUNet::new(config)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), BackboneError> {
        if params.len() != self.params.len() {
            return Err(BackboneError::ParamCount { expected: self.params.len(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    fn check_input(&self, x: Shape, input: &NetInput<'_>) -> Result<(), BackboneError> {
        let c = &self.config;
        let fail = |reason: String| Err(BackboneError::Shape { got: x, reason });
        if x.c != c.in_channels {
            return fail(format!("expected {} channels", c.in_channels));
        }
        let m = c.size_multiple();
        if !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return fail(format!("height and width must be multiples of {m}"));
        }
        match (input.condition, c.cond_channels) {
            (None, 0) => {}
            (Some(cond), k) if k > 0 => {
                let s = cond.shape();
                if s != Shape::new(x.n, k, x.h, x.w) {
                    return fail(format!("condition {s} must be [{}, {k}, {}, {}]", x.n, x.h, x.w));
                }
            }
            (None, k) => return fail(format!("missing {k}-channel condition")),
            (Some(_), _) => return fail("network takes no condition".into()),
        }
        match (input.steps, c.time_dim) {
            (None, 0) => {}
            (Some(t), d) if d > 0 && t.len() == x.n => {}
            (Some(_), 0) => return fail("network takes no step".into()),
            _ => return fail(format!("need one step per batch item ({})", x.n)),
        }
        match (input.classes, c.num_classes) {
            (None, 0) => {}
            (Some(k), n) if n > 0 && k.len() == x.n => {
                if let Some(bad) = k.iter().find(|&&k| k >= n) {
                    return fail(format!("class {bad} out of range for {n} classes"));
                }
            }
            (Some(_), 0) => return fail("network takes no class".into()),
            _ => return fail(format!("need one class per batch item ({})", x.n)),
        }
        Ok(())
    }

    /// Adds every parameter tensor to `tape` as a leaf.
    pub fn leaf_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.slots
            .iter()
            .map(|s| tape.leaf(Tensor::from_vec(s.shape, self.params[s.offset..s.offset + s.shape.numel()].to_vec())))
            .collect()
    }

    /// Builds the network on `tape` from an image variable and leaf parameters.
    pub fn build(&self, tape: &mut Tape, params: &[Var], x: Var, input: &NetInput<'_>) -> Result<Built, BackboneError> {
        let xs = tape.shape(x);
        self.check_input(xs, input)?;
        let c = &self.config;
        let p = |name: &str| params[self.slots.iter().position(|s| s.name == name).expect("known slot")];

        let mut h = match input.condition {
            Some(cond) => {
                let cv = tape.leaf(cond.clone());
                tape.concat(x, cv)
            }
            None => x,
        };
        let mut skips = Vec::new();
        for l in 0..c.levels {
            if l > 0 {
                h = tape.avg_pool2(h);
            }
            let conv = tape.conv2d(h, p(&format!("enc{l}.w")), Some(p(&format!("enc{l}.b"))));
            h = tape.silu(conv);
            skips.push(h);
        }
        if let Some(steps) = input.steps {
            let emb = tape.leaf(time_embedding(steps, c.time_dim));
            let e1 = tape.conv2d(emb, p("time1.w"), Some(p("time1.b")));
            let e1 = tape.silu(e1);
            let e2 = tape.conv2d(e1, p("time2.w"), Some(p("time2.b")));
            h = tape.add_broadcast(h, e2);
        }
        if let Some(classes) = input.classes {
            let mut onehot = Tensor::zeros(Shape::new(xs.n, c.num_classes, 1, 1));
            for (n, &k) in classes.iter().enumerate() {
                onehot.data_mut()[n * c.num_classes + k] = 1.0;
            }
            let oh = tape.leaf(onehot);
            let bias = tape.conv2d(oh, p("class.w"), None);
            h = tape.add_broadcast(h, bias);
        }
        let mid = tape.conv2d(h, p("mid.w"), Some(p("mid.b")));
        h = tape.silu(mid);
        for l in (0..c.levels - 1).rev() {
            let up = tape.upsample2(h);
            let cat = tape.concat(up, skips[l]);
            let conv = tape.conv2d(cat, p(&format!("dec{l}.w")), Some(p(&format!("dec{l}.b"))));
            h = tape.silu(conv);
        }
        let output = tape.conv2d(h, p("out.w"), Some(p("out.b")));
        Ok(Built { output, features: skips })
    }

    pub fn forward(&self, x: &Tensor, input: &NetInput<'_>) -> Result<ForwardPass, BackboneError> {
        let mut tape = Tape::new();
        let params = self.leaf_params(&mut tape);
        let xv = tape.leaf(x.clone());
        let built = self.build(&mut tape, &params, xv, input)?;
        Ok(ForwardPass { tape, params, input: xv, built })
    }

    pub fn predict(&self, x: &Tensor, input: &NetInput<'_>) -> Result<Tensor, BackboneError> {
        Ok(self.forward(x, input)?.output().clone())
    }
}

/// Flattens per-slot gradients into one vector in parameter order.
pub fn flatten_grads(grads: &Gradients, params: &[Var]) -> Vec<f64> {
    let mut out = Vec::new();
    for &p in params {
        match grads.get_ref(p) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, grads.get(p).len())),
        }
    }
    out
}

/// A recorded forward pass that can be differentiated.
pub struct ForwardPass {
    tape: Tape,
    params: Vec<Var>,
    input: Var,
    built: Built,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.built.output)
    }

    pub fn output_var(&self) -> Var {
        self.built.output
    }

    pub fn features(&self) -> &[Var] {
        &self.built.features
    }

    pub fn input_var(&self) -> Var {
        self.input
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Access for building a loss on top of the network output.
    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Parameter gradient given `∂L/∂output`.
    pub fn backward(&self, loss_grad: &Tensor) -> Result<Vec<f64>, BackboneError> {
        if loss_grad.shape() != self.output().shape() {
            return Err(BackboneError::Shape {
                got: loss_grad.shape(),
                reason: format!("loss gradient must match output {}", self.output().shape()),
            });
        }
        let g = self.tape.backward_with(self.built.output, loss_grad.clone());
        Ok(flatten_grads(&g, &self.params))
    }

    /// Parameter gradient of a scalar built on this pass's tape.
    pub fn param_grad(&self, loss: Var) -> Vec<f64> {
        flatten_grads(&self.tape.backward(loss), &self.params)
    }
}

impl Denoiser for SmallUNet {
    /// Uses the same step for every batch item. Panics on shape errors.
    fn denoise(&self, x: &Tensor, t: usize, condition: Option<&Tensor>) -> Tensor {
        let steps = vec![t; x.shape().n];
        let input =
            NetInput { steps: (self.config.time_dim > 0).then_some(steps.as_slice()), condition, classes: None };
        self.predict(x, &input).expect("denoiser input matches network")
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; params], v: vec![0.0; params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), BackboneError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(BackboneError::ParamCount { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(BackboneError::NonFiniteGradient);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target ← decay·target + (1 − decay)·source`.
pub fn ema_update(target: &mut [f64], source: &[f64], decay: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = decay * *t + (1.0 - decay) * s;
    }
}
