//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every differentiable computation in the crate (losses, networks, diffusion
//! training objectives) records its operations on a [`Tape`]. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates adjoints in
//! index order, so gradients are bit-reproducible.

use std::rc::Rc;

use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for fixed-kernel depthwise filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output shrinks by `k - 1`; only fully covered positions.
    Valid,
    /// Same-size output, out-of-range reads clamp to the nearest edge pixel.
    Replicate,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBroadcast(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, kernel: Rc<Vec<f64>>, k: usize, padding: Padding },
    AvgPool2(Var),
    SpatialMean(Var),
    Decimate2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Silu(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    NormalizeChannels(Var),
    Gram(Var, Var),
    LseChannels(Var),
    PickChannel(Var, Rc<Vec<usize>>),
    SelectLocations(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

const NORM_EPS: f64 = 1e-10;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`; zeros if `v` did not contribute.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn same(a: Shape, b: Shape, what: &str) {
    assert_eq!(a, b, "{what}: shape mismatch {a} vs {b}");
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected a scalar node");
        t.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same(self.shape(a), self.shape(b), "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same(self.shape(a), self.shape(b), "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same(self.shape(a), self.shape(b), "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same(self.shape(a), self.shape(b), "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + b` where `b` is `[1 or n, c, 1, 1]` and broadcasts over space (and batch).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sb.c == sa.c && sb.h == 1 && sb.w == 1 && (sb.n == 1 || sb.n == sa.n),
            "add_broadcast: cannot broadcast {sb} onto {sa}"
        );
        let mut out = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        let plane = sa.plane();
        for n in 0..sa.n {
            let bn = if sb.n == 1 { 0 } else { n };
            for c in 0..sa.c {
                let add = bv[bn * sb.c + c];
                let base = (n * sa.c + c) * plane;
                for v in &mut out.data_mut()[base..base + plane] {
                    *v += add;
                }
            }
        }
        self.push(out, Op::AddBroadcast(a, b))
    }

    /// Elementwise product with a constant tensor (no gradient flows into `k`).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        same(self.shape(a), k.shape(), "mul_const");
        let v = self.value(a).zip_map(&k, |x, y| x * y);
        self.push(v, Op::MulConst(a, Rc::new(k)))
    }

    /// Stride-1 convolution with zero padding `k / 2` (odd `k` keeps spatial size).
    /// `w` is `[c_out, c_in, k, k]`, `b` is `[1, c_out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x);
        let sw = self.shape(w);
        assert_eq!(sw.c, sx.c, "conv2d: weight expects {} input channels, got {}", sw.c, sx.c);
        assert_eq!(sw.h, sw.w, "conv2d: square kernels only");
        if let Some(b) = b {
            assert_eq!(self.shape(b), Shape::new(1, sw.n, 1, 1), "conv2d: bias shape");
        }
        let so = Shape::new(sx.n, sw.n, sx.h, sx.w);
        let mut out = Tensor::zeros(so);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let o = out.data_mut();
            let k = sw.h;
            let p = k / 2;
            let (h, wd) = (sx.h as isize, sx.w as isize);
            for n in 0..sx.n {
                for co in 0..sw.n {
                    let obase = (n * sw.n + co) * sx.plane();
                    for ci in 0..sx.c {
                        let ibase = (n * sx.c + ci) * sx.plane();
                        for ky in 0..k {
                            let dy = ky as isize - p as isize;
                            let y0 = (-dy).max(0);
                            let y1 = (h - dy).min(h);
                            for kx in 0..k {
                                let weight = wv[((co * sx.c + ci) * k + ky) * k + kx];
                                if weight == 0.0 {
                                    continue;
                                }
                                let dx = kx as isize - p as isize;
                                let x0 = (-dx).max(0);
                                let x1 = (wd - dx).min(wd);
                                for y in y0..y1 {
                                    let orow = obase + (y * wd) as usize;
                                    let irow = ibase as isize + (y + dy) * wd + dx;
                                    for xx in x0 as usize..x1 as usize {
                                        o[orow + xx] += weight * xv[(irow + xx as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for n in 0..sx.n {
                    for (co, bias) in bv.iter().enumerate().take(sw.n) {
                        let base = (n * sw.n + co) * sx.plane();
                        for v in &mut o[base..base + sx.plane()] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b })
    }

    /// Filters each channel independently with a fixed `k × k` kernel.
    pub fn depthwise(&mut self, x: Var, kernel: Rc<Vec<f64>>, k: usize, padding: Padding) -> Var {
        assert_eq!(kernel.len(), k * k, "depthwise: kernel size");
        let s = self.shape(x);
        let so = depthwise_out_shape(s, k, padding);
        let mut out = Tensor::zeros(so);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for_each_tap(s, so, k, padding, |oi, ii, ki| o[oi] += kernel[ki] * xv[ii]);
        }
        self.push(out, Op::Depthwise { x, kernel, k, padding })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert!(s.h >= 2 && s.w >= 2, "avg_pool2: input {s} too small");
        let so = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros(so);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..so.h {
                    for xx in 0..so.w {
                        let sum = xv.at(n, c, 2 * y, 2 * xx)
                            + xv.at(n, c, 2 * y, 2 * xx + 1)
                            + xv.at(n, c, 2 * y + 1, 2 * xx)
                            + xv.at(n, c, 2 * y + 1, 2 * xx + 1);
                        out.data_mut()[so.index(n, c, y, xx)] = 0.25 * sum;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2(x))
    }

    /// Per-channel mean over height and width: `[n, c, 1, 1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = s.plane();
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.push(Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data), Op::SpatialMean(x))
    }

    /// Keeps even rows and columns (`x[.., ::2, ::2]`).
    pub fn decimate2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let so = Shape::new(s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2));
        let xv = self.value(x);
        let mut out = Tensor::zeros(so);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..so.h {
                    for xx in 0..so.w {
                        out.data_mut()[so.index(n, c, y, xx)] = xv.at(n, c, 2 * y, 2 * xx);
                    }
                }
            }
        }
        self.push(out, Op::Decimate2(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let so = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros(so);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..so.h {
                    for xx in 0..so.w {
                        out.data_mut()[so.index(n, c, y, xx)] = xv.at(n, c, y / 2, xx / 2);
                    }
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = Tensor::concat_channels(self.value(a), self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Divides each `(n, y, x)` channel vector by its L2 norm (plus a small epsilon).
    pub fn normalize_channels(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut out = self.value(a).clone();
        let plane = s.plane();
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let norm = (0..s.c).map(|c| out.data()[idx(c)].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                for c in 0..s.c {
                    out.data_mut()[idx(c)] /= norm;
                }
            }
        }
        self.push(out, Op::NormalizeChannels(a))
    }

    /// Pairwise dot products between the columns of two `[1, C, N, 1]` maps.
    /// Output is `[1, N, N, 1]` with `out[c = j, h = i] = a_i · b_j`.
    pub fn gram(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        same(sa, self.shape(b), "gram");
        assert!(sa.n == 1 && sa.w == 1, "gram: expected [1, C, N, 1], got {sa}");
        let (c, n) = (sa.c, sa.h);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Tensor::zeros(Shape::new(1, n, n, 1));
        for j in 0..n {
            for i in 0..n {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += av[ch * n + i] * bv[ch * n + j];
                }
                out.data_mut()[j * n + i] = dot;
            }
        }
        self.push(out, Op::Gram(a, b))
    }

    /// `log Σ_c exp(x[n, c, y, x])`, giving `[n, 1, h, w]`.
    pub fn logsumexp_channels(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let xv = self.value(a).data();
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            for p in 0..plane {
                let at = |c: usize| xv[(n * s.c + c) * plane + p];
                let m = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..s.c).map(|c| (at(c) - m).exp()).sum();
                out.data_mut()[n * plane + p] = m + sum.ln();
            }
        }
        self.push(out, Op::LseChannels(a))
    }

    /// Picks one channel per `(n, y, x)` position; `idx` is in `(n, y, x)` row-major order.
    pub fn pick_channel(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let s = self.shape(a);
        assert_eq!(idx.len(), s.n * s.plane(), "pick_channel: index count");
        let xv = self.value(a).data();
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            for p in 0..plane {
                let c = idx[n * plane + p];
                assert!(c < s.c, "pick_channel: channel {c} out of range");
                out.data_mut()[n * plane + p] = xv[(n * s.c + c) * plane + p];
            }
        }
        self.push(out, Op::PickChannel(a, Rc::new(idx)))
    }

    /// Gathers flat spatial positions from a `[1, C, H, W]` map into `[1, C, N, 1]`.
    pub fn select_locations(&mut self, a: Var, locations: Vec<usize>) -> Var {
        let s = self.shape(a);
        assert_eq!(s.n, 1, "select_locations: batch of one expected");
        let plane = s.plane();
        let xv = self.value(a).data();
        let n = locations.len();
        let mut out = Tensor::zeros(Shape::new(1, s.c, n, 1));
        for c in 0..s.c {
            for (i, &loc) in locations.iter().enumerate() {
                assert!(loc < plane, "select_locations: location {loc} out of range");
                out.data_mut()[c * n + i] = xv[c * plane + loc];
            }
        }
        self.push(out, Op::SelectLocations(a, Rc::new(locations)))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward: output must be scalar");
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an explicit output adjoint.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        same(self.shape(output), seed.shape(), "backward seed");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |g, b| g * b));
                accumulate(grads, *b, g.zip_map(av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |g, b| g / b));
                let ga: Vec<f64> =
                    gd.iter().zip(av.data()).zip(bv.data()).map(|((g, a), b)| -g * a / (b * b)).collect();
                accumulate(grads, *b, Tensor::from_vec(bv.shape(), ga));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|v| v * k)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::AddBroadcast(a, b) => {
                accumulate(grads, *a, g.clone());
                let sa = g.shape();
                let sb = self.shape(*b);
                let mut gb = Tensor::zeros(sb);
                let plane = sa.plane();
                for n in 0..sa.n {
                    let bn = if sb.n == 1 { 0 } else { n };
                    for c in 0..sa.c {
                        let base = (n * sa.c + c) * plane;
                        gb.data_mut()[bn * sb.c + c] += gd[base..base + plane].iter().sum::<f64>();
                    }
                }
                accumulate(grads, *b, gb);
            }
            Op::MulConst(a, k) => accumulate(grads, *a, g.zip_map(k, |g, k| g * k)),
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, g, grads),
            Op::Depthwise { x, kernel, k, padding } => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                {
                    let o = gx.data_mut();
                    for_each_tap(s, g.shape(), *k, *padding, |oi, ii, ki| o[ii] += kernel[ki] * gd[oi]);
                }
                accumulate(grads, *x, gx);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let so = g.shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..so.h {
                            for xx in 0..so.w {
                                let v = 0.25 * g.at(n, c, y, xx);
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx.data_mut()[s.index(n, c, 2 * y + dy, 2 * xx + dx)] += v;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Decimate2(x) => {
                let s = self.shape(*x);
                let so = g.shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..so.h {
                            for xx in 0..so.w {
                                gx.data_mut()[s.index(n, c, 2 * y, 2 * xx)] += g.at(n, c, y, xx);
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let so = g.shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..so.h {
                            for xx in 0..so.w {
                                gx.data_mut()[s.index(n, c, y / 2, xx / 2)] += g.at(n, c, y, xx);
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.plane();
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                let per = (sa.c + sb.c) * plane;
                for n in 0..sa.n {
                    let base = n * per;
                    ga.extend_from_slice(&gd[base..base + sa.c * plane]);
                    gb.extend_from_slice(&gd[base + sa.c * plane..base + per]);
                }
                accumulate(grads, *a, Tensor::from_vec(sa, ga));
                accumulate(grads, *b, Tensor::from_vec(sb, gb));
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * sigmoid(-x)));
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let plane = s.plane();
                let gx: Vec<f64> = gd.iter().flat_map(|&v| std::iter::repeat_n(v / plane as f64, plane)).collect();
                accumulate(grads, *x, Tensor::from_vec(s, gx));
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |g, y| g * y)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Abs(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * sign(x))),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, gd[0] / s.numel() as f64));
            }
            Op::NormalizeChannels(a) => {
                let s = self.shape(*a);
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let plane = s.plane();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let idx = |c: usize| (n * s.c + c) * plane + p;
                        let r = (0..s.c).map(|c| xv[idx(c)].powi(2)).sum::<f64>().sqrt();
                        let norm = r + NORM_EPS;
                        // y = x / (r + eps); dy/dx = I / norm - x xᵀ / (norm² r)
                        let gy_dot_x: f64 = (0..s.c).map(|c| gd[idx(c)] * xv[idx(c)]).sum();
                        for c in 0..s.c {
                            let radial = if r > 0.0 { yv[idx(c)] * gy_dot_x / (norm * r) } else { 0.0 };
                            gx.data_mut()[idx(c)] = gd[idx(c)] / norm - radial;
                        }
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::Gram(a, b) => {
                let s = self.shape(*a);
                let (c, n) = (s.c, s.h);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = Tensor::zeros(s);
                let mut gb = Tensor::zeros(s);
                for j in 0..n {
                    for i in 0..n {
                        let gij = gd[j * n + i];
                        if gij == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            ga.data_mut()[ch * n + i] += gij * bv[ch * n + j];
                            gb.data_mut()[ch * n + j] += gij * av[ch * n + i];
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::LseChannels(a) => {
                let s = self.shape(*a);
                let xv = self.value(*a).data();
                let lse = node.value.data();
                let plane = s.plane();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let go = gd[n * plane + p];
                        for c in 0..s.c {
                            let k = (n * s.c + c) * plane + p;
                            gx.data_mut()[k] = go * (xv[k] - lse[n * plane + p]).exp();
                        }
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::PickChannel(a, idx) => {
                let s = self.shape(*a);
                let plane = s.plane();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let c = idx[n * plane + p];
                        gx.data_mut()[(n * s.c + c) * plane + p] += gd[n * plane + p];
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::SelectLocations(a, locs) => {
                let s = self.shape(*a);
                let plane = s.plane();
                let n = locs.len();
                let mut gx = Tensor::zeros(s);
                for c in 0..s.c {
                    for (i, &loc) in locs.iter().enumerate() {
                        gx.data_mut()[c * plane + loc] += gd[c * n + i];
                    }
                }
                accumulate(grads, *a, gx);
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut gx = Tensor::zeros(sx);
        let mut gw = Tensor::zeros(sw);
        let k = sw.h;
        let p = k / 2;
        let (h, wd) = (sx.h as isize, sx.w as isize);
        {
            let gxd = gx.data_mut();
            let gwd = gw.data_mut();
            for n in 0..sx.n {
                for co in 0..sw.n {
                    let obase = (n * sw.n + co) * sx.plane();
                    for ci in 0..sx.c {
                        let ibase = (n * sx.c + ci) * sx.plane();
                        for ky in 0..k {
                            let dy = ky as isize - p as isize;
                            let y0 = (-dy).max(0);
                            let y1 = (h - dy).min(h);
                            for kx in 0..k {
                                let widx = ((co * sx.c + ci) * k + ky) * k + kx;
                                let weight = wv[widx];
                                let dx = kx as isize - p as isize;
                                let x0 = (-dx).max(0) as usize;
                                let x1 = (wd - dx).min(wd) as usize;
                                let mut acc = 0.0;
                                for y in y0..y1 {
                                    let orow = obase + (y * wd) as usize;
                                    let irow = ibase as isize + (y + dy) * wd + dx;
                                    for xx in x0..x1 {
                                        let go = gd[orow + xx];
                                        let ii = (irow + xx as isize) as usize;
                                        acc += go * xv[ii];
                                        gxd[ii] += weight * go;
                                    }
                                }
                                gwd[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        accumulate(grads, x, gx);
        accumulate(grads, w, gw);
        if let Some(b) = b {
            let mut gb = Tensor::zeros(self.shape(b));
            for n in 0..sx.n {
                for co in 0..sw.n {
                    let base = (n * sw.n + co) * sx.plane();
                    gb.data_mut()[co] += gd[base..base + sx.plane()].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, gb);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn depthwise_out_shape(s: Shape, k: usize, padding: Padding) -> Shape {
    match padding {
        Padding::Valid => {
            assert!(s.h >= k && s.w >= k, "depthwise: input {s} smaller than kernel {k}");
            Shape::new(s.n, s.c, s.h - k + 1, s.w - k + 1)
        }
        Padding::Replicate => s,
    }
}

/// Calls `f(out_index, in_index, kernel_index)` for every filter tap.
fn for_each_tap(s: Shape, so: Shape, k: usize, padding: Padding, mut f: impl FnMut(usize, usize, usize)) {
    let p = (k / 2) as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..so.h {
                for x in 0..so.w {
                    let oi = so.index(n, c, y, x);
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = match padding {
                                Padding::Valid => (y + ky, x + kx),
                                Padding::Replicate => (
                                    (y as isize + ky as isize - p).clamp(0, s.h as isize - 1) as usize,
                                    (x as isize + kx as isize - p).clamp(0, s.w as isize - 1) as usize,
                                ),
                            };
                            f(oi, s.index(n, c, iy, ix), ky * k + kx);
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(weights * op(x)))/dx against finite differences.
    fn check_unary(shape: Shape, op: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(shape, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = op(&mut t, v);
            random(t.shape(y), &mut rng)
        };
        let eval = |xt: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(xt.clone());
            let y = op(&mut t, v);
            t.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = op(&mut t, v);
        let g = t.backward_with(y, probe.clone()).get(v);
        let fd = finite_difference(&x, 1e-5, eval);
        let err = max_relative_error(&g, &fd, 1e-6);
        assert!(err < 1e-6, "gradient mismatch {err}");
    }

    #[test]
    fn elementwise_gradients() {
        let s = Shape::new(2, 3, 3, 2);
        check_unary(s, |t, v| t.silu(v));
        check_unary(s, |t, v| t.log_sigmoid(v));
        check_unary(s, |t, v| t.exp(v));
        check_unary(s, |t, v| t.square(v));
        check_unary(s, |t, v| {
            let e = t.exp(v);
            t.log(e)
        });
        check_unary(s, |t, v| {
            let sq = t.square(v);
            let one = t.add_scalar(sq, 1.0);
            t.div(v, one)
        });
    }

    #[test]
    fn structural_gradients() {
        check_unary(Shape::new(2, 2, 4, 6), |t, v| t.avg_pool2(v));
        check_unary(Shape::new(2, 3, 3, 5), |t, v| t.spatial_mean(v));
        check_unary(Shape::new(1, 2, 5, 5), |t, v| t.decimate2(v));
        check_unary(Shape::new(1, 2, 3, 2), |t, v| t.upsample2(v));
        check_unary(Shape::new(2, 4, 3, 3), |t, v| t.normalize_channels(v));
        check_unary(Shape::new(2, 4, 3, 3), |t, v| t.logsumexp_channels(v));
        check_unary(Shape::new(1, 3, 3, 3), |t, v| t.select_locations(v, vec![0, 4, 8, 2]));
        check_unary(Shape::new(2, 3, 1, 2), |t, v| t.pick_channel(v, vec![0, 2, 1, 1]));
        let kernel = Rc::new(vec![0.1, 0.2, 0.1, 0.2, 0.4, 0.2, 0.1, 0.2, 0.1]);
        let k2 = kernel.clone();
        check_unary(Shape::new(1, 2, 5, 4), move |t, v| t.depthwise(v, k2.clone(), 3, Padding::Replicate));
        check_unary(Shape::new(1, 2, 5, 4), move |t, v| t.depthwise(v, kernel.clone(), 3, Padding::Valid));
        check_unary(Shape::new(1, 3, 4, 1), |t, v| {
            let n = t.normalize_channels(v);
            t.gram(n, v)
        });
    }

    #[test]
    fn conv_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let b = random(Shape::new(1, 3, 1, 1), &mut rng);
        let w2 = w.clone();
        check_unary(Shape::new(2, 2, 4, 5), move |t, v| {
            let wv = t.leaf(w2.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(v, wv, Some(bv))
        });
        // gradient with respect to the weights
        let x = random(Shape::new(2, 2, 4, 5), &mut rng);
        check_unary(Shape::new(3, 2, 3, 3), move |t, wv| {
            let xv = t.leaf(x.clone());
            t.conv2d(xv, wv, None)
        });
        let base = random(Shape::new(2, 3, 2, 2), &mut rng);
        check_unary(Shape::new(2, 3, 1, 1), move |t, v| {
            let a = t.leaf(base.clone());
            t.add_broadcast(a, v)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(1, 2, 4, 4), &mut rng);
        let w = random(Shape::new(1, 2, 3, 3), &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
        let y = t.conv2d(xv, wv, None);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += w.at(0, ci, ky, kx) * x.at(0, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                assert!((t.value(y).at(0, 0, oy, ox) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).data(), &[7.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let unused = t.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 5.0));
        let y = t.square(x);
        let g = t.backward(y);
        assert!(g.get_ref(unused).is_none());
        assert_eq!(g.get(unused).sum(), 0.0);
    }

    #[test]
    fn stable_sigmoids() {
        assert_eq!(log_sigmoid(0.0), -(2f64.ln()));
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
