//! Image-quality and distribution metrics: SSIM, MS-SSIM, PSNR, FID, KID and an
//! LPIPS-style perceptual distance over a pluggable feature extractor.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::ImageTensor;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {height}x{width} too small for {what}")]
    TooSmall { height: usize, width: usize, what: String },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is indefinite (eigenvalue {0:e})")]
    Indefinite(f64),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

fn gaussian_1d(width: usize, sigma: f64) -> Vec<f64> {
    let r = (width / 2) as f64;
    let g: Vec<f64> = (0..width).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one channel plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> (f64, f64) {
    let k = gaussian_1d(p.window, p.sigma);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (e_aa, _, _) = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let (e_bb, _, _) = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let (e_ab, _, _) = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let cs = (2.0 * cov + p.c2) / (va + vb + p.c2);
        let lum = (2.0 * ma * mb + p.c1) / (ma * ma + mb * mb + p.c1);
        s_sum += lum * cs;
        cs_sum += cs;
    }
    let n = mu_a.len() as f64;
    (s_sum / n, cs_sum / n)
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<(), MetricError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )))
    }
}

/// Channel-averaged (ssim, cs) of two planar buffers.
fn ssim_cs(a: &[f64], b: &[f64], c: usize, h: usize, w: usize, p: &SsimParams) -> Result<(f64, f64), MetricError> {
    if h < p.window || w < p.window {
        return Err(MetricError::TooSmall { height: h, width: w, what: format!("{}-pixel SSIM window", p.window) });
    }
    let plane = h * w;
    let (mut s, mut cs) = (0.0, 0.0);
    for ch in 0..c {
        let (si, ci) = ssim_plane(&a[ch * plane..(ch + 1) * plane], &b[ch * plane..(ch + 1) * plane], h, w, p);
        s += si;
        cs += ci;
    }
    Ok((s / c as f64, cs / c as f64))
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricError> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, p: &SsimParams) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    if a == b {
        return Ok(1.0);
    }
    Ok(ssim_cs(a.data(), b.data(), a.channels(), a.height(), a.width(), p)?.0)
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Largest level count (≤ 5) whose coarsest scale still fits the SSIM window.
pub fn max_ms_ssim_levels(height: usize, width: usize, window: usize) -> usize {
    let mut levels = 0;
    let (mut h, mut w) = (height, width);
    while levels < MS_SSIM_WEIGHTS.len() && h >= window && w >= window {
        levels += 1;
        h /= 2;
        w /= 2;
    }
    levels
}

fn avg_pool2(data: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i = base + 2 * y * w + 2 * x;
                out.push(0.25 * (data[i] + data[i + 1] + data[i + w] + data[i + w + 1]));
            }
        }
    }
    (out, oh, ow)
}

/// Per-level `(ssim, cs)` pairs from finest to coarsest.
pub fn ms_ssim_levels(
    a: &ImageTensor,
    b: &ImageTensor,
    levels: usize,
    p: &SsimParams,
) -> Result<Vec<(f64, f64)>, MetricError> {
    check_pair(a, b)?;
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(MetricError::Invalid(format!("ms_ssim levels must be 1..=5, got {levels}")));
    }
    if max_ms_ssim_levels(a.height(), a.width(), p.window) < levels {
        return Err(MetricError::TooSmall {
            height: a.height(),
            width: a.width(),
            what: format!("{levels} MS-SSIM levels"),
        });
    }
    let c = a.channels();
    let (mut da, mut db) = (a.data().to_vec(), b.data().to_vec());
    let (mut h, mut w) = (a.height(), a.width());
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        out.push(ssim_cs(&da, &db, c, h, w, p)?);
        if l + 1 < levels {
            let (na, nh, nw) = avg_pool2(&da, c, h, w);
            let (nb, _, _) = avg_pool2(&db, c, h, w);
            da = na;
            db = nb;
            h = nh;
            w = nw;
        }
    }
    Ok(out)
}

/// Weights for `levels` scales: the standard five truncated and renormalized.
pub fn ms_ssim_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// `Π_{j<M} cs_j^{w_j} · ssim_M^{w_M}` with negative terms clamped to 0.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor, levels: usize) -> Result<f64, MetricError> {
    let per = ms_ssim_levels(a, b, levels, &SsimParams::default())?;
    if a == b {
        return Ok(1.0);
    }
    let w = ms_ssim_weights(levels);
    let mut v = 1.0;
    for (j, (s, cs)) in per.iter().enumerate() {
        let term = if j + 1 == levels { *s } else { *cs };
        v *= term.max(0.0).powf(w[j]);
    }
    Ok(v)
}

/// `10·log10(max²/MSE)`; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_value: f64) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Principal square root of a symmetric PSD matrix through its eigendecomposition.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    if !m.is_square() {
        return Err(MetricError::ShapeMismatch(format!("{}x{} matrix", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(MetricError::Asymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(MetricError::Indefinite(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of row vectors.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        if rows.len() < 2 {
            return Err(MetricError::InsufficientSamples { needed: 2, got: rows.len() });
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(MetricError::ShapeMismatch("feature rows differ in length".into()));
        }
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(FeatureStats { mean, covariance: cov, n })
    }
}

/// `‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a Σ_b)^{1/2})`, with the cross term computed as
/// `tr((A Σ_b A)^{1/2})`, `A = Σ_a^{1/2}`, which keeps the root symmetric.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricError> {
    if a.mean.len() != b.mean.len() {
        return Err(MetricError::ShapeMismatch(format!("dimensions {} and {}", a.mean.len(), b.mean.len())));
    }
    let diff = &a.mean - &b.mean;
    let sa = matrix_sqrt_psd(&a.covariance)?;
    let inner = &sa * &b.covariance * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    Ok(diff.dot(&diff) + a.covariance.trace() + b.covariance.trace() - 2.0 * cross)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with kernel `(xᵀy/d + 1)³`; within-set sums skip `i = j`.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += poly_kernel(x[i], x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += poly_kernel(y[i], y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += poly_kernel(xi, yj);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KidConfig {
    pub subset_size: usize,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        KidConfig { subset_size: 1000, subsets: 100, seed: 0 }
    }
}

/// Mean and standard deviation of the unbiased MMD² over seeded random subsets.
/// `subset_size` is capped at the smaller sample count.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], config: &KidConfig) -> Result<(f64, f64), MetricError> {
    let size = config.subset_size.min(a.len()).min(b.len());
    if size < 2 || config.subsets == 0 {
        return Err(MetricError::InsufficientSamples { needed: 2, got: size });
    }
    if a.iter().chain(b).any(|r| r.len() != a[0].len()) {
        return Err(MetricError::ShapeMismatch("feature rows differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vals: Vec<f64> = (0..config.subsets)
        .map(|_| {
            let ia = sample(&mut rng, a.len(), size);
            let ib = sample(&mut rng, b.len(), size);
            let xa: Vec<&[f64]> = ia.iter().map(|i| a[i].as_slice()).collect();
            let xb: Vec<&[f64]> = ib.iter().map(|i| b[i].as_slice()).collect();
            mmd2_unbiased(&xa, &xb)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Image → spatial feature layers and a global embedding.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Spatial feature maps `[1, C_l, H_l, W_l]`, shallowest first.
    fn layers(&self, image: &ImageTensor) -> Vec<Tensor>;
    /// Fixed-length embedding for FID/KID: channel means of every layer.
    fn embed(&self, image: &ImageTensor) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for l in self.layers(image) {
            let s = l.shape();
            for c in 0..s.c {
                v.push(l.data()[c * s.plane()..(c + 1) * s.plane()].iter().sum::<f64>() / s.plane() as f64);
            }
        }
        v
    }
}

/// One layer holding the image itself.
pub struct IdentityExtractor {
    pub channels: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn dim(&self) -> usize {
        self.channels
    }

    fn layers(&self, image: &ImageTensor) -> Vec<Tensor> {
        vec![image.to_tensor()]
    }
}

/// Fixed-seed random 3×3 convolutions with tanh, two levels separated by 2× average pooling.
pub struct RandomProjectionExtractor {
    in_channels: usize,
    widths: [usize; 2],
    weights: Vec<Vec<f64>>,
}

impl RandomProjectionExtractor {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let widths = [8, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut cin = in_channels;
        for &w in &widths {
            let bound = (3.0 / (cin * 9) as f64).sqrt();
            weights.push((0..w * cin * 9).map(|_| rng.random_range(-bound..bound)).collect());
            cin = w;
        }
        RandomProjectionExtractor { in_channels, widths, weights }
    }

    fn conv_tanh(x: &Tensor, w: &[f64], co: usize) -> Tensor {
        let s = x.shape();
        let mut out = Tensor::zeros(Shape::new(1, co, s.h, s.w));
        for o in 0..co {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = 0.0;
                    for ci in 0..s.c {
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w[((o * s.c + ci) * 3 + ky) * 3 + kx] * x.at(0, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[(o * s.h + y) * s.w + xx] = acc.tanh();
                }
            }
        }
        out
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn dim(&self) -> usize {
        self.widths.iter().sum()
    }

    fn layers(&self, image: &ImageTensor) -> Vec<Tensor> {
        assert_eq!(image.channels(), self.in_channels, "extractor channel count");
        let x = image.to_tensor().map(|v| 2.0 * v - 1.0);
        let l1 = Self::conv_tanh(&x, &self.weights[0], self.widths[0]);
        let s = l1.shape();
        let pooled = if s.h >= 2 && s.w >= 2 {
            let (p, h, w) = avg_pool2(l1.data(), s.c, s.h, s.w);
            Tensor::from_vec(Shape::new(1, s.c, h, w), p)
        } else {
            l1.clone()
        };
        let l2 = Self::conv_tanh(&pooled, &self.weights[1], self.widths[1]);
        vec![l1, l2]
    }
}

/// Unit-normalizes each spatial location across channels.
pub fn normalize_channels(t: &Tensor) -> Tensor {
    let s = t.shape();
    let plane = s.plane();
    let mut out = t.clone();
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let norm = (0..s.c).map(|c| t.data()[idx(c)].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for c in 0..s.c {
                out.data_mut()[idx(c)] = t.data()[idx(c)] / norm;
            }
        }
    }
    out
}

/// `Σ_l mean_{y,x} Σ_c w_{l,c}·(â_l − b̂_l)²` over channel-normalized layers.
/// `layer_weights = None` uses unit weights.
pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    layer_weights: Option<&[Vec<f64>]>,
) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let (la, lb) = (extractor.layers(a), extractor.layers(b));
    if la.is_empty() {
        return Err(MetricError::Invalid(format!("extractor '{}' exposes no layers", extractor.name())));
    }
    if let Some(w) = layer_weights {
        if w.len() != la.len() || w.iter().zip(&la).any(|(w, l)| w.len() != l.shape().c) {
            return Err(MetricError::ShapeMismatch("layer weights do not match extractor layers".into()));
        }
    }
    let mut total = 0.0;
    for (i, (fa, fb)) in la.iter().zip(&lb).enumerate() {
        let (na, nb) = (normalize_channels(fa), normalize_channels(fb));
        let s = na.shape();
        let plane = s.plane();
        let mut acc = 0.0;
        for c in 0..s.c {
            let w = layer_weights.map_or(1.0, |lw| lw[i][c]);
            let d: f64 = na.data()[c * plane..(c + 1) * plane]
                .iter()
                .zip(&nb.data()[c * plane..(c + 1) * plane])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            acc += w * d;
        }
        total += acc / plane as f64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub tile_id: String,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub fid: Option<f64>,
    pub kid: Option<(f64, f64)>,
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.8}")
    }
}

impl MetricReport {
    /// Rows sorted by tile id so the text does not depend on evaluation order.
    pub fn new(mut rows: Vec<MetricRow>, fid: Option<f64>, kid: Option<(f64, f64)>) -> Self {
        rows.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
        MetricReport { rows, fid, kid }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("tile_id\tssim\tms_ssim\tpsnr\tlpips\n");
        for r in &self.rows {
            let _ =
                writeln!(s, "{}\t{}\t{}\t{}\t{}", r.tile_id, num(r.ssim), num(r.ms_ssim), num(r.psnr), num(r.lpips));
        }
        let mean = |f: fn(&MetricRow) -> f64| {
            let finite: Vec<f64> = self.rows.iter().map(f).filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        };
        let _ = write!(
            s,
            "#summary\tn={}\tssim={}\tms_ssim={}\tpsnr={}\tlpips={}",
            self.rows.len(),
            num(mean(|r| r.ssim)),
            num(mean(|r| r.ms_ssim)),
            num(mean(|r| r.psnr)),
            num(mean(|r| r.lpips))
        );
        if let Some(f) = self.fid {
            let _ = write!(s, "\tfid={}", num(f));
        }
        if let Some((m, sd)) = self.kid {
            let _ = write!(s, "\tkid={}\tkid_std={}", num(m), num(sd));
        }
        s.push('\n');
        s
    }

    /// Reads the rows and the `fid`/`kid` scalars back from [`MetricReport::to_tsv`] text.
    pub fn from_tsv(text: &str) -> Result<Self, MetricError> {
        let bad = |line: usize, m: &str| MetricError::Invalid(format!("report line {line}: {m}"));
        let parse = |line: usize, v: &str| -> Result<f64, MetricError> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => v.parse().map_err(|_| bad(line, &format!("bad number '{v}'"))),
            }
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "tile_id\tssim\tms_ssim\tpsnr\tlpips")) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let (mut rows, mut fid, mut kid, mut kid_std) = (Vec::new(), None, None, None);
        for (i, line) in lines {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("#summary") {
                for kv in rest.split('\t').filter(|s| !s.is_empty()) {
                    match kv.split_once('=') {
                        Some(("fid", v)) => fid = Some(parse(n, v)?),
                        Some(("kid", v)) => kid = Some(parse(n, v)?),
                        Some(("kid_std", v)) => kid_std = Some(parse(n, v)?),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n, "expected 5 fields"));
            }
            rows.push(MetricRow {
                tile_id: f[0].to_string(),
                ssim: parse(n, f[1])?,
                ms_ssim: parse(n, f[2])?,
                psnr: parse(n, f[3])?,
                lpips: parse(n, f[4])?,
            });
        }
        let kid = match (kid, kid_std) {
            (Some(m), Some(s)) => Some((m, s)),
            (None, None) => None,
            _ => return Err(bad(0, "kid without kid_std")),
        };
        Ok(MetricReport::new(rows, fid, kid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gaussian_kernel;

    fn img(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Dense sliding-window (ssim, cs) with the 2-D kernel.
    fn dense_oracle(a: &ImageTensor, b: &ImageTensor) -> (f64, f64) {
        let p = SsimParams::default();
        let k = gaussian_kernel(p.window, p.sigma);
        let n = p.window;
        let (h, w) = (a.height(), a.width());
        let (mut ts, mut tc, mut count) = (0.0, 0.0, 0.0);
        for c in 0..a.channels() {
            let (mut s, mut cs_acc, mut m) = (0.0, 0.0, 0.0);
            for y in 0..=h - n {
                for x in 0..=w - n {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..n {
                        for dx in 0..n {
                            let g = k[dy * n + dx];
                            let (u, v) = (a.get(c, y + dy, x + dx), b.get(c, y + dy, x + dx));
                            ma += g * u;
                            mb += g * v;
                            aa += g * u * u;
                            bb += g * v * v;
                            ab += g * u * v;
                        }
                    }
                    let cs = (2.0 * (ab - ma * mb) + p.c2) / (aa - ma * ma + bb - mb * mb + p.c2);
                    s += (2.0 * ma * mb + p.c1) / (ma * ma + mb * mb + p.c1) * cs;
                    cs_acc += cs;
                    m += 1.0;
                }
            }
            ts += s / m;
            tc += cs_acc / m;
            count += 1.0;
        }
        (ts / count, tc / count)
    }

    #[test]
    fn ssim_identities() {
        let a = img(3, 16, 16, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c1 = ImageTensor::filled(1, 16, 16, 0.5).unwrap();
        let c2 = ImageTensor::filled(1, 16, 16, 0.25).unwrap();
        let expected = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((ssim(&c1, &c2).unwrap() - expected).abs() < 1e-4);
        let b = img(3, 16, 16, 2);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!(ssim(&a, &b).unwrap() < 1.0);
        assert!(matches!(ssim(&img(1, 8, 8, 0), &img(1, 8, 8, 1)), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_dense_oracle() {
        for seed in 0..5 {
            let (a, b) = (img(3, 16, 16, seed), img(3, 16, 16, seed + 100));
            assert!((ssim(&a, &b).unwrap() - dense_oracle(&a, &b).0).abs() < 1e-6);
        }
    }

    #[test]
    fn ms_ssim_reductions_and_oracle() {
        let (a, b) = (img(3, 64, 64, 3), img(3, 64, 64, 4));
        assert_eq!(ms_ssim(&a, &a, 3).unwrap(), 1.0);
        assert!((ms_ssim(&a, &b, 1).unwrap() - ssim(&a, &b).unwrap()).abs() < 1e-12);

        // level-by-level composition with the dense oracle on explicitly pooled images
        let pool = |x: &ImageTensor| {
            let (d, h, w) = avg_pool2(x.data(), x.channels(), x.height(), x.width());
            ImageTensor::new(x.channels(), h, w, d).unwrap()
        };
        // correlated pair so contrast-structure terms stay positive
        let noisy =
            ImageTensor::new(3, 64, 64, a.data().iter().zip(b.data()).map(|(x, y)| 0.7 * x + 0.3 * y).collect())
                .unwrap();
        let (mut x, mut y) = (a.clone(), noisy.clone());
        let w = ms_ssim_weights(3);
        let mut expected = 1.0;
        for (l, wl) in w.iter().enumerate().take(3) {
            let (s, cs) = dense_oracle(&x, &y);
            expected *= if l == 2 { s } else { cs }.powf(*wl);
            x = pool(&x);
            y = pool(&y);
        }
        assert!((ms_ssim(&a, &noisy, 3).unwrap() - expected).abs() < 1e-6);
        assert!(matches!(ms_ssim(&a, &b, 5), Err(MetricError::TooSmall { .. })));
        assert_eq!(max_ms_ssim_levels(512, 512, 11), 5);
        assert_eq!(max_ms_ssim_levels(64, 64, 11), 3);
    }

    #[test]
    fn psnr_cases() {
        let a = img(3, 8, 8, 5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let lo = ImageTensor::filled(3, 8, 8, 100.0 / 255.0).unwrap();
        let hi = ImageTensor::filled(3, 8, 8, 116.0 / 255.0).unwrap();
        let v = psnr(&lo, &hi, 1.0).unwrap();
        assert!((v - 10.0 * (65025.0f64 / 256.0).log10()).abs() < 1e-9);
        assert!((v - 24.05).abs() < 0.01);
        let halved = psnr_from_mse(0.005, 1.0) - psnr_from_mse(0.01, 1.0);
        assert!((halved - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn sqrt_cases() {
        let four = DMatrix::identity(3, 3) * 4.0;
        assert!((matrix_sqrt_psd(&four).unwrap() - DMatrix::identity(3, 3) * 2.0).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]))).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let m = a.transpose() * &a;
        let s = matrix_sqrt_psd(&m).unwrap();
        assert!((&s * &s - &m).norm() / m.norm() < 1e-6);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(MetricError::Asymmetric(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(matrix_sqrt_psd(&neg), Err(MetricError::Indefinite(_))));
    }

    #[test]
    fn fid_closed_forms() {
        let id = DMatrix::identity(2, 2);
        let a = FeatureStats { mean: DVector::from_vec(vec![0.0, 0.0]), covariance: id.clone(), n: 10 };
        let b = FeatureStats { mean: DVector::from_vec(vec![2.0, 0.0]), covariance: id, n: 10 };
        assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn report_tsv_round_trip() {
        let rows = vec![
            MetricRow { tile_id: "b".into(), ssim: 0.5, ms_ssim: 0.25, psnr: f64::INFINITY, lpips: 0.125 },
            MetricRow { tile_id: "a".into(), ssim: 1.0, ms_ssim: 1.0, psnr: 24.0, lpips: 0.0 },
        ];
        let r = MetricReport::new(rows, Some(0.5), Some((-0.25, 0.125)));
        let back = MetricReport::from_tsv(&r.to_tsv()).unwrap();
        assert_eq!(back, r);
        assert!(MetricReport::from_tsv("nope").is_err());
    }

    #[test]
    fn kid_hand_example() {
        let x = vec![vec![1.0], vec![-1.0]];
        let (m, s) = kid(&x, &x, &KidConfig { subset_size: 2, subsets: 1, seed: 0 }).unwrap();
        assert_eq!(m, -8.0);
        assert_eq!(s, 0.0);
        assert!(kid(&x[..1], &x, &KidConfig::default()).is_err());
    }

    #[test]
    fn kid_same_distribution_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw =
            |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect() };
        let (a, b) = (draw(400), draw(400));
        let cfg = KidConfig { subset_size: 100, subsets: 20, seed: 1 };
        let (m, s) = kid(&a, &b, &cfg).unwrap();
        assert!(m.abs() < 3.0 * s / (20f64).sqrt() + 1e-3, "{m} ± {s}");
        assert_eq!(kid(&a, &b, &cfg).unwrap(), (m, s));
    }

    #[test]
    fn perceptual_identity_symmetry_and_oracle() {
        let (a, b) = (img(3, 8, 8, 6), img(3, 8, 8, 7));
        let rp = RandomProjectionExtractor::new(3, 0);
        assert_eq!(perceptual_distance(&a, &a, &rp, None).unwrap(), 0.0);
        let d1 = perceptual_distance(&a, &b, &rp, None).unwrap();
        assert!((d1 - perceptual_distance(&b, &a, &rp, None).unwrap()).abs() < 1e-15);
        assert!(d1 > 0.0);
        assert_eq!(rp.embed(&a).len(), rp.dim());

        let id = IdentityExtractor { channels: 3 };
        let mut expected = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let na = (0..3).map(|c| a.get(c, y, x).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let nb = (0..3).map(|c| b.get(c, y, x).powi(2)).sum::<f64>().sqrt() + 1e-10;
                expected += (0..3).map(|c| (a.get(c, y, x) / na - b.get(c, y, x) / nb).powi(2)).sum::<f64>();
            }
        }
        expected /= 64.0;
        assert!((perceptual_distance(&a, &b, &id, None).unwrap() - expected).abs() < 1e-12);
        assert!(perceptual_distance(&a, &b, &id, Some(&[vec![1.0; 2]])).is_err());
    }

    #[test]
    fn report_is_order_independent() {
        let row =
            |id: &str, v: f64| MetricRow { tile_id: id.into(), ssim: v, ms_ssim: v, psnr: f64::INFINITY, lpips: 0.0 };
        let r1 = MetricReport::new(vec![row("b", 0.5), row("a", 0.25)], Some(1.0), Some((0.1, 0.01)));
        let r2 = MetricReport::new(vec![row("a", 0.25), row("b", 0.5)], Some(1.0), Some((0.1, 0.01)));
        assert_eq!(r1.to_tsv(), r2.to_tsv());
        assert!(r1.to_tsv().lines().last().unwrap().starts_with("#summary\tn=2"));
        assert!(r1.to_tsv().contains("\tinf\t"));
    }
}
