//! Linear mixed model `metric ~ framework * dataset + (1|model) + (1|image)` fitted by
//! profiled REML, with Wald z-tests for the fixed effects.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LmmError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("factor '{0}' has a single level; the interaction is not identifiable")]
    SingleLevel(&'static str),
    #[error("need at least 2 distinct {0}")]
    TooFewGroups(&'static str),
    #[error("need more than 4 observations, got {0}")]
    TooFewRows(usize),
    #[error("singular fixed-effect design")]
    Singular,
    #[error("fit did not converge")]
    NotConverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Framework {
    Dm,
    Gan,
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Dm => "DM",
            Framework::Gan => "GAN",
        })
    }
}

impl FromStr for Framework {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DM" | "dm" => Ok(Framework::Dm),
            "GAN" | "gan" => Ok(Framework::Gan),
            _ => Err(format!("unknown framework '{s}' (DM|GAN)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DatasetLabel {
    Bci,
    BciClean,
}

impl fmt::Display for DatasetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetLabel::Bci => "BCI",
            DatasetLabel::BciClean => "BCI-clean",
        })
    }
}

impl FromStr for DatasetLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BCI" | "bci" => Ok(DatasetLabel::Bci),
            "BCI-clean" | "bci-clean" | "bci_clean" => Ok(DatasetLabel::BciClean),
            _ => Err(format!("unknown dataset '{s}' (BCI|BCI-clean)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub value: f64,
    pub framework: Framework,
    pub dataset: DatasetLabel,
    pub model_id: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ObservationTable {
    pub rows: Vec<Observation>,
}

pub const TABLE_HEADER: &str = "value\tframework\tdataset\tmodel_id\timage_id";

impl ObservationTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.value, r.framework, r.dataset, r.model_id, r.image_id);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, LmmError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || line == TABLE_HEADER {
                continue;
            }
            let bad = |reason: String| LmmError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let value: f64 = f[0].parse().map_err(|e| bad(format!("value: {e}")))?;
            if !value.is_finite() {
                return Err(bad("value must be finite".into()));
            }
            if f[3].is_empty() || f[4].is_empty() {
                return Err(bad("empty model_id or image_id".into()));
            }
            rows.push(Observation {
                value,
                framework: f[1].parse().map_err(bad)?,
                dataset: f[2].parse().map_err(bad)?,
                model_id: f[3].to_string(),
                image_id: f[4].to_string(),
            });
        }
        Ok(ObservationTable { rows })
    }
}

pub const TERMS: [&str; 4] = ["(Intercept)", "frameworkGAN", "datasetBCI-clean", "frameworkGAN:datasetBCI-clean"];

/// Fixed design and random-effect memberships.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Group index of each row for the model and image intercepts.
    pub model_index: Vec<usize>,
    pub image_index: Vec<usize>,
    pub n_models: usize,
    pub n_images: usize,
}

impl Design {
    /// Dense 0/1 membership matrices `(Z_model, Z_image)`.
    pub fn z_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.y.len();
        let mut zm = DMatrix::zeros(n, self.n_models);
        let mut zi = DMatrix::zeros(n, self.n_images);
        for r in 0..n {
            zm[(r, self.model_index[r])] = 1.0;
            zi[(r, self.image_index[r])] = 1.0;
        }
        (zm, zi)
    }

    fn q(&self) -> usize {
        self.n_models + self.n_images
    }
}

/// Treatment coding with references DM and BCI: columns `[1, GAN, clean, GAN·clean]`.
pub fn build_design(table: &ObservationTable) -> Result<Design, LmmError> {
    let rows = &table.rows;
    let distinct = |f: &dyn Fn(&Observation) -> bool| rows.iter().any(f) && rows.iter().any(|r| !f(r));
    if !distinct(&|r| r.framework == Framework::Gan) {
        return Err(LmmError::SingleLevel("framework"));
    }
    if !distinct(&|r| r.dataset == DatasetLabel::BciClean) {
        return Err(LmmError::SingleLevel("dataset"));
    }
    let index = |key: &dyn Fn(&Observation) -> &str| {
        let ids: BTreeMap<&str, usize> = rows
            .iter()
            .map(key)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        (rows.iter().map(|r| ids[key(r)]).collect::<Vec<_>>(), ids.len())
    };
    let (model_index, n_models) = index(&|r| r.model_id.as_str());
    let (image_index, n_images) = index(&|r| r.image_id.as_str());
    if n_models < 2 {
        return Err(LmmError::TooFewGroups("model_ids"));
    }
    if n_images < 2 {
        return Err(LmmError::TooFewGroups("image_ids"));
    }
    let x = DMatrix::from_fn(rows.len(), 4, |r, c| {
        let g = (rows[r].framework == Framework::Gan) as u8 as f64;
        let d = (rows[r].dataset == DatasetLabel::BciClean) as u8 as f64;
        [1.0, g, d, g * d][c]
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.value));
    Ok(Design { x, y, model_index, image_index, n_models, n_images })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedModelFit {
    pub beta: [f64; 4],
    pub se: [f64; 4],
    pub sigma2_model: f64,
    pub sigma2_image: f64,
    pub sigma2_residual: f64,
    /// Relative standard deviations `(σ_model/σ, σ_image/σ)` at the optimum.
    pub theta: (f64, f64),
    pub reml_deviance: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Best deviance after each optimizer iteration.
    pub deviance_trace: Vec<f64>,
}

struct Profile {
    deviance: f64,
    beta: DVector<f64>,
    cov_unscaled: DMatrix<f64>,
    sigma2: f64,
}

/// Sufficient cross-products of the design.
struct CrossProducts {
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

impl CrossProducts {
    fn new(d: &Design) -> Self {
        let q = d.q();
        let p = d.x.ncols();
        let mut ztz = DMatrix::zeros(q, q);
        let mut ztx = DMatrix::zeros(q, p);
        let mut zty = DVector::zeros(q);
        for r in 0..d.y.len() {
            let cols = [d.model_index[r], d.n_models + d.image_index[r]];
            for &a in &cols {
                for &b in &cols {
                    ztz[(a, b)] += 1.0;
                }
                for c in 0..p {
                    ztx[(a, c)] += d.x[(r, c)];
                }
                zty[a] += d.y[r];
            }
        }
        CrossProducts { ztz, ztx, zty, xtx: d.x.transpose() * &d.x, xty: d.x.transpose() * &d.y }
    }
}

fn profile(d: &Design, cp: &CrossProducts, theta: (f64, f64)) -> Result<Profile, LmmError> {
    let (n, p, q) = (d.y.len(), d.x.ncols(), d.q());
    let lambda: Vec<f64> = (0..q).map(|j| if j < d.n_models { theta.0 } else { theta.1 }).collect();
    let mut a = DMatrix::from_fn(q, q, |i, j| lambda[i] * cp.ztz[(i, j)] * lambda[j]);
    for i in 0..q {
        a[(i, i)] += 1.0;
    }
    let l = Cholesky::new(a).ok_or(LmmError::Singular)?.unpack();
    let lzty = DVector::from_fn(q, |i, _| lambda[i] * cp.zty[i]);
    let lztx = DMatrix::from_fn(q, p, |i, c| lambda[i] * cp.ztx[(i, c)]);
    let cu = l.solve_lower_triangular(&lzty).ok_or(LmmError::Singular)?;
    let rzx = l.solve_lower_triangular(&lztx).ok_or(LmmError::Singular)?;
    let xtx = &cp.xtx - rzx.transpose() * &rzx;
    let rx = Cholesky::new(xtx).ok_or(LmmError::Singular)?;
    let rhs = &cp.xty - rzx.transpose() * &cu;
    let beta = rx.solve(&rhs);
    let u = l.transpose().solve_upper_triangular(&(&cu - &rzx * &beta)).ok_or(LmmError::Singular)?;

    let mut pwrss = u.norm_squared();
    for r in 0..n {
        let b = lambda[d.model_index[r]] * u[d.model_index[r]]
            + lambda[d.n_models + d.image_index[r]] * u[d.n_models + d.image_index[r]];
        let fitted = (d.x.row(r) * &beta)[0] + b;
        pwrss += (d.y[r] - fitted).powi(2);
    }
    let dof = (n - p) as f64;
    let logdet_l: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let logdet_rx: f64 = rx.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let deviance = logdet_l + logdet_rx + dof * (1.0 + (2.0 * std::f64::consts::PI * pwrss / dof).ln());
    Ok(Profile { deviance, beta, cov_unscaled: rx.inverse(), sigma2: pwrss / dof })
}

fn finish(
    d: &Design,
    cp: &CrossProducts,
    theta: (f64, f64),
    trace: Vec<f64>,
    converged: bool,
) -> Result<MixedModelFit, LmmError> {
    let pr = profile(d, cp, theta)?;
    let mut beta = [0.0; 4];
    let mut se = [0.0; 4];
    for i in 0..4 {
        beta[i] = pr.beta[i];
        se[i] = (pr.sigma2 * pr.cov_unscaled[(i, i)]).sqrt();
    }
    Ok(MixedModelFit {
        beta,
        se,
        sigma2_model: pr.sigma2 * theta.0 * theta.0,
        sigma2_image: pr.sigma2 * theta.1 * theta.1,
        sigma2_residual: pr.sigma2,
        theta,
        reml_deviance: pr.deviance,
        converged,
        iterations: trace.len(),
        deviance_trace: trace,
    })
}

fn check_size(d: &Design) -> Result<(), LmmError> {
    if d.y.len() <= 4 {
        return Err(LmmError::TooFewRows(d.y.len()));
    }
    Ok(())
}

/// Profiled fit at fixed relative standard deviations; `(0, 0)` is ordinary least squares.
pub fn fit_at_theta(design: &Design, theta: (f64, f64)) -> Result<MixedModelFit, LmmError> {
    check_size(design)?;
    let cp = CrossProducts::new(design);
    finish(design, &cp, theta, Vec::new(), true)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemlOptions {
    pub max_iterations: usize,
    /// Stop once the search step falls below this.
    pub step_tolerance: f64,
    /// Minimum deviance decrease that counts as progress.
    pub deviance_tolerance: f64,
    pub upper_bound: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions { max_iterations: 5000, step_tolerance: 1e-7, deviance_tolerance: 1e-8, upper_bound: 1e3 }
    }
}

/// Minimizes the profiled REML deviance over `θ ∈ [0, upper]²` by compass search.
pub fn reml_fit(design: &Design) -> Result<MixedModelFit, LmmError> {
    reml_fit_with(design, &RemlOptions::default())
}

pub fn reml_fit_with(design: &Design, opts: &RemlOptions) -> Result<MixedModelFit, LmmError> {
    check_size(design)?;
    let cp = CrossProducts::new(design);
    let eval = |t: (f64, f64)| profile(design, &cp, t).map(|p| p.deviance);
    let mut best = (1.0, 1.0);
    let mut best_dev = eval(best)?;
    let mut step = 0.5;
    let mut trace = vec![best_dev];
    let mut converged = false;
    for _ in 0..opts.max_iterations {
        let mut moved = false;
        for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let cand =
                ((best.0 + dx * step).clamp(0.0, opts.upper_bound), (best.1 + dy * step).clamp(0.0, opts.upper_bound));
            if cand == best {
                continue;
            }
            let dev = eval(cand)?;
            if dev < best_dev - opts.deviance_tolerance * 1e-3 {
                best = cand;
                best_dev = dev;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
        trace.push(best_dev);
        if step < opts.step_tolerance {
            converged = true;
            break;
        }
    }
    finish(design, &cp, best, trace, converged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaldRow {
    pub term: &'static str,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub starred: bool,
}

/// Two-sided normal p-value of `z`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn wald_report(fit: &MixedModelFit, alpha: f64) -> Result<Vec<WaldRow>, LmmError> {
    if !fit.converged {
        return Err(LmmError::NotConverged);
    }
    Ok((0..4)
        .map(|i| {
            let z = fit.beta[i] / fit.se[i];
            let p = two_sided_p(z);
            WaldRow { term: TERMS[i], estimate: fit.beta[i], se: fit.se[i], z, p, starred: p <= alpha }
        })
        .collect())
}

pub fn wald_table_tsv(metric: &str, fit: &MixedModelFit, alpha: f64) -> Result<String, LmmError> {
    let rows = wald_report(fit, alpha)?;
    let mut s = String::from("metric\tterm\testimate\tse\tz\tp\tsignificant\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{metric}\t{}\t{:.8}\t{:.8}\t{:.4}\t{:.4e}\t{}",
            r.term,
            r.estimate,
            r.se,
            r.z,
            r.p,
            if r.starred { "*" } else { "" }
        );
    }
    let _ = writeln!(
        s,
        "#{metric}\tsigma2_model={:.6e}\tsigma2_image={:.6e}\tsigma2_residual={:.6e}\treml_deviance={:.6}\ttest=wald-z\talpha={alpha}",
        fit.sigma2_model, fit.sigma2_image, fit.sigma2_residual, fit.reml_deviance
    );
    Ok(s)
}

/// Parameters of the crossed-intercept generating process.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub beta: [f64; 4],
    pub sigma_model: f64,
    pub sigma_image: f64,
    pub sigma_residual: f64,
    /// Model ids with their frameworks; every model is observed on both datasets.
    pub models: Vec<(String, Framework)>,
    pub images: usize,
    pub seed: u64,
}

impl Simulation {
    /// Three DM and three GAN models, as in the benchmark.
    pub fn benchmark(beta: [f64; 4], sigmas: (f64, f64, f64), images: usize, seed: u64) -> Self {
        let models = ["ddib", "cm", "bbdm"]
            .iter()
            .map(|m| (m.to_string(), Framework::Dm))
            .chain(["pyramid_pix2pix", "asp", "bcistainer"].iter().map(|m| (m.to_string(), Framework::Gan)))
            .collect();
        Simulation {
            beta,
            sigma_model: sigmas.0,
            sigma_image: sigmas.1,
            sigma_residual: sigmas.2,
            models,
            images,
            seed,
        }
    }

    pub fn generate(&self) -> ObservationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = |s: f64| Normal::new(0.0, s).expect("finite sigma");
        let model_fx: Vec<f64> = self.models.iter().map(|_| normal(self.sigma_model).sample(&mut rng)).collect();
        let image_fx: Vec<f64> = (0..self.images).map(|_| normal(self.sigma_image).sample(&mut rng)).collect();
        let eps = normal(self.sigma_residual);
        let mut rows = Vec::new();
        for (m, (id, fw)) in self.models.iter().enumerate() {
            for ds in [DatasetLabel::Bci, DatasetLabel::BciClean] {
                for (i, bi) in image_fx.iter().enumerate() {
                    let g = (*fw == Framework::Gan) as u8 as f64;
                    let d = (ds == DatasetLabel::BciClean) as u8 as f64;
                    let mean = self.beta[0] + self.beta[1] * g + self.beta[2] * d + self.beta[3] * g * d;
                    rows.push(Observation {
                        value: mean + model_fx[m] + bi + eps.sample(&mut rng),
                        framework: *fw,
                        dataset: ds,
                        model_id: id.clone(),
                        image_id: format!("img{i:04}"),
                    });
                }
            }
        }
        ObservationTable { rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(value: f64, fw: Framework, ds: DatasetLabel, m: &str, i: &str) -> Observation {
        Observation { value, framework: fw, dataset: ds, model_id: m.into(), image_id: i.into() }
    }

    #[test]
    fn coding_of_cells() {
        let t = ObservationTable {
            rows: vec![
                obs(1.0, Framework::Dm, DatasetLabel::Bci, "a", "x"),
                obs(2.0, Framework::Gan, DatasetLabel::Bci, "b", "y"),
                obs(3.0, Framework::Dm, DatasetLabel::BciClean, "a", "y"),
                obs(4.0, Framework::Gan, DatasetLabel::BciClean, "b", "x"),
            ],
        };
        let d = build_design(&t).unwrap();
        let expected = DMatrix::from_row_slice(4, 4, &[1., 0., 0., 0., 1., 1., 0., 0., 1., 0., 1., 0., 1., 1., 1., 1.]);
        assert_eq!(d.x, expected);
        let (zm, zi) = d.z_matrices();
        assert_eq!(zm.column_sum().as_slice(), &[1.0; 4]);
        assert_eq!(zi.row_sum().as_slice(), &[2.0, 2.0]);
        let mut single = t.clone();
        single.rows.retain(|r| r.framework == Framework::Dm);
        assert_eq!(build_design(&single), Err(LmmError::SingleLevel("framework")));
    }

    #[test]
    fn table_round_trip() {
        let t = Simulation::benchmark([0.5, 0.1, -0.05, 0.08], (0.02, 0.05, 0.03), 3, 1).generate();
        assert_eq!(ObservationTable::from_tsv(&t.to_tsv()).unwrap(), t);
        assert!(ObservationTable::from_tsv("1\tDM\tBCI\tm\n").is_err());
        assert!(ObservationTable::from_tsv("x\tDM\tBCI\tm\ti\n").is_err());
    }

    #[test]
    fn wald_examples() {
        let fit = MixedModelFit {
            beta: [0.1, 0.0, 0.5, -0.001],
            se: [0.01, 0.3, 1.0, 0.01],
            sigma2_model: 0.0,
            sigma2_image: 0.0,
            sigma2_residual: 1.0,
            theta: (0.0, 0.0),
            reml_deviance: 0.0,
            converged: true,
            iterations: 0,
            deviance_trace: vec![],
        };
        let r = wald_report(&fit, 0.001).unwrap();
        assert_eq!(r[0].z, 10.0);
        assert!(r[0].starred);
        assert_eq!(r[1].p, 1.0);
        assert!(!r[1].starred);
        assert!(wald_report(&fit, 1.0).unwrap().iter().all(|r| r.starred));
        let bad = MixedModelFit { converged: false, ..fit };
        assert_eq!(wald_report(&bad, 0.001), Err(LmmError::NotConverged));
    }

    #[test]
    fn p_value_against_known_tail() {
        // P(|Z| > 1.959963984540054) = 0.05
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-10);
        assert!((two_sided_p(-3.2905267314919255) - 0.001).abs() < 1e-10);
    }
}
