//! `analyze lmm` and `report`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stainbench_core::lmm::{
    build_design, reml_fit, wald_table_tsv, DatasetLabel, Framework, Observation, ObservationTable,
};
use stainbench_core::metrics::{MetricReport, MetricRow};
use stainbench_core::train::Architecture;

use crate::dataset::resolve;
use crate::error::{CliError, Result};
use crate::provenance::{read_text, RunManifest};

pub const METRICS: [&str; 4] = ["ssim", "ms_ssim", "psnr", "lpips"];

pub fn metric_value(row: &MetricRow, metric: &str) -> Result<f64> {
    Ok(match metric {
        "ssim" => row.ssim,
        "ms_ssim" => row.ms_ssim,
        "psnr" => row.psnr,
        "lpips" => row.lpips,
        _ => return Err(CliError::field("usage", "metrics", format!("unknown metric '{metric}'"))),
    })
}

/// One registry line: a trained model, its framework family, its training dataset and
/// the metric report of its test-set evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub model_id: String,
    pub framework: Framework,
    pub dataset: DatasetLabel,
    pub report: PathBuf,
}

/// Parses `model_id<TAB>framework<TAB>dataset<TAB>report` lines after a header. The
/// framework is an architecture name or `DM`/`GAN`; report paths resolve against the
/// registry's directory.
pub fn parse_registry(path: &Path) -> Result<Vec<RegistryEntry>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| CliError::new("registry", format!("{} line {}: {m}", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        let [model_id, framework, dataset, report] = f[..] else {
            return Err(bad("expected model_id, framework, dataset, report".into()));
        };
        let framework = match framework.parse::<Architecture>() {
            Ok(a) => a.family(),
            Err(_) => framework.parse::<Framework>().map_err(|e| bad(e.to_string()))?,
        };
        out.push(RegistryEntry {
            model_id: model_id.to_string(),
            framework,
            dataset: dataset.parse().map_err(|e: String| bad(e))?,
            report: resolve(path, Path::new(report)),
        });
    }
    Ok(out)
}

/// Observation table of `metric` joining each registry entry with its report rows.
pub fn observations(entries: &[(RegistryEntry, MetricReport)], metric: &str) -> Result<ObservationTable> {
    let mut rows = Vec::new();
    for (e, report) in entries {
        for r in &report.rows {
            let value = metric_value(r, metric)?;
            if !value.is_finite() {
                return Err(CliError::new(
                    "data",
                    format!("{metric} of tile '{}' in {} is not finite", r.tile_id, e.report.display()),
                ));
            }
            rows.push(Observation {
                value,
                framework: e.framework,
                dataset: e.dataset,
                model_id: e.model_id.clone(),
                image_id: r.tile_id.clone(),
            });
        }
    }
    Ok(ObservationTable { rows })
}

/// Wald tables of all `metrics`, sharing one header line.
pub fn lmm_tables(tables: &[(String, ObservationTable)], alpha: f64) -> Result<String> {
    let mut out = String::new();
    for (k, (metric, table)) in tables.iter().enumerate() {
        let fit = reml_fit(&build_design(table)?)?;
        let t = wald_table_tsv(metric, &fit, alpha)?;
        let body = if k == 0 { t.as_str() } else { t.split_once('\n').map_or("", |(_, rest)| rest) };
        out.push_str(body);
    }
    Ok(out)
}

pub enum LmmInput<'a> {
    Registry { path: &'a Path, metrics: &'a [String] },
    Observations(&'a Path),
}

pub fn analyze_lmm(input: LmmInput, alpha: f64, run: &mut RunManifest) -> Result<String> {
    let tables = match input {
        LmmInput::Registry { path, metrics } => {
            run.input("registry", path)?;
            let mut joined = Vec::new();
            for e in parse_registry(path)? {
                run.input("report", &e.report)?;
                let report = MetricReport::from_tsv(&read_text(&e.report)?)
                    .map_err(|err| CliError::new("report", format!("{}: {err}", e.report.display())))?;
                joined.push((e, report));
            }
            metrics.iter().map(|m| Ok((m.clone(), observations(&joined, m)?))).collect::<Result<Vec<_>>>()?
        }
        LmmInput::Observations(path) => {
            run.input("observations", path)?;
            vec![("value".to_string(), ObservationTable::from_tsv(&read_text(path)?)?)]
        }
    };
    run.setting("alpha", alpha);
    lmm_tables(&tables, alpha)
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distribution summary per report and metric, over finite values, followed by the
/// set-level FID and KID.
pub fn summarize(reports: &[(String, MetricReport)]) -> Result<String> {
    let mut s = String::from("report\tmetric\tn\tmean\tsd\tmin\tq1\tmedian\tq3\tmax\n");
    for (label, report) in reports {
        for m in METRICS {
            let mut v: Vec<f64> = report.rows.iter().map(|r| metric_value(r, m)).collect::<Result<Vec<_>>>()?;
            v.retain(|x| x.is_finite());
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                let _ = writeln!(s, "{label}\t{m}\t0\t\t\t\t\t\t\t");
                continue;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd =
                if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            let _ = writeln!(
                s,
                "{label}\t{m}\t{}\t{mean:.6}\t{sd:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                v.len(),
                v[0],
                quantile(&v, 0.25),
                quantile(&v, 0.5),
                quantile(&v, 0.75),
                v[v.len() - 1]
            );
        }
        if let Some(f) = report.fid {
            let _ = writeln!(s, "{label}\tfid\t1\t{f:.6}\t\t\t\t\t\t");
        }
        if let Some((k, sd)) = report.kid {
            let _ = writeln!(s, "{label}\tkid\t1\t{k:.6}\t{sd:.6}\t\t\t\t\t");
        }
    }
    Ok(s)
}
