//! `train` and `eval`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stainbench_core::backbone::SmallUNet;
use stainbench_core::checkpoint::Checkpoint;
use stainbench_core::metrics::{
    fid, kid, max_ms_ssim_levels, ms_ssim, perceptual_distance, psnr, ssim, FeatureExtractor, FeatureStats,
    MetricReport, MetricRow, RandomProjectionExtractor, SsimParams,
};
use stainbench_core::train::{paired_toy, train, two_pixel_toy, PairSet, TrainedModel};
use stainbench_core::{load_image, save_image, ImageTensor, Manifest, Split, Status, Tensor};

use crate::config::{DataSource, EvalSection, RunConfig};
use crate::dataset::resolve;
use crate::error::{CliError, Result};
use crate::provenance::{write_file, RunManifest};

pub const RUN_CONFIG: &str = "config.toml";

/// Named pairs drawn from the data section.
pub struct Pairs {
    pub ids: Vec<String>,
    pub set: PairSet,
}

fn split_filter(field: &str, name: &str) -> Result<Option<Split>> {
    if name == "all" {
        return Ok(None);
    }
    name.parse::<Split>().map(Some).map_err(|e| CliError::field("config", field, e))
}

fn manifest_pairs(path: &Path, split: Option<Split>) -> Result<Pairs> {
    let m = Manifest::load(path)?;
    let chosen: Vec<_> =
        m.records().iter().filter(|r| r.status == Status::Kept && split.is_none_or(|s| r.split == s)).collect();
    if chosen.is_empty() {
        return Err(CliError::new("data", format!("{}: no kept tiles in the requested split", path.display())));
    }
    let loaded: Vec<Result<(Tensor, Tensor)>> = chosen
        .par_iter()
        .map(|r| {
            Ok((
                load_image(resolve(path, &r.path_source))?.to_tensor(),
                load_image(resolve(path, &r.path_target))?.to_tensor(),
            ))
        })
        .collect();
    let (mut sources, mut targets) = (Vec::new(), Vec::new());
    for l in loaded {
        let (s, t) = l?;
        sources.push(s);
        targets.push(t);
    }
    let set = PairSet::new(sources, targets, chosen.iter().map(|r| r.her2_score).collect())?;
    Ok(Pairs { ids: chosen.iter().map(|r| r.tile_id.clone()).collect(), set })
}

/// Training pairs, or the held-out pairs when `held_out` (toy sets use the next seed).
pub fn load_pairs(cfg: &RunConfig, held_out: bool) -> Result<Pairs> {
    let d = &cfg.data;
    let seed = cfg.seed()?.wrapping_add(held_out as u64);
    let toy = |set: PairSet| Pairs { ids: (0..set.len()).map(|i| format!("toy{i:04}")).collect(), set };
    match cfg.data_source()? {
        DataSource::Manifest(p) => {
            let (field, name) =
                if held_out { ("data.eval_split", &d.eval_split) } else { ("data.train_split", &d.train_split) };
            manifest_pairs(&p, split_filter(field, name)?)
        }
        DataSource::TwoPixel => Ok(toy(two_pixel_toy(d.toy_pairs, d.toy_jitter, seed))),
        DataSource::Paired => Ok(toy(paired_toy(d.toy_pairs, d.toy_channels, d.toy_size, seed))),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains into `cfg.run.output_dir`: `config.toml`, `checkpoints/*.ckpt`, `losses.tsv`,
/// `summary.tsv` and `run.toml`. `config_path` is recorded as an input.
pub fn train_command(cfg: &RunConfig, config_path: &Path) -> Result<TrainSummary> {
    cfg.validate_for_training()?;
    let out = cfg.output_dir()?.to_path_buf();
    let pairs = load_pairs(cfg, false)?;
    let tc = cfg.train_config(pairs.set.len())?;
    let outcome = train(&pairs.set, &tc)?;

    let mut saved = cfg.clone();
    saved.run.output_dir = None;
    if let Some(m) = saved.data.manifest.as_mut() {
        *m = std::path::absolute(&*m).map_err(|e| CliError::io(m, e))?;
    }
    write_file(&out.join(RUN_CONFIG), saved.to_toml().as_bytes())?;

    let names = tc.networks(pairs.set.image_shape().c);
    for ((name, _), net) in names.iter().zip(outcome.model.networks()) {
        let ck = Checkpoint::new(vec![net.param_count()], net.params().to_vec());
        let path = out.join("checkpoints").join(format!("{name}.ckpt"));
        write_file(&path, &ck.to_bytes()?)?;
    }

    let mut losses = String::from("step\tloss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(losses, "{}\t{l:.12e}", i + 1);
    }
    write_file(&out.join("losses.tsv"), losses.as_bytes())?;

    let w = (outcome.losses.len() / 10).max(1);
    let summary = TrainSummary {
        steps: outcome.losses.len(),
        initial_loss: mean(&outcome.losses[..w]),
        final_loss: mean(&outcome.losses[outcome.losses.len() - w..]),
    };
    let text = format!(
        "framework\t{}\nseed\t{}\npairs\t{}\nsteps\t{}\nloss_window\t{w}\ninitial_loss\t{:.12e}\nfinal_loss\t{:.12e}\n",
        tc.framework,
        tc.seed,
        pairs.set.len(),
        summary.steps,
        summary.initial_loss,
        summary.final_loss
    );
    write_file(&out.join("summary.tsv"), text.as_bytes())?;

    let mut run = RunManifest::new("train", Some(tc.seed));
    run.input("config", config_path)?;
    if let Some(m) = &cfg.data.manifest {
        run.input("manifest", m)?;
    }
    run.settings(&saved);
    run.write(&out.join("run.toml"))?;
    Ok(summary)
}

/// Rebuilds the trained model of `run_dir` for images with `channels` channels.
pub fn load_model(run_dir: &Path, cfg: &RunConfig, channels: usize) -> Result<TrainedModel> {
    let tc = cfg.train_config(1)?;
    let mut nets = Vec::new();
    for (name, net_cfg) in tc.networks(channels) {
        let ck = Checkpoint::load(&run_dir.join("checkpoints").join(format!("{name}.ckpt")))?;
        nets.push(SmallUNet::from_params(net_cfg, ck.values)?);
    }
    Ok(TrainedModel::from_networks(tc.framework, nets)?)
}

pub struct EvalPair {
    pub id: String,
    pub generated: ImageTensor,
    pub target: ImageTensor,
}

/// Generated and target feature rows.
pub type FeatureSets = (Vec<Vec<f64>>, Vec<Vec<f64>>);

type RowWithEmbeddings = (MetricRow, Vec<f64>, Vec<f64>);

/// Per-tile SSIM, MS-SSIM, PSNR and perceptual distance, plus FID and KID over the
/// embeddings (or over `features` when given as generated/target rows).
pub fn evaluate(
    pairs: &[EvalPair],
    eval: &EvalSection,
    seed: u64,
    features: Option<FeatureSets>,
) -> Result<MetricReport> {
    let first = pairs.first().ok_or_else(|| CliError::new("data", "nothing to evaluate"))?;
    let extractor = RandomProjectionExtractor::new(first.generated.channels(), eval.extractor_seed);
    let window = SsimParams::default().window;
    let rows: Vec<Result<RowWithEmbeddings>> = pairs
        .par_iter()
        .map(|p| {
            let (a, b) = (&p.generated, &p.target);
            let levels = eval.ms_ssim_levels.min(max_ms_ssim_levels(a.height(), a.width(), window)).max(1);
            let row = MetricRow {
                tile_id: p.id.clone(),
                ssim: ssim(a, b)?,
                ms_ssim: ms_ssim(a, b, levels)?,
                psnr: psnr(a, b, 1.0)?,
                lpips: perceptual_distance(a, b, &extractor, None)?,
            };
            let (fa, fb) =
                if features.is_some() { (Vec::new(), Vec::new()) } else { (extractor.embed(a), extractor.embed(b)) };
            Ok((row, fa, fb))
        })
        .collect();
    let (mut out, mut ga, mut gb) = (Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        let (row, fa, fb) = r?;
        out.push(row);
        ga.push(fa);
        gb.push(fb);
    }
    let (ga, gb) = features.unwrap_or((ga, gb));
    let (fid_v, kid_v) = if ga.len() >= 2 && gb.len() >= 2 {
        let f = fid(&FeatureStats::from_features(&ga)?, &FeatureStats::from_features(&gb)?)?;
        (Some(f), Some(kid(&ga, &gb, &eval.kid(seed))?))
    } else {
        (None, None)
    };
    Ok(MetricReport::new(out, fid_v, kid_v))
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub enum EvalTargets<'a> {
    Dir(&'a Path),
    Manifest { path: &'a Path, split: &'a str },
}

/// Pairs `generated/{id}.png` with the targets named by `targets`.
pub fn image_pairs(generated: &Path, targets: &EvalTargets) -> Result<Vec<EvalPair>> {
    let wanted: Vec<(String, PathBuf)> = match targets {
        EvalTargets::Dir(d) => png_stems(d)?.into_iter().map(|s| (s.clone(), d.join(format!("{s}.png")))).collect(),
        EvalTargets::Manifest { path, split } => {
            let filter = split_filter("split", split)?;
            Manifest::load(path)?
                .records()
                .iter()
                .filter(|r| r.status == Status::Kept && filter.is_none_or(|s| r.split == s))
                .map(|r| (r.tile_id.clone(), resolve(path, &r.path_target)))
                .collect()
        }
    };
    wanted
        .par_iter()
        .map(|(id, tp)| {
            let gp = generated.join(format!("{id}.png"));
            if !gp.exists() {
                return Err(CliError::new("data", format!("no generated image for '{id}' at {}", gp.display())));
            }
            Ok(EvalPair { id: id.clone(), generated: load_image(&gp)?, target: load_image(tp)? })
        })
        .collect()
}

/// Translates the held-out pairs of a run into `out/generated/` and pairs them with targets.
pub fn translate_run(run_dir: &Path, out: &Path) -> Result<(RunConfig, Vec<EvalPair>)> {
    let mut cfg = RunConfig::load(&run_dir.join(RUN_CONFIG))?;
    cfg.run.output_dir = Some(run_dir.to_path_buf());
    let tc = cfg.train_config(1)?;
    let pairs = load_pairs(&cfg, true)?;
    let model = load_model(run_dir, &cfg, pairs.set.image_shape().c)?;
    let gen_dir = out.join("generated");
    fs::create_dir_all(&gen_dir).map_err(|e| CliError::io(&gen_dir, e))?;
    let seed = tc.seed;
    let results: Vec<Result<EvalPair>> = (0..pairs.ids.len())
        .into_par_iter()
        .map(|i| {
            let src = &pairs.set.sources()[i];
            let y = model.translate(&tc, src, seed.wrapping_add(i as u64))?;
            let path = gen_dir.join(format!("{}.png", pairs.ids[i]));
            save_image(&ImageTensor::from_tensor_clamped(&y)?, &path)?;
            Ok(EvalPair {
                id: pairs.ids[i].clone(),
                generated: load_image(&path)?,
                target: ImageTensor::from_tensor_clamped(&pairs.set.targets()[i])?,
            })
        })
        .collect();
    Ok((cfg, results.into_iter().collect::<Result<_>>()?))
}

/// Reads an `[n, d]` feature file in checkpoint format.
pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let ck = Checkpoint::load(path)?;
    let [n, d] = ck.dims[..] else {
        return Err(CliError::new("data", format!("{}: feature file must be 2-D, got {:?}", path.display(), ck.dims)));
    };
    Ok((0..n).map(|i| ck.values[i * d..(i + 1) * d].to_vec()).collect())
}

pub fn write_report(report: &MetricReport, out: &Path, mut run: RunManifest, eval: &EvalSection) -> Result<()> {
    write_file(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
    run.settings(eval);
    run.write(&out.join("run.toml"))
}
