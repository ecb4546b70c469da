use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stainbench_core::dataset::{
    apply_curation, apply_split, extract_tiles_with_mask, harmonize_pair, parse_decisions, parse_roi_sidecar,
    stratified_split, tissue_mask, CurationCounts, HarmonizeMode, SplitFractions, SplitPlan,
};
use stainbench_core::{load_image, save_image, Her2Score, Manifest, TileRecord};

use crate::error::{CliError, Result};
use crate::provenance::{read_text, sidecar, write_file, RunManifest};

/// Resolves a record path against the directory holding its manifest.
pub fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn parse_scores(text: &str) -> Result<BTreeMap<String, Her2Score>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| CliError::new("dataset", format!("scores line {}: {m}", i + 1));
        let mut parts = line.split_whitespace();
        let (Some(case), Some(score), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected case_id score".into()));
        };
        out.insert(case.to_string(), score.parse().map_err(bad)?);
    }
    Ok(out)
}

pub struct TileArgs<'a> {
    pub slides: &'a Path,
    pub roi: &'a Path,
    pub scores: &'a Path,
    pub out: &'a Path,
    pub tile_px: usize,
    pub min_tissue: f64,
    pub name: &'a str,
    pub mpp: f64,
}

/// Cuts `{case}_he.png` / `{case}_ihc.png` slide pairs into tiles over each ROI, keeping
/// tiles whose H&E tissue fraction reaches the cutoff.
pub fn tile(a: &TileArgs) -> Result<CurationCounts> {
    let rois = parse_roi_sidecar(&read_text(a.roi)?)?;
    let scores = parse_scores(&read_text(a.scores)?)?;
    let mut by_case: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for (case, roi) in &rois {
        by_case.entry(case.as_str()).or_default().push(*roi);
    }
    let cases: Vec<(&str, Vec<_>)> = by_case.into_iter().collect();
    let per_case: Vec<Result<Vec<TileRecord>>> = cases
        .par_iter()
        .map(|(case, rois)| {
            let score = *scores
                .get(*case)
                .ok_or_else(|| CliError::new("dataset", format!("no HER2 score for case '{case}'")))?;
            let he = load_image(a.slides.join(format!("{case}_he.png")))?;
            let ihc = load_image(a.slides.join(format!("{case}_ihc.png")))?;
            if !he.same_shape(&ihc) {
                return Err(CliError::new("dataset", format!("case '{case}': H&E and IHC slides differ in size")));
            }
            let mask = tissue_mask(&he);
            let mut seen = BTreeSet::new();
            let mut records = Vec::new();
            for roi in rois {
                let grid = extract_tiles_with_mask(&he, &mask, *roi, a.tile_px, a.min_tissue)?;
                for t in grid.kept {
                    let id = format!("{case}_y{}_x{}", t.offset.y, t.offset.x);
                    if !seen.insert(id.clone()) {
                        continue;
                    }
                    let src = PathBuf::from("tiles").join(format!("{id}_he.png"));
                    let tgt = PathBuf::from("tiles").join(format!("{id}_ihc.png"));
                    save_image(&t.image, a.out.join(&src))?;
                    save_image(&ihc.crop(t.offset.y, t.offset.x, a.tile_px, a.tile_px)?, a.out.join(&tgt))?;
                    records.push(TileRecord::pending(id, *case, score, src, tgt));
                }
            }
            Ok(records)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_case {
        records.extend(r?);
    }
    let manifest = Manifest::new(a.name, a.mpp, records)?;
    let path = a.out.join("manifest.tsv");
    manifest.save(&path)?;
    let mut run = RunManifest::new("dataset tile", None);
    run.input("roi", a.roi)?;
    run.input("scores", a.scores)?;
    for (case, _) in &cases {
        run.input("slide", &a.slides.join(format!("{case}_he.png")))?;
        run.input("slide", &a.slides.join(format!("{case}_ihc.png")))?;
    }
    run.setting("tile_px", a.tile_px as i64);
    run.setting("min_tissue", a.min_tissue);
    run.write(&a.out.join("run.toml"))?;
    Ok(CurationCounts::of(&manifest))
}

/// Harmonizes every 1024 px pair of `manifest_path` into `out`. Crop tiles get ids
/// `{id}_q0..q3`; downscaled tiles keep their id and the resolution doubles.
pub fn harmonize(manifest_path: &Path, mode: HarmonizeMode, out: &Path) -> Result<CurationCounts> {
    let manifest = Manifest::load(manifest_path)?;
    let per_record: Vec<Result<Vec<TileRecord>>> = manifest
        .records()
        .par_iter()
        .map(|r| {
            let pair = (
                load_image(resolve(manifest_path, &r.path_source))?,
                load_image(resolve(manifest_path, &r.path_target))?,
            );
            let parts = harmonize_pair(&pair, mode)?;
            let single = parts.len() == 1;
            let mut records = Vec::new();
            for (k, (s, t)) in parts.iter().enumerate() {
                let id = if single { r.tile_id.clone() } else { format!("{}_q{k}", r.tile_id) };
                let src = PathBuf::from("tiles").join(format!("{id}_he.png"));
                let tgt = PathBuf::from("tiles").join(format!("{id}_ihc.png"));
                save_image(s, out.join(&src))?;
                save_image(t, out.join(&tgt))?;
                records.push(TileRecord { tile_id: id, path_source: src, path_target: tgt, ..r.clone() });
            }
            Ok(records)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_record {
        records.extend(r?);
    }
    let mpp = match mode {
        HarmonizeMode::Crop4 => manifest.microns_per_pixel(),
        HarmonizeMode::Downscale2 => 2.0 * manifest.microns_per_pixel(),
    };
    let result = Manifest::new(manifest.dataset_name(), mpp, records)?;
    result.save(out.join("manifest.tsv"))?;
    let mut run = RunManifest::new("dataset harmonize", None);
    run.input("manifest", manifest_path)?;
    run.setting("mode", mode.to_string());
    run.write(&out.join("run.toml"))?;
    Ok(CurationCounts::of(&result))
}

pub fn parse_fractions(text: &str) -> Result<SplitFractions> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::field("usage", "fractions", format!("'{text}': {e}")))?;
    let arr: [f64; 3] = parts.try_into().map_err(|_| {
        CliError::field("usage", "fractions", format!("'{text}': expected three comma-separated values"))
    })?;
    let f = SplitFractions(arr);
    f.validate()?;
    Ok(f)
}

pub enum PlanSource<'a> {
    Stratified { fractions: SplitFractions, seed: u64 },
    File(&'a Path),
}

pub fn split(manifest_path: &Path, plan: PlanSource, out: &Path, write_plan: Option<&Path>) -> Result<CurationCounts> {
    let manifest = Manifest::load(manifest_path)?;
    let (plan, run) = match plan {
        PlanSource::Stratified { fractions, seed } => {
            let mut run = RunManifest::new("dataset split", Some(seed));
            run.input("manifest", manifest_path)?;
            run.setting("fractions", fractions.0.to_vec());
            (stratified_split(&manifest, fractions, seed)?, run)
        }
        PlanSource::File(p) => {
            let mut run = RunManifest::new("dataset split", None);
            run.input("manifest", manifest_path)?;
            run.input("plan", p)?;
            (SplitPlan::from_text(&read_text(p)?)?, run)
        }
    };
    let result = apply_split(&manifest, &plan)?;
    result.save(out)?;
    if let Some(p) = write_plan {
        write_file(p, plan.to_text().as_bytes())?;
    }
    run.write(&sidecar(out))?;
    Ok(CurationCounts::of(&result))
}

pub fn curate(manifest_path: &Path, decisions: &Path, out: &Path) -> Result<CurationCounts> {
    let manifest = Manifest::load(manifest_path)?;
    let decisions_map = parse_decisions(&read_text(decisions)?)?;
    let (result, counts) = apply_curation(&manifest, &decisions_map)?;
    result.save(out)?;
    let mut run = RunManifest::new("dataset curate", None);
    run.input("manifest", manifest_path)?;
    run.input("decisions", decisions)?;
    run.write(&sidecar(out))?;
    Ok(counts)
}
