//! `stainbench`: dataset preparation, training, evaluation, statistics and the curation
//! service. Failures exit with status 1 and print one `error kind=... message=...` line.

mod analyze;
mod config;
mod dataset;
mod error;
mod provenance;
mod run;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use stainbench_core::dataset::{CurationCounts, HarmonizeMode, DEFAULT_MIN_TISSUE, FULL_TILE_PX};
use stainbench_core::metrics::MetricReport;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::provenance::{read_text, sidecar, write_file, RunManifest};

#[derive(Parser)]
#[command(name = "stainbench", version, about = "Virtual-staining benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the run configuration format.
    Config {
        /// Print every setting with its default value.
        #[arg(long)]
        defaults: bool,
    },
    /// Build and edit tile manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one framework from a run configuration.
    Train(TrainArgs),
    /// Compute per-tile metrics and set-level FID/KID.
    Eval(EvalArgs),
    /// Statistical analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Summarize metric reports as per-metric distributions.
    Report(ReportArgs),
    /// Serve the tile curation API.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Cut registered slide pairs into tiles over ROI rectangles.
    Tile {
        /// Directory with `{case}_he.png` and `{case}_ihc.png` per case.
        #[arg(long)]
        slides: PathBuf,
        /// ROI sidecar: `case_id x y width height` per line.
        #[arg(long)]
        roi: PathBuf,
        /// HER2 scores: `case_id score` per line (0, 1+, 2+, 3+).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = FULL_TILE_PX)]
        tile_px: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_TISSUE)]
        min_tissue: f64,
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Microns per pixel of the slides.
        #[arg(long)]
        mpp: f64,
    },
    /// Bring 1024 px pairs to 512 px by quadrant crops or 2x box downscaling.
    Harmonize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: HarmonizeMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign kept tiles to train/val/test by case.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Train, val and test fractions of kept tiles.
        #[arg(long, required_unless_present = "plan")]
        fractions: Option<String>,
        #[arg(long, required_unless_present = "plan")]
        seed: Option<u64>,
        /// Apply an existing `case_id<TAB>split` plan instead.
        #[arg(long, conflicts_with_all = ["fractions", "seed"])]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the plan used.
        #[arg(long)]
        write_plan: Option<PathBuf>,
    },
    /// Apply `tile_id<TAB>kept|dropped[<TAB>tag]` decisions.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        decisions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.framework`.
    #[arg(long)]
    framework: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Translate the held-out pairs of a training run and evaluate them.
    #[arg(long, conflicts_with_all = ["generated", "target", "manifest"])]
    run: Option<PathBuf>,
    /// Directory of generated `{tile_id}.png` images.
    #[arg(long, requires = "target_set")]
    generated: Option<PathBuf>,
    /// Directory of target images with matching file names.
    #[arg(long, group = "target_set")]
    target: Option<PathBuf>,
    /// Manifest naming the target images of kept tiles.
    #[arg(long, group = "target_set")]
    manifest: Option<PathBuf>,
    /// Split of `--manifest` to evaluate (`all` for every kept tile).
    #[arg(long, default_value = "test")]
    split: String,
    /// Run configuration supplying `[eval]` settings and the seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for KID subsets; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Generated and target feature files (`[n, d]` checkpoint format) for FID/KID.
    #[arg(long, num_args = 2, value_names = ["GENERATED", "TARGET"])]
    features: Option<Vec<PathBuf>>,
    /// Output directory for `report.tsv`, `run.toml` and, with `--run`, `generated/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Fit the crossed-intercept mixed model per metric and print Wald tests.
    Lmm {
        /// `model_id<TAB>framework<TAB>dataset<TAB>report` lines after a header.
        #[arg(long, required_unless_present = "observations")]
        registry: Option<PathBuf>,
        /// A ready observation table instead of a registry.
        #[arg(long, conflicts_with = "registry")]
        observations: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "ssim,ms_ssim,psnr,lpips")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Metric reports, optionally labelled as `label=path`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value = "reviewer")]
    reviewer: String,
    /// Bearer token required on every request.
    #[arg(long, env = "STAINBENCH_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

fn print_counts(c: &CurationCounts) {
    println!("{c}");
}

fn dataset(cmd: DatasetCommand) -> Result<()> {
    let counts = match cmd {
        DatasetCommand::Tile { slides, roi, scores, out, tile_px, min_tissue, name, mpp } => {
            dataset::tile(&dataset::TileArgs {
                slides: &slides,
                roi: &roi,
                scores: &scores,
                out: &out,
                tile_px,
                min_tissue,
                name: &name,
                mpp,
            })?
        }
        DatasetCommand::Harmonize { manifest, mode, out } => dataset::harmonize(&manifest, mode, &out)?,
        DatasetCommand::Split { manifest, fractions, seed, plan, out, write_plan } => {
            let source = match (plan.as_deref(), fractions, seed) {
                (Some(p), _, _) => dataset::PlanSource::File(p),
                (None, Some(f), Some(seed)) => {
                    dataset::PlanSource::Stratified { fractions: dataset::parse_fractions(&f)?, seed }
                }
                (None, _, None) => return Err(CliError::field("usage", "seed", "missing --seed")),
                (None, None, _) => return Err(CliError::field("usage", "fractions", "missing --fractions")),
            };
            dataset::split(&manifest, source, &out, write_plan.as_deref())?
        }
        DatasetCommand::Curate { manifest, decisions, out } => dataset::curate(&manifest, &decisions, &out)?,
    };
    print_counts(&counts);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(f) = a.framework {
        cfg.run.framework = Some(f);
    }
    if let Some(s) = a.seed {
        cfg.run.seed = Some(s);
    }
    if let Some(o) = a.output_dir {
        cfg.run.output_dir = Some(o);
    }
    let s = run::train_command(&cfg, &a.config)?;
    println!("steps\t{}\ninitial_loss\t{:.6e}\nfinal_loss\t{:.6e}", s.steps, s.initial_loss, s.final_loss);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut run_manifest;
    let (cfg, pairs) = if let Some(run_dir) = &a.run {
        let (cfg, pairs) = run::translate_run(run_dir, &a.out)?;
        run_manifest = RunManifest::new("eval", Some(a.seed.unwrap_or(cfg.seed()?)));
        run_manifest.input("run_config", &run_dir.join(run::RUN_CONFIG))?;
        (cfg, pairs)
    } else {
        let cfg = match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let generated =
            a.generated.as_deref().ok_or_else(|| CliError::field("usage", "generated", "give --run or --generated"))?;
        let targets = match (&a.target, &a.manifest) {
            (Some(d), _) => run::EvalTargets::Dir(d),
            (None, Some(m)) => run::EvalTargets::Manifest { path: m, split: &a.split },
            (None, None) => return Err(CliError::field("usage", "target", "give --target or --manifest")),
        };
        let pairs = run::image_pairs(generated, &targets)?;
        let seed = a.seed.map_or_else(|| cfg.seed(), Ok)?;
        run_manifest = RunManifest::new("eval", Some(seed));
        if let Some(p) = &a.config {
            run_manifest.input("config", p)?;
        }
        if let Some(m) = &a.manifest {
            run_manifest.input("manifest", m)?;
        }
        (cfg, pairs)
    };
    let seed = a.seed.map_or_else(|| cfg.seed(), Ok)?;
    let features = match &a.features {
        Some(p) => {
            run_manifest.input("features", &p[0])?;
            run_manifest.input("features", &p[1])?;
            Some((run::read_features(&p[0])?, run::read_features(&p[1])?))
        }
        None => None,
    };
    let report = run::evaluate(&pairs, &cfg.eval, seed, features)?;
    run::write_report(&report, &a.out, run_manifest, &cfg.eval)?;
    print!("{}", report.to_tsv().lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(())
}

fn analyze(cmd: AnalyzeCommand) -> Result<()> {
    let AnalyzeCommand::Lmm { registry, observations, metrics, alpha, out } = cmd;
    let mut run = RunManifest::new("analyze lmm", None);
    let input = match (&registry, &observations) {
        (Some(r), _) => analyze::LmmInput::Registry { path: r, metrics: &metrics },
        (None, Some(o)) => analyze::LmmInput::Observations(o),
        (None, None) => return Err(CliError::field("usage", "registry", "give --registry or --observations")),
    };
    let table = analyze::analyze_lmm(input, alpha, &mut run)?;
    write_file(&out, table.as_bytes())?;
    run.write(&sidecar(&out))?;
    print!("{table}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut run = RunManifest::new("report", None);
    let mut reports = Vec::new();
    for spec in &a.inputs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (spec.clone(), PathBuf::from(spec)),
        };
        run.input("report", &path)?;
        let r = MetricReport::from_tsv(&read_text(&path)?)
            .map_err(|e| CliError::new("report", format!("{}: {e}", path.display())))?;
        reports.push((label, r));
    }
    let text = analyze::summarize(&reports)?;
    write_file(&a.out, text.as_bytes())?;
    run.write(&sidecar(&a.out))?;
    print!("{text}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let session = stainbench_curation::Session::open(&a.manifest, a.reviewer, a.token)
        .map_err(|e| CliError::new("curation", e))?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e))?;
    rt.block_on(async move {
        let (tx, rx) = tokio::sync::oneshot::channel();
        let server = tokio::spawn(stainbench_curation::serve(Arc::new(session), addr, Some(tx)));
        if let Ok(bound) = rx.await {
            println!("listening\thttp://{bound}");
        }
        match server.await {
            Ok(r) => r.map_err(|e| CliError::new("io", e)),
            Err(e) => Err(CliError::new("io", e)),
        }
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { defaults } => {
            if !defaults {
                return Err(CliError::field("usage", "defaults", "only `config --defaults` is supported"));
            }
            println!("# required: run.framework, run.seed, run.output_dir and one of data.manifest or data.toy");
            print!("{}", RunConfig::defaults().to_toml());
            Ok(())
        }
        Command::Dataset(c) => dataset(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(c) => analyze(c),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let head = msg.split("\n\nUsage").next().unwrap_or_default();
            let text = head.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("{}", CliError::new("usage", text.trim_start_matches("error: ")));
            return ExitCode::FAILURE;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
