//! Run configuration: a TOML file with `[run]`, `[data]`, `[train]`, `[loss]`,
//! `[schedule]` and `[eval]` sections. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stainbench_core::diffusion::ConsistencyConfig;
use stainbench_core::losses::{CompositeWeights, ContrastiveConfig, PyramidConfig};
use stainbench_core::metrics::KidConfig;
use stainbench_core::train::{Architecture, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub framework: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Tile manifest; kept tiles of `train_split` are used for training.
    pub manifest: Option<PathBuf>,
    /// Synthetic data instead of a manifest: `two-pixel` or `paired`.
    pub toy: Option<String>,
    pub train_split: String,
    pub eval_split: String,
    pub toy_pairs: usize,
    pub toy_size: usize,
    pub toy_channels: usize,
    pub toy_jitter: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            toy: None,
            train_split: "train".into(),
            eval_split: "test".into(),
            toy_pairs: 64,
            toy_size: 16,
            toy_channels: 3,
            toy_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width: usize,
    pub levels: usize,
    pub time_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: 10,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            width: t.width,
            levels: t.levels,
            time_dim: t.time_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_pyramid: f64,
    pub pyramid_weights: Vec<f64>,
    pub pyramid_blur_width: usize,
    pub pyramid_sigma: f64,
    pub lambda_nce: f64,
    pub nce_temperature: f64,
    pub nce_patches: usize,
    pub nce_layers: Vec<usize>,
    pub lambda_adv: f64,
    pub lambda_mae: f64,
    pub lambda_ssim: f64,
    pub lambda_cls: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        LossSection {
            lambda_pyramid: t.lambda_pyramid,
            pyramid_weights: t.pyramid.weights.clone(),
            pyramid_blur_width: t.pyramid.blur_width,
            pyramid_sigma: t.pyramid.sigma,
            lambda_nce: t.lambda_nce,
            nce_temperature: t.contrastive.temperature,
            nce_patches: t.contrastive.patches_per_image,
            nce_layers: t.contrastive.feature_layers.clone(),
            lambda_adv: t.composite.lambda_adv,
            lambda_mae: t.composite.lambda_mae,
            lambda_ssim: t.composite.lambda_ssim,
            lambda_cls: t.composite.lambda_cls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub ddpm_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    pub bridge_steps: usize,
    pub bridge_scale: f64,
    pub cm_sigma_min: f64,
    pub cm_sigma_max: f64,
    pub cm_sigma_data: f64,
    pub cm_rho: f64,
    pub cm_levels: usize,
    pub cm_ema_decay: f64,
    pub cm_conditional: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let c = t.consistency;
        ScheduleSection {
            ddpm_steps: t.ddpm_steps,
            beta_min: t.beta_min,
            beta_max: t.beta_max,
            sample_steps: t.sample_steps,
            bridge_steps: t.bridge_steps,
            bridge_scale: t.bridge_scale,
            cm_sigma_min: c.sigma_min,
            cm_sigma_max: c.sigma_max,
            cm_sigma_data: c.sigma_data,
            cm_rho: c.rho,
            cm_levels: c.levels,
            cm_ema_decay: c.ema_decay,
            cm_conditional: t.cm_conditional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ms_ssim_levels: usize,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub extractor_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let k = KidConfig::default();
        EvalSection { ms_ssim_levels: 5, kid_subset_size: k.subset_size, kid_subsets: k.subsets, extractor_seed: 0 }
    }
}

impl EvalSection {
    pub fn kid(&self, seed: u64) -> KidConfig {
        KidConfig { subset_size: self.kid_subset_size, subsets: self.kid_subsets, seed }
    }
}

/// Training data source named by the `[data]` section.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    TwoPixel,
    Paired,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            CliError::new("config", msg.trim())
        })
    }

    /// Reads `path` and turns relative paths into paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError { message: format!("{}: {}", path.display(), e.message), ..e })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.run.output_dir.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.data.manifest.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    /// The configuration printed by `config --defaults`.
    pub fn defaults() -> Self {
        RunConfig {
            run: RunSection {
                framework: Some(Architecture::Bbdm.to_string()),
                seed: Some(0),
                output_dir: Some(PathBuf::from("runs/bbdm")),
            },
            data: DataSection { toy: Some("two-pixel".into()), ..DataSection::default() },
            train: TrainSection { levels: 1, ..TrainSection::default() },
            ..RunConfig::default()
        }
    }

    pub fn framework(&self) -> Result<Architecture> {
        let name = self.run.framework.as_deref().ok_or_else(|| CliError::missing("run.framework"))?;
        name.parse().map_err(|e| CliError::field("config", "run.framework", e))
    }

    pub fn seed(&self) -> Result<u64> {
        self.run.seed.ok_or_else(|| CliError::missing("run.seed"))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.run.output_dir.as_deref().ok_or_else(|| CliError::missing("run.output_dir"))
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match (&self.data.manifest, self.data.toy.as_deref()) {
            (Some(_), Some(_)) => Err(CliError::field("config", "data.toy", "set either data.manifest or data.toy")),
            (Some(m), None) => Ok(DataSource::Manifest(m.clone())),
            (None, Some("two-pixel")) => Ok(DataSource::TwoPixel),
            (None, Some("paired")) => Ok(DataSource::Paired),
            (None, Some(other)) => {
                Err(CliError::field("config", "data.toy", format!("unknown toy set '{other}' (two-pixel|paired)")))
            }
            (None, None) => Err(CliError::missing("data.manifest")),
        }
    }

    /// Checks every field a training run needs.
    pub fn validate_for_training(&self) -> Result<()> {
        self.framework()?;
        self.seed()?;
        self.output_dir()?;
        self.data_source()?;
        if self.train.epochs == 0 {
            return Err(CliError::field("config", "train.epochs", "must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::field("config", "train.batch_size", "must be at least 1"));
        }
        if self.schedule.cm_levels < 2 {
            return Err(CliError::field("config", "schedule.cm_levels", "must be at least 2"));
        }
        if self.loss.pyramid_weights.is_empty() {
            return Err(CliError::field("config", "loss.pyramid_weights", "must not be empty"));
        }
        Ok(())
    }

    /// Core training settings for `pairs` training pairs: one epoch is
    /// `ceil(pairs / batch_size)` optimizer steps.
    pub fn train_config(&self, pairs: usize) -> Result<TrainConfig> {
        self.validate_for_training()?;
        let (t, l, s) = (&self.train, &self.loss, &self.schedule);
        let seed = self.seed()?;
        Ok(TrainConfig {
            framework: self.framework()?,
            steps: t.epochs * pairs.div_ceil(t.batch_size),
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed,
            width: t.width,
            levels: t.levels,
            time_dim: t.time_dim,
            lambda_pyramid: l.lambda_pyramid,
            pyramid: PyramidConfig {
                num_scales: l.pyramid_weights.len(),
                weights: l.pyramid_weights.clone(),
                blur_width: l.pyramid_blur_width,
                sigma: l.pyramid_sigma,
            },
            lambda_nce: l.lambda_nce,
            contrastive: ContrastiveConfig {
                temperature: l.nce_temperature,
                patches_per_image: l.nce_patches,
                feature_layers: l.nce_layers.clone(),
                sample_seed: seed,
            },
            composite: CompositeWeights {
                lambda_adv: l.lambda_adv,
                lambda_mae: l.lambda_mae,
                lambda_ssim: l.lambda_ssim,
                lambda_cls: l.lambda_cls,
            },
            ddpm_steps: s.ddpm_steps,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            sample_steps: s.sample_steps,
            bridge_steps: s.bridge_steps,
            bridge_scale: s.bridge_scale,
            consistency: ConsistencyConfig {
                sigma_min: s.cm_sigma_min,
                sigma_max: s.cm_sigma_max,
                sigma_data: s.cm_sigma_data,
                rho: s.cm_rho,
                levels: s.cm_levels,
                ema_decay: s.cm_ema_decay,
            },
            cm_conditional: s.cm_conditional,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
