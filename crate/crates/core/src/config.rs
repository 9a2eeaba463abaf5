//! Flat TOML experiment configuration.
//!
//! A file names an `experiment` (`mnist` or `segmentation`); every other key
//! overrides the preset for that experiment at the chosen scale. Unknown
//! keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{NoiseModel, PhantomSpec};
use crate::recon::{Init, Scheme, UnrollConfig};
use crate::tomography::{FbpFilter, GaussianModel, Geometry, PoissonModel, MNIST_ATTENUATION};
use crate::train::{check_c, OptimizerKind, ReconLossNorm, Regime, RegimeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => invalid(format!("unknown scale {other:?} (desk | full)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Mnist,
    Segmentation,
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Experiment::Mnist),
            "segmentation" => Ok(Experiment::Segmentation),
            other => invalid(format!("unknown experiment {other:?} (mnist | segmentation)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// `mnist` or `segmentation`.
    pub experiment: String,
    /// `sequential`, `end_to_end` or `joint`.
    pub regime: String,
    pub c: f64,
    /// C values of a sweep.
    pub c_list: Vec<f64>,
    pub seed: u64,
    /// Steps of the trained regime (task stage for `sequential`).
    pub steps: usize,
    pub batch_size: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub learning_rate_min: f64,
    /// `f32` or `f64`.
    pub precision: String,

    pub pretrain: bool,
    pub pretrain_recon_steps: usize,
    pub pretrain_recon_batch_size: usize,
    /// Held-out accuracy (or pixel accuracy) at which task pre-training stops.
    pub pretrain_task_target: f64,
    pub pretrain_task_max_steps: usize,
    pub pretrain_task_check_every: usize,
    pub pretrain_eval_size: usize,
    /// Reuse pre-trained parameters from this checkpoint when it exists.
    pub pretrained_checkpoint: String,

    pub num_angles: usize,
    pub num_lines: usize,
    /// `poisson`, `gaussian` or `none`.
    pub noise: String,
    pub photons_per_line: f64,
    pub attenuation: f64,
    pub noise_level: f64,

    /// `lgd`, `lpd` or `fbp`.
    pub recon: String,
    pub recon_iterations: usize,
    pub recon_channels: Vec<usize>,
    pub recon_memory: usize,
    /// `zero` or `fbp`.
    pub recon_init: String,
    /// `hann` or `ram-lak`.
    pub fbp_filter: String,
    /// `sum` (per image, averaged over the batch) or `mean` (per pixel).
    pub recon_loss: String,

    pub classifier_channels: [usize; 3],
    pub unet_base_channels: usize,

    pub mnist_dir: String,
    pub mnist_validation: usize,

    pub phantom_seed: u64,
    pub phantom_train: usize,
    pub phantom_validation: usize,
    pub phantom_test: usize,
    pub phantom_ellipses: usize,
    pub phantom_contrast: f64,
    pub augment: bool,

    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Test images used for evaluation; 0 means the whole split.
    pub eval_size: usize,
    pub eval_batch_size: usize,
}

impl Config {
    pub fn preset(experiment: Experiment, scale: Scale) -> Config {
        let full = scale == Scale::Full;
        match experiment {
            Experiment::Mnist => Config {
                experiment: "mnist".into(),
                regime: "joint".into(),
                c: 0.5,
                c_list: vec![0.01, 0.1, 0.5, 0.9, 0.99, 0.999],
                seed: 0,
                // 512 000 triplets at full scale
                steps: if full { 16_000 } else { 10_000 },
                batch_size: 32,
                optimizer: "adam".into(),
                learning_rate: 1e-3,
                learning_rate_min: 1e-5,
                precision: "f32".into(),
                pretrain: true,
                pretrain_recon_steps: 8_000,
                pretrain_recon_batch_size: 64,
                pretrain_task_target: 0.975,
                pretrain_task_max_steps: if full { 40_000 } else { 20_000 },
                pretrain_task_check_every: 500,
                pretrain_eval_size: 2_000,
                pretrained_checkpoint: String::new(),
                num_angles: 5,
                num_lines: 25,
                noise: "poisson".into(),
                photons_per_line: 60.0,
                attenuation: MNIST_ATTENUATION,
                noise_level: 0.0,
                recon: "lgd".into(),
                recon_iterations: 10,
                recon_channels: vec![32, 32],
                recon_memory: 5,
                recon_init: "zero".into(),
                fbp_filter: "hann".into(),
                recon_loss: "sum".into(),
                classifier_channels: [32, 64, 128],
                unet_base_channels: 16,
                mnist_dir: "data/mnist".into(),
                mnist_validation: 10_000,
                phantom_seed: 0,
                phantom_train: 100,
                phantom_validation: 20,
                phantom_test: 50,
                phantom_ellipses: 3,
                phantom_contrast: 0.05,
                augment: false,
                log_every: 10,
                checkpoint_every: 1_000,
                eval_size: 0,
                eval_batch_size: 100,
            },
            Experiment::Segmentation => Config {
                experiment: "segmentation".into(),
                regime: "joint".into(),
                c: 0.5,
                c_list: vec![0.01, 0.1, 0.5, 0.9, 0.99, 0.999],
                seed: 0,
                steps: if full { 20_000 } else { 5_000 },
                batch_size: 1,
                optimizer: "adam".into(),
                learning_rate: 1e-3,
                learning_rate_min: 1e-5,
                precision: "f32".into(),
                pretrain: true,
                pretrain_recon_steps: if full { 5_000 } else { 2_000 },
                pretrain_recon_batch_size: 1,
                pretrain_task_target: 0.95,
                pretrain_task_max_steps: if full { 5_000 } else { 2_000 },
                pretrain_task_check_every: 250,
                pretrain_eval_size: 20,
                pretrained_checkpoint: String::new(),
                num_angles: 30,
                num_lines: 183,
                noise: "gaussian".into(),
                photons_per_line: 60.0,
                attenuation: MNIST_ATTENUATION,
                noise_level: 0.001,
                recon: "lpd".into(),
                recon_iterations: 10,
                recon_channels: vec![32, 32],
                recon_memory: 5,
                recon_init: "fbp".into(),
                fbp_filter: "hann".into(),
                recon_loss: "mean".into(),
                classifier_channels: [32, 64, 128],
                unet_base_channels: 16,
                mnist_dir: "data/mnist".into(),
                mnist_validation: 10_000,
                phantom_seed: 0,
                phantom_train: 100,
                phantom_validation: 20,
                phantom_test: 50,
                phantom_ellipses: 3,
                phantom_contrast: 0.05,
                augment: true,
                log_every: 10,
                checkpoint_every: 1_000,
                eval_size: 0,
                eval_batch_size: 10,
            },
        }
    }

    /// Preset for the file's `experiment` (default `mnist`) at `scale`,
    /// overridden by every key in `text`.
    pub fn from_toml(text: &str, scale: Scale) -> Result<Config> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let experiment = match table.get("experiment") {
            None => Experiment::Mnist,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return invalid(format!("experiment must be a string, got {v}")),
        };
        let mut base = toml::Table::try_from(Config::preset(experiment, scale)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in table {
            base.insert(k, v);
        }
        let cfg: Config = base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Scale) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Config::from_toml(&text, scale).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.experiment.parse()
    }

    pub fn scheme(&self) -> Result<Option<Scheme>> {
        match self.recon.as_str() {
            "fbp" => Ok(None),
            s => s.parse().map(Some).map_err(|e: crate::tensor::TensorError| ConfigError::Invalid(e.to_string())),
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => invalid(format!("unknown precision {other:?} (f32 | f64)")),
        }
    }

    pub fn filter(&self) -> Result<FbpFilter> {
        self.fbp_filter.parse().map_err(|e: crate::tomography::TomoError| ConfigError::Invalid(e.to_string()))
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        Ok(match self.experiment()? {
            Experiment::Mnist => (28, 28),
            Experiment::Segmentation => (128, 128),
        })
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::parallel(self.num_angles, self.num_lines, self.image_size()?).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let wrap = |e: crate::tomography::TomoError| ConfigError::Invalid(e.to_string());
        match self.noise.as_str() {
            "none" => Ok(NoiseModel::Noiseless),
            "poisson" => Ok(NoiseModel::Poisson(PoissonModel::new(self.photons_per_line, self.attenuation).map_err(wrap)?)),
            "gaussian" => Ok(NoiseModel::Gaussian(GaussianModel::new(self.noise_level).map_err(wrap)?)),
            other => invalid(format!("unknown noise model {other:?} (poisson | gaussian | none)")),
        }
    }

    pub fn unroll(&self) -> Result<UnrollConfig> {
        let init: Init = self.recon_init.parse().map_err(|e: crate::tensor::TensorError| ConfigError::Invalid(e.to_string()))?;
        let cfg = UnrollConfig {
            num_iterations: self.recon_iterations,
            channels_per_block: self.recon_channels.clone(),
            memory_channels: self.recon_memory,
            init,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn recon_loss(&self) -> Result<ReconLossNorm> {
        self.recon_loss.parse().map_err(|e: crate::train::TrainError| ConfigError::Invalid(e.to_string()))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.phantom_seed,
            num_ellipses: self.phantom_ellipses,
            grey_contrast: self.phantom_contrast,
            ..PhantomSpec::default()
        }
    }

    pub fn regime_config(&self) -> Result<RegimeConfig> {
        let regime: Regime = self.regime.parse().map_err(|e: crate::train::TrainError| ConfigError::Invalid(e.to_string()))?;
        let optimizer: OptimizerKind = self.optimizer.parse().map_err(|e: crate::train::TrainError| ConfigError::Invalid(e.to_string()))?;
        let cfg = RegimeConfig {
            regime,
            c: self.c,
            optimizer,
            lr: self.learning_rate,
            lr_min: self.learning_rate_min,
            batch_size: self.batch_size,
            steps: self.steps,
            // pre-training already trains the reconstruction to d_X
            recon_steps: if self.pretrain { 0 } else { self.pretrain_recon_steps },
            seed: self.seed,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let exp = self.experiment()?;
        self.regime_config()?;
        self.scheme()?;
        self.precision()?;
        self.filter()?;
        self.geometry()?;
        self.noise_model()?;
        self.recon_loss()?;
        if self.scheme()?.is_some() {
            self.unroll()?;
        }
        if self.steps == 0 {
            return invalid("steps must be at least 1");
        }
        for &c in &self.c_list {
            check_c(c).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.eval_batch_size == 0 || self.pretrain_recon_batch_size == 0 {
            return invalid("batch sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.pretrain_task_target) {
            return invalid("pretrain_task_target must lie in [0, 1]");
        }
        if self.augment && exp == Experiment::Mnist {
            return invalid("augmentation applies to segmentation phantoms only");
        }
        if exp == Experiment::Segmentation {
            self.phantom_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if self.phantom_train == 0 || self.phantom_test == 0 {
                return invalid("phantom_train and phantom_test must be positive");
            }
        }
        Ok(())
    }
}
