//! Experiment runs driven by a [`Config`]: data, pre-training, one regime or
//! a C sweep, evaluation and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::config::{Config, ConfigError, Experiment, Precision};
use crate::data::{evaluation_batches, load_mnist, mix, phantom_dataset, DataError, Dataset, NoiseModel, Split, Targets, TripletBatch, TripletStream};
use crate::params::{CheckpointError, ParamSet};
use crate::real::Real;
use crate::recon::{Acquisition, UnrolledNet};
use crate::report::{emit_plots, emit_table, image_grid_png, probabilities_csv, MetricsRow, ReportError};
use crate::task::{Classifier, UNet};
use crate::tomography::Geometry;
use crate::train::{
    evaluate, pretrain_task, save_checkpoint, sweep_c, train_regime, train_stage, EvalMetrics, JointModel, Objective, Outputs, ReconModel, Regime,
    RegimeConfig, StageConfig, TaskModel, TrainError,
};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// 1 for configuration and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Train(TrainError::Diverged { .. }) | ExperimentError::Train(TrainError::Tensor(TensorError::NonFinite(_))) => 2,
            ExperimentError::Tensor(TensorError::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Stream identifiers mixed into the run seed.
const PRETRAIN_RECON_STREAM: u64 = 10;
const PRETRAIN_TASK_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;

/// Everything a run needs, built from a config.
pub struct Setup<T: Real> {
    pub config: Config,
    pub experiment: Experiment,
    pub geometry: Geometry,
    pub noise: NoiseModel,
    pub dataset: Dataset<T>,
    pub model: JointModel<T>,
}

impl<T: Real> Setup<T> {
    /// Loads MNIST from `mnist_dir` or generates the phantom dataset.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let dataset = match config.experiment()? {
            Experiment::Mnist => load_mnist(&config.mnist_dir, config.mnist_validation)?,
            Experiment::Segmentation => phantom_dataset(&config.phantom_spec(), config.phantom_train, config.phantom_validation, config.phantom_test)?,
        };
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: &Config, dataset: Dataset<T>) -> Result<Self> {
        config.validate()?;
        let experiment = config.experiment()?;
        let geometry = config.geometry()?;
        if dataset.image_size() != geometry.image_size() {
            return Err(ConfigError::Invalid(format!("dataset images {:?} do not match the geometry", dataset.image_size())).into());
        }
        let acq = Arc::new(Acquisition::new(&geometry, config.filter()?));
        let recon = match config.scheme()? {
            None => ReconModel::Fbp(acq),
            Some(scheme) => ReconModel::Unrolled(UnrolledNet::new(scheme, config.unroll()?, acq)?),
        };
        let task = match experiment {
            Experiment::Mnist => TaskModel::Classifier(Classifier { image_size: geometry.image_size(), channels: config.classifier_channels }),
            Experiment::Segmentation => TaskModel::Segmenter(UNet { image_size: geometry.image_size(), base_channels: config.unet_base_channels }),
        };
        match (&task, dataset.targets()) {
            (TaskModel::Classifier(_), Targets::Labels(_)) | (TaskModel::Segmenter(_), Targets::Masks(_)) => {}
            _ => return Err(ConfigError::Invalid("dataset targets do not match the experiment".into()).into()),
        }
        Ok(Setup {
            config: config.clone(),
            experiment,
            geometry,
            noise: config.noise_model()?,
            dataset,
            model: JointModel { recon, task, recon_loss: config.recon_loss()? },
        })
    }

    pub fn stream(&self, batch_size: usize, stream_id: u64, seed: u64) -> Result<TripletStream<'_, T>> {
        Ok(TripletStream::new(&self.dataset, Split::Train, &self.geometry, self.noise, self.config.augment, batch_size, mix(seed, stream_id))?)
    }

    /// Test triplets with one fixed noise draw per image.
    pub fn test_batches(&self) -> Result<Vec<TripletBatch<T>>> {
        let limit = (self.config.eval_size > 0).then_some(self.config.eval_size);
        Ok(evaluation_batches(&self.dataset, Split::Test, &self.geometry, self.noise, self.config.eval_batch_size, limit, mix(self.config.seed, EVAL_STREAM))?)
    }

    fn held_out(&self) -> Result<Vec<TripletBatch<T>>> {
        let split = if self.dataset.indices(Split::Validation).is_empty() { Split::Train } else { Split::Validation };
        let limit = Some(self.config.pretrain_eval_size.max(1));
        Ok(evaluation_batches(&self.dataset, split, &self.geometry, self.noise, self.config.eval_batch_size, limit, mix(self.config.seed, EVAL_STREAM))?)
    }

    fn initial_params(&self) -> Result<ParamSet<T>> {
        let (theta, vartheta) = self.model.init_params(self.config.seed)?;
        Ok(theta.merged(&vartheta)?)
    }

    /// Pre-trained `(theta, vartheta)`: the reconstruction trained on `d_X`
    /// and the task trained on true images. Reuses `pretrained_checkpoint`
    /// when that file exists and writes it otherwise.
    pub fn pretrained(&self, out: Option<&Path>) -> Result<ParamSet<T>> {
        let init = self.initial_params()?;
        let cfg = &self.config;
        if !cfg.pretrain {
            return Ok(init);
        }
        let reuse = (!cfg.pretrained_checkpoint.is_empty()).then(|| PathBuf::from(&cfg.pretrained_checkpoint));
        if let Some(p) = reuse.as_ref().filter(|p| p.exists()) {
            let loaded = ParamSet::<T>::load(p)?;
            let same = loaded.len() == init.len() && init.iter().all(|(n, t)| loaded.get(n).is_some_and(|l| l.shape() == t.shape()));
            if !same {
                return Err(ConfigError::Invalid(format!("{} does not match the configured architecture", p.display())).into());
            }
            return Ok(loaded);
        }
        let outputs = |sub: &str| match out {
            Some(d) => Outputs::in_dir(d.join(sub), cfg.log_every, cfg.checkpoint_every),
            None => Outputs::none(),
        };
        let mut params = init;
        let rc = cfg.regime_config()?;
        let recon_stage = StageConfig {
            objective: Objective::Reconstruction,
            steps: cfg.pretrain_recon_steps,
            optimizer: rc.optimizer,
            lr: rc.lr,
            lr_min: rc.lr_min,
        };
        if matches!(self.model.recon, ReconModel::Unrolled(_)) {
            let mut s = self.stream(cfg.pretrain_recon_batch_size, PRETRAIN_RECON_STREAM, cfg.seed)?;
            train_stage(&self.model, &mut params, &mut s, &recon_stage, &outputs("pretrain"))?;
        }
        let mut s = self.stream(cfg.batch_size, PRETRAIN_TASK_STREAM, cfg.seed)?;
        let held_out = self.held_out()?;
        pretrain_task(
            &self.model,
            &mut params,
            &mut s,
            &held_out,
            &rc,
            cfg.pretrain_task_target,
            cfg.pretrain_task_max_steps,
            cfg.pretrain_task_check_every,
            &outputs("pretrain"),
        )?;
        if let Some(p) = &reuse {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io(dir))?;
            }
            params.save(p)?;
        }
        Ok(params)
    }

    pub fn row(&self, regime: &str, c: f64, steps: usize, metrics: &EvalMetrics) -> MetricsRow {
        MetricsRow {
            regime: regime.into(),
            c,
            accuracy: metrics.accuracy,
            l2_loss: metrics.l2_loss,
            cross_entropy: metrics.cross_entropy,
            steps,
            seed: self.config.seed,
            status: "ok".into(),
        }
    }

    /// Truth, reconstruction and task-output files for the first test images.
    pub fn write_samples(&self, params: &ParamSet<T>, batches: &[TripletBatch<T>], dir: &Path) -> Result<()> {
        let Some(batch) = batches.first() else { return Ok(()) };
        let n = batch.len().min(16);
        let idx: Vec<usize> = (0..n).collect();
        let truth = batch.images.select_outer(&idx)?;
        let x_hat = self.model.reconstruct(params, &batch.line_integrals.select_outer(&idx)?)?;
        image_grid_png(&truth, 8, &dir.join("truth.png"))?;
        image_grid_png(&x_hat, 8, &dir.join("reconstructions.png"))?;
        let tape = crate::tape::Tape::new();
        let bound = tape.bind(params);
        let out = self.model.task.forward(&bound, tape.constant(x_hat))?.value();
        match &batch.targets {
            Targets::Labels(l) => {
                let path = dir.join("probabilities.csv");
                fs::write(&path, probabilities_csv(&out, &l[..n])?).map_err(io(&path))?;
            }
            Targets::Masks(m) => {
                image_grid_png(&out, 8, &dir.join("probability_maps.png"))?;
                image_grid_png(&m.select_outer(&idx)?, 8, &dir.join("masks.png"))?;
            }
        }
        Ok(())
    }
}

fn regime_steps(cfg: &RegimeConfig) -> usize {
    match cfg.regime {
        Regime::Sequential => cfg.recon_steps + cfg.steps,
        Regime::EndToEnd | Regime::Joint => cfg.steps,
    }
}

fn regime_c(cfg: &RegimeConfig) -> f64 {
    match cfg.regime {
        Regime::Sequential => 0.0,
        Regime::EndToEnd => 1.0,
        Regime::Joint => cfg.c,
    }
}

fn write_meta(dir: &Path, seconds: f64, extra: &str) -> Result<()> {
    let path = dir.join("meta.toml");
    fs::write(&path, format!("wall_time_seconds = {seconds:.3}\n{extra}")).map_err(io(&path))
}

fn prepare(cfg: &Config, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let path = out_dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io(&path))
}

/// Pre-trains, trains the configured regime and writes `metrics.csv` with
/// rows for the task on true images, the pre-trained pair and the regime.
pub fn run_train_with<T: Real>(setup: &Setup<T>, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    let cfg = &setup.config;
    prepare(cfg, out_dir)?;
    let start = Instant::now();
    let test = setup.test_batches()?;
    let mut params = setup.pretrained(Some(out_dir))?;
    let mut rows = Vec::new();
    if cfg.pretrain {
        rows.push(setup.row("true_images", f64::NAN, 0, &evaluate(&setup.model, &params, &test, true)?));
        rows.push(setup.row("pretrain", f64::NAN, 0, &evaluate(&setup.model, &params, &test, false)?));
    }
    let rc = cfg.regime_config()?;
    let mut stream = setup.stream(cfg.batch_size, TRAIN_STREAM, cfg.seed)?;
    let out = Outputs::in_dir(out_dir.join(rc.regime.to_string()), cfg.log_every, cfg.checkpoint_every);
    train_regime(&setup.model, &mut params, &mut stream, &rc, &out)?;
    rows.push(setup.row(&rc.regime.to_string(), regime_c(&rc), regime_steps(&rc), &evaluate(&setup.model, &params, &test, false)?));
    emit_table(&rows, &out_dir.join("metrics.csv"))?;
    save_checkpoint(&params, &out_dir.join("params.trkp"), &cfg.to_toml())?;
    setup.write_samples(&params, &test, out_dir)?;
    write_meta(out_dir, start.elapsed().as_secs_f64(), "")?;
    Ok(rows)
}

/// Joint training for every `c_list` value from the same pre-trained pair.
/// Writes `metrics.csv` and the loss-versus-C plots.
pub fn run_sweep_with<T: Real>(setup: &Setup<T>, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    let cfg = &setup.config;
    prepare(cfg, out_dir)?;
    let start = Instant::now();
    let test = setup.test_batches()?;
    let params = setup.pretrained(Some(out_dir))?;
    let rc = RegimeConfig { regime: Regime::Joint, ..cfg.regime_config()? };
    let sweep = sweep_c(
        &setup.model,
        &params,
        |seed| setup.stream(cfg.batch_size, TRAIN_STREAM, seed).map_err(|e| match e {
            ExperimentError::Data(d) => TrainError::Data(d),
            other => TrainError::Config(other.to_string()),
        }),
        &test,
        &rc,
        &cfg.c_list,
        Some(&out_dir.join("sweep")),
    )?;
    let rows: Vec<MetricsRow> = sweep
        .iter()
        .map(|r| match (&r.metrics, &r.error) {
            (Some(m), _) => setup.row("joint", r.c, rc.steps, m),
            (None, e) => MetricsRow::failed("joint", r.c, rc.steps, cfg.seed, e.as_deref().unwrap_or("unknown error")),
        })
        .collect();
    emit_table(&rows, &out_dir.join("metrics.csv"))?;
    if rows.iter().any(|r| r.is_ok()) {
        emit_plots(&rows, out_dir, setup.experiment == Experiment::Segmentation)?;
    }
    write_meta(out_dir, start.elapsed().as_secs_f64(), "")?;
    Ok(rows)
}

/// Evaluates a saved checkpoint on one split.
pub fn run_eval_with<T: Real>(setup: &Setup<T>, checkpoint: &Path, split: Split, out_dir: &Path) -> Result<MetricsRow> {
    let cfg = &setup.config;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let params = ParamSet::<T>::load(checkpoint)?;
    let limit = (cfg.eval_size > 0).then_some(cfg.eval_size);
    let batches = evaluation_batches(&setup.dataset, split, &setup.geometry, setup.noise, cfg.eval_batch_size, limit, mix(cfg.seed, EVAL_STREAM))?;
    let row = setup.row("eval", f64::NAN, 0, &evaluate(&setup.model, &params, &batches, false)?);
    emit_table(std::slice::from_ref(&row), &out_dir.join("eval.csv"))?;
    setup.write_samples(&params, &batches, out_dir)?;
    Ok(row)
}

macro_rules! dispatch {
    ($cfg:expr, |$setup:ident| $body:expr) => {
        match $cfg.precision()? {
            Precision::F32 => {
                let $setup = Setup::<f32>::new($cfg)?;
                $body
            }
            Precision::F64 => {
                let $setup = Setup::<f64>::new($cfg)?;
                $body
            }
        }
    };
}

pub fn run_train(cfg: &Config, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    dispatch!(cfg, |setup| run_train_with(&setup, out_dir))
}

pub fn run_sweep(cfg: &Config, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    dispatch!(cfg, |setup| run_sweep_with(&setup, out_dir))
}

pub fn run_eval(cfg: &Config, checkpoint: &Path, split: Split, out_dir: &Path) -> Result<MetricsRow> {
    dispatch!(cfg, |setup| run_eval_with(&setup, checkpoint, split, out_dir))
}
