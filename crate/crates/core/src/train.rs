//! Sequential, end-to-end and joint training of `(R_theta, T_vartheta)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{mix, DataError, Targets, TripletBatch, TripletStream};
use crate::params::{CheckpointError, ParamSet};
use crate::real::Real;
use crate::recon::{Acquisition, UnrolledNet};
use crate::report::{accuracy, fmt_sig, pixel_accuracy};
use crate::tape::{Bound, Tape, Var};
use crate::task::{classification_loss, segmentation_loss, Classifier, UNet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at {stage} step {step}: {detail}{}", .last_good.as_ref().map(|p| format!(" (last good parameters saved to {})", p.display())).unwrap_or_default())]
    Diverged { stage: String, step: usize, detail: String, last_good: Option<PathBuf> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Sequential,
    EndToEnd,
    Joint,
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Regime::Sequential),
            "end_to_end" => Ok(Regime::EndToEnd),
            "joint" => Ok(Regime::Joint),
            other => Err(TrainError::Config(format!("unknown regime {other:?} (sequential | end_to_end | joint)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sequential => "sequential",
            Regime::EndToEnd => "end_to_end",
            Regime::Joint => "joint",
        })
    }
}

/// Rejects `C` outside `[0, 1]`.
pub fn check_c(c: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&c) {
        Ok(c)
    } else {
        Err(TrainError::Config(format!("C must lie in [0, 1], got {c}")))
    }
}

/// `(1 - C) d_X + C d_D`.
pub fn joint_loss<'t, T: Real>(d_x: Var<'t, T>, d_d: Var<'t, T>, c: f64) -> Result<Var<'t, T>> {
    check_c(c)?;
    Ok(d_x.scale(T::of(1.0 - c)).add(&d_d.scale(T::of(c)))?)
}

/// How the squared reconstruction error is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconLossNorm {
    /// Sum over pixels, mean over the batch.
    Sum,
    /// Mean over pixels and batch.
    Mean,
}

impl FromStr for ReconLossNorm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ReconLossNorm::Sum),
            "mean" => Ok(ReconLossNorm::Mean),
            other => Err(TrainError::Config(format!("unknown reconstruction loss reduction {other:?} (sum | mean)"))),
        }
    }
}

/// Squared L2 distance between `x_hat` and `x`, both `[B, H, W]`.
pub fn reconstruction_loss<'t, T: Real>(x_hat: Var<'t, T>, x: &Tensor<T>, norm: ReconLossNorm) -> Result<Var<'t, T>> {
    let d = x_hat.sub(&x_hat.tape().constant(x.clone()))?.square();
    Ok(match norm {
        ReconLossNorm::Mean => d.mean(),
        ReconLossNorm::Sum => d.sum().scale(T::of(1.0 / x.shape()[0] as f64)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(TrainError::Config(format!("unknown optimizer {other:?} (sgd | adam)"))),
        }
    }
}

/// Cosine decay from `lr` to `lr_min` over `steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub lr_min: f64,
    pub steps: usize,
}

impl Schedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Plain SGD or Adam (`beta = (0.9, 0.999)`, `eps = 1e-8`) with per-name state.
pub struct Optimizer<T: Real> {
    kind: OptimizerKind,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    t: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, moments: BTreeMap::new(), t: 0 }
    }

    /// Updates every parameter named in `grads`; others are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - f64::powi(b1, self.t);
        let c2 = 1.0 - f64::powi(b2, self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => p.axpy(T::of(-lr), g),
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let step = T::of(lr / c1);
                    let (b1t, b2t) = (T::of(b1), T::of(b2));
                    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
                    let (sc2, e) = (T::of(c2.sqrt()), T::of(eps));
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mv = b1t * *mv + ob1 * gv;
                        *vv = b2t * *vv + ob2 * gv * gv;
                        *pv -= step * *mv / (vv.sqrt() / sc2 + e);
                    }
                }
            }
        }
    }
}

/// Reconstruction operator: an unrolled net or the parameter-free FBP.
pub enum ReconModel<T: Real> {
    Unrolled(UnrolledNet<T>),
    Fbp(Arc<Acquisition<T>>),
}

impl<T: Real> ReconModel<T> {
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
        match self {
            ReconModel::Unrolled(n) => Ok(n.init_params(rng)?),
            ReconModel::Fbp(_) => Ok(ParamSet::new()),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t, '_, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            ReconModel::Unrolled(n) => Ok(n.forward(bound, y)?),
            ReconModel::Fbp(acq) => Ok(y.tape().constant(acq.fbp_batch(&y.value())?)),
        }
    }
}

pub enum TaskModel {
    Classifier(Classifier),
    Segmenter(UNet),
}

impl TaskModel {
    pub fn init_params<T: Real>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
        Ok(match self {
            TaskModel::Classifier(c) => c.init_params(rng)?,
            TaskModel::Segmenter(u) => u.init_params(rng)?,
        })
    }

    /// Class probabilities `[B, 10]` or foreground maps `[B, H, W]`.
    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(match self {
            TaskModel::Classifier(c) => c.classify(bound, x)?,
            TaskModel::Segmenter(u) => u.segment(bound, x)?,
        })
    }

    pub fn loss<'t, T: Real>(&self, out: Var<'t, T>, targets: &Targets<T>) -> Result<Var<'t, T>> {
        Ok(match (self, targets) {
            (TaskModel::Classifier(_), Targets::Labels(l)) => classification_loss(out, l)?,
            (TaskModel::Segmenter(_), Targets::Masks(m)) => segmentation_loss(out, m)?,
            _ => return Err(TrainError::Config("task and dataset targets do not match".into())),
        })
    }

    /// Accuracy or pixel accuracy of one batch of outputs.
    pub fn metric<T: Real>(&self, out: &Tensor<T>, targets: &Targets<T>) -> Result<f64> {
        Ok(match targets {
            Targets::Labels(l) => accuracy(out, l)?,
            Targets::Masks(m) => pixel_accuracy(out, m)?,
        })
    }
}

/// What a training stage minimises and which parameters it updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `d_X` over `theta`.
    Reconstruction,
    /// `d_D` over `vartheta` on outputs of the frozen reconstruction.
    TaskOnReconstructions,
    /// `d_D` over `vartheta` on the true images.
    TaskOnImages,
    /// `(1 - C) d_X + C d_D` over both.
    Joint(f64),
}

impl Objective {
    pub fn name(&self) -> String {
        match self {
            Objective::Reconstruction => "reconstruction".into(),
            Objective::TaskOnReconstructions => "task".into(),
            Objective::TaskOnImages => "task_clean".into(),
            Objective::Joint(c) => format!("joint_c{c}"),
        }
    }
}

/// Loss terms of one batch; `None` when the objective does not need them.
pub struct Terms<'t, T: Real> {
    pub d_x: Option<Var<'t, T>>,
    pub d_d: Option<Var<'t, T>>,
    pub loss: Var<'t, T>,
    pub x_hat: Option<Var<'t, T>>,
    pub output: Option<Var<'t, T>>,
}

/// `R_theta` followed by `T_vartheta`. Reconstruction parameters and task
/// parameters live in one [`ParamSet`] and are told apart by name.
pub struct JointModel<T: Real> {
    pub recon: ReconModel<T>,
    pub task: TaskModel,
    pub recon_loss: ReconLossNorm,
}

impl<T: Real> JointModel<T> {
    /// `theta` from `seed`-derived stream 1, `vartheta` from stream 2.
    pub fn init_params(&self, seed: u64) -> Result<(ParamSet<T>, ParamSet<T>)> {
        let theta = self.recon.init_params(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1)))?;
        let vartheta = self.task.init_params(&mut ChaCha8Rng::seed_from_u64(mix(seed, 2)))?;
        for name in vartheta.names() {
            if theta.contains(name) {
                return Err(TrainError::Config(format!("parameter {name} used by both operators")));
            }
        }
        Ok((theta, vartheta))
    }

    /// Images `[B, H, W]` reconstructed outside of any gradient computation.
    pub fn reconstruct(&self, params: &ParamSet<T>, lin: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = tape.bind(params);
        let out = self.recon.forward(&bound, tape.constant(lin.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn terms<'t>(&self, tape: &'t Tape<T>, bound: &Bound<'t, '_, T>, batch: &TripletBatch<T>, objective: Objective) -> Result<Terms<'t, T>> {
        let recon = |_: ()| -> Result<Var<'t, T>> { self.recon.forward(bound, tape.constant(batch.line_integrals.clone())) };
        Ok(match objective {
            Objective::Reconstruction => {
                let x_hat = recon(())?;
                let d_x = reconstruction_loss(x_hat, &batch.images, self.recon_loss)?;
                Terms { d_x: Some(d_x), d_d: None, loss: d_x, x_hat: Some(x_hat), output: None }
            }
            Objective::TaskOnReconstructions | Objective::TaskOnImages => {
                let input = if objective == Objective::TaskOnImages {
                    batch.images.clone()
                } else {
                    // parameters of the frozen operator must not be recorded
                    let theta = params_matching(bound.params(), |n| !self.is_task_param(n));
                    self.reconstruct(&theta, &batch.line_integrals)?
                };
                let out = self.task.forward(bound, tape.constant(input))?;
                let d_d = self.task.loss(out, &batch.targets)?;
                Terms { d_x: None, d_d: Some(d_d), loss: d_d, x_hat: None, output: Some(out) }
            }
            Objective::Joint(c) => {
                let x_hat = recon(())?;
                let d_x = reconstruction_loss(x_hat, &batch.images, self.recon_loss)?;
                let out = self.task.forward(bound, x_hat)?;
                let d_d = self.task.loss(out, &batch.targets)?;
                let loss = joint_loss(d_x, d_d, c)?;
                Terms { d_x: Some(d_x), d_d: Some(d_d), loss, x_hat: Some(x_hat), output: Some(out) }
            }
        })
    }

    /// Task parameters are the ones created by [`TaskModel::init_params`].
    pub fn is_task_param(&self, name: &str) -> bool {
        name.starts_with("clf.") || name.starts_with("seg.")
    }

    fn trainable(&self, objective: Objective, name: &str) -> bool {
        match objective {
            Objective::Reconstruction => !self.is_task_param(name),
            Objective::TaskOnReconstructions | Objective::TaskOnImages => self.is_task_param(name),
            Objective::Joint(_) => true,
        }
    }
}

pub fn params_matching<T: Real>(params: &ParamSet<T>, keep: impl Fn(&str) -> bool) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (n, t) in params.iter() {
        if keep(n) {
            out.insert(n, t.clone()).expect("names are unique");
        }
    }
    out
}

/// One logged optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub d_x: Option<f64>,
    pub d_d: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

pub const STEP_CSV_HEADER: &str = "stage,step,d_x,d_d,joint,lr";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.stage, self.step, opt(self.d_x), opt(self.d_d), fmt_sig(self.joint), fmt_sig(self.lr))
    }
}

/// Where a stage writes its step log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Outputs {
    pub fn none() -> Self {
        Outputs::default()
    }

    pub fn in_dir(dir: impl Into<PathBuf>, log_every: usize, checkpoint_every: usize) -> Self {
        Outputs { dir: Some(dir.into()), log_every, checkpoint_every }
    }
}

/// Stage settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub objective: Objective,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_min: f64,
}

/// Runs `cfg.steps` optimisation steps of one objective, drawing batches
/// from `stream`. A non-finite loss or activation aborts the stage and the
/// parameters from before the failing step are saved as `last_good.trkp`.
pub fn train_stage<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    cfg: &StageConfig,
    out: &Outputs,
) -> Result<Vec<StepRecord>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if let Objective::Joint(c) = cfg.objective {
        check_c(c)?;
    }
    let stage = cfg.objective.name();
    let schedule = Schedule { lr: cfg.lr, lr_min: cfg.lr_min, steps: cfg.steps };
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = match &out.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(io_err(d))?;
            let path = d.join("steps.csv");
            let fresh = !path.exists();
            let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{STEP_CSV_HEADER}").map_err(io_err(&path))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = stream.next_batch()?;
        let lr = schedule.at(step);
        let evaluated = (|| -> Result<(StepRecord, BTreeMap<String, Tensor<T>>)> {
            let tape = Tape::new();
            let bound = tape.bind(params);
            let terms = model.terms(&tape, &bound, &batch, cfg.objective)?;
            let joint = terms.loss.value().item().as_f64();
            if !joint.is_finite() {
                return Err(TrainError::Tensor(TensorError::NonFinite(format!("loss is {joint}"))));
            }
            let mut grads = tape.backward(terms.loss, &bound)?;
            grads.retain(|n, _| model.trainable(cfg.objective, n));
            if let Some((n, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(TrainError::Tensor(TensorError::NonFinite(format!("gradient of {n}"))));
            }
            let rec = StepRecord {
                stage: stage.clone(),
                step,
                d_x: terms.d_x.map(|v| v.value().item().as_f64()),
                d_d: terms.d_d.map(|v| v.value().item().as_f64()),
                joint,
                lr,
            };
            Ok((rec, grads))
        })();
        let (rec, grads) = match evaluated {
            Ok(v) => v,
            Err(TrainError::Tensor(TensorError::NonFinite(detail))) => {
                let last_good = match &out.dir {
                    Some(d) => {
                        let p = d.join("last_good.trkp");
                        params.save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(TrainError::Diverged { stage, step, detail, last_good });
            }
            Err(e) => return Err(e),
        };
        opt.step(params, &grads, lr);
        if let Some((w, path)) = log.as_mut() {
            if out.log_every > 0 && (step % out.log_every == 0 || step + 1 == cfg.steps) {
                writeln!(w, "{}", rec.csv_line()).map_err(io_err(path))?;
            }
        }
        if let Some(d) = &out.dir {
            if out.checkpoint_every > 0 && (step + 1) % out.checkpoint_every == 0 {
                params.save(d.join(format!("{stage}_step{:06}.trkp", step + 1)))?;
            }
        }
        records.push(rec);
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(io_err(&path))?;
    }
    Ok(records)
}

/// Settings shared by the three regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub c: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Joint / end-to-end steps, or task steps of the sequential regime.
    pub steps: usize,
    /// Reconstruction steps of the sequential regime.
    pub recon_steps: usize,
    pub seed: u64,
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        check_c(self.c)?;
        if self.steps == 0 && self.recon_steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(TrainError::Config(format!("learning rates must satisfy 0 <= lr_min <= lr, lr > 0 (got {} / {})", self.lr_min, self.lr)));
        }
        Ok(())
    }

    fn stage(&self, objective: Objective, steps: usize) -> StageConfig {
        StageConfig { objective, steps, optimizer: self.optimizer, lr: self.lr, lr_min: self.lr_min }
    }
}

/// Stage 1 minimises `d_X` over `theta`; stage 2 freezes `theta` and
/// minimises `d_D` over `vartheta` on reconstructions.
pub fn train_sequential<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    cfg: &RegimeConfig,
    out: &Outputs,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut recs = train_stage(model, params, stream, &cfg.stage(Objective::Reconstruction, cfg.recon_steps), out)?;
    recs.extend(train_stage(model, params, stream, &cfg.stage(Objective::TaskOnReconstructions, cfg.steps), out)?);
    Ok(recs)
}

/// Joint training with `C = 1`: only the task loss of `T o R`.
pub fn train_end_to_end<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    cfg: &RegimeConfig,
    out: &Outputs,
) -> Result<Vec<StepRecord>> {
    train_joint(model, params, stream, &RegimeConfig { c: 1.0, ..cfg.clone() }, out)
}

pub fn train_joint<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    cfg: &RegimeConfig,
    out: &Outputs,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    train_stage(model, params, stream, &cfg.stage(Objective::Joint(cfg.c), cfg.steps), out)
}

pub fn train_regime<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    cfg: &RegimeConfig,
    out: &Outputs,
) -> Result<Vec<StepRecord>> {
    match cfg.regime {
        Regime::Sequential => train_sequential(model, params, stream, cfg, out),
        Regime::EndToEnd => train_end_to_end(model, params, stream, cfg, out),
        Regime::Joint => train_joint(model, params, stream, cfg, out),
    }
}

/// Held-out averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Classification accuracy or segmentation pixel accuracy.
    pub accuracy: f64,
    pub l2_loss: f64,
    pub cross_entropy: f64,
    pub count: usize,
}

/// Evaluates `(R_theta, T_vartheta)` on fixed batches; `on_images` feeds the
/// true images to the task instead of reconstructions.
pub fn evaluate<T: Real>(model: &JointModel<T>, params: &ParamSet<T>, batches: &[TripletBatch<T>], on_images: bool) -> Result<EvalMetrics> {
    let (mut acc, mut l2, mut ce, mut n) = (0.0, 0.0, 0.0, 0usize);
    for batch in batches {
        let tape = Tape::new();
        let bound = tape.bind(params);
        let b = batch.len();
        let (x_hat, d_x) = if on_images {
            (tape.constant(batch.images.clone()), None)
        } else {
            let x_hat = model.recon.forward(&bound, tape.constant(batch.line_integrals.clone()))?;
            (x_hat, Some(reconstruction_loss(x_hat, &batch.images, model.recon_loss)?))
        };
        let out = model.task.forward(&bound, x_hat)?;
        let d_d = model.task.loss(out, &batch.targets)?;
        acc += model.task.metric(&out.value(), &batch.targets)? * b as f64;
        l2 += d_x.map(|v| v.value().item().as_f64()).unwrap_or(0.0) * b as f64;
        ce += d_d.value().item().as_f64() * b as f64;
        n += b;
    }
    if n == 0 {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    let n_f = n as f64;
    Ok(EvalMetrics { accuracy: acc / n_f, l2_loss: l2 / n_f, cross_entropy: ce / n_f, count: n })
}

/// Trains the task on true images until the held-out accuracy reaches
/// `target` (checked every `check_every` steps) or `max_steps` is spent.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_task<T: Real>(
    model: &JointModel<T>,
    params: &mut ParamSet<T>,
    stream: &mut TripletStream<'_, T>,
    held_out: &[TripletBatch<T>],
    cfg: &RegimeConfig,
    target: f64,
    max_steps: usize,
    check_every: usize,
    out: &Outputs,
) -> Result<(usize, f64)> {
    let chunk = check_every.max(1);
    let mut done = 0;
    let mut acc = evaluate(model, params, held_out, true)?.accuracy;
    while done < max_steps && acc < target {
        let steps = chunk.min(max_steps - done);
        // one schedule over the whole cap; chunks continue it
        let stage = StageConfig {
            objective: Objective::TaskOnImages,
            steps,
            optimizer: cfg.optimizer,
            lr: Schedule { lr: cfg.lr, lr_min: cfg.lr_min, steps: max_steps }.at(done),
            lr_min: Schedule { lr: cfg.lr, lr_min: cfg.lr_min, steps: max_steps }.at(done + steps - 1),
        };
        train_stage(model, params, stream, &stage, out)?;
        done += steps;
        acc = evaluate(model, params, held_out, true)?.accuracy;
    }
    Ok((done, acc))
}

/// Row of a C sweep; `error` is set when the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub c: f64,
    pub metrics: Option<EvalMetrics>,
    pub error: Option<String>,
}

/// Runs joint training once per `C`, each from `init` with the same seed,
/// and evaluates on `eval`. Failed runs are recorded and the sweep goes on.
pub fn sweep_c<'a, T: Real>(
    model: &JointModel<T>,
    init: &ParamSet<T>,
    mut make_stream: impl FnMut(u64) -> Result<TripletStream<'a, T>>,
    eval: &[TripletBatch<T>],
    cfg: &RegimeConfig,
    c_list: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if c_list.is_empty() {
        return Err(TrainError::Config("C list is empty".into()));
    }
    for &c in c_list {
        check_c(c)?;
    }
    let mut rows = Vec::new();
    for &c in c_list {
        let mut run = || -> Result<EvalMetrics> {
            let mut params = init.clone();
            let mut stream = make_stream(cfg.seed)?;
            let out = match out_dir {
                Some(d) => Outputs::in_dir(d.join(format!("c{c}")), 10, 0),
                None => Outputs::none(),
            };
            train_joint(model, &mut params, &mut stream, &RegimeConfig { c, regime: Regime::Joint, ..cfg.clone() }, &out)?;
            evaluate(model, &params, eval, false)
        };
        rows.push(match run() {
            Ok(m) => SweepRow { c, metrics: Some(m), error: None },
            Err(e) => SweepRow { c, metrics: None, error: Some(e.to_string()) },
        });
    }
    Ok(rows)
}

/// Losses of `(R, T)` and `(B^-1 o R, T o B)` for `B x = a x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub c: f64,
    pub original: f64,
    pub transformed: f64,
    pub difference: f64,
}

/// Evaluates the joint loss at `c` of the original pair and of the pair
/// reparametrised by the pointwise affine map `x -> a x + b`.
pub fn invariance_probe<T: Real>(
    model: &JointModel<T>,
    params: &ParamSet<T>,
    a: f64,
    b: f64,
    batches: &[TripletBatch<T>],
    c: f64,
) -> Result<ProbeReport> {
    check_c(c)?;
    if a == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(TrainError::Config(format!("x -> {a} x + {b} is not invertible")));
    }
    let (mut orig, mut tran, mut n) = (0.0, 0.0, 0.0);
    for batch in batches {
        let tape = Tape::new();
        let bound = tape.bind(params);
        let x_hat = model.recon.forward(&bound, tape.constant(batch.line_integrals.clone()))?;
        let loss = |x_rec: Var<'_, T>, task_in: Var<'_, T>| -> Result<f64> {
            let d_x = reconstruction_loss(x_rec, &batch.images, model.recon_loss)?;
            let d_d = model.task.loss(model.task.forward(&bound, task_in)?, &batch.targets)?;
            Ok(joint_loss(d_x, d_d, c)?.value().item().as_f64())
        };
        let w = batch.len() as f64;
        orig += w * loss(x_hat, x_hat)?;
        let inv = x_hat.add_scalar(T::of(-b)).scale(T::of(1.0 / a));
        let forward = inv.scale(T::of(a)).add_scalar(T::of(b));
        tran += w * loss(inv, forward)?;
        n += w;
    }
    let (original, transformed) = (orig / n, tran / n);
    Ok(ProbeReport { c, original, transformed, difference: (transformed - original).abs() })
}

/// Saves `params` and a manifest line per name with its shape.
pub fn save_checkpoint<T: Real>(params: &ParamSet<T>, path: &Path, manifest: &str) -> Result<()> {
    params.save(path)?;
    let mpath = path.with_extension("manifest.toml");
    let mut f = BufWriter::new(File::create(&mpath).map_err(io_err(&mpath))?);
    f.write_all(manifest.as_bytes()).map_err(io_err(&mpath))?;
    writeln!(f, "\n[shapes]").map_err(io_err(&mpath))?;
    for (n, t) in params.iter() {
        writeln!(f, "{:?} = {:?}", n, t.shape()).map_err(io_err(&mpath))?;
    }
    f.flush().map_err(io_err(&mpath))
}
