//! Unrolled learned reconstruction operators `R_theta : Y -> X`.
//!
//! Both schemes take a batch of line-integral sinograms `[B, A, L]` and
//! return images `[B, H, W]`. Inside the unroll the ray transform is scaled
//! by its power-iteration norm, so learned blocks see inputs of order one
//! regardless of geometry.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{Bound, LinearOp, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use crate::tomography::{Fbp, FbpFilter, Geometry, RayTransform, Sinogram};

/// Starting image of an unroll.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zero,
    Fbp,
}

impl FromStr for Init {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Init::Zero),
            "fbp" => Ok(Init::Fbp),
            other => Err(invalid("init", format!("unknown initialisation {other:?} (zero | fbp)"))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::Zero => "zero",
            Init::Fbp => "fbp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    GradientDescent,
    PrimalDual,
}

impl FromStr for Scheme {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lgd" => Ok(Scheme::GradientDescent),
            "lpd" => Ok(Scheme::PrimalDual),
            other => Err(invalid("scheme", format!("unknown reconstruction scheme {other:?} (lgd | lpd)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::GradientDescent => "lgd",
            Scheme::PrimalDual => "lpd",
        })
    }
}

/// Architecture of an unrolled scheme.
///
/// `channels_per_block` lists the hidden widths of every learned block; each
/// block is that many 3x3 conv + ReLU layers followed by one 3x3 conv to the
/// block's output channels. `memory_channels` is only used by primal-dual.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollConfig {
    pub num_iterations: usize,
    pub channels_per_block: Vec<usize>,
    pub memory_channels: usize,
    pub init: Init,
}

impl UnrollConfig {
    /// 10 iterations, blocks of three 32-channel conv layers.
    pub fn gradient_descent(init: Init) -> Self {
        UnrollConfig { num_iterations: 10, channels_per_block: vec![32, 32], memory_channels: 1, init }
    }

    /// 10 iterations, memory 5, blocks of three 32-channel conv layers.
    pub fn primal_dual(init: Init) -> Self {
        UnrollConfig { num_iterations: 10, channels_per_block: vec![32, 32], memory_channels: 5, init }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_iterations == 0 {
            return Err(invalid("UnrollConfig", "num_iterations must be at least 1"));
        }
        if self.channels_per_block.is_empty() || self.channels_per_block.contains(&0) {
            return Err(invalid("UnrollConfig", "channels_per_block must be a non-empty list of positive widths"));
        }
        if self.memory_channels == 0 {
            return Err(invalid("UnrollConfig", "memory_channels must be at least 1"));
        }
        Ok(())
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, detail: detail.into() }
}

/// `A / ||A||`.
struct Normalized {
    ray: RayTransform,
    inv_norm: f64,
}

impl<T: Real> LinearOp<T> for Normalized {
    fn name(&self) -> &str {
        "normalised ray transform"
    }

    fn in_shape(&self) -> Vec<usize> {
        self.ray.geometry().image_shape().to_vec()
    }

    fn out_shape(&self) -> Vec<usize> {
        self.ray.geometry().sinogram_shape().to_vec()
    }

    fn apply(&self, x: &[T], batch: usize, out: &mut [T]) {
        self.ray.forward(x, batch, out);
        let s = T::of(self.inv_norm);
        out.iter_mut().for_each(|v| *v *= s);
    }

    fn apply_adjoint(&self, y: &[T], batch: usize, out: &mut [T]) {
        self.ray.adjoint(y, batch, out);
        let s = T::of(self.inv_norm);
        out.iter_mut().for_each(|v| *v *= s);
    }
}

/// Everything an unroll needs to know about the acquisition: the geometry,
/// the normalised ray transform and an FBP for initialisation.
pub struct Acquisition<T: Real> {
    geom: Geometry,
    ray: RayTransform,
    op: Arc<dyn LinearOp<T>>,
    norm: f64,
    fbp: Fbp,
}

impl<T: Real> Acquisition<T> {
    pub fn new(geom: &Geometry, filter: FbpFilter) -> Self {
        let ray = RayTransform::new(geom.clone());
        let norm = ray.operator_norm(30);
        let op: Arc<dyn LinearOp<T>> = Arc::new(Normalized { ray: ray.clone(), inv_norm: 1.0 / norm });
        Acquisition { geom: geom.clone(), ray, op, norm, fbp: Fbp::new(geom, filter) }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// The unscaled ray transform (same weights as the normalised one).
    pub fn ray(&self) -> &RayTransform {
        &self.ray
    }

    /// Operator norm estimate used for scaling.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// `A / ||A||` as a tape operator.
    pub fn normalized(&self) -> &Arc<dyn LinearOp<T>> {
        &self.op
    }

    /// FBP of every sinogram in `[B, A, L]`, giving `[B, H, W]`.
    pub fn fbp_batch(&self, sinos: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_sinos(sinos)?;
        let [h, w] = self.geom.image_shape();
        let data = self
            .fbp
            .reconstruct_batch(sinos.data(), b)
            .map_err(|e| invalid("fbp", e.to_string()))?;
        Tensor::new(&[b, h, w], data)
    }

    fn check_sinos(&self, sinos: &Tensor<T>) -> Result<usize> {
        let s = sinos.shape();
        let [na, nl] = self.geom.sinogram_shape();
        if s.len() != 3 || s[1] != na || s[2] != nl {
            return Err(TensorError::Shape {
                op: "reconstruction",
                detail: format!("expected sinograms [B, {na}, {nl}], got {s:?}"),
            });
        }
        Ok(s[0])
    }
}

/// Adds one learned block: `hidden.len()` conv + ReLU layers and a final
/// zero-initialised conv, so a fresh block outputs zero.
pub fn add_block<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    inputs: usize,
    hidden: &[usize],
    outputs: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut c = inputs;
    for (j, &f) in hidden.iter().enumerate() {
        params.add_conv(&format!("{prefix}.{j}"), f, c, 3, false, rng).map_err(|e| invalid("add_block", e.to_string()))?;
        c = f;
    }
    params
        .add_conv(&format!("{prefix}.{}", hidden.len()), outputs, c, 3, true, rng)
        .map_err(|e| invalid("add_block", e.to_string()))
}

/// Evaluates a block created by [`add_block`] on `[B, C, H, W]`.
pub fn apply_block<'t, T: Real>(bound: &Bound<'t, '_, T>, prefix: &str, layers: usize, input: Var<'t, T>) -> Result<Var<'t, T>> {
    let mut h = input;
    for j in 0..layers {
        let w = bound.get(&format!("{prefix}.{j}.w"))?;
        let b = bound.get(&format!("{prefix}.{j}.b"))?;
        h = h.conv2d(&w, 1)?.add_channel_bias(&b)?;
        if j + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

/// A learned gradient descent or learned primal-dual unroll bound to an
/// acquisition.
pub struct UnrolledNet<T: Real> {
    scheme: Scheme,
    cfg: UnrollConfig,
    acq: Arc<Acquisition<T>>,
}

impl<T: Real> UnrolledNet<T> {
    pub fn new(scheme: Scheme, cfg: UnrollConfig, acq: Arc<Acquisition<T>>) -> Result<Self> {
        cfg.validate()?;
        Ok(UnrolledNet { scheme, cfg, acq })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn config(&self) -> &UnrollConfig {
        &self.cfg
    }

    pub fn acquisition(&self) -> &Acquisition<T> {
        &self.acq
    }

    fn prefix(&self) -> &'static str {
        match self.scheme {
            Scheme::GradientDescent => "lgd",
            Scheme::PrimalDual => "lpd",
        }
    }

    /// Fresh parameters: fan-in scaled uniform kernels, zero biases, and
    /// zero final layers, so the untrained net returns its initialisation.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let mut ps = ParamSet::new();
        let hidden = &self.cfg.channels_per_block;
        let p = self.prefix();
        for k in 0..self.cfg.num_iterations {
            match self.scheme {
                Scheme::GradientDescent => add_block(&mut ps, &format!("{p}.{k}"), 2, hidden, 1, rng)?,
                Scheme::PrimalDual => {
                    let m = self.cfg.memory_channels;
                    add_block(&mut ps, &format!("{p}.{k}.dual"), m + 2, hidden, m, rng)?;
                    add_block(&mut ps, &format!("{p}.{k}.primal"), m + 1, hidden, m, rng)?;
                }
            }
        }
        Ok(ps)
    }

    /// Starting image `[B, H, W]` for line-integral sinograms `[B, A, L]`.
    pub fn initial_image(&self, sinos: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.acq.check_sinos(sinos)?;
        match self.cfg.init {
            Init::Zero => {
                let [h, w] = self.acq.geom.image_shape();
                Ok(Tensor::zeros(&[b, h, w]))
            }
            Init::Fbp => self.acq.fbp_batch(sinos),
        }
    }

    /// Runs the unroll on the tape. `y` holds line integrals `[B, A, L]`;
    /// the result is `[B, H, W]`.
    pub fn forward<'t>(&self, bound: &Bound<'t, '_, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let y_val = y.value();
        let b = self.acq.check_sinos(&y_val)?;
        let [h, w] = self.acq.geom.image_shape();
        let [na, nl] = self.acq.geom.sinogram_shape();
        let tape = y.tape();
        let x0 = tape.constant(self.initial_image(&y_val)?.reshape(&[b, 1, h, w])?);
        let y = y.reshape(&[b, 1, na, nl])?.scale(T::of(1.0 / self.acq.norm));
        let op = self.acq.normalized();
        let layers = self.cfg.channels_per_block.len() + 1;
        let p = self.prefix();
        let out = match self.scheme {
            Scheme::GradientDescent => {
                let mut x = x0;
                for k in 0..self.cfg.num_iterations {
                    let grad = x.linear(op)?.sub(&y)?.linear_adjoint(op)?;
                    let step = apply_block(bound, &format!("{p}.{k}"), layers, Var::concat(&[x, grad], 1)?)?;
                    x = x.add(&step)?.check_finite(|| format!("learned gradient descent, iteration {k}, update block"))?;
                }
                x
            }
            Scheme::PrimalDual => {
                let m = self.cfg.memory_channels;
                let mut primal = Var::concat(&vec![x0; m], 1)?;
                let mut dual = tape.constant(Tensor::zeros(&[b, m, na, nl]));
                for k in 0..self.cfg.num_iterations {
                    let ax = primal.narrow(1, 0, 1)?.linear(op)?;
                    let upd = apply_block(bound, &format!("{p}.{k}.dual"), layers, Var::concat(&[dual, ax, y], 1)?)?;
                    dual = dual.add(&upd)?.check_finite(|| format!("learned primal-dual, iteration {k}, dual block"))?;
                    let ath = dual.narrow(1, 0, 1)?.linear_adjoint(op)?;
                    let upd = apply_block(bound, &format!("{p}.{k}.primal"), layers, Var::concat(&[primal, ath], 1)?)?;
                    primal = primal.add(&upd)?.check_finite(|| format!("learned primal-dual, iteration {k}, primal block"))?;
                }
                primal.narrow(1, 0, 1)?
            }
        };
        out.reshape(&[b, h, w])
    }

    /// Reconstructs one sinogram outside of training.
    pub fn reconstruct(&self, params: &ParamSet<T>, y: &Sinogram<T>) -> Result<Tensor<T>> {
        let [na, nl] = self.acq.geom.sinogram_shape();
        let tape = Tape::new();
        let bound = tape.bind(params);
        let yv = tape.constant(y.data().clone().reshape(&[1, na, nl])?);
        let [h, w] = self.acq.geom.image_shape();
        (*self.forward(&bound, yv)?.value()).clone().reshape(&[h, w])
    }
}

/// Learned gradient descent on a single sinogram of line integrals.
pub fn learned_gradient_descent<T: Real>(y: &Sinogram<T>, theta: &ParamSet<T>, cfg: &UnrollConfig) -> Result<Tensor<T>> {
    let acq = Arc::new(Acquisition::new(y.geometry(), FbpFilter::default()));
    UnrolledNet::new(Scheme::GradientDescent, cfg.clone(), acq)?.reconstruct(theta, y)
}

/// Learned primal-dual on a single sinogram of line integrals.
pub fn learned_primal_dual<T: Real>(y: &Sinogram<T>, theta: &ParamSet<T>, cfg: &UnrollConfig) -> Result<Tensor<T>> {
    let acq = Arc::new(Acquisition::new(y.geometry(), FbpFilter::default()));
    UnrolledNet::new(Scheme::PrimalDual, cfg.clone(), acq)?.reconstruct(theta, y)
}

/// FBP baseline on photon counts: log transform, then Hann-filtered FBP.
pub fn fbp_operator<T: Real>(counts: &Sinogram<T>, photons_per_line: f64) -> Result<Tensor<T>> {
    let lin = crate::tomography::log_transform(counts, photons_per_line).map_err(|e| invalid("fbp_operator", e.to_string()))?;
    Ok(crate::tomography::fbp(&lin, FbpFilter::Hann))
}
