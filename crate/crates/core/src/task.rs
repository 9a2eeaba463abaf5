//! Task operators `T_vartheta : X -> D` and their losses.

use rand::Rng;

use crate::params::ParamSet;
use crate::real::Real;
use crate::recon::{add_block, apply_block};
use crate::tape::{Bound, Var};
use crate::tensor::{shape_err, Result, Tensor, TensorError};

/// Floor applied inside every log of a task loss.
pub const LOG_FLOOR: f64 = 1e-12;

pub const NUM_CLASSES: usize = 10;

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, detail: detail.into() }
}

fn init_err(e: impl std::fmt::Display) -> TensorError {
    invalid("init_params", e.to_string())
}

fn check_images<T: Real>(op: &'static str, x: &Var<'_, T>, size: (usize, usize)) -> Result<usize> {
    let s = x.shape();
    if s.len() != 3 || (s[1], s[2]) != size {
        return Err(shape_err(op, format!("expected images [B, {}, {}], got {s:?}", size.0, size.1)));
    }
    Ok(s[0])
}

fn conv<'t, T: Real>(bound: &Bound<'t, '_, T>, name: &str, x: Var<'t, T>, padding: usize) -> Result<Var<'t, T>> {
    x.conv2d(&bound.get(&format!("{name}.w"))?, padding)?
        .add_channel_bias(&bound.get(&format!("{name}.b"))?)
}

/// Three 3x3 conv + ReLU + 2x2 max-pool stages (32, 64, 128 channels by
/// default), a dense layer to 10 logits, and a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub image_size: (usize, usize),
    pub channels: [usize; 3],
}

impl Default for Classifier {
    fn default() -> Self {
        Classifier { image_size: (28, 28), channels: [32, 64, 128] }
    }
}

impl Classifier {
    fn features(&self) -> usize {
        let (mut h, mut w) = self.image_size;
        for _ in 0..3 {
            h /= 2;
            w /= 2;
        }
        self.channels[2] * h * w
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        if self.features() == 0 {
            return Err(invalid("Classifier", format!("image size {:?} too small for three poolings", self.image_size)));
        }
        let mut ps = ParamSet::new();
        let mut c = 1;
        for (i, &f) in self.channels.iter().enumerate() {
            ps.add_conv(&format!("clf.conv{i}"), f, c, 3, false, rng).map_err(init_err)?;
            c = f;
        }
        ps.add_dense("clf.dense", self.features(), NUM_CLASSES, false, rng).map_err(init_err)?;
        Ok(ps)
    }

    /// Logits `[B, 10]` for images `[B, H, W]`.
    pub fn logits<'t, T: Real>(&self, bound: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = check_images("classify", &x, self.image_size)?;
        let (h, w) = self.image_size;
        let mut a = x.reshape(&[b, 1, h, w])?;
        for i in 0..3 {
            a = conv(bound, &format!("clf.conv{i}"), a, 1)?.relu().max_pool2d()?;
        }
        let flat = a.reshape(&[b, self.features()])?;
        flat.matmul(&bound.get("clf.dense.w")?)?.add_row_bias(&bound.get("clf.dense.b")?)
    }

    /// Class probabilities `[B, 10]`.
    pub fn classify<'t, T: Real>(&self, bound: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.logits(bound, x)?.softmax()
    }
}

/// Mean over the batch of `-ln max(p[z], 1e-12)` for probabilities `[B, k]`.
pub fn classification_loss<'t, T: Real>(probs: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err("classification_loss", format!("probabilities {s:?} for {} labels", labels.len())));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&z| z >= k) {
        return Err(invalid("classification_loss", format!("label {bad} outside 0..{k}")));
    }
    let mut onehot = Tensor::zeros(&s);
    for (i, &z) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + z] = T::one();
    }
    let picked = probs.log_floor(T::of(LOG_FLOOR)).mul(&probs.tape().constant(onehot))?;
    Ok(picked.sum().scale(T::of(-1.0 / labels.len() as f64)))
}

/// Three-scale U-net: two 3x3 conv + ReLU layers per scale, max-pool down,
/// nearest upsampling and skip concatenation up, 1x1 conv and sigmoid out.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub image_size: (usize, usize),
    pub base_channels: usize,
}

impl Default for UNet {
    fn default() -> Self {
        UNet { image_size: (128, 128), base_channels: 16 }
    }
}

impl UNet {
    const SCALES: usize = 3;

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let (h, w) = self.image_size;
        let div = 1 << (Self::SCALES - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 || self.base_channels == 0 {
            return Err(invalid("UNet", format!("image size {:?} must be a positive multiple of {div}", self.image_size)));
        }
        let mut ps = ParamSet::new();
        let c = self.base_channels;
        let mut cin = 1;
        for s in 0..Self::SCALES {
            let f = c << s;
            ps.add_conv(&format!("seg.down{s}.0"), f, cin, 3, false, rng).map_err(init_err)?;
            ps.add_conv(&format!("seg.down{s}.1"), f, f, 3, false, rng).map_err(init_err)?;
            cin = f;
        }
        for s in (0..Self::SCALES - 1).rev() {
            let f = c << s;
            ps.add_conv(&format!("seg.up{s}.0"), f, cin + f, 3, false, rng).map_err(init_err)?;
            ps.add_conv(&format!("seg.up{s}.1"), f, f, 3, false, rng).map_err(init_err)?;
            cin = f;
        }
        ps.add_conv("seg.out", 1, cin, 1, false, rng).map_err(init_err)?;
        Ok(ps)
    }

    /// Foreground probabilities `[B, H, W]` for images `[B, H, W]`.
    pub fn segment<'t, T: Real>(&self, bound: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = check_images("segment", &x, self.image_size)?;
        let (h, w) = self.image_size;
        let mut a = x.reshape(&[b, 1, h, w])?;
        let mut skips = Vec::new();
        for s in 0..Self::SCALES {
            if s > 0 {
                a = a.max_pool2d()?;
            }
            a = conv(bound, &format!("seg.down{s}.0"), a, 1)?.relu();
            a = conv(bound, &format!("seg.down{s}.1"), a, 1)?.relu();
            skips.push(a);
        }
        skips.pop();
        for s in (0..Self::SCALES - 1).rev() {
            let skip = skips.pop().expect("one skip per scale");
            a = Var::concat(&[a.upsample2()?, skip], 1)?;
            a = conv(bound, &format!("seg.up{s}.0"), a, 1)?.relu();
            a = conv(bound, &format!("seg.up{s}.1"), a, 1)?.relu();
        }
        conv(bound, "seg.out", a, 0)?.sigmoid().reshape(&[b, h, w])
    }
}

/// Rejects masks with values other than 0 and 1.
pub fn check_binary_mask<T: Real>(mask: &Tensor<T>) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(invalid("segmentation_loss", format!("mask must be binary, found {v}")));
    }
    Ok(())
}

/// Mean over pixels and batch of `-[m ln p + (1 - m) ln(1 - p)]`, logs
/// floored at 1e-12.
pub fn segmentation_loss<'t, T: Real>(probs: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
    if probs.shape() != mask.shape() {
        return Err(shape_err("segmentation_loss", format!("prediction {:?} vs mask {:?}", probs.shape(), mask.shape())));
    }
    check_binary_mask(mask)?;
    let tape = probs.tape();
    let floor = T::of(LOG_FLOOR);
    let m = tape.constant(mask.clone());
    let not_m = tape.constant(mask.map(|v| T::one() - v));
    let pos = probs.log_floor(floor).mul(&m)?;
    let neg = probs.scale(-T::one()).add_scalar(T::one()).log_floor(floor).mul(&not_m)?;
    Ok(pos.add(&neg)?.mean().scale(-T::one()))
}

/// Small CNN on the channel concatenation of two images, predicting their
/// difference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyNet {
    pub hidden: Vec<usize>,
}

impl Default for AnomalyNet {
    fn default() -> Self {
        AnomalyNet { hidden: vec![16, 16] }
    }
}

impl AnomalyNet {
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let mut ps = ParamSet::new();
        add_block(&mut ps, "anomaly", 2, &self.hidden, 1, rng)?;
        Ok(ps)
    }

    /// `[B, H, W]` pairs to predicted differences `[B, H, W]`.
    pub fn anomaly<'t, T: Real>(&self, bound: &Bound<'t, '_, T>, x1: Var<'t, T>, x2: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s1, s2) = (x1.shape(), x2.shape());
        if s1 != s2 || s1.len() != 3 {
            return Err(shape_err("anomaly", format!("image batches {s1:?} and {s2:?} must be equal [B, H, W]")));
        }
        let (b, h, w) = (s1[0], s1[1], s1[2]);
        let pair = Var::concat(&[x1.reshape(&[b, 1, h, w])?, x2.reshape(&[b, 1, h, w])?], 1)?;
        apply_block(bound, "anomaly", self.hidden.len() + 1, pair)?.reshape(&[b, h, w])
    }
}

/// Squared L2 distance between `pred` and `x1 - x2`, summed per image and
/// averaged over the batch.
pub fn anomaly_loss<'t, T: Real>(pred: Var<'t, T>, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Var<'t, T>> {
    let target = x1.zip_map(x2, |a, b| a - b)?;
    if pred.shape() != target.shape() || target.rank() == 0 {
        return Err(shape_err("anomaly_loss", format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let b = target.shape()[0];
    let d = pred.sub(&pred.tape().constant(target))?;
    Ok(d.square().sum().scale(T::of(1.0 / b as f64)))
}
