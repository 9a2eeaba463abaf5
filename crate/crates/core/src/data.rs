//! Datasets, synthetic phantoms, augmentation and triplet streams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{CheckpointError, ParamSet};
use crate::real::Real;
use crate::tomography::{GaussianModel, Geometry, PoissonModel, RayTransform, TomoError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: byte {offset}: {detail}")]
    Format { path: PathBuf, offset: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tomo(#[from] TomoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, (usize, String)> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or((offset, format!("truncated header, file has {} bytes", bytes.len())))
}

/// Parses an IDX image file held in memory. Errors carry the byte offset.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<IdxImages, (usize, String)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err((0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err((16 + body.len(), format!("truncated pixel data, expected {need} bytes after the header")));
    }
    if body.len() > need {
        return Err((16 + need, format!("{} trailing bytes", body.len() - need)));
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, (usize, String)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err((0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err((8 + body.len(), format!("truncated labels, expected {count}")));
    }
    if body.len() > count {
        return Err((8 + count, format!("{} trailing bytes", body.len() - count)));
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn format_err(path: &Path) -> impl FnOnce((usize, String)) -> DataError + '_ {
    move |(offset, detail)| DataError::Format { path: path.to_path_buf(), offset, detail }
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_idx_images(&read(path)?).map_err(format_err(path))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read(path)?).map_err(format_err(path))
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    write(path.as_ref(), &encode_idx_images(images))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    write(path.as_ref(), &encode_idx_labels(labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Validation => 1.0,
            Split::Test => 2.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Task targets of a dataset or batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T: Real> {
    /// Class labels in `0..10`.
    Labels(Vec<usize>),
    /// Binary masks `[N, H, W]`.
    Masks(Tensor<T>),
}

impl<T: Real> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Masks(m) => m.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Targets<T>> {
        Ok(match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Masks(m) => Targets::Masks(Tensor::stack(&idx.iter().map(|&i| m.outer(i)).collect::<Vec<_>>())?),
        })
    }
}

/// Images `[N, H, W]` in `[0, 1]`, one target per image and a split tag per
/// image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    images: Tensor<T>,
    targets: Targets<T>,
    splits: Vec<Split>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, targets: Targets<T>, splits: Vec<Split>) -> Result<Self> {
        if images.rank() != 3 {
            return Err(DataError::Invalid(format!("images must be [N, H, W], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if targets.len() != n || splits.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} images but {} targets and {} split tags",
                targets.len(),
                splits.len()
            )));
        }
        if let Targets::Masks(m) = &targets {
            if m.shape() != images.shape() {
                return Err(DataError::Invalid(format!("masks {:?} vs images {:?}", m.shape(), images.shape())));
            }
        }
        Ok(Dataset { images, targets, splits })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn targets(&self) -> &Targets<T> {
        &self.targets
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn image(&self, i: usize) -> Tensor<T> {
        self.images.outer(i)
    }

    /// Indices tagged `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Images `[B, H, W]` and targets for the given indices.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        let images = Tensor::stack(&idx.iter().map(|&i| self.image(i)).collect::<Vec<_>>())?;
        Ok((images, self.targets.select(idx)?))
    }

    /// Writes images, targets and split tags in the checkpoint format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ps = ParamSet::<T>::new();
        ps.insert("images", self.images.clone())?;
        match &self.targets {
            Targets::Labels(l) => ps.insert("labels", Tensor::new(&[l.len()], l.iter().map(|&v| T::of(v as f64)).collect())?)?,
            Targets::Masks(m) => ps.insert("masks", m.clone())?,
        }
        let tags = self.splits.iter().map(|s| T::of(s.code())).collect();
        ps.insert("splits", Tensor::new(&[self.len()], tags)?)?;
        Ok(ps.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ps = ParamSet::<T>::load(path)?;
        let get = |n: &str| ps.get(n).cloned();
        let images = get("images").ok_or_else(|| DataError::Invalid("dataset file has no images".into()))?;
        let targets = match (get("labels"), get("masks")) {
            (Some(l), None) => Targets::Labels(l.data().iter().map(|v| v.as_f64() as usize).collect()),
            (None, Some(m)) => Targets::Masks(m),
            _ => return Err(DataError::Invalid("dataset file needs exactly one of labels, masks".into())),
        };
        let splits = get("splits")
            .ok_or_else(|| DataError::Invalid("dataset file has no split tags".into()))?
            .data()
            .iter()
            .map(|v| Split::from_code(v.as_f64()).ok_or_else(|| DataError::Invalid(format!("bad split tag {v}"))))
            .collect::<Result<_>>()?;
        Dataset::new(images, targets, splits)
    }
}

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

fn idx_to_tensor<T: Real>(img: &IdxImages) -> Result<Tensor<T>> {
    let data = img.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
    Ok(Tensor::new(&[img.count, img.rows, img.cols], data)?)
}

/// Digit-like 28 x 28 test images: class `k` is a bright bar through the
/// centre at `18 k` degrees with a random offset, width and blur. Not MNIST;
/// for smoke runs when the real files are unavailable.
pub fn synthetic_digits(count: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..10u8);
        let theta = (18.0 * k as f64 + rng.random_range(-4.0..4.0)).to_radians();
        let (ox, oy) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let half_width = rng.random_range(1.0..2.0);
        let half_len = rng.random_range(7.0..10.0);
        let (c, s) = (theta.cos(), theta.sin());
        for i in 0..28 {
            for j in 0..28 {
                let (x, y) = (j as f64 - 13.5 - ox, i as f64 - 13.5 - oy);
                let along = x * c + y * s;
                let across = -x * s + y * c;
                let d = (across.abs() - half_width).max(0.0) + (along.abs() - half_len).max(0.0);
                let v = (-d * d).exp();
                pixels.push((v * 255.0).round() as u8);
            }
        }
        labels.push(k);
    }
    (IdxImages { count, rows: 28, cols: 28, pixels }, labels)
}

/// Writes the four MNIST file names filled with [`synthetic_digits`].
pub fn write_synthetic_mnist(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let (tr, trl) = synthetic_digits(train, mix(seed, 0));
    let (te, tel) = synthetic_digits(test, mix(seed, 1));
    write_idx_images(dir.join(MNIST_FILES[0]), &tr)?;
    write_idx_labels(dir.join(MNIST_FILES[1]), &trl)?;
    write_idx_images(dir.join(MNIST_FILES[2]), &te)?;
    write_idx_labels(dir.join(MNIST_FILES[3]), &tel)
}

/// Loads the four MNIST IDX files from `dir`. The last `validation` training
/// images form the validation split, the `t10k` files the test split.
pub fn load_mnist<T: Real>(dir: impl AsRef<Path>, validation: usize) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let train = read_idx_images(dir.join(MNIST_FILES[0]))?;
    let train_labels = read_idx_labels(dir.join(MNIST_FILES[1]))?;
    let test = read_idx_images(dir.join(MNIST_FILES[2]))?;
    let test_labels = read_idx_labels(dir.join(MNIST_FILES[3]))?;
    if train_labels.len() != train.count || test_labels.len() != test.count {
        return Err(DataError::Invalid(format!(
            "label counts ({}, {}) do not match image counts ({}, {})",
            train_labels.len(),
            test_labels.len(),
            train.count,
            test.count
        )));
    }
    if (train.rows, train.cols) != (test.rows, test.cols) {
        return Err(DataError::Invalid("train and test images differ in size".into()));
    }
    if validation > train.count {
        return Err(DataError::Invalid(format!("validation split {validation} exceeds {} training images", train.count)));
    }
    if let Some(&bad) = train_labels.iter().chain(&test_labels).find(|&&l| l > 9) {
        return Err(DataError::Invalid(format!("label {bad} outside 0..=9")));
    }
    let mut pixels = train.pixels.clone();
    pixels.extend_from_slice(&test.pixels);
    let all = IdxImages { count: train.count + test.count, rows: train.rows, cols: train.cols, pixels };
    let labels = train_labels.iter().chain(&test_labels).map(|&l| l as usize).collect();
    let mut splits = vec![Split::Train; train.count - validation];
    splits.extend(std::iter::repeat_n(Split::Validation, validation));
    splits.extend(std::iter::repeat_n(Split::Test, test.count));
    Dataset::new(idx_to_tensor(&all)?, Targets::Labels(labels), splits)
}

/// Parameters of one synthetic head phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: (usize, usize),
    /// Deep grey-matter ellipses inside the white matter.
    pub num_ellipses: usize,
    pub skull: (f64, f64),
    pub white_matter: (f64, f64),
    /// Grey matter is `white + contrast`.
    pub grey_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { seed: 0, size: (128, 128), num_ellipses: 3, skull: (0.8, 1.0), white_matter: (0.3, 0.4), grey_contrast: 0.05 }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| (0.0..=1.0).contains(&r.0) && (0.0..=1.0).contains(&r.1) && r.0 <= r.1;
        if !ok(self.skull) || !ok(self.white_matter) {
            return Err(DataError::Invalid("tier intensity ranges must be ordered and inside [0, 1]".into()));
        }
        if !(self.grey_contrast > 0.0 && self.white_matter.1 + self.grey_contrast <= 1.0) {
            return Err(DataError::Invalid(format!("grey contrast {} must be positive and keep grey <= 1", self.grey_contrast)));
        }
        if self.size.0 < 16 || self.size.1 < 16 {
            return Err(DataError::Invalid(format!("phantom size {:?} too small", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Ellipse { cx, cy, a, b, cos: angle.cos(), sin: angle.sin() }
    }

    fn scaled(&self, s: f64) -> Self {
        Ellipse { a: self.a * s, b: self.b * s, ..*self }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Nested-ellipse head: skull shell, cortical grey band, white matter with
/// deep grey ellipses, and two dark ventricles. The mask is the grey matter.
/// Coordinates are in pixels relative to the image centre.
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = spec.size;
    let half = h.min(w) as f64 / 2.0;
    let head = Ellipse::new(
        rng.random_range(-0.03..0.03) * half,
        rng.random_range(-0.03..0.03) * half,
        rng.random_range(0.80..0.90) * half,
        rng.random_range(0.68..0.78) * half,
        rng.random_range(-0.2..0.2),
    );
    let thickness = rng.random_range(0.05..0.07);
    let brain = head.scaled(1.0 - thickness);
    let white = brain.scaled(rng.random_range(0.80..0.86));
    let mut deep = Vec::new();
    for _ in 0..spec.num_ellipses {
        let r = rng.random_range(0.0..0.5);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        deep.push(Ellipse::new(
            white.cx + r * white.a * t.cos(),
            white.cy + r * white.b * t.sin(),
            rng.random_range(0.06..0.14) * half,
            rng.random_range(0.04..0.10) * half,
            rng.random_range(0.0..std::f64::consts::PI),
        ));
    }
    let mut ventricles = Vec::new();
    for side in [-1.0, 1.0] {
        ventricles.push(Ellipse::new(
            white.cx + side * rng.random_range(0.06..0.12) * half,
            white.cy + rng.random_range(-0.05..0.05) * half,
            rng.random_range(0.04..0.07) * half,
            rng.random_range(0.12..0.2) * half,
            side * rng.random_range(0.0..0.3),
        ));
    }
    let skull_v = rng.random_range(spec.skull.0..=spec.skull.1);
    let white_v = rng.random_range(spec.white_matter.0..=spec.white_matter.1);
    let grey_v = white_v + spec.grey_contrast;
    let ventricle_v = 0.3 * white_v;
    let mut image = vec![T::zero(); h * w];
    let mut mask = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 - (w as f64 - 1.0) / 2.0;
            let y = (h as f64 - 1.0) / 2.0 - r as f64;
            let (v, m) = if !head.contains(x, y) {
                (0.0, false)
            } else if !brain.contains(x, y) {
                (skull_v, false)
            } else if ventricles.iter().any(|e| e.contains(x, y)) {
                (ventricle_v, false)
            } else if !white.contains(x, y) || deep.iter().any(|e| e.contains(x, y)) {
                (grey_v, true)
            } else {
                (white_v, false)
            };
            image[r * w + c] = T::of(v);
            mask[r * w + c] = if m { T::one() } else { T::zero() };
        }
    }
    Ok((Tensor::new(&[h, w], image)?, Tensor::new(&[h, w], mask)?))
}

/// Phantom dataset: `train + validation + test` phantoms with seeds derived
/// from `spec.seed`.
pub fn phantom_dataset<T: Real>(spec: &PhantomSpec, train: usize, validation: usize, test: usize) -> Result<Dataset<T>> {
    let n = train + validation + test;
    let (mut images, mut masks) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (x, m) = generate_phantom(&spec.with_seed(mix(spec.seed, i as u64)))?;
        images.push(x);
        masks.push(m);
    }
    let mut splits = vec![Split::Train; train];
    splits.extend(std::iter::repeat_n(Split::Validation, validation));
    splits.extend(std::iter::repeat_n(Split::Test, test));
    if n == 0 {
        return Err(DataError::Invalid("phantom dataset must not be empty".into()));
    }
    Dataset::new(Tensor::stack(&images)?, Targets::Masks(Tensor::stack(&masks)?), splits)
}

/// Rigid transform about the image centre: rotation by `angle_deg`
/// (counter-clockwise) followed by a shift of `dx` columns right and `dy`
/// rows down.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub dx: f64,
    pub dy: f64,
    pub angle_deg: f64,
}

impl Transform {
    pub const MAX_SHIFT: f64 = 5.0;
    pub const MAX_ANGLE: f64 = 10.0;

    pub fn sample(rng: &mut impl Rng) -> Self {
        Transform {
            dx: rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            dy: rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            angle_deg: rng.random_range(-Self::MAX_ANGLE..=Self::MAX_ANGLE),
        }
    }

    /// Source position (row, col) of output pixel (r, c).
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (x, y) = (c as f64 - self.dx - cx, cy - (r as f64 - self.dy));
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        let (sx, sy) = (co * x + s * y, -s * x + co * y);
        (cy - sy, sx + cx)
    }

    /// Bilinear resampling with zero outside the grid, clamped to `[0, 1]`.
    pub fn apply_image<T: Real>(&self, img: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let at = |r: i64, c: i64| {
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                0.0
            } else {
                img.data()[r as usize * w + c as usize].as_f64()
            }
        };
        Tensor::from_fn(&[h, w], |i| {
            let (sr, sc) = self.source(i / w, i % w, h, w);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as i64, c0 as i64);
            let v = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
                + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
            T::of(v.clamp(0.0, 1.0))
        })
    }

    /// Nearest-neighbour resampling, so binary masks stay binary.
    pub fn apply_mask<T: Real>(&self, mask: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        Tensor::from_fn(&[h, w], |i| {
            let (sr, sc) = self.source(i / w, i % w, h, w);
            let (r, c) = (sr.round(), sc.round());
            if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                T::zero()
            } else {
                mask.data()[r as usize * w + c as usize]
            }
        })
    }
}

/// Applies one random transform to an image and its mask.
pub fn augment<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    if image.shape() != mask.shape() || image.rank() != 2 {
        return Err(DataError::Invalid(format!("image {:?} and mask {:?} must be equal [H, W]", image.shape(), mask.shape())));
    }
    let t = Transform::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((t.apply_image(image), t.apply_mask(mask)))
}

/// SplitMix64 finaliser of `seed` combined with `index`.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How data is generated from `A x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Noiseless,
    Poisson(PoissonModel),
    Gaussian(GaussianModel),
}

/// Supervised triplets `(x_i, y_i, z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch<T: Real> {
    /// Dataset indices of the images.
    pub indices: Vec<usize>,
    /// Per-sample draw numbers; `(index, draw)` regenerates a triplet.
    pub draws: Vec<u64>,
    pub images: Tensor<T>,
    /// Measured data `[B, A, L]`: counts for Poisson, line integrals otherwise.
    pub data: Tensor<T>,
    /// Line integrals fed to reconstruction `[B, A, L]`.
    pub line_integrals: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Real> TripletBatch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One regenerated triplet.
pub struct Triplet<T: Real> {
    pub image: Tensor<T>,
    pub data: Tensor<T>,
    pub line_integrals: Tensor<T>,
    pub mask: Option<Tensor<T>>,
}

/// Endless seeded stream of triplet batches over one split. Every epoch
/// visits the split in a fresh seeded order; noise (and augmentation, if
/// enabled) is drawn per sample from `(seed, draw)`.
pub struct TripletStream<'a, T: Real> {
    dataset: &'a Dataset<T>,
    pool: Vec<usize>,
    ray: RayTransform,
    noise: NoiseModel,
    augment: bool,
    seed: u64,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    draw: u64,
}

impl<'a, T: Real> TripletStream<'a, T> {
    pub fn new(
        dataset: &'a Dataset<T>,
        split: Split,
        geom: &Geometry,
        noise: NoiseModel,
        augment: bool,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if dataset.image_size() != geom.image_size() {
            return Err(DataError::Invalid(format!(
                "dataset images {:?} do not match geometry {:?}",
                dataset.image_size(),
                geom.image_size()
            )));
        }
        if augment && !matches!(dataset.targets(), Targets::Masks(_)) {
            return Err(DataError::Invalid("augmentation is only defined for image/mask datasets".into()));
        }
        let pool = dataset.indices(split);
        if pool.is_empty() || batch_size == 0 {
            return Err(DataError::Invalid(format!("empty {split:?} split or zero batch size")));
        }
        Ok(TripletStream {
            dataset,
            pool,
            ray: RayTransform::new(geom.clone()),
            noise,
            augment,
            seed,
            batch_size,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            draw: 0,
        })
    }

    /// Uses an existing ray transform (sharing its cached weights).
    pub fn with_ray(mut self, ray: RayTransform) -> Self {
        self.ray = ray;
        self
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed ^ 0x5EED, self.epoch)));
            self.epoch += 1;
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Regenerates the triplet for dataset image `index` at draw `draw`.
    pub fn triplet(&self, index: usize, draw: u64) -> Result<Triplet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, draw));
        let mut image = self.dataset.image(index);
        let mut mask = match self.dataset.targets() {
            Targets::Masks(m) => Some(m.outer(index)),
            Targets::Labels(_) => None,
        };
        if self.augment {
            let t = Transform::sample(&mut rng);
            image = t.apply_image(&image);
            mask = mask.map(|m| t.apply_mask(&m));
        }
        let geom = self.ray.geometry();
        let shape = geom.sinogram_shape();
        let mut clean = vec![T::zero(); shape[0] * shape[1]];
        self.ray.forward(image.data(), 1, &mut clean);
        let (data, lin) = match self.noise {
            NoiseModel::Noiseless => (clean.clone(), clean),
            NoiseModel::Gaussian(g) => {
                let noisy = g.sample(&clean, &mut rng);
                (noisy.clone(), noisy)
            }
            NoiseModel::Poisson(p) => {
                let counts = p.sample(&clean, &mut rng)?;
                let lin = p.log_transform(&counts);
                (counts, lin)
            }
        };
        Ok(Triplet {
            image,
            data: Tensor::new(&shape, data)?,
            line_integrals: Tensor::new(&shape, lin)?,
            mask,
        })
    }

    pub fn next_batch(&mut self) -> Result<TripletBatch<T>> {
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut draws = Vec::with_capacity(self.batch_size);
        let (mut images, mut data, mut lin, mut masks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.batch_size {
            let index = self.next_index();
            let draw = self.draw;
            self.draw += 1;
            let t = self.triplet(index, draw)?;
            indices.push(index);
            draws.push(draw);
            images.push(t.image);
            data.push(t.data);
            lin.push(t.line_integrals);
            if let Some(m) = t.mask {
                masks.push(m);
            }
        }
        let targets = match self.dataset.targets() {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Masks(_) => Targets::Masks(Tensor::stack(&masks)?),
        };
        Ok(TripletBatch {
            indices,
            draws,
            images: Tensor::stack(&images)?,
            data: Tensor::stack(&data)?,
            line_integrals: Tensor::stack(&lin)?,
            targets,
        })
    }
}

/// Fixed evaluation triplets: the first `limit` images of `split`, each with
/// one noise draw from `seed`.
pub fn evaluation_batches<T: Real>(
    dataset: &Dataset<T>,
    split: Split,
    geom: &Geometry,
    noise: NoiseModel,
    batch_size: usize,
    limit: Option<usize>,
    seed: u64,
) -> Result<Vec<TripletBatch<T>>> {
    let stream = TripletStream::new(dataset, split, geom, noise, false, batch_size, seed)?;
    let mut pool = dataset.indices(split);
    if let Some(l) = limit {
        pool.truncate(l);
    }
    let mut out = Vec::new();
    for chunk in pool.chunks(batch_size) {
        let (mut images, mut data, mut lin) = (Vec::new(), Vec::new(), Vec::new());
        let draws: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        for (&i, &d) in chunk.iter().zip(&draws) {
            let t = stream.triplet(i, d)?;
            images.push(t.image);
            data.push(t.data);
            lin.push(t.line_integrals);
        }
        out.push(TripletBatch {
            indices: chunk.to_vec(),
            draws,
            images: Tensor::stack(&images)?,
            data: Tensor::stack(&data)?,
            line_integrals: Tensor::stack(&lin)?,
            targets: dataset.targets().select(chunk)?,
        });
    }
    Ok(out)
}
