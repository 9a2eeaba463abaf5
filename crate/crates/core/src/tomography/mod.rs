//! Parallel-beam tomography: forward model, adjoint, FBP and data models.

mod fbp;
mod geometry;
mod noise;
mod projector;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use fbp::{Fbp, FbpFilter};
pub use geometry::Geometry;
pub use noise::{GaussianModel, PoissonModel, COUNT_FLOOR, MNIST_ATTENUATION};
pub use projector::RayTransform;

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TomoError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("noise model: {0}")]
    Noise(String),
}

/// Data on the `[num_angles, num_lines]` detector grid of a geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T: Real> {
    data: Tensor<T>,
    geometry: Geometry,
}

impl<T: Real> Sinogram<T> {
    pub fn new(data: Tensor<T>, geometry: &Geometry) -> Result<Self, TomoError> {
        let expect = geometry.sinogram_shape();
        if data.shape() != expect {
            return Err(TomoError::Shape(format!("sinogram {:?} vs geometry {expect:?}", data.shape())));
        }
        Ok(Sinogram { data, geometry: geometry.clone() })
    }

    pub fn zeros(geometry: &Geometry) -> Self {
        Sinogram { data: Tensor::zeros(&geometry.sinogram_shape()), geometry: geometry.clone() }
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// One `angle,line,value` row per bin.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "angle,line,value")?;
        let nl = self.geometry.num_lines();
        for (i, v) in self.data.data().iter().enumerate() {
            writeln!(f, "{},{},{}", i / nl, i % nl, v)?;
        }
        Ok(())
    }
}

fn check_image<T: Real>(image: &Tensor<T>, geom: &Geometry) -> Result<(), TomoError> {
    if image.shape() != geom.image_shape() {
        return Err(TomoError::Shape(format!("image {:?} vs geometry {:?}", image.shape(), geom.image_shape())));
    }
    if !image.all_finite() {
        return Err(TomoError::Shape("image contains non-finite values".into()));
    }
    Ok(())
}

/// Discretised line integrals of `image` along every ray of `geom`.
pub fn ray_transform<T: Real>(image: &Tensor<T>, geom: &Geometry) -> Result<Sinogram<T>, TomoError> {
    check_image(image, geom)?;
    let op = RayTransform::new(geom.clone());
    let mut out = vec![T::zero(); geom.num_angles() * geom.num_lines()];
    op.forward(image.data(), 1, &mut out);
    Sinogram::new(Tensor::new(&geom.sinogram_shape(), out).expect("shape"), geom)
}

/// Exact adjoint (back-projection) of [`ray_transform`].
pub fn adjoint<T: Real>(sino: &Sinogram<T>) -> Tensor<T> {
    let geom = sino.geometry();
    let op = RayTransform::new(geom.clone());
    let mut out = vec![T::zero(); geom.image_shape().iter().product()];
    op.adjoint(sino.data().data(), 1, &mut out);
    Tensor::new(&geom.image_shape(), out).expect("shape")
}

pub fn fbp<T: Real>(sino: &Sinogram<T>, filter: FbpFilter) -> Tensor<T> {
    let geom = sino.geometry();
    let img = Fbp::new(geom, filter).reconstruct(sino.data().data()).expect("sinogram matches its geometry");
    Tensor::new(&geom.image_shape(), img).expect("shape")
}

/// Photon counts `Poisson(photons * exp(-mu * A x))` with the MNIST
/// attenuation scale.
pub fn poisson_data<T: Real>(
    image: &Tensor<T>,
    geom: &Geometry,
    photons_per_line: f64,
    seed: u64,
) -> Result<Sinogram<T>, TomoError> {
    let model = PoissonModel::new(photons_per_line, MNIST_ATTENUATION)?;
    let clean = ray_transform(image, geom)?;
    let counts = model.sample(clean.data().data(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Sinogram::new(Tensor::new(&geom.sinogram_shape(), counts).expect("shape"), geom)
}

/// `A x + e` with `e ~ N(0, (level * mean|A x|)^2)` i.i.d.
pub fn gaussian_data<T: Real>(image: &Tensor<T>, geom: &Geometry, noise_level: f64, seed: u64) -> Result<Sinogram<T>, TomoError> {
    let model = GaussianModel::new(noise_level)?;
    let clean = ray_transform(image, geom)?;
    let noisy = model.sample(clean.data().data(), &mut ChaCha8Rng::seed_from_u64(seed));
    Sinogram::new(Tensor::new(&geom.sinogram_shape(), noisy).expect("shape"), geom)
}

/// Inverts Beer-Lambert on counts from [`poisson_data`].
pub fn log_transform<T: Real>(counts: &Sinogram<T>, photons_per_line: f64) -> Result<Sinogram<T>, TomoError> {
    let model = PoissonModel::new(photons_per_line, MNIST_ATTENUATION)?;
    let data = model.log_transform(counts.data().data());
    Sinogram::new(Tensor::new(counts.data().shape(), data).expect("shape"), counts.geometry())
}

/// Disc of radius `radius` (physical units) centred at the origin,
/// anti-aliased by 4 x 4 supersampling.
pub fn disc_phantom<T: Real>(geom: &Geometry, radius: f64, value: f64) -> Tensor<T> {
    let (h, w) = geom.image_size();
    let ps = geom.pixel_spacing();
    Tensor::from_fn(&[h, w], |idx| {
        let (x, y) = geom.pixel_center(idx / w, idx % w);
        let mut inside = 0;
        for a in 0..4 {
            for b in 0..4 {
                let sx = x + (a as f64 - 1.5) / 4.0 * ps;
                let sy = y + (b as f64 - 1.5) / 4.0 * ps;
                if sx * sx + sy * sy <= radius * radius {
                    inside += 1;
                }
            }
        }
        T::of(value * inside as f64 / 16.0)
    })
}

/// Isotropic Gaussian bump `exp(-r^2 / (2 sigma^2))` centred at the origin.
pub fn gaussian_phantom<T: Real>(geom: &Geometry, sigma: f64) -> Tensor<T> {
    let (h, w) = geom.image_size();
    Tensor::from_fn(&[h, w], |idx| {
        let (x, y) = geom.pixel_center(idx / w, idx % w);
        T::of((-(x * x + y * y) / (2.0 * sigma * sigma)).exp())
    })
}
