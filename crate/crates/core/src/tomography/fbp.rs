use std::f64::consts::PI;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Geometry, TomoError};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FbpFilter {
    RamLak,
    #[default]
    Hann,
}

impl FromStr for FbpFilter {
    type Err = TomoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ram-lak" | "ramlak" => Ok(FbpFilter::RamLak),
            "hann" => Ok(FbpFilter::Hann),
            other => Err(TomoError::Geometry(format!("unknown FBP filter {other:?}"))),
        }
    }
}

/// Filtered back-projection for one geometry. The ramp filter is the
/// band-limited spatial kernel `h(0) = 1/(4 d^2)`, `h(n odd) = -1/(n pi d)^2`
/// (`d` the detector spacing) applied by zero-padded FFT; the Hann variant
/// multiplies its response by `0.5 (1 + cos(2 pi nu))`, `nu` in cycles per bin.
/// Back-projection is pixel driven with linear interpolation across bins.
pub struct Fbp {
    geom: Geometry,
    filter: FbpFilter,
    padded: usize,
    response: Vec<f64>,
}

impl Fbp {
    pub fn new(geom: &Geometry, filter: FbpFilter) -> Self {
        let nl = geom.num_lines();
        let padded = (2 * nl).next_power_of_two();
        let d = geom.detector_spacing();
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        for (idx, k) in kernel.iter_mut().enumerate() {
            let n = if idx <= padded / 2 { idx as i64 } else { idx as i64 - padded as i64 };
            let v = if n == 0 {
                1.0 / (4.0 * d * d)
            } else if n % 2 != 0 {
                -1.0 / ((n as f64 * PI * d).powi(2))
            } else {
                0.0
            };
            *k = Complex::new(v, 0.0);
        }
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(padded).process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let nu = if idx <= padded / 2 { idx as f64 } else { idx as f64 - padded as f64 } / padded as f64;
                let window = match filter {
                    FbpFilter::RamLak => 1.0,
                    FbpFilter::Hann => 0.5 * (1.0 + (2.0 * PI * nu).cos()),
                };
                // the factor d turns the discrete convolution into a quadrature
                c.re * window * d
            })
            .collect();
        Fbp { geom: geom.clone(), filter, padded, response }
    }

    pub fn filter(&self) -> FbpFilter {
        self.filter
    }

    /// Ramp-filters every angle row of a `[num_angles, num_lines]` sinogram.
    pub fn filter_rows(&self, sino: &[f64]) -> Vec<f64> {
        let nl = self.geom.num_lines();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(self.padded);
        let inv = planner.plan_fft_inverse(self.padded);
        let mut out = vec![0.0; sino.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (row, dst) in sino.chunks(nl).zip(out.chunks_mut(nl)) {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &v) in buf.iter_mut().zip(row) {
                b.re = v;
            }
            fwd.process(&mut buf);
            for (b, &r) in buf.iter_mut().zip(&self.response) {
                *b *= r;
            }
            inv.process(&mut buf);
            for (d, b) in dst.iter_mut().zip(&buf) {
                *d = b.re / self.padded as f64;
            }
        }
        out
    }

    /// Reconstructs one image from a `[num_angles, num_lines]` sinogram of
    /// line integrals.
    pub fn reconstruct<T: Real>(&self, sino: &[T]) -> Result<Vec<T>, TomoError> {
        let [na, nl] = self.geom.sinogram_shape();
        if sino.len() != na * nl {
            return Err(TomoError::Shape(format!(
                "sinogram has {} values, geometry expects {na} x {nl}",
                sino.len()
            )));
        }
        let q = self.filter_rows(&sino.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        let (h, w) = self.geom.image_size();
        let ds = self.geom.detector_spacing();
        let centre = (nl as f64 - 1.0) / 2.0;
        let trig: Vec<(f64, f64)> = self.geom.angles().iter().map(|a| (a.cos(), a.sin())).collect();
        let scale = PI / na as f64;
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = self.geom.pixel_center(r, c);
                let mut acc = 0.0;
                for (a, &(ca, sa)) in trig.iter().enumerate() {
                    let u = (x * ca + y * sa) / ds + centre;
                    let k0 = u.floor();
                    let f = u - k0;
                    let k0 = k0 as i64;
                    let row = &q[a * nl..(a + 1) * nl];
                    if k0 >= 0 && (k0 as usize) < nl {
                        acc += (1.0 - f) * row[k0 as usize];
                    }
                    if k0 + 1 >= 0 && ((k0 + 1) as usize) < nl {
                        acc += f * row[(k0 + 1) as usize];
                    }
                }
                out.push(T::of(acc * scale));
            }
        }
        Ok(out)
    }

    /// Reconstructs `batch` sinograms stored contiguously.
    pub fn reconstruct_batch<T: Real>(&self, sinos: &[T], batch: usize) -> Result<Vec<T>, TomoError> {
        let [na, nl] = self.geom.sinogram_shape();
        let mut out = Vec::new();
        for b in 0..batch {
            out.extend(self.reconstruct(&sinos[b * na * nl..(b + 1) * na * nl])?);
        }
        Ok(out)
    }
}
