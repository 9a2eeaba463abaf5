//! wasm-bindgen bindings behind `www/index.html`. Everything here is plain
//! Rust as well, so the native tests exercise the same code the page runs.

use tarecon::data::{generate_phantom, PhantomSpec};
use tarecon::theory::{check_corollary, check_sufficiency, random_model, CorollaryOutcome, NoiseCoupling};
use tarecon::tomography::{fbp, gaussian_data, log_transform, poisson_data, ray_transform, FbpFilter, Geometry, Sinogram};
use tarecon::Tensor;
use wasm_bindgen::prelude::*;

/// A phantom, its simulated data and the data-domain geometry.
#[wasm_bindgen]
pub struct Scan {
    geometry: Geometry,
    phantom: Tensor<f64>,
    mask: Tensor<f64>,
    /// Line integrals (log-transformed counts for Poisson noise).
    sinogram: Sinogram<f64>,
}

#[wasm_bindgen]
impl Scan {
    /// `noise` is `none`, `gaussian` (`level` relative to the clean
    /// sinogram's mean magnitude) or `poisson` (`level` photons per line).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, angles: usize, noise: &str, level: f64) -> Result<Scan, String> {
        if !(16..=256).contains(&size) {
            return Err(format!("size must be between 16 and 256, got {size}"));
        }
        let lines = ((size as f64) * std::f64::consts::SQRT_2).ceil() as usize | 1;
        let geometry = Geometry::parallel(angles, lines, (size, size)).map_err(|e| e.to_string())?;
        let spec = PhantomSpec { seed: seed as u64, size: (size, size), ..PhantomSpec::default() };
        let (phantom, mask) = generate_phantom::<f64>(&spec).map_err(|e| e.to_string())?;
        let seed = seed as u64 ^ 0x5eed;
        let sinogram = match noise {
            "none" => ray_transform(&phantom, &geometry),
            "gaussian" => gaussian_data(&phantom, &geometry, level, seed),
            "poisson" => poisson_data(&phantom, &geometry, level, seed).and_then(|c| log_transform(&c, level)),
            other => return Err(format!("unknown noise model {other:?}")),
        }
        .map_err(|e| e.to_string())?;
        Ok(Scan { geometry, phantom, mask, sinogram })
    }

    pub fn size(&self) -> usize {
        self.geometry.image_size().0
    }

    pub fn num_angles(&self) -> usize {
        self.geometry.num_angles()
    }

    pub fn num_lines(&self) -> usize {
        self.geometry.num_lines()
    }

    pub fn phantom(&self) -> Vec<f32> {
        to_f32(&self.phantom)
    }

    pub fn mask(&self) -> Vec<f32> {
        to_f32(&self.mask)
    }

    /// Row-major, one row per angle.
    pub fn sinogram(&self) -> Vec<f32> {
        to_f32(self.sinogram.data())
    }

    /// `hann` or `ram-lak`.
    pub fn reconstruct(&self, filter: &str) -> Result<Vec<f32>, String> {
        let filter: FbpFilter = filter.parse().map_err(|e: tarecon::tomography::TomoError| e.to_string())?;
        Ok(to_f32(&fbp(&self.sinogram, filter)))
    }

    /// Root mean squared difference between a reconstruction and the phantom.
    pub fn rmse(&self, recon: &[f32]) -> f64 {
        let sq: f64 = recon.iter().zip(self.phantom.data()).map(|(&r, &p)| (r as f64 - p).powi(2)).sum();
        (sq / self.phantom.len() as f64).sqrt()
    }
}

fn to_f32(t: &Tensor<f64>) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

/// Greyscale RGBA bytes for a canvas, `lo` black and `hi` white. When
/// `lo >= hi` the range of `values` is used.
#[wasm_bindgen]
pub fn to_rgba(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let (lo, hi) = if lo < hi {
        (lo, hi)
    } else {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f32::INFINITY, f32::min);
        let hi = finite.fold(f32::NEG_INFINITY, f32::max);
        if lo < hi { (lo, hi) } else { (lo, lo + 1.0) }
    };
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let g = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Sufficiency and corollary checks on one random finite model.
/// `coupling` is `independent`, `correlated` or `leaks_z`.
#[wasm_bindgen]
pub fn theory_check(seed: u32, coupling: &str) -> Result<String, String> {
    let coupling = match coupling {
        "independent" => NoiseCoupling::Independent,
        "correlated" => NoiseCoupling::CorrelatedWithX,
        "leaks_z" => NoiseCoupling::LeaksZ,
        other => return Err(format!("unknown coupling {other:?}")),
    };
    let m = random_model(seed as u64, coupling);
    let s = check_sufficiency(&m).map_err(|e| e.to_string())?;
    let corollary = match check_corollary(&m).map_err(|e| e.to_string())? {
        CorollaryOutcome::Holds { deviation } => format!("holds (deviation {deviation:.2e})"),
        CorollaryOutcome::Fails { deviation } => format!("fails (deviation {deviation:.2e})"),
        CorollaryOutcome::PreconditionFailed { which, deviation } => {
            format!("not applicable: {which} (deviation {deviation:.2e})")
        }
    };
    Ok(format!(
        "|X| = {}, |Y| = {}, |Z| = {}\nx independent of y - Πy given Πy: {} (deviation {:.2e})\nB(Πy) sufficient for x: {} (deviation {:.2e})\nequivalence holds: {}\ncorollary: {corollary}",
        m.nx,
        m.ny(),
        m.nz,
        s.independent(),
        s.independence_deviation,
        s.sufficient(),
        s.sufficiency_deviation,
        s.iff_holds(),
    ))
}
