use std::sync::{Arc, OnceLock};

use super::Geometry;
use crate::real::Real;
use crate::tape::LinearOp;

/// Ray-driven discretisation of the parallel-beam ray transform.
///
/// Each ray is sampled at equispaced points (spacing [`RayTransform::step`])
/// on a global grid along the ray; the image is bilinearly interpolated at
/// every sample and the samples are summed times the step length. Pixels
/// outside the grid are zero. [`LinearOp::apply_adjoint`] visits exactly the
/// same weights in scatter form, so it is the exact transpose.
///
/// The merged per-ray weights are built on first use and cached as a sparse
/// row matrix.
#[derive(Debug, Clone)]
pub struct RayTransform {
    geom: Arc<Geometry>,
    step: f64,
    trig: Vec<(f64, f64)>,
    reach: f64,
    matrix: Arc<OnceLock<SparseRows>>,
}

#[derive(Debug)]
struct SparseRows {
    starts: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl RayTransform {
    /// Sampling step of half a pixel.
    pub fn new(geom: Geometry) -> Self {
        let step = 0.5 * geom.pixel_spacing();
        Self::with_step(geom, step)
    }

    pub fn with_step(geom: Geometry, step: f64) -> Self {
        let (h, w) = geom.image_size();
        let ps = geom.pixel_spacing();
        let reach = 0.5 * ((h * h + w * w) as f64).sqrt() * ps + 2.0 * ps;
        let trig = geom.angles().iter().map(|a| (a.cos(), a.sin())).collect();
        RayTransform { geom: Arc::new(geom), step, trig, reach, matrix: Arc::new(OnceLock::new()) }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Calls `f(pixel_index, weight)` for every non-zero interpolation weight
    /// of ray `(angle, line)`. Weights of one sample may hit the same pixel as
    /// neighbouring samples; callers accumulate.
    pub fn for_each_weight(&self, angle: usize, line: usize, mut f: impl FnMut(usize, f64)) {
        let (h, w) = self.geom.image_size();
        let ps = self.geom.pixel_spacing();
        let (c, s) = self.trig[angle];
        let offset = self.geom.offset(line);
        // point(t) = offset * (c, s) + t * (-s, c)
        let (px, py) = (offset * c, offset * s);
        let (dx, dy) = (-s, c);
        // slab clip against the grid enlarged by one pixel
        let hx = (w as f64 / 2.0 + 1.0) * ps;
        let hy = (h as f64 / 2.0 + 1.0) * ps;
        let (mut t0, mut t1) = (-self.reach, self.reach);
        for (p, d, half) in [(px, dx, hx), (py, dy, hy)] {
            if d.abs() < 1e-12 {
                if p.abs() > half {
                    return;
                }
            } else {
                let (a, b) = ((-half - p) / d, (half - p) / d);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t0 > t1 {
            return;
        }
        let m0 = ((t0 + self.reach) / self.step).ceil() as i64;
        let m1 = ((t1 + self.reach) / self.step).floor() as i64;
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        for m in m0..=m1 {
            let t = -self.reach + m as f64 * self.step;
            let u = (px + t * dx) / ps + cx;
            let v = cy - (py + t * dy) / ps;
            let (j0, i0) = (u.floor(), v.floor());
            let (fu, fv) = (u - j0, v - i0);
            let (j0, i0) = (j0 as i64, i0 as i64);
            for (di, wi) in [(0, 1.0 - fv), (1, fv)] {
                let i = i0 + di;
                if i < 0 || i >= h as i64 || wi == 0.0 {
                    continue;
                }
                for (dj, wj) in [(0, 1.0 - fu), (1, fu)] {
                    let j = j0 + dj;
                    if j < 0 || j >= w as i64 || wj == 0.0 {
                        continue;
                    }
                    f(i as usize * w + j as usize, self.step * wi * wj);
                }
            }
        }
    }

    fn matrix(&self) -> &SparseRows {
        self.matrix.get_or_init(|| {
            let (na, nl) = (self.geom.num_angles(), self.geom.num_lines());
            let mut starts = vec![0];
            let (mut cols, mut weights) = (Vec::new(), Vec::new());
            let mut buf: Vec<(usize, f64)> = Vec::new();
            for a in 0..na {
                for l in 0..nl {
                    buf.clear();
                    self.for_each_weight(a, l, |i, wt| buf.push((i, wt)));
                    buf.sort_by_key(|&(i, _)| i);
                    let mut k = 0;
                    while k < buf.len() {
                        let (i, mut wt) = buf[k];
                        k += 1;
                        while k < buf.len() && buf[k].0 == i {
                            wt += buf[k].1;
                            k += 1;
                        }
                        cols.push(i as u32);
                        weights.push(wt);
                    }
                    starts.push(cols.len());
                }
            }
            SparseRows { starts, cols, weights }
        })
    }

    /// Non-zero weights of ray `(angle, line)` as `(pixel_index, weight)`,
    /// one entry per pixel.
    pub fn ray_weights(&self, angle: usize, line: usize) -> Vec<(usize, f64)> {
        let m = self.matrix();
        let r = angle * self.geom.num_lines() + line;
        let span = m.starts[r]..m.starts[r + 1];
        m.cols[span.clone()].iter().zip(&m.weights[span]).map(|(&i, &w)| (i as usize, w)).collect()
    }

    /// Ray transform of `batch` images stored contiguously.
    pub fn forward<T: Real>(&self, x: &[T], batch: usize, out: &mut [T]) {
        let (h, w) = self.geom.image_size();
        let (isz, osz) = (h * w, self.geom.num_angles() * self.geom.num_lines());
        assert_eq!(x.len(), batch * isz);
        assert_eq!(out.len(), batch * osz);
        let m = self.matrix();
        for b in 0..batch {
            let img = &x[b * isz..(b + 1) * isz];
            for (ray, o) in out[b * osz..(b + 1) * osz].iter_mut().enumerate() {
                let span = m.starts[ray]..m.starts[ray + 1];
                let acc: f64 = m.cols[span.clone()]
                    .iter()
                    .zip(&m.weights[span])
                    .map(|(&i, &wt)| wt * img[i as usize].as_f64())
                    .sum();
                *o = T::of(acc);
            }
        }
    }

    /// Back-projection; the exact transpose of [`RayTransform::forward`].
    pub fn adjoint<T: Real>(&self, y: &[T], batch: usize, out: &mut [T]) {
        let (h, w) = self.geom.image_size();
        let (isz, osz) = (h * w, self.geom.num_angles() * self.geom.num_lines());
        assert_eq!(y.len(), batch * osz);
        assert_eq!(out.len(), batch * isz);
        let m = self.matrix();
        let mut acc = vec![0.0f64; isz];
        for b in 0..batch {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (ray, &v) in y[b * osz..(b + 1) * osz].iter().enumerate() {
                let v = v.as_f64();
                if v == 0.0 {
                    continue;
                }
                let span = m.starts[ray]..m.starts[ray + 1];
                for (&i, &wt) in m.cols[span.clone()].iter().zip(&m.weights[span]) {
                    acc[i as usize] += wt * v;
                }
            }
            for (o, &a) in out[b * isz..(b + 1) * isz].iter_mut().zip(&acc) {
                *o = T::of(a);
            }
        }
    }

    /// Largest singular value estimated by power iteration on `A* A`
    /// (deterministic start vector of ones).
    pub fn operator_norm(&self, iterations: usize) -> f64 {
        let (h, w) = self.geom.image_size();
        let [na, nl] = self.geom.sinogram_shape();
        let mut x = vec![1.0f64; h * w];
        let mut y = vec![0.0f64; na * nl];
        let mut norm = 0.0;
        for _ in 0..iterations.max(1) {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= nx);
            self.forward(&x, 1, &mut y);
            self.adjoint(&y, 1, &mut x);
            norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().sqrt();
        }
        norm
    }
}

impl<T: Real> LinearOp<T> for RayTransform {
    fn name(&self) -> &str {
        "ray transform"
    }

    fn in_shape(&self) -> Vec<usize> {
        self.geom.image_shape().to_vec()
    }

    fn out_shape(&self) -> Vec<usize> {
        self.geom.sinogram_shape().to_vec()
    }

    fn apply(&self, x: &[T], batch: usize, out: &mut [T]) {
        self.forward(x, batch, out);
    }

    fn apply_adjoint(&self, y: &[T], batch: usize, out: &mut [T]) {
        self.adjoint(y, batch, out);
    }
}
