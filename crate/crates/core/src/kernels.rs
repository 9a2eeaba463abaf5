//! Raw array kernels behind the differentiable ops. Shapes are validated by
//! the callers in [`crate::tape`].

use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let p = ho * wo;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut cols[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = oy as isize + i as isize - d.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + j as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let p = ho * wo;
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &cols[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = oy as isize + i as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = ox as isize + j as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding and unit stride.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], d: &ConvDims) -> Vec<T> {
    let (patch, p) = (d.patch(), d.pixels());
    let mut out = vec![T::zero(); d.n * d.f * p];
    let mut cols = vec![T::zero(); patch * p];
    let in_stride = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(&x[n * in_stride..(n + 1) * in_stride], d, &mut cols);
        T::gemm(
            d.f,
            patch,
            p,
            T::one(),
            (k, patch as isize, 1),
            (&cols, p as isize, 1),
            T::zero(),
            (&mut out[n * d.f * p..(n + 1) * d.f * p], p as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dk)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    gout: &[T],
    d: &ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, p) = (d.patch(), d.pixels());
    let in_stride = d.c * d.h * d.w;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    let mut cols = vec![T::zero(); patch * p];
    for n in 0..d.n {
        let g = &gout[n * d.f * p..(n + 1) * d.f * p];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * in_stride..(n + 1) * in_stride], d, &mut cols);
            // dk += g * cols^T
            T::gemm(
                d.f,
                p,
                patch,
                T::one(),
                (g, p as isize, 1),
                (&cols, 1, p as isize),
                T::one(),
                (dk, patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = k^T * g
            T::gemm(
                patch,
                d.f,
                p,
                T::one(),
                (k, 1, patch as isize),
                (g, p as isize, 1),
                T::zero(),
                (&mut cols, p as isize, 1),
            );
            col2im_add(&cols, d, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (dx, dk)
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Returns the pooled values and the flat input index of each maximum
/// (first maximum in row-major window order on ties).
pub(crate) fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling of `planes` images of size `h x w`.
pub(crate) fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                out[pl * ho * wo + oy * wo + ox] = x[pl * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                out[pl * h * w + (oy / 2) * w + ox / 2] += g[pl * ho * wo + oy * wo + ox];
            }
        }
    }
    out
}

/// Row-wise softmax of a `rows x cols` matrix, shifted by the row maximum.
pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
