//! Raw forward/backward kernels on flat buffers. Shape validation happens
//! in [`crate::autodiff`]; these functions assume consistent sizes.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. `weight` is `cout × cin × kh × kw`.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    out.par_chunks_mut(g.cout * p).enumerate().for_each(|(n, out_n)| {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        let owned;
        let col: &[T] = if g.is_pointwise() {
            x_n
        } else {
            let mut buf = vec![T::zero(); k * p];
            im2col(g, x_n, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(g.cout, k, p, T::one(), weight, k as isize, 1, col, p as isize, 1, T::zero(), out_n, p as isize, 1);
        if let Some(b) = bias {
            for (co, row) in out_n.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut dweight = vec![T::zero(); g.cout * k];
    let mut dbias = vec![T::zero(); g.cout];
    let mut dx = if need_dx { Some(vec![T::zero(); g.n * in_len]) } else { None };
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if need_dx && !g.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };

    for n in 0..g.n {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        let dout_n = &dout[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in dout_n.chunks(p).enumerate() {
            let s = row.iter().fold(0.0f64, |acc, &v| acc + v.as_f64());
            dbias[co] += T::from_f64_lossy(s);
        }
        let col_ref: &[T] = if g.is_pointwise() {
            x_n
        } else {
            im2col(g, x_n, &mut col);
            &col
        };
        // dW += dout_n · colᵀ
        T::gemm(g.cout, p, k, T::one(), dout_n, p as isize, 1, col_ref, 1, p as isize, T::one(), &mut dweight, k as isize, 1);
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                // dx_n = Wᵀ · dout_n
                T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, dout_n, p as isize, 1, T::zero(), dx_n, p as isize, 1);
            } else {
                T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, dout_n, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
                col2im(g, &dcol, dx_n);
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2×2/stride-2 max pooling. Returns the output and, per output element,
/// the flat input index that won (first in row-major order on ties).
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wo = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = src[(2 * y) * wo + 2 * x];
                let b = src[(2 * y) * wo + 2 * x + 1];
                let c = src[(2 * y + 1) * wo + 2 * x];
                let d = src[(2 * y + 1) * wo + 2 * x + 1];
                dst[y * w + x] = (a + b) + (c + d);
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            ss += x[base..base + hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}
