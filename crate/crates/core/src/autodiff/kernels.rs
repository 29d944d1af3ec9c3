//! Raw numeric kernels shared by the tape ops: GEMM, im2col/col2im,
//! convolution, transposed convolution and max pooling.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

/// `c = a · b` (or `c += a · b` when `accumulate`). `a_rows × a_cols` and
/// `b_rows × b_cols` describe the stored row-major layouts; the transpose
/// flags select which logical operand is used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f32],
    (a_rows, a_cols): (usize, usize),
    trans_a: bool,
    b: &[f32],
    (b_rows, b_cols): (usize, usize),
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs layout");
    let b = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs layout");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let (m, n) = (a.nrows(), b.ncols());
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm output layout");
    let beta = if accumulate { 1.0 } else { 0.0 };
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Sliding-window geometry: a `channels × in_h × in_w` image scanned by a
/// `k × k` window with the given stride and zero padding, giving
/// `out_h × out_w` window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `img` (`channels × in_h × in_w`) into a
    /// `(channels·k·k) × (out_h·out_w)` matrix.
    pub fn im2col(&self, img: &[f32], col: &mut [f32]) {
        let cols = self.col_cols();
        debug_assert_eq!(col.len(), self.col_rows() * cols);
        let k = self.k;
        for c in 0..self.channels {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds `col` back into `img`.
    pub fn col2im(&self, col: &[f32], img: &mut [f32]) {
        let cols = self.col_cols();
        let k = self.k;
        for c in 0..self.channels {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a (possibly grouped) 2-D convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    /// Window over one group's input channels.
    pub window: Window,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    pub fn in_plane(&self) -> usize {
        self.window.in_h * self.window.in_w
    }
    pub fn out_plane(&self) -> usize {
        self.window.out_h * self.window.out_w
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let in_sample = g.c_in * g.in_plane();
    let out_sample = g.c_out * g.out_plane();
    let kk = g.window.k * g.window.k;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * kk;
    let cols = g.out_plane();
    let mut out = vec![0.0f32; g.batch * out_sample];
    out.par_chunks_mut(out_sample)
        .zip(x.par_chunks(in_sample))
        .for_each(|(y, xs)| {
            let mut col = vec![0.0f32; rows * cols];
            for grp in 0..g.groups {
                let xg = &xs[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                g.window.im2col(xg, &mut col);
                let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                let yg = &mut y[grp * cout_g * cols..(grp + 1) * cout_g * cols];
                gemm(wg, (cout_g, rows), false, &col, (rows, cols), false, yg, false);
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(cols).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for a grouped convolution.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let in_sample = g.c_in * g.in_plane();
    let out_sample = g.c_out * g.out_plane();
    let kk = g.window.k * g.window.k;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * kk;
    let cols = g.out_plane();

    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = x
        .par_chunks(in_sample)
        .zip(dy.par_chunks(out_sample))
        .map(|(xs, dys)| {
            let mut col = vec![0.0f32; rows * cols];
            let mut dcol = vec![0.0f32; rows * cols];
            let mut dw = vec![0.0f32; w.len()];
            let mut dx = if need_dx { vec![0.0f32; in_sample] } else { Vec::new() };
            for grp in 0..g.groups {
                let xg = &xs[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                g.window.im2col(xg, &mut col);
                let dyg = &dys[grp * cout_g * cols..(grp + 1) * cout_g * cols];
                let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                gemm(dyg, (cout_g, cols), false, &col, (rows, cols), true, dwg, false);
                if need_dx {
                    let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                    gemm(wg, (cout_g, rows), true, dyg, (cout_g, cols), false, &mut dcol, false);
                    let dxg = &mut dx[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
                    g.window.col2im(&dcol, dxg);
                }
            }
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.c_out];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_sample));
    for (sample, (dxs, dws)) in per_sample.into_iter().enumerate() {
        for (a, b) in dw.iter_mut().zip(&dws) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dxs);
        }
        let dys = &dy[sample * out_sample..(sample + 1) * out_sample];
        for (co, plane) in dys.chunks(cols).enumerate() {
            db[co] += plane.iter().sum::<f32>();
        }
    }
    (dx, dw, db)
}

/// Geometry of a transposed convolution: `window` describes the adjoint
/// convolution that maps the (larger) output back onto the input grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeconvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub window: Window,
}

impl DeconvGeom {
    fn in_plane(&self) -> usize {
        self.window.out_h * self.window.out_w
    }
    fn out_plane(&self) -> usize {
        self.window.in_h * self.window.in_w
    }
}

/// Weight layout is `c_in × c_out × k × k`.
pub(crate) fn conv_transpose2d_forward(g: &DeconvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let kk = g.window.k * g.window.k;
    let rows = g.c_out * kk;
    let cols = g.in_plane();
    let in_sample = g.c_in * cols;
    let out_sample = g.c_out * g.out_plane();
    let mut out = vec![0.0f32; g.batch * out_sample];
    out.par_chunks_mut(out_sample)
        .zip(x.par_chunks(in_sample))
        .for_each(|(y, xs)| {
            let mut col = vec![0.0f32; rows * cols];
            gemm(w, (g.c_in, rows), true, xs, (g.c_in, cols), false, &mut col, false);
            g.window.col2im(&col, y);
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(g.out_plane()).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &DeconvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let kk = g.window.k * g.window.k;
    let rows = g.c_out * kk;
    let cols = g.in_plane();
    let in_sample = g.c_in * cols;
    let out_sample = g.c_out * g.out_plane();

    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = x
        .par_chunks(in_sample)
        .zip(dy.par_chunks(out_sample))
        .map(|(xs, dys)| {
            let mut col = vec![0.0f32; rows * cols];
            g.window.im2col(dys, &mut col);
            let mut dw = vec![0.0f32; w.len()];
            gemm(xs, (g.c_in, cols), false, &col, (rows, cols), true, &mut dw, false);
            let mut dx = Vec::new();
            if need_dx {
                dx = vec![0.0f32; in_sample];
                gemm(w, (g.c_in, rows), false, &col, (rows, cols), false, &mut dx, false);
            }
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.c_out];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_sample));
    for (sample, (dxs, dws)) in per_sample.into_iter().enumerate() {
        for (a, b) in dw.iter_mut().zip(&dws) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dxs);
        }
        let dys = &dy[sample * out_sample..(sample + 1) * out_sample];
        for (co, plane) in dys.chunks(g.out_plane()).enumerate() {
            db[co] += plane.iter().sum::<f32>();
        }
    }
    (dx, dw, db)
}

/// 2×2 / stride-2 max pooling over `planes` planes of `h × w`.
/// Returns the pooled values and, per output element, the flat input index
/// of the first (row-major) maximum.
pub(crate) fn maxpool2x2_forward(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}
