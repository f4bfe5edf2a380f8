//! Raw forward/backward kernels. Shapes are validated by the graph layer.

use super::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = input.h + 2 * pad;
        let span_w = input.w + 2 * pad;
        if stride == 0 || k == 0 || span_h < k || span_w < k {
            return None;
        }
        Some(ConvGeometry {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            k,
            stride,
            pad,
            out_h: (span_h - k) / stride + 1,
            out_w: (span_w - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Pointwise convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride - pad + kx` lies inside the row.
fn valid_span(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    // ix >= 0  <=>  ox * s >= p - kx
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // ix < in_w  <=>  ox * s < in_w + p - kx
    let hi = (g.in_w + p).saturating_sub(kx).div_ceil(s).min(g.out_w);
    (lo.min(hi), hi)
}

/// Unfolds one batch item into a (in_c*k*k) x (out_h*out_w) matrix.
fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let cols = g.col_cols();
    let (k, s) = (g.k, g.stride);
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky).wrapping_sub(g.pad);
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy >= g.in_h {
                        dst_row.fill(0.0);
                        continue;
                    }
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let first = lo * s + kx - g.pad;
                    if s == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, v) in dst_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the input plane.
fn col2im(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let cols = g.col_cols();
    let (k, s) = (g.k, g.stride);
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky).wrapping_sub(g.pad);
                    if iy >= g.in_h {
                        continue;
                    }
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let first = lo * s + kx - g.pad;
                    let src_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if s == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C, all described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m * n <= c.len());
    // SAFETY: the debug assertions above bound every strided access inside the
    // borrowed slices; dgemm reads A and B and writes only C.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Tensor {
    let xs = x.shape();
    let out_c = kernel.shape().n;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(Shape::new(xs.n, out_c, g.out_h, g.out_w));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    let out_item = out_c * cols;
    for n in 0..xs.n {
        let xi = x.batch_item(n);
        let col_ref: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        gemm(
            out_c,
            rows,
            cols,
            kernel.data(),
            (rows, 1),
            col_ref,
            (cols, 1),
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let out_c = kernel.shape().n;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_item = out_c * cols;
    let mut dx = need.0.then(|| Tensor::zeros(xs));
    let mut dw = need.1.then(|| Tensor::zeros(kernel.shape()));
    let mut db = need.2.then(|| Tensor::zeros(Shape::new(1, out_c, 1, 1)));
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![0.0; if need.0 && !g.is_pointwise() { rows * cols } else { 0 }];

    for n in 0..xs.n {
        let go = &grad_out.data()[n * out_item..(n + 1) * out_item];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(cols).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xi = x.batch_item(n);
            let col_ref: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            // dW (out_c x rows) += G (out_c x cols) * col^T (cols x rows)
            gemm(
                out_c,
                cols,
                rows,
                go,
                (cols, 1),
                col_ref,
                (1, cols),
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let item = xs.item();
            let dxi = &mut dx.data_mut()[n * item..(n + 1) * item];
            if g.is_pointwise() {
                // dX (rows x cols) = W^T (rows x out_c) * G (out_c x cols)
                gemm(rows, out_c, cols, kernel.data(), (1, rows), go, (cols, 1), 0.0, dxi);
            } else {
                gemm(
                    rows,
                    out_c,
                    cols,
                    kernel.data(),
                    (1, rows),
                    go,
                    (cols, 1),
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, g, dxi);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

/// Per (sample, group) mean and inverse standard deviation.
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, GroupStats) {
    let s = x.shape();
    let per_group = s.c / groups;
    let len = per_group * s.plane();
    let mut out = Tensor::zeros(s);
    let mut stats = GroupStats {
        mean: Vec::with_capacity(s.n * groups),
        inv_std: Vec::with_capacity(s.n * groups),
    };
    for n in 0..s.n {
        for grp in 0..groups {
            let start = (n * s.c + grp * per_group) * s.plane();
            let xs = &x.data()[start..start + len];
            let mean = xs.iter().sum::<f64>() / len as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
            let dst = &mut out.data_mut()[start..start + len];
            for (ci, (dchunk, xchunk)) in dst
                .chunks_mut(s.plane())
                .zip(xs.chunks(s.plane()))
                .enumerate()
            {
                let c = grp * per_group + ci;
                let (ga, be) = (gamma.data()[c], beta.data()[c]);
                for (d, &v) in dchunk.iter_mut().zip(xchunk) {
                    *d = (v - mean) * inv_std * ga + be;
                }
            }
        }
    }
    (out, stats)
}

pub(crate) fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    stats: &GroupStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let per_group = s.c / groups;
    let plane = s.plane();
    let len = per_group * plane;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for grp in 0..groups {
            let gi = n * groups + grp;
            let (mean, inv_std) = (stats.mean[gi], stats.inv_std[gi]);
            let start = (n * s.c + grp * per_group) * plane;
            let xs = &x.data()[start..start + len];
            let gs = &grad_out.data()[start..start + len];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..per_group {
                let c = grp * per_group + ci;
                let ga = gamma.data()[c];
                let (mut dg, mut dbt) = (0.0, 0.0);
                for i in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[i] - mean) * inv_std;
                    dg += gs[i] * xhat;
                    dbt += gs[i];
                    sum_dxhat += gs[i] * ga;
                    sum_dxhat_xhat += gs[i] * ga * xhat;
                }
                dgamma.data_mut()[c] += dg;
                dbeta.data_mut()[c] += dbt;
            }
            let m = len as f64;
            let dst = &mut dx.data_mut()[start..start + len];
            for ci in 0..per_group {
                let ga = gamma.data()[grp * per_group + ci];
                for i in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[i] - mean) * inv_std;
                    dst[i] = inv_std / m * (m * gs[i] * ga - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(os);
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        for oy in 0..os.h {
            let srow = &src[(nc * s.h + oy / factor) * s.w..][..s.w];
            let drow = &mut dst[(nc * os.h + oy) * os.w..][..os.w];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(grad_out: &Tensor, input: Shape, factor: usize) -> Tensor {
    let os = grad_out.shape();
    let mut dx = Tensor::zeros(input);
    let src = grad_out.data();
    let dst = dx.data_mut();
    for nc in 0..input.n * input.c {
        for oy in 0..os.h {
            let srow = &src[(nc * os.h + oy) * os.w..][..os.w];
            let drow = &mut dst[(nc * input.h + oy / factor) * input.w..][..input.w];
            for (ox, g) in srow.iter().enumerate() {
                drow[ox / factor] += g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used to check the im2col/gemm path.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let g = ConvGeometry::new(xs, ws.h, stride, pad).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, g.out_h, g.out_w));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w
                                    {
                                        acc += x.at(n, ci, iy as usize, ix as usize)
                                            * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        for &(stride, pad, k) in &[
            (1, 0, 3),
            (1, 1, 3),
            (2, 1, 3),
            (1, 2, 5),
            (1, 0, 1),
            (2, 0, 1),
            (1, 5, 11),
            (2, 2, 5),
            (3, 1, 3),
            (2, 4, 9),
        ] {
            let x = Tensor::from_fn(Shape::new(2, 3, 7, 9), |i| ((i * 37 % 23) as f64 - 11.0) / 7.0);
            let w = Tensor::from_fn(Shape::new(4, 3, k, k), |i| ((i * 13 % 17) as f64 - 8.0) / 5.0);
            let g = ConvGeometry::new(x.shape(), k, stride, pad).unwrap();
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 6), (2, 2, 5, 7, 4), (1, 5, 11, 1, 3), (3, 0, 2, 8, 8)] {
            let x = Tensor::from_fn(Shape::new(1, 2, h, w), |i| ((i * 29 % 31) as f64 - 15.0) / 4.0);
            let g = ConvGeometry::new(x.shape(), k, stride, pad).unwrap();
            let n = g.col_rows() * g.col_cols();
            let y: Vec<f64> = (0..n).map(|i| ((i * 17 % 19) as f64 - 9.0) / 3.0).collect();
            let mut col = vec![0.0; n];
            im2col(x.data(), &g, &mut col);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |i| i as f64);
        let up = upsample_nearest_forward(&x, 2);
        assert_eq!(up.at(0, 0, 3, 3), 3.0);
        let g = Tensor::full(up.shape(), 1.0);
        let dx = upsample_nearest_backward(&g, x.shape(), 2);
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }
}
