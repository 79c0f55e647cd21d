//! Convolution and matrix kernels on raw NCHW buffers.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents are checked by the callers against the buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution. `w` is `[co, ci, k, k]`; output is `[batch, co, oh, ow]`.
pub(crate) fn conv2d(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    bias: &[f64],
    co: usize,
) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * co * plane];
    let mut col = vec![0.0; rows * plane];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let y = &mut out[b * co * plane..(b + 1) * co * plane];
        for (o, bias) in bias.iter().enumerate() {
            y[o * plane..(o + 1) * plane].fill(*bias);
        }
        gemm(
            co,
            rows,
            plane,
            w,
            rows as isize,
            1,
            &col,
            plane as isize,
            1,
            y,
            1.0,
        );
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    co: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_len = g.channels * g.height * g.width;
    let mut dw = vec![0.0; co * rows];
    let mut db = vec![0.0; co];
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    let mut col = vec![0.0; rows * plane];
    let mut dcol = vec![0.0; rows * plane];
    for b in 0..batch {
        let dyb = &dy[b * co * plane..(b + 1) * co * plane];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dyb[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        // dw[co, rows] += dy[co, plane] · col^T[plane, rows]
        gemm(
            co,
            plane,
            rows,
            dyb,
            plane as isize,
            1,
            &col,
            1,
            plane as isize,
            &mut dw,
            1.0,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol[rows, plane] = w^T[rows, co] · dy[co, plane]
            gemm(
                rows,
                co,
                plane,
                w,
                1,
                rows as isize,
                dyb,
                plane as isize,
                1,
                &mut dcol,
                0.0,
            );
            col2im(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with a 2×2 kernel and stride 2. `w` is `[ci, co, 2, 2]`.
pub(crate) fn conv_t2(
    x: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    wd: usize,
    w: &[f64],
    bias: &[f64],
    co: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; batch * co * oh * ow];
    let mut z = vec![0.0; co * 4 * hw];
    for b in 0..batch {
        let xb = &x[b * ci * hw..(b + 1) * ci * hw];
        // z[co*4, hw] = w^T[co*4, ci] · x[ci, hw]
        gemm(
            co * 4,
            ci,
            hw,
            w,
            1,
            (co * 4) as isize,
            xb,
            hw as isize,
            1,
            &mut z,
            0.0,
        );
        let yb = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let zr = &z[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..wd {
                        yb[o * oh * ow + (2 * i + dy) * ow + 2 * j + dx] = zr[i * wd + j] + bias[o];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t2_backward(
    x: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    wd: usize,
    w: &[f64],
    co: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dw = vec![0.0; ci * co * 4];
    let mut db = vec![0.0; co];
    let mut dx = need_dx.then(|| vec![0.0; batch * ci * hw]);
    let mut dz = vec![0.0; co * 4 * hw];
    for b in 0..batch {
        let dyb = &dy[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            db[o] += dyb[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let zr = &mut dz[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..wd {
                        zr[i * wd + j] = dyb[o * oh * ow + (2 * i + ddy) * ow + 2 * j + ddx];
                    }
                }
            }
        }
        let xb = &x[b * ci * hw..(b + 1) * ci * hw];
        // dw[ci, co*4] += x[ci, hw] · dz^T[hw, co*4]
        gemm(
            ci,
            hw,
            co * 4,
            xb,
            hw as isize,
            1,
            &dz,
            1,
            hw as isize,
            &mut dw,
            1.0,
        );
        if let Some(dx) = dx.as_mut() {
            // dx[ci, hw] = w[ci, co*4] · dz[co*4, hw]
            gemm(
                ci,
                co * 4,
                hw,
                w,
                (co * 4) as isize,
                1,
                &dz,
                hw as isize,
                1,
                &mut dx[b * ci * hw..(b + 1) * ci * hw],
                0.0,
            );
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], bias: &[f64], co: usize) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                acc += w[((o * g.channels + c) * g.kernel + ky) * g.kernel + kx]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let g = ConvGeom {
                channels: 3,
                height: 7,
                width: 6,
                kernel: 3,
                stride,
                pad,
            };
            let x = pseudo(3 * 7 * 6, 1);
            let w = pseudo(4 * 3 * 9, 2);
            let bias = pseudo(4, 3);
            let y = conv2d(&x, 1, &g, &w, &bias, 4);
            let expect = naive_conv(&x, &g, &w, &bias, 4);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_t2_scatters_each_input_to_a_2x2_patch() {
        // one input channel, one output channel, single pixel
        let x = [2.0];
        let w = [1.0, 2.0, 3.0, 4.0];
        let y = conv_t2(&x, 1, 1, 1, 1, &w, &[0.5], 1);
        assert_eq!(y, vec![2.5, 4.5, 6.5, 8.5]);
    }
}
