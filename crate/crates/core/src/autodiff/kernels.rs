//! Forward and backward numeric kernels for the differentiable layers.
//!
//! Convolution lowers each sample to an im2col matrix and runs a single
//! GEMM; everything else is plain loops over contiguous buffers.

/// `c = a · b + beta · c`, with `a` logically `[m, k]` and `b` logically
/// `[k, n]`. A transposed operand is stored in the opposite orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index the strides can reach.
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

/// Geometry of a 2-D convolution over NCHW input and FCkk weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.filters,
            self.out_height(),
            self.out_width(),
        ]
    }
}

fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], grad_input: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            chan[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * plane;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (f, b) in bias.iter().enumerate() {
            dst[f * plane..(f + 1) * plane].fill(*b);
        }
        gemm(
            g.filters, patch, plane, weight, false, &cols, false, 1.0, dst,
        );
    }
    out
}

/// Accumulates gradients of a convolution into the provided buffers.
/// Any of the three outputs may be skipped with `None`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * plane;
    let mut cols = vec![0.0; patch * plane];
    let mut dcols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (f, b) in gb.iter_mut().enumerate() {
                *b += go[f * plane..(f + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(g.filters, plane, patch, go, false, &cols, true, 1.0, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                patch, g.filters, plane, weight, true, go, false, 0.0, &mut dcols,
            );
            col2im_add(g, &dcols, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// 2×2 non-overlapping max pooling over NCHW. Returns the pooled values and,
/// for every output cell, the flat input index it was taken from (first
/// maximum in row-major window order).
pub fn maxpool2_forward(shape: [usize; 4], input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// `x[N,D] · w[D,K] + b[K]`.
pub fn dense_forward(n: usize, d: usize, k: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, d, k, x, false, w, false, 1.0, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    n: usize,
    d: usize,
    k: usize,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if let Some(gx) = grad_x {
        gemm(n, k, d, grad_out, false, w, true, 1.0, gx);
    }
    if let Some(gw) = grad_w {
        gemm(d, n, k, x, true, grad_out, false, 1.0, gw);
    }
    if let Some(gb) = grad_b {
        for row in grad_out.chunks_exact(k) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
}
