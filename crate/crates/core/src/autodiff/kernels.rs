//! Forward and adjoint kernels over NCHW buffers. Convolutions are 3x3 with
//! one pixel of zero padding, lowered to a matrix product via im2col.

use crate::tensor::Element;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.in_channels * TAPS
    }
}

/// Output rows per im2col band, sized so a band of patch columns stays
/// cache resident.
fn band_rows(channels: usize, width: usize) -> usize {
    const BAND_BYTES: usize = 1 << 19;
    (BAND_BYTES / (4 * channels * TAPS * width)).max(1)
}

/// Unrolls output rows `y0..y1` of one `[C, H, W]` image into
/// `[C*9, (y1-y0)*W]` patch columns.
fn im2col_band<T: Element>(input: &[T], channels: usize, height: usize, width: usize, y0: usize, y1: usize, col: &mut [T]) {
    let plane = height * width;
    let span = (y1 - y0) * width;
    debug_assert_eq!(col.len(), channels * TAPS * span);
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * TAPS) + ky * KERNEL + kx) * span..][..span];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (width + 1 - kx).min(width);
                for y in y0..y1 {
                    let out = &mut row[(y - y0) * width..(y - y0 + 1) * width];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let sy = sy as usize;
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let sx_lo = x_lo + kx - 1;
                    let sx_hi = x_hi + kx - 1;
                    out[x_lo..x_hi].copy_from_slice(&src[sy * width + sx_lo..sy * width + sx_hi]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_band`], accumulated into `out`.
fn col2im_band<T: Element>(col: &[T], channels: usize, height: usize, width: usize, y0: usize, y1: usize, out: &mut [T]) {
    let plane = height * width;
    let span = (y1 - y0) * width;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((c * TAPS) + ky * KERNEL + kx) * span..][..span];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (width + 1 - kx).min(width);
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = &row[(y - y0) * width + x_lo..(y - y0) * width + x_hi];
                    let base = sy * width + x_lo + kx - 1;
                    for (d, &s) in dst[base..base + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Unrolls one `[C, H, W]` image into `[C*9, H*W]` patch columns.
pub fn im2col<T: Element>(input: &[T], channels: usize, height: usize, width: usize, col: &mut [T]) {
    im2col_band(input, channels, height, width, 0, height, col);
}

/// Adjoint of [`im2col`]: scatters patch-column adjoints back onto the image.
pub fn col2im<T: Element>(col: &[T], channels: usize, height: usize, width: usize, out: &mut [T]) {
    out.fill(T::zero());
    col2im_band(col, channels, height, width, 0, height, out);
}

pub fn conv2d_forward<T: Element>(input: &[T], weight: &[T], bias: &[T], dims: ConvDims) -> Vec<T> {
    let plane = dims.plane();
    let rows = dims.col_rows();
    let band = band_rows(dims.in_channels, dims.width);
    let mut out = vec![T::zero(); dims.batch * dims.out_channels * plane];
    let mut col = vec![T::zero(); rows * band.min(dims.height) * dims.width];
    for n in 0..dims.batch {
        let x = &input[n * dims.in_channels * plane..(n + 1) * dims.in_channels * plane];
        let y = &mut out[n * dims.out_channels * plane..(n + 1) * dims.out_channels * plane];
        for (c, chunk) in y.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[c]);
        }
        for y0 in (0..dims.height).step_by(band) {
            let y1 = (y0 + band).min(dims.height);
            let span = (y1 - y0) * dims.width;
            let col = &mut col[..rows * span];
            im2col_band(x, dims.in_channels, dims.height, dims.width, y0, y1, col);
            T::gemm(
                dims.out_channels,
                rows,
                span,
                T::one(),
                weight,
                rows as isize,
                1,
                col,
                span as isize,
                1,
                T::one(),
                &mut y[y0 * dims.width..],
                plane as isize,
                1,
            );
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of a convolution given the output adjoint. The im2col buffer
/// is rebuilt here rather than kept from the forward pass.
pub fn conv2d_backward<T: Element>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    dims: ConvDims,
    need_input: bool,
) -> ConvGrads<T> {
    let plane = dims.plane();
    let rows = dims.col_rows();
    let band = band_rows(dims.in_channels, dims.width);
    let mut grad_weight = vec![T::zero(); dims.out_channels * rows];
    let mut grad_bias = vec![T::zero(); dims.out_channels];
    let mut grad_input = need_input.then(|| vec![T::zero(); dims.batch * dims.in_channels * plane]);
    let mut col = vec![T::zero(); rows * band.min(dims.height) * dims.width];
    for n in 0..dims.batch {
        let x = &input[n * dims.in_channels * plane..(n + 1) * dims.in_channels * plane];
        let g = &grad_out[n * dims.out_channels * plane..(n + 1) * dims.out_channels * plane];
        for (c, chunk) in g.chunks_exact(plane).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            grad_bias[c] += s;
        }
        for y0 in (0..dims.height).step_by(band) {
            let y1 = (y0 + band).min(dims.height);
            let span = (y1 - y0) * dims.width;
            let col = &mut col[..rows * span];
            let g = &g[y0 * dims.width..];
            im2col_band(x, dims.in_channels, dims.height, dims.width, y0, y1, col);
            // dW += G * col^T
            T::gemm(
                dims.out_channels,
                span,
                rows,
                T::one(),
                g,
                plane as isize,
                1,
                col,
                1,
                span as isize,
                T::one(),
                &mut grad_weight,
                rows as isize,
                1,
            );
            if let Some(gi) = grad_input.as_mut() {
                // dcol = W^T * G, reusing the column buffer
                T::gemm(
                    rows,
                    dims.out_channels,
                    span,
                    T::one(),
                    weight,
                    1,
                    rows as isize,
                    g,
                    plane as isize,
                    1,
                    T::zero(),
                    col,
                    span as isize,
                    1,
                );
                let dst = &mut gi[n * dims.in_channels * plane..(n + 1) * dims.in_channels * plane];
                col2im_band(col, dims.in_channels, dims.height, dims.width, y0, y1, dst);
            }
        }
    }
    ConvGrads { input: grad_input, weight: grad_weight, bias: grad_bias }
}

/// 2x2 stride-2 max pooling over `planes` images of `height x width`.
/// Returns the pooled values and, per output, the flat input index that
/// won; ties go to the first element in row-major order.
pub fn maxpool2_forward<T: Element>(input: &[T], planes: usize, height: usize, width: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * width + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

pub fn upsample2_forward<T: Element>(input: &[T], planes: usize, height: usize, width: usize) -> Vec<T> {
    let ow = width * 2;
    let mut out = vec![T::zero(); planes * height * width * 4];
    for p in 0..planes {
        let src = &input[p * height * width..(p + 1) * height * width];
        let dst = &mut out[p * height * width * 4..(p + 1) * height * width * 4];
        for y in 0..height * 2 {
            let row = &src[(y / 2) * width..(y / 2 + 1) * width];
            for (x, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = row[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(grad_out: &[T], planes: usize, height: usize, width: usize) -> Vec<T> {
    let ow = width * 2;
    let mut out = vec![T::zero(); planes * height * width];
    for p in 0..planes {
        let src = &grad_out[p * height * width * 4..(p + 1) * height * width * 4];
        let dst = &mut out[p * height * width..(p + 1) * height * width];
        for y in 0..height * 2 {
            for x in 0..ow {
                dst[(y / 2) * width + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}
