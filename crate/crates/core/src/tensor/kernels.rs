//! Raw numeric kernels over flat row-major buffers.
//!
//! These are shared by the autodiff graph and by code that only needs forward
//! evaluation. Every output element is produced by exactly one work item with a
//! fixed summation order, so parallel and sequential runs agree bit for bit.

use crate::exec::Execution;

/// Geometry of a 2-D convolution over `[B, C, H, W]` input with `[O, C, KH, KW]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial extent, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.stride == 0 || self.kernel_h > ph || self.kernel_w > pw {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    fn out_hw(&self) -> (usize, usize) {
        self.output_hw().expect("validated conv geometry")
    }

    /// Output rows `oh` for which `oh*stride + k - padding` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
        (lo.max(0) as usize, hi.max(lo) as usize)
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Execution) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    exec.for_each_chunk(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfolds one `[C, H, W]` image into a `[C·KH·KW, OH·OW]` column matrix
/// (zero where the window overlaps padding).
fn im2col(src: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh_n, ow_n) = g.out_hw();
    let plane = oh_n * ow_n;
    let in_plane = g.height * g.width;
    let mut col = vec![0.0; g.in_channels * g.kernel_h * g.kernel_w * plane];
    for c in 0..g.in_channels {
        let img = &src[c * in_plane..][..in_plane];
        for kh in 0..g.kernel_h {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.height, oh_n);
            for kw in 0..g.kernel_w {
                let (ow_lo, ow_hi) = g.valid_range(kw, g.width, ow_n);
                let row = &mut col[((c * g.kernel_h + kh) * g.kernel_w + kw) * plane..][..plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    let srow = &img[ih * g.width..(ih + 1) * g.width];
                    for ow in ow_lo..ow_hi {
                        row[oh * ow_n + ow] = srow[ow * g.stride + kw - g.padding];
                    }
                }
            }
        }
    }
    col
}

fn im2col_batch(input: &[f64], g: &ConvGeometry, exec: Execution) -> Vec<Vec<f64>> {
    let per = g.in_channels * g.height * g.width;
    exec.map(g.batch, |b| im2col(&input[b * per..][..per], g))
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry, exec: Execution) -> Vec<f64> {
    let (oh_n, ow_n) = g.out_hw();
    let plane = oh_n * ow_n;
    let rows = g.in_channels * g.kernel_h * g.kernel_w;
    let cols = im2col_batch(input, g, exec);
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    exec.for_each_chunk(&mut out, plane, |idx, dst| {
        let (b, o) = (idx / g.out_channels, idx % g.out_channels);
        let col = &cols[b];
        for (r, &w) in kernel[o * rows..(o + 1) * rows].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (d, &v) in dst.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                *d += w * v;
            }
        }
    });
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeometry, exec: Execution) -> Vec<f64> {
    let (oh_n, ow_n) = g.out_hw();
    let plane = oh_n * ow_n;
    let in_plane = g.height * g.width;
    let k_size = g.kernel_h * g.kernel_w;
    let rows = g.in_channels * k_size;
    let mut grad_in = vec![0.0; g.batch * g.in_channels * in_plane];
    exec.for_each_chunk(&mut grad_in, in_plane, |idx, dst| {
        let (b, c) = (idx / g.in_channels, idx % g.in_channels);
        let mut gcol = vec![0.0; plane];
        for kh in 0..g.kernel_h {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.height, oh_n);
            for kw in 0..g.kernel_w {
                let r = c * k_size + kh * g.kernel_w + kw;
                gcol.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..g.out_channels {
                    let w = kernel[o * rows + r];
                    if w == 0.0 {
                        continue;
                    }
                    let go = &grad_out[(b * g.out_channels + o) * plane..][..plane];
                    for (d, &v) in gcol.iter_mut().zip(go) {
                        *d += w * v;
                    }
                }
                let (ow_lo, ow_hi) = g.valid_range(kw, g.width, ow_n);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    let drow = &mut dst[ih * g.width..(ih + 1) * g.width];
                    for ow in ow_lo..ow_hi {
                        drow[ow * g.stride + kw - g.padding] += gcol[oh * ow_n + ow];
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeometry, exec: Execution) -> Vec<f64> {
    let (oh_n, ow_n) = g.out_hw();
    let plane = oh_n * ow_n;
    let rows = g.in_channels * g.kernel_h * g.kernel_w;
    let cols = im2col_batch(input, g, exec);
    let mut grad_k = vec![0.0; g.out_channels * rows];
    exec.for_each_chunk(&mut grad_k, rows, |o, dst| {
        for (b, col) in cols.iter().enumerate() {
            let go = &grad_out[(b * g.out_channels + o) * plane..][..plane];
            for (r, d) in dst.iter_mut().enumerate() {
                let x = &col[r * plane..(r + 1) * plane];
                *d += go.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    grad_k
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let zeros = vec![0; rank];
    super::for_each_broadcast(&out_shape, &strides, &zeros, |_, ia, _| out.push(data[ia]));
    out
}

/// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
pub fn upsample2x(data: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}

/// `D[i, j] = ‖a_i − b_j‖²` for rows of `a[n×d]` and `b[m×d]`.
pub fn pairwise_sq_dist(a: &[f64], b: &[f64], n: usize, m: usize, d: usize, exec: Execution) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    exec.for_each_chunk(&mut out, m, |i, row| {
        let ai = &a[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let bj = &b[j * d..(j + 1) * d];
            *o = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    out
}
