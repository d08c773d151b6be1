//! Dense row-major `f64` tensors and the convolution kernels the networks are
//! built from. Images use NHWC layout; convolution kernels are stored as
//! `(kh, kw, c_in, c_out)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Copies sample `i` of the leading dimension out as a batch of one.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.data.len() / self.batch();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors with a leading batch dimension of one.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.expect_shape(&first.shape)?;
            data.extend_from_slice(&t.data);
        }
        shape[0] = first.shape[0] * items.len();
        Tensor::new(shape, data)
    }
}

/// Geometry of a 2-D convolution between a "large" NHWC map and a "small"
/// one. A transposed convolution uses the same geometry with the roles of
/// input and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// "Same" padding: output is `ceil(in / stride)` and the total padding is
    /// split with the extra pixel at the bottom/right.
    pub fn same(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_c, self.out_c]
    }

    /// Input offset of patch element `(ky, kx)` for output pixel `(oy, ox)`,
    /// or `None` when it falls into the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

// Output pixels processed per im2col block; bounds scratch memory.
const BLOCK_PIXELS: usize = 2048;

fn im2col_block(g: &ConvGeometry, input: &[f64], n: usize, start: usize, count: usize, col: &mut [f64]) {
    let plen = g.patch_len();
    let img = &input[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
    for p in 0..count {
        let pix = start + p;
        let (oy, ox) = (pix / g.out_w, pix % g.out_w);
        let row = &mut col[p * plen..(p + 1) * plen];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut row[(ky * g.kernel + kx) * g.in_c..(ky * g.kernel + kx + 1) * g.in_c];
                match g.source(oy, ox, ky, kx) {
                    Some((y, x)) => {
                        let off = (y * g.in_w + x) * g.in_c;
                        dst.copy_from_slice(&img[off..off + g.in_c]);
                    }
                    None => dst.fill(0.0),
                }
            }
        }
    }
}

fn col2im_block(g: &ConvGeometry, col: &[f64], n: usize, start: usize, count: usize, out: &mut [f64]) {
    let plen = g.patch_len();
    let img = &mut out[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
    for p in 0..count {
        let pix = start + p;
        let (oy, ox) = (pix / g.out_w, pix % g.out_w);
        let row = &col[p * plen..(p + 1) * plen];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                    let src = &row[(ky * g.kernel + kx) * g.in_c..(ky * g.kernel + kx + 1) * g.in_c];
                    let off = (y * g.in_w + x) * g.in_c;
                    for (d, s) in img[off..off + g.in_c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha * a (m×k) * b (k×n) + beta * c`, with explicit strides so
/// transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n (row-major, stride n) views.
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

/// Forward convolution (no bias): large NHWC input → small NHWC output.
pub fn conv2d(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let pixels = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * pixels * g.out_c];
    let mut col = vec![0.0; BLOCK_PIXELS.min(pixels) * plen];
    for n in 0..g.batch {
        let mut start = 0;
        while start < pixels {
            let count = BLOCK_PIXELS.min(pixels - start);
            im2col_block(g, input, n, start, count, &mut col);
            let off = (n * pixels + start) * g.out_c;
            gemm(
                count,
                plen,
                g.out_c,
                &col,
                plen as isize,
                1,
                kernel,
                g.out_c as isize,
                1,
                0.0,
                &mut out[off..off + count * g.out_c],
            );
            start += count;
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input: small map → large map.
/// This is also the forward pass of a transposed convolution.
pub fn conv2d_backward_input(g: &ConvGeometry, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let pixels = g.out_h * g.out_w;
    let mut grad_in = vec![0.0; g.batch * g.in_h * g.in_w * g.in_c];
    let mut col = vec![0.0; BLOCK_PIXELS.min(pixels) * plen];
    for n in 0..g.batch {
        let mut start = 0;
        while start < pixels {
            let count = BLOCK_PIXELS.min(pixels - start);
            let off = (n * pixels + start) * g.out_c;
            // col (count×plen) = dy (count×out_c) · Kᵀ (out_c×plen)
            gemm(
                count,
                g.out_c,
                plen,
                &grad_out[off..off + count * g.out_c],
                g.out_c as isize,
                1,
                kernel,
                1,
                g.out_c as isize,
                0.0,
                &mut col[..count * plen],
            );
            col2im_block(g, &col, n, start, count, &mut grad_in);
            start += count;
        }
    }
    grad_in
}

/// Gradient of [`conv2d`] with respect to the kernel.
pub fn conv2d_backward_kernel(g: &ConvGeometry, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let pixels = g.out_h * g.out_w;
    let mut grad_k = vec![0.0; plen * g.out_c];
    let mut col = vec![0.0; BLOCK_PIXELS.min(pixels) * plen];
    for n in 0..g.batch {
        let mut start = 0;
        while start < pixels {
            let count = BLOCK_PIXELS.min(pixels - start);
            im2col_block(g, input, n, start, count, &mut col);
            let off = (n * pixels + start) * g.out_c;
            // dK (plen×out_c) += colᵀ (plen×count) · dy (count×out_c)
            gemm(
                plen,
                count,
                g.out_c,
                &col,
                1,
                plen as isize,
                &grad_out[off..off + count * g.out_c],
                g.out_c as isize,
                1,
                1.0,
                &mut grad_k,
            );
            start += count;
        }
    }
    grad_k
}

/// `(rows×k) · (k×cols)` for dense layers.
pub fn matmul(rows: usize, k: usize, cols: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    gemm(rows, k, cols, a, k as isize, 1, b, cols as isize, 1, 0.0, &mut out);
    out
}

/// `(rows×cols) · (k×cols)ᵀ`.
pub fn matmul_bt(rows: usize, cols: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * k];
    gemm(rows, cols, k, a, cols as isize, 1, b, 1, cols as isize, 0.0, &mut out);
    out
}

/// `(rows×k)ᵀ · (rows×cols)`.
pub fn matmul_at(rows: usize, k: usize, cols: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * cols];
    gemm(k, rows, cols, a, 1, k as isize, b, cols as isize, 1, 0.0, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_h * g.out_w * g.out_c];
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for co in 0..g.out_c {
                        let mut acc = 0.0;
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                                let xx = (ox * g.stride + kx) as isize - g.pad_left as isize;
                                if y < 0 || xx < 0 || y >= g.in_h as isize || xx >= g.in_w as isize {
                                    continue;
                                }
                                for ci in 0..g.in_c {
                                    let xi = ((n * g.in_h + y as usize) * g.in_w + xx as usize) * g.in_c + ci;
                                    let ki = ((ky * g.kernel + kx) * g.in_c + ci) * g.out_c + co;
                                    acc += x[xi] * k[ki];
                                }
                            }
                        }
                        out[((n * g.out_h + oy) * g.out_w + ox) * g.out_c + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn same_padding_shapes() {
        let g = ConvGeometry::same(1, 256, 256, 3, 32, 4, 2);
        assert_eq!((g.out_h, g.pad_top), (128, 1));
        let g = ConvGeometry::same(1, 16, 16, 3, 8, 3, 2);
        assert_eq!((g.out_h, g.pad_top), (8, 0));
        let g = ConvGeometry::same(1, 1, 1, 3, 8, 4, 2);
        assert_eq!((g.out_h, g.pad_top), (1, 1));
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(h, k, s) in &[(7usize, 3usize, 1usize), (8, 4, 2), (9, 3, 2), (5, 1, 1)] {
            let g = ConvGeometry::same(2, h, h + 1, 3, 4, k, s);
            let x = pseudo(2 * h * (h + 1) * 3, 1);
            let w = pseudo(k * k * 3 * 4, 2);
            let fast = conv2d(&g, &x, &w);
            let slow = naive_conv(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_kernels_are_adjoints() {
        // <conv(x), y> = <x, conv_in^T(y)> = <w, conv_k^T(x, y)>
        let g = ConvGeometry::same(2, 9, 6, 3, 5, 4, 2);
        let x = pseudo(2 * 9 * 6 * 3, 3);
        let w = pseudo(4 * 4 * 3 * 5, 4);
        let y = pseudo(2 * g.out_h * g.out_w * 5, 5);
        let lhs = dot(&conv2d(&g, &x, &w), &y);
        let via_input = dot(&x, &conv2d_backward_input(&g, &y, &w));
        let via_kernel = dot(&w, &conv2d_backward_kernel(&g, &x, &y));
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_kernel).abs() < 1e-10);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = pseudo(3 * 4, 6);
        let b = pseudo(4 * 5, 7);
        let ab = matmul(3, 4, 5, &a, &b);
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        let ab2 = matmul_bt(3, 4, 5, &a, &bt);
        for (x, y) in ab.iter().zip(&ab2) {
            assert!((x - y).abs() < 1e-14);
        }
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let ab3 = matmul_at(4, 3, 5, &at, &b);
        for (x, y) in ab.iter().zip(&ab3) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
