//! 2-D convolution as a candle custom op.
//!
//! The stock CPU convolution in candle is dominated by per-call overhead at
//! the feature-map sizes used here (a few hundred pixels, 8-64 channels). This
//! op lowers the whole batch to a single im2col matrix and one GEMM, and
//! provides its own input and weight gradients.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// Static geometry of one convolution call. Square kernels, symmetric padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> candle_core::Result<Self> {
        let (&[batch, c_in, h_in, w_in], &[c_out, wc_in, kh, kw]) = (input, weight) else {
            candle_core::bail!("conv2d expects 4-d input and weight, got {input:?} and {weight:?}");
        };
        if wc_in != c_in || kh != kw {
            candle_core::bail!("conv2d weight {weight:?} incompatible with input {input:?}");
        }
        if h_in + 2 * padding < kh || w_in + 2 * padding < kw {
            candle_core::bail!("conv2d kernel {kh} larger than padded input {h_in}x{w_in}");
        }
        Ok(Self {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            kernel: kh,
            stride,
            padding,
            h_out: (h_in + 2 * padding - kh) / stride + 1,
            w_out: (w_in + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Number of columns of the im2col matrix (one per output pixel of the batch).
    fn columns(&self) -> usize {
        self.batch * self.out_pixels()
    }

    fn input_shape(&self) -> Shape {
        Shape::from((self.batch, self.c_in, self.h_in, self.w_in))
    }

    fn weight_shape(&self) -> Shape {
        Shape::from((self.c_out, self.c_in, self.kernel, self.kernel))
    }

    fn output_shape(&self) -> Shape {
        Shape::from((self.batch, self.c_out, self.h_out, self.w_out))
    }

    /// Visits every (im2col index, input index) pair whose input position
    /// falls inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.columns();
        let hw_out = self.out_pixels();
        let k = self.kernel;
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for b in 0..self.batch {
                        let in_base = (b * self.c_in + ci) * self.h_in * self.w_in;
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h_in as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * self.w_in;
                            let col_row = row * n + b * hw_out + oy * self.w_out;
                            for ox in 0..self.w_out {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.w_in as isize {
                                    continue;
                                }
                                f(col_row + ox, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) trait Element: Copy + Default + std::ops::AddAssign + Send + Sync + 'static {
    /// `c = a * b` for row-major-strided operands (`beta = 0`).
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

fn matmul<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
) -> Vec<T> {
    let mut c = vec![T::default(); m * n];
    // SAFETY: the callers pass slices with at least m*k / k*n reachable elements
    // under the given strides; `c` is exactly m*n row-major.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn im2col<T: Element>(g: &Geometry, input: &[T]) -> Vec<T> {
    let mut cols = vec![T::default(); g.patch_len() * g.columns()];
    g.for_each_tap(|col, src| cols[col] = input[src]);
    cols
}

/// (C_out, B*HW) matrix  <->  (B, C_out, H, W) tensor.
fn channel_major<T: Element>(g: &Geometry, nchw: &[T]) -> Vec<T> {
    let hw = g.out_pixels();
    let mut out = vec![T::default(); nchw.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = (b * g.c_out + co) * hw;
            let dst = co * g.columns() + b * hw;
            out[dst..dst + hw].copy_from_slice(&nchw[src..src + hw]);
        }
    }
    out
}

fn batch_major<T: Element>(g: &Geometry, mat: &[T]) -> Vec<T> {
    let hw = g.out_pixels();
    let mut out = vec![T::default(); mat.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = co * g.columns() + b * hw;
            let dst = (b * g.c_out + co) * hw;
            out[dst..dst + hw].copy_from_slice(&mat[src..src + hw]);
        }
    }
    out
}

fn forward<T: Element>(g: &Geometry, input: &[T], weight: &[T]) -> Vec<T> {
    let cols = im2col(g, input);
    let (m, k, n) = (g.c_out, g.patch_len(), g.columns());
    let out = matmul(m, k, n, (weight, k as isize, 1), (&cols, n as isize, 1));
    batch_major(g, &out)
}

fn backward_input<T: Element>(g: &Geometry, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let dout = channel_major(g, grad_out);
    let (m, k, n) = (g.patch_len(), g.c_out, g.columns());
    // weight^T: (patch_len, c_out)
    let dcols = matmul(m, k, n, (weight, 1, m as isize), (&dout, n as isize, 1));
    let mut dx = vec![T::default(); g.batch * g.c_in * g.h_in * g.w_in];
    g.for_each_tap(|col, dst| dx[dst] += dcols[col]);
    dx
}

fn backward_weight<T: Element>(g: &Geometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let cols = im2col(g, input);
    let dout = channel_major(g, grad_out);
    let (m, k, n) = (g.c_out, g.columns(), g.patch_len());
    // cols^T: (columns, patch_len)
    matmul(m, k, n, (&dout, k as isize, 1), (&cols, 1, k as isize))
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d operands must be contiguous"),
    }
}

macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{} supports matching f32 or f64 operands only", $name),
        }
    };
}

struct Conv2d {
    stride: usize,
    padding: usize,
}

struct Conv2dBackwardInput(Geometry);

struct Conv2dBackwardWeight(Geometry);

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "jscc-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, w| forward(&g, x, w));
        Ok((out, g.output_shape()))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(input.dims(), weight.dims(), self.stride, self.padding)?;
        let grad_res = grad_res.contiguous()?;
        let dx = grad_res.apply_op2_no_bwd(weight, &Conv2dBackwardInput(g))?;
        let dw = input.apply_op2_no_bwd(&grad_res, &Conv2dBackwardWeight(g))?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for Conv2dBackwardInput {
    fn name(&self) -> &'static str {
        "jscc-conv2d-bwd-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |dy, w| backward_input(g, dy, w));
        Ok((out, g.input_shape()))
    }
}

impl CustomOp2 for Conv2dBackwardWeight {
    fn name(&self) -> &'static str {
        "jscc-conv2d-bwd-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, dy| backward_weight(g, x, dy));
        Ok((out, g.weight_shape()))
    }
}

/// Square-kernel convolution without bias on NCHW tensors.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let input = input.contiguous()?;
    let weight = weight.contiguous()?;
    input.apply_op2(&weight, Conv2d { stride, padding })
}
