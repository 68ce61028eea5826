//! im2col + GEMM cross-correlation kernels.

use crate::error::{mismatch, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(op: &'static str, input: &[usize], kernel: &[usize], padding: Padding, stride: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(mismatch(op, "[B,C,H,W] and [C_out,C_in,k,k]", (input, kernel)));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, k, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(mismatch(op, format!("kernel input channels {c_in}"), kc));
        }
        if k != k2 {
            return Err(mismatch(op, "square kernel", (k, k2)));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { op, k });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op });
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch(op, format!("spatial extent >= {k}"), (h, w)));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            pad,
            stride,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the forward correlation whose adjoint maps `input` to the result.
    pub fn transposed(input: &[usize], kernel: &[usize]) -> Result<Self> {
        const OP: &str = "transpose_correlate2d";
        if input.len() != 4 || kernel.len() != 4 {
            return Err(mismatch(OP, "[B,C,H,W] and [C,C',k,k]", (input, kernel)));
        }
        if input[1] != kernel[0] {
            return Err(mismatch(OP, format!("kernel leading channels {}", input[1]), kernel[0]));
        }
        Self::new(OP, &[input[0], kernel[1], input[2], input[3]], kernel, Padding::Same, 1)
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, p, s) = (g.k, g.pad as isize, g.stride);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((c * k + u) * k + v) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + u as isize - p;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + v as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (k, p, s) = (g.k, g.pad as isize, g.stride);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((c * k + u) * k + v) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + u as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &val) in row[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * s) as isize + v as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += val;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W x cols(x[b])`.
pub fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            patch,
            plane,
            T::one(),
            w.data(),
            (patch as isize, 1),
            colv,
            (plane as isize, 1),
            T::zero(),
            &mut out[b * out_len..(b + 1) * out_len],
            (plane as isize, 1),
        );
    }
    Tensor::new([g.batch, g.c_out, g.out_h, g.out_w], out)
}

/// Input gradient: `dx[b] = col2im(W^T dy[b])`.
pub fn backward_input<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let expected = [g.batch, g.c_out, g.out_h, g.out_w];
    if dy.shape() != expected {
        return Err(mismatch("correlate2d adjoint", expected, dy.shape()));
    }
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut dx = vec![T::zero(); g.batch * in_len];
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        let dyb = &dy.data()[b * out_len..(b + 1) * out_len];
        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
        let target: &mut [T] = if g.is_pointwise() { dxb } else { &mut cols };
        T::gemm(
            patch,
            g.c_out,
            plane,
            T::one(),
            w.data(),
            (1, patch as isize),
            dyb,
            (plane as isize, 1),
            T::zero(),
            target,
            (plane as isize, 1),
        );
        if !g.is_pointwise() {
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    Tensor::new([g.batch, g.c_in, g.h, g.w], dx)
}

/// Kernel gradient: `dW = sum_b dy[b] cols(x[b])^T`.
pub fn backward_kernel<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut dw = vec![T::zero(); g.c_out * patch];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            plane,
            patch,
            T::one(),
            &dy.data()[b * out_len..(b + 1) * out_len],
            (plane as isize, 1),
            colv,
            (1, plane as isize),
            T::one(),
            &mut dw,
            (patch as isize, 1),
        );
    }
    Tensor::new([g.c_out, g.c_in, g.k, g.k], dw)
}
