//! Raw numeric kernels shared by the autograd tape and the functional API.

use crate::error::{structural, Result};

use super::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` with row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the dimensions and strides asserted above.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(structural!("conv input must be rank 4 [N,C,H,W], got {:?}", input));
        }
        if weight.len() != 4 {
            return Err(structural!("conv weight must be rank 4 [Cout,Cin,k,k], got {:?}", weight));
        }
        if weight[2] != weight[3] || weight[2] % 2 == 0 {
            return Err(structural!("conv kernel must be square and odd, got {}x{}", weight[2], weight[3]));
        }
        if input[1] != weight[1] {
            return Err(structural!(
                "conv input channels {} do not match weight input channels {}",
                input[1],
                weight[1]
            ));
        }
        if stride == 0 {
            return Err(structural!("conv stride must be at least 1"));
        }
        let (h, w) = (input[2], input[3]);
        Ok(ConvGeom {
            n: input[0],
            cin: input[1],
            h,
            w,
            cout: weight[0],
            k: weight[2],
            stride,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    /// Unfold one sample into a `[cin*k*k, ho*wo]` patch matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let cols = self.col_cols();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold a patch-matrix gradient back onto one input sample (accumulating).
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let cols = self.col_cols();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(geom: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.cin * geom.h * geom.w;
    let out_len = geom.cout * cols;
    let mut out = vec![0.0; geom.n * out_len];
    let mut col = vec![0.0; rows * cols];
    for s in 0..geom.n {
        geom.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
        gemm(geom.cout, rows, cols, weight, false, &col, false, 0.0, &mut out[s * out_len..(s + 1) * out_len]);
    }
    out
}

/// Returns `(d_input, d_weight)`.
pub(crate) fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.cin * geom.h * geom.w;
    let out_len = geom.cout * cols;
    let mut dx = vec![0.0; geom.n * in_len];
    let mut dw = vec![0.0; geom.cout * rows];
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    for s in 0..geom.n {
        let g = &dout[s * out_len..(s + 1) * out_len];
        geom.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
        gemm(geom.cout, cols, rows, g, false, &col, true, 1.0, &mut dw);
        gemm(rows, geom.cout, cols, weight, true, g, false, 0.0, &mut dcol);
        geom.col2im(&dcol, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    (dx, dw)
}

/// Zero-padded (`k/2`) cross-correlation. Output spatial dims are `ceil(H/stride)`.
pub fn forward_conv(input: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), weight.shape(), stride)?;
    let out = conv_forward(&geom, input.data(), weight.data());
    Tensor::new(geom.out_shape(), out)
}
