//! Dense row-major `f32` tensors and the handful of kernels the layers need.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Panics if any dimension is zero.
    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Shape `[1]` tensor, the broadcastable scalar.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice. Panics on an empty slice.
    pub fn from_slice(values: &[f32]) -> Self {
        assert!(!values.is_empty(), "empty tensor");
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Row `i` along the leading axis. A 1-D tensor yields a `[1]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let rows = self.shape[0];
        if i >= rows {
            return Err(Error::InvalidShape(format!(
                "row {i} out of range for shape {:?}",
                self.shape
            )));
        }
        let row_shape = self.row_shape();
        let width = self.data.len() / rows;
        Ok(Tensor {
            shape: row_shape,
            data: self.data[i * width..(i + 1) * width].to_vec(),
        })
    }

    /// Shape of one leading-axis slice.
    pub fn row_shape(&self) -> Vec<usize> {
        if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        }
    }

    /// Stack equally shaped rows along a new leading axis.
    pub fn stack_rows(rows: &[Tensor], full_shape: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(full_shape.iter().product());
        for r in rows {
            data.extend_from_slice(&r.data);
        }
        Tensor::new(full_shape.to_vec(), data)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_scaled", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Elementwise product. `b` may be a `[1]` scalar, which broadcasts.
    pub fn hadamard(&self, b: &Tensor) -> Result<Tensor> {
        if b.is_scalar() {
            return Ok(self.scale(b.data[0]));
        }
        if self.shape != b.shape {
            return Err(shape_err("hadamard", &self.shape, &b.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
        })
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape != b.shape {
            return Err(shape_err("add", &self.shape, &b.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        })
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[0] {
            return Err(shape_err("matmul", &self.shape, &b.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Cross-correlation of a `[c_in,h,w]` input with `[c_out,c_in,kh,kw]` kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || kernels.rank() != 4 || kernels.shape[1] != self.shape[0] {
            return Err(shape_err("conv2d", &self.shape, &kernels.shape));
        }
        let geom = ConvGeom::new(
            self.shape[0],
            self.shape[1],
            self.shape[2],
            kernels.shape[0],
            kernels.shape[2],
            kernels.shape[3],
            stride,
            padding,
        )
        .ok_or_else(|| shape_err("conv2d", &self.shape, &kernels.shape))?;
        let mut out = vec![0.0; geom.out_len()];
        conv2d_forward(&geom, &self.data, &kernels.data, &mut out);
        Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)
    }
}

pub(crate) fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_dim(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > n + 2 * padding {
        return None;
    }
    Some((n + 2 * padding - k) / stride + 1)
}

/// `(n - 1) * s - 2p + k`, or `None` when padding eats the whole output.
pub fn transposed_output_dim(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 {
        return None;
    }
    let full = (n - 1) * stride + k;
    if full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Geometry shared by the direct and transposed convolution kernels.
/// For the transposed case the "input" here is the larger map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: conv_output_dim(h, kh, stride, pad)?,
            ow: conv_output_dim(w, kw, stride, pad)?,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    /// Output range `[lo, hi)` along one axis whose input index `o*s + k - p` is in bounds.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.pad;
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= n_in - 1  <=>  o <= (n_in - 1 + p - k) / s
        let hi = if n_in + p <= k {
            0
        } else {
            ((n_in - 1 + p - k) / s + 1).min(n_out)
        };
        (lo, hi.max(lo))
    }
}

/// `out[co, oy, ox] += sum w[co, ci, ky, kx] * x[ci, oy*s+ky-p, ox*s+kx-p]`.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &x_c[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let base = kx + ox_lo - g.pad;
                            for (o, xv) in orow[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&xrow[base..base + (ox_hi - ox_lo)])
                            {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `gy`.
/// Accumulates into `gw` and `gx` when supplied. `x` may be empty when `gw` is `None`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    mut gw: Option<&mut [f32]>,
    mut gx: Option<&mut [f32]>,
) {
    for co in 0..g.c_out {
        let gy_c = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let x_c = if x.is_empty() {
                x
            } else {
                &x[ci * g.h * g.w..(ci + 1) * g.h * g.w]
            };
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = 0.0f32;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gy_c[oy * g.ow..(oy + 1) * g.ow];
                        if gw.is_some() {
                            let xrow = &x_c[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gx_row = &mut gx[ci * g.h * g.w + iy * g.w..][..g.w];
                            for ox in ox_lo..ox_hi {
                                gx_row[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Transposed convolution, `x: [c_in,h,w]`, `w: [c_in,c_out,kh,kw]`,
/// producing `[c_out, (h-1)s-2p+kh, (w-1)s-2p+kw]`. This is the adjoint of
/// [`conv2d_forward`] taken from the output map back to the input map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_forward(
    c_in: usize,
    h: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
) {
    let (oh, ow) = (
        transposed_output_dim(h, kh, stride, pad).unwrap(),
        transposed_output_dim(w_in, kw, stride, pad).unwrap(),
    );
    // A direct convolution of the large map [c_out,oh,ow] with kernels
    // [c_in,c_out,kh,kw] lands on [c_in,h,w]; scatter through its adjoint.
    let g = ConvGeom {
        c_in: c_out,
        h: oh,
        w: ow,
        c_out: c_in,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w_in,
    };
    // gx of the direct conv is exactly the transposed-conv output.
    conv2d_backward(&g, &[], w, x, None, Some(out));
}

/// Backward of [`conv_transpose_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    c_in: usize,
    h: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    gw: &mut [f32],
    gx: Option<&mut [f32]>,
) {
    let (oh, ow) = (
        transposed_output_dim(h, kh, stride, pad).unwrap(),
        transposed_output_dim(w_in, kw, stride, pad).unwrap(),
    );
    let g = ConvGeom {
        c_in: c_out,
        h: oh,
        w: ow,
        c_out: c_in,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w_in,
    };
    // y = A^T x where A is the direct conv map from the large grid.
    // dL/dx = A gy, a direct conv of gy.
    if let Some(gx) = gx {
        conv2d_forward(&g, gy, w, gx);
    }
    // dL/dw[ci,co,ky,kx] = sum x[ci,o] * gy[co, o*s+k-p], the direct-conv weight
    // gradient with gy as the input and x as the upstream gradient.
    conv2d_backward(&g, gy, w, x, Some(gw), None);
}
