//! Dense NCHW tensors and the fixed set of layers the model is built from.
//!
//! Every forward op has a hand-derived backward counterpart. There is no
//! computation graph: callers keep whatever activations the backward pass
//! needs and feed them back explicitly.
//!
//! Convolution uses cross-correlation indexing (no kernel flip) with stride 1:
//! `out[o, y, x] = b[o] + sum_{i, ky, kx} w[o, i, ky, kx] * in[i, y + ky - p, x + kx - p]`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tag(self) -> u32 {
        match self {
            Precision::Single => 1,
            Precision::Double => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Precision::Single),
            2 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Floating-point element type. Precision is fixed by the type a tensor is
/// constructed with, never by global state.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides and sizes must address memory inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    );
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    ) {
        matrixmultiply::sgemm(
            m, k, n, alpha, a, a_strides.0, a_strides.1, b, b_strides.0, b_strides.1, beta, c,
            c_strides.0, c_strides.1,
        );
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    ) {
        matrixmultiply::dgemm(
            m, k, n, alpha, a, a_strides.0, a_strides.1, b, b_strides.0, b_strides.1, beta, c,
            c_strides.0, c_strides.1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "data length {} does not match dims {dims} (expected {})",
                    data.len(),
                    dims.len()
                ),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h * w` plane for batch item `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    fn expect_dims(&self, op: &'static str, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(op, self.dims, dims));
        }
        Ok(())
    }
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    out: Dims,
}

fn conv_geometry<T: Real>(
    input: Dims,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<ConvGeometry> {
    let wd = weights.dims();
    if wd.c != input.c {
        return Err(Error::shape("conv2d", input, wd));
    }
    if wd.h != wd.w || wd.h % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be square with odd size, got {wd}"),
        ));
    }
    let k = wd.h;
    if input.h + 2 * padding < k || input.w + 2 * padding < k {
        return Err(Error::shape("conv2d", input, wd));
    }
    Ok(ConvGeometry {
        n: input.n,
        c_in: input.c,
        c_out: wd.n,
        k,
        out: Dims::new(
            input.n,
            wd.n,
            input.h + 2 * padding - k + 1,
            input.w + 2 * padding - k + 1,
        ),
    })
}

/// Row-major `c = a * b (+ c)`, with either operand optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let sa = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let sb = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa,
            b.as_ptr(),
            sb,
            beta,
            c.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}

/// Unfolds one image `(c, h, w)` into a `(c * k * k, oh * ow)` patch matrix.
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, k: usize, p: usize, col: &mut [T]) {
    let (oh, ow) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
    let plane = oh * ow;
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                for y in 0..oh {
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    let sy = y + ky;
                    if sy < p || sy >= h + p {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(sy - p) * w..(sy - p + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x + kx;
                        *d = if sx < p || sx >= w + p { T::zero() } else { srow[sx - p] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, p: usize, img: &mut [T]) {
    let (oh, ow) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                for y in 0..oh {
                    let sy = y + ky;
                    if sy < p || sy >= h + p {
                        continue;
                    }
                    let drow = &mut dst[(sy - p) * w..(sy - p + 1) * w];
                    for (x, v) in row[y * ow..(y + 1) * ow].iter().enumerate() {
                        let sx = x + kx;
                        if sx >= p && sx < w + p {
                            drow[sx - p] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix for image `b`, borrowing the input directly for 1x1 kernels.
fn patches<'a, T: Real>(
    input: &'a Tensor<T>,
    b: usize,
    g: &ConvGeometry,
    padding: usize,
    buf: &'a mut Vec<T>,
) -> &'a [T] {
    let d = input.dims();
    let img = &input.data()[b * d.c * d.plane()..(b + 1) * d.c * d.plane()];
    if g.k == 1 && padding == 0 {
        return img;
    }
    buf.resize(g.c_in * g.k * g.k * g.out.plane(), T::zero());
    im2col(img, d.c, d.h, d.w, g.k, padding, buf);
    buf
}

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.dims(), weights, padding)?;
    if bias.len() != g.c_out {
        return Err(Error::invalid(
            "conv2d",
            format!("bias length {} != output channels {}", bias.len(), g.c_out),
        ));
    }
    let rows = g.c_in * g.k * g.k;
    let plane = g.out.plane();
    let mut out = Tensor::zeros(g.out);
    let mut buf = Vec::new();
    for b in 0..g.n {
        let col = patches(input, b, &g, padding, &mut buf);
        let dst = &mut out.data_mut()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(g.c_out, rows, plane, weights.data(), false, col, false, dst, true);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradient of `sum(grad_out * conv2d(input, weights))` with respect to the input.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    input_dims: Dims,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input_dims, weights, padding)?;
    if grad_out.dims() != g.out {
        return Err(Error::shape("conv2d_backward", grad_out.dims(), g.out));
    }
    let rows = g.c_in * g.k * g.k;
    let plane = g.out.plane();
    let in_len = input_dims.c * input_dims.plane();
    let mut out = Tensor::zeros(input_dims);
    let direct = g.k == 1 && padding == 0;
    let mut col = vec![T::zero(); if direct { 0 } else { rows * plane }];
    for b in 0..g.n {
        let go = &grad_out.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let dst = &mut out.data_mut()[b * in_len..(b + 1) * in_len];
        if direct {
            gemm(rows, g.c_out, plane, weights.data(), true, go, false, dst, false);
        } else {
            gemm(rows, g.c_out, plane, weights.data(), true, go, false, &mut col, false);
            col2im(&col, input_dims.c, input_dims.h, input_dims.w, g.k, padding, dst);
        }
    }
    Ok(out)
}

/// Gradients with respect to the weights and bias only.
pub fn conv2d_backward_params<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let g = conv_geometry(input.dims(), weights, padding)?;
    if grad_out.dims() != g.out {
        return Err(Error::shape("conv2d_backward", grad_out.dims(), g.out));
    }
    let rows = g.c_in * g.k * g.k;
    let plane = g.out.plane();
    let mut gw = Tensor::zeros(weights.dims());
    let mut gb = vec![T::zero(); g.c_out];
    let mut buf = Vec::new();
    for b in 0..g.n {
        let go = &grad_out.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in go.chunks(plane).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
        let col = patches(input, b, &g, padding, &mut buf);
        gemm(g.c_out, plane, rows, go, false, col, true, gw.data_mut(), true);
    }
    Ok((gw, gb))
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let (gw, gb) = conv2d_backward_params(grad_out, input, weights, padding)?;
    let gi = conv2d_backward_input(grad_out, input.dims(), weights, padding)?;
    Ok(Conv2dGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_dims("relu_backward", input.dims())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data)
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let d = input.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::invalid(
            "avgpool2",
            format!("spatial dims must be even, got {d}"),
        ));
    }
    let od = Dims::new(d.n, d.c, d.h / 2, d.w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..od.h {
                let r0 = &src[2 * y * d.w..(2 * y + 1) * d.w];
                let r1 = &src[(2 * y + 1) * d.w..(2 * y + 2) * d.w];
                for x in 0..od.w {
                    dst[y * od.w + x] =
                        (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_backward<T: Real>(grad_out: &Tensor<T>, input_dims: Dims) -> Result<Tensor<T>> {
    let expected = Dims::new(input_dims.n, input_dims.c, input_dims.h / 2, input_dims.w / 2);
    if input_dims.h % 2 != 0 || input_dims.w % 2 != 0 {
        return Err(Error::invalid(
            "avgpool2_backward",
            format!("spatial dims must be even, got {input_dims}"),
        ));
    }
    grad_out.expect_dims("avgpool2_backward", expected)?;
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(input_dims);
    for n in 0..input_dims.n {
        for c in 0..input_dims.c {
            let src = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..input_dims.h {
                for x in 0..input_dims.w {
                    dst[y * input_dims.w + x] = src[(y / 2) * expected.w + x / 2] * quarter;
                }
            }
        }
    }
    Ok(out)
}

/// Linear interpolation taps for one axis, align-corners-false: output pixel
/// `o` samples the input at `(o + 0.5) / factor - 0.5`, clamped to the edge.
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_bilinear", "factor must be positive"));
    }
    let d = input.dims();
    if d.h == 0 || d.w == 0 {
        return Err(Error::invalid("upsample_bilinear", "empty spatial dims"));
    }
    let od = Dims::new(d.n, d.c, d.h * factor, d.w * factor);
    let rows = bilinear_taps(d.h, factor);
    let cols = bilinear_taps(d.w, factor);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                let ly = T::lit(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let lx = T::lit(lx);
                    let hx = T::one() - lx;
                    dst[oy * od.w + ox] = hy * (hx * src[y0 * d.w + x0] + lx * src[y0 * d.w + x1])
                        + ly * (hx * src[y1 * d.w + x0] + lx * src[y1 * d.w + x1]);
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let od = grad_out.dims();
    if factor == 0 || od.h % factor != 0 || od.w % factor != 0 {
        return Err(Error::invalid(
            "upsample_bilinear_backward",
            format!("dims {od} not divisible by factor {factor}"),
        ));
    }
    let d = Dims::new(od.n, od.c, od.h / factor, od.w / factor);
    let rows = bilinear_taps(d.h, factor);
    let cols = bilinear_taps(d.w, factor);
    let mut out = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                let ly = T::lit(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let lx = T::lit(lx);
                    let hx = T::one() - lx;
                    let g = src[oy * od.w + ox];
                    dst[y0 * d.w + x0] += g * hy * hx;
                    dst[y0 * d.w + x1] += g * hy * lx;
                    dst[y1 * d.w + x0] += g * ly * hx;
                    dst[y1 * d.w + x1] += g * ly * lx;
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let d = input.dims();
    let p = d.plane();
    let mut out = Tensor::zeros(d);
    let mut buf = vec![T::zero(); d.c];
    for n in 0..d.n {
        let base = n * d.c * p;
        for i in 0..p {
            let mut max = T::neg_infinity();
            for c in 0..d.c {
                let v = input.data()[base + c * p + i];
                buf[c] = v;
                max = max.max(v);
            }
            let mut total = T::zero();
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for c in 0..d.c {
                out.data_mut()[base + c * p + i] = buf[c] / total;
            }
        }
    }
    out
}
