//! Continuous-scale Gaussian kernels and per-pixel adaptive smoothing.
//!
//! Each output pixel is smoothed with its own isotropic Gaussian, truncated at
//! `min(ceil(3 * sigma), radius_cap)` and renormalized after truncation. Borders
//! use reflect padding (the edge pixel is not repeated). Both the smoothed field
//! and the sigma map receive exact gradients.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// Floor of the sigma link; every predicted scale is at least this many pixels.
pub const SIGMA_MIN: f64 = 0.3;
pub const DEFAULT_RADIUS_CAP: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub radius: usize,
    /// Row-major `(2 * radius + 1)^2` taps.
    pub taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn tap(&self, u: isize, v: isize) -> f64 {
        let r = self.radius as isize;
        self.taps[((u + r) as usize) * self.side() + (v + r) as usize]
    }
}

fn check_sigma(op: &'static str, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(op, format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Normalized 1-D factor of the separable kernel. The 2-D taps are the outer
/// product of this vector with itself.
fn gaussian_1d(sigma: f64, radius: usize, out: &mut Vec<f64>) {
    out.clear();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let r = radius as isize;
    for u in -r..=r {
        out.push((-((u * u) as f64) * inv).exp());
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
}

/// d/dsigma of the normalized 1-D factor.
fn gaussian_1d_dsigma(sigma: f64, radius: usize, k1: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let r = radius as isize;
    let mean_sq: f64 = (-r..=r)
        .zip(k1)
        .map(|(u, k)| k * (u * u) as f64)
        .sum();
    let s3 = sigma * sigma * sigma;
    for (u, k) in (-r..=r).zip(k1) {
        out.push(k * ((u * u) as f64 - mean_sq) / s3);
    }
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<GaussianKernel> {
    check_sigma("gaussian_kernel", sigma)?;
    let mut k1 = Vec::new();
    gaussian_1d(sigma, radius, &mut k1);
    let taps = k1
        .iter()
        .flat_map(|a| k1.iter().map(move |b| a * b))
        .collect();
    Ok(GaussianKernel {
        sigma,
        radius,
        taps,
    })
}

/// Exact derivative of every normalized tap with respect to sigma.
pub fn kernel_dsigma(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    check_sigma("kernel_dsigma", sigma)?;
    let mut k1 = Vec::new();
    let mut d1 = Vec::new();
    gaussian_1d(sigma, radius, &mut k1);
    gaussian_1d_dsigma(sigma, radius, &k1, &mut d1);
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(side * side);
    for u in 0..side {
        for v in 0..side {
            out.push(d1[u] * k1[v] + k1[u] * d1[v]);
        }
    }
    Ok(out)
}

/// Per-pixel truncation radius.
pub fn radius_for(sigma: f64, radius_cap: usize) -> usize {
    ((3.0 * sigma).ceil() as usize).min(radius_cap)
}

/// Reflect index into `[0, len)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-pixel Gaussian scale map with every entry at or above `SIGMA_MIN`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaMap<T> {
    values: Tensor<T>,
}

impl<T: Real> SigmaMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.dims().c != 1 {
            return Err(Error::invalid(
                "sigma_map",
                format!("expected one channel, got {}", values.dims()),
            ));
        }
        // Single-precision softplus can land a hair under the floor.
        let floor = SIGMA_MIN - 1e-6;
        if let Some(v) = values.data().iter().find(|v| !(v.as_f64() >= floor)) {
            return Err(Error::invalid(
                "sigma_map",
                format!("sigma {v} below minimum {SIGMA_MIN}"),
            ));
        }
        Ok(SigmaMap { values })
    }

    pub fn uniform(dims: Dims, sigma: f64) -> Result<Self> {
        Self::new(Tensor::filled(dims, T::lit(sigma)))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn dims(&self) -> Dims {
        self.values.dims()
    }

    pub fn mean(&self) -> f64 {
        self.values.sum().as_f64() / self.values.len().max(1) as f64
    }
}

fn check_smooth_dims<T: Real>(
    op: &'static str,
    field: &Tensor<T>,
    sigmas: &SigmaMap<T>,
    radius_cap: usize,
) -> Result<()> {
    let fd = field.dims();
    let sd = sigmas.dims();
    if fd.n != sd.n || fd.h != sd.h || fd.w != sd.w {
        return Err(Error::shape(op, fd, sd));
    }
    if radius_cap == 0 {
        return Err(Error::invalid(op, "radius_cap must be at least 1"));
    }
    Ok(())
}

/// Kernel taps and reflected source coordinates for one output pixel.
struct PixelKernel<T> {
    radius: usize,
    k1: Vec<f64>,
    d1: Vec<f64>,
    taps: Vec<T>,
    dtaps: Vec<T>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl<T: Real> PixelKernel<T> {
    fn new() -> Self {
        PixelKernel {
            radius: 0,
            k1: Vec::new(),
            d1: Vec::new(),
            taps: Vec::new(),
            dtaps: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
        }
    }

    fn prepare(
        &mut self,
        sigma: f64,
        radius_cap: usize,
        y: usize,
        x: usize,
        h: usize,
        w: usize,
        with_derivative: bool,
    ) {
        let r = radius_for(sigma, radius_cap);
        self.radius = r;
        gaussian_1d(sigma, r, &mut self.k1);
        self.taps.clear();
        for a in &self.k1 {
            for b in &self.k1 {
                self.taps.push(T::lit(a * b));
            }
        }
        if with_derivative {
            gaussian_1d_dsigma(sigma, r, &self.k1, &mut self.d1);
            self.dtaps.clear();
            let side = 2 * r + 1;
            for u in 0..side {
                for v in 0..side {
                    self.dtaps
                        .push(T::lit(self.d1[u] * self.k1[v] + self.k1[u] * self.d1[v]));
                }
            }
        }
        let ri = r as isize;
        self.rows.clear();
        self.cols.clear();
        for u in -ri..=ri {
            self.rows.push(reflect(y as isize + u, h));
            self.cols.push(reflect(x as isize + u, w));
        }
    }
}

/// Image `n` of an NCHW tensor as a pixel-major `(h * w, c)` buffer, so each
/// kernel tap touches one contiguous channel vector.
fn to_channels_last<T: Real>(t: &Tensor<T>, n: usize) -> Vec<T> {
    let d = t.dims();
    let p = d.plane();
    let mut out = vec![T::zero(); p * d.c];
    for c in 0..d.c {
        for (i, v) in t.plane(n, c).iter().enumerate() {
            out[i * d.c + c] = *v;
        }
    }
    out
}

fn from_channels_last<T: Real>(src: &[T], t: &mut Tensor<T>, n: usize) {
    let d = t.dims();
    for c in 0..d.c {
        for (i, v) in t.plane_mut(n, c).iter_mut().enumerate() {
            *v = src[i * d.c + c];
        }
    }
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * *v;
    }
}

/// `out[c, i, j] = sum_{u,v} K(sigma[i, j])[u, v] * field[c, i + u, j + v]`.
pub fn adaptive_smooth<T: Real>(
    field: &Tensor<T>,
    sigmas: &SigmaMap<T>,
    radius_cap: usize,
) -> Result<Tensor<T>> {
    check_smooth_dims("adaptive_smooth", field, sigmas, radius_cap)?;
    let d = field.dims();
    let mut out = Tensor::zeros(d);
    let mut pk = PixelKernel::<T>::new();
    let mut res = vec![T::zero(); d.plane() * d.c];
    for n in 0..d.n {
        let src = to_channels_last(field, n);
        let splane = sigmas.values().plane(n, 0);
        for (pix, acc) in res.chunks_mut(d.c).enumerate() {
            let (y, x) = (pix / d.w, pix % d.w);
            pk.prepare(splane[pix].as_f64(), radius_cap, y, x, d.h, d.w, false);
            let side = 2 * pk.radius + 1;
            acc.fill(T::zero());
            for (u, &sy) in pk.rows.iter().enumerate() {
                for (v, &sx) in pk.cols.iter().enumerate() {
                    let at = (sy * d.w + sx) * d.c;
                    axpy(acc, pk.taps[u * side + v], &src[at..at + d.c]);
                }
            }
        }
        from_channels_last(&res, &mut out, n);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SmoothGrads<T> {
    pub field: Option<Tensor<T>>,
    pub sigmas: Tensor<T>,
}

/// Gradients of `sum(grad_out * adaptive_smooth(field, sigmas))`.
///
/// The field gradient scatters each output pixel's gradient back through that
/// pixel's own kernel. It is skipped when `need_field` is false.
pub fn adaptive_smooth_backward_with<T: Real>(
    grad_out: &Tensor<T>,
    field: &Tensor<T>,
    sigmas: &SigmaMap<T>,
    radius_cap: usize,
    need_field: bool,
) -> Result<SmoothGrads<T>> {
    check_smooth_dims("adaptive_smooth_backward", field, sigmas, radius_cap)?;
    let d = field.dims();
    if grad_out.dims() != d {
        return Err(Error::shape("adaptive_smooth_backward", grad_out.dims(), d));
    }
    let mut gsig = Tensor::zeros(sigmas.dims());
    let mut gfield = need_field.then(|| Tensor::zeros(d));
    let mut pk = PixelKernel::<T>::new();
    let mut weighted = vec![T::zero(); d.c];
    let mut gf_last = vec![T::zero(); if need_field { d.plane() * d.c } else { 0 }];
    for n in 0..d.n {
        let src = to_channels_last(field, n);
        let go = to_channels_last(grad_out, n);
        let splane = sigmas.values().plane(n, 0);
        gf_last.iter_mut().for_each(|v| *v = T::zero());
        for pix in 0..d.plane() {
            let g = &go[pix * d.c..(pix + 1) * d.c];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let (y, x) = (pix / d.w, pix % d.w);
            pk.prepare(splane[pix].as_f64(), radius_cap, y, x, d.h, d.w, true);
            let side = 2 * pk.radius + 1;
            weighted.fill(T::zero());
            for (u, &sy) in pk.rows.iter().enumerate() {
                for (v, &sx) in pk.cols.iter().enumerate() {
                    let at = (sy * d.w + sx) * d.c;
                    axpy(&mut weighted, pk.dtaps[u * side + v], &src[at..at + d.c]);
                    if need_field {
                        axpy(&mut gf_last[at..at + d.c], pk.taps[u * side + v], g);
                    }
                }
            }
            gsig.plane_mut(n, 0)[pix] = g.iter().zip(&weighted).map(|(a, b)| *a * *b).sum();
        }
        if let Some(gf) = gfield.as_mut() {
            from_channels_last(&gf_last, gf, n);
        }
    }
    Ok(SmoothGrads {
        field: gfield,
        sigmas: gsig,
    })
}

pub fn adaptive_smooth_backward<T: Real>(
    grad_out: &Tensor<T>,
    field: &Tensor<T>,
    sigmas: &SigmaMap<T>,
    radius_cap: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = adaptive_smooth_backward_with(grad_out, field, sigmas, radius_cap, true)?;
    Ok((g.field.expect("field gradient requested"), g.sigmas))
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigma = SIGMA_MIN + softplus(raw)`.
pub fn sigma_link<T: Real>(raw: &Tensor<T>) -> Result<SigmaMap<T>> {
    SigmaMap::new(raw.map(|r| T::lit(SIGMA_MIN + softplus(r.as_f64()))))
}

pub fn sigma_link_backward<T: Real>(grad_sigma: &Tensor<T>, raw: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_sigma.dims() != raw.dims() {
        return Err(Error::shape("sigma_link_backward", grad_sigma.dims(), raw.dims()));
    }
    let data = grad_sigma
        .data()
        .iter()
        .zip(raw.data())
        .map(|(g, r)| *g * T::lit(logistic(r.as_f64())))
        .collect();
    Tensor::from_vec(raw.dims(), data)
}

/// Inverse of the link: the raw value that produces `sigma`.
pub fn sigma_link_inverse(sigma: f64) -> f64 {
    let s = sigma - SIGMA_MIN;
    assert!(s > 0.0, "sigma must exceed SIGMA_MIN");
    // ln(exp(s) - 1), stable for large s
    s + (-(-s).exp()).ln_1p()
}
