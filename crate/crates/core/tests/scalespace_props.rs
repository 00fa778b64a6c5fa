mod common;

use common::{dot, numeric_grad, random_tensor, rel_error, rng, to_f64};
use dynscale::scalespace::{
    adaptive_smooth, adaptive_smooth_backward, gaussian_kernel, kernel_dsigma, sigma_link,
    SigmaMap, SIGMA_MIN,
};
use dynscale::{Dims, Tensor};
use proptest::prelude::*;

/// Mirror an index about the edge samples (…, 2, 1, 0, 1, 2, …).
fn mirror(i: isize, n: isize) -> usize {
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Plain fixed-sigma Gaussian convolution written from the formula.
fn plain_gaussian(field: &Tensor<f64>, sigma: f64, radius: isize) -> Tensor<f64> {
    let d = field.dims();
    let mut norm = 0.0;
    for u in -radius..=radius {
        for v in -radius..=radius {
            norm += (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::from_fn(d, |n, c, y, x| {
        let mut acc = 0.0;
        for u in -radius..=radius {
            for v in -radius..=radius {
                let w = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                let yy = mirror(y as isize + u, d.h as isize);
                let xx = mirror(x as isize + v, d.w as isize);
                acc += w * field.at(n, c, yy, xx);
            }
        }
        acc
    })
}

fn uniform(d: Dims, sigma: f64) -> SigmaMap<f64> {
    SigmaMap::uniform(Dims::new(d.n, 1, d.h, d.w), sigma).unwrap()
}

#[test]
fn kernel_matches_gaussian_formula() {
    let k = gaussian_kernel(1.5, 4).unwrap();
    let mut z = 0.0;
    for u in -4..=4i32 {
        for v in -4..=4i32 {
            z += (-f64::from(u * u + v * v) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    for u in -4..=4i32 {
        for v in -4..=4i32 {
            let want = (-f64::from(u * u + v * v) / (2.0 * 1.5 * 1.5)).exp() / z;
            assert!((k.tap(u as isize, v as isize) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dsigma_matches_finite_differences() {
    let h = 1e-6;
    let d = kernel_dsigma(1.0, 3).unwrap();
    let plus = gaussian_kernel(1.0 + h, 3).unwrap();
    let minus = gaussian_kernel(1.0 - h, 3).unwrap();
    for i in 0..d.len() {
        let fd = (plus.taps[i] - minus.taps[i]) / (2.0 * h);
        assert!((d[i] - fd).abs() < 1e-7, "tap {i}: {} vs {fd}", d[i]);
    }
    assert!(kernel_dsigma(2.0, 0).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_sigma_equals_plain_convolution() {
    let mut r = rng(21);
    let field = random_tensor::<f64>(&mut r, Dims::new(1, 3, 16, 15), -1.0, 1.0);
    for (sigma, cap) in [(0.7, 12), (1.3, 12), (2.2, 12), (5.0, 12), (5.0, 6)] {
        let radius = ((3.0 * sigma as f64).ceil() as isize).min(cap as isize);
        let got = adaptive_smooth(&field, &uniform(field.dims(), sigma), cap).unwrap();
        let want = plain_gaussian(&field, sigma, radius);
        assert!(got.max_abs_diff(&want) < 1e-10, "sigma {sigma} cap {cap}");
    }
}

#[test]
fn semigroup_on_interior_pixels() {
    let mut r = rng(22);
    let field = random_tensor::<f64>(&mut r, Dims::new(1, 1, 64, 64), 0.0, 1.0);
    let d = field.dims();
    let twice = adaptive_smooth(
        &adaptive_smooth(&field, &uniform(d, 2.0), 12).unwrap(),
        &uniform(d, 5f64.sqrt()),
        12,
    )
    .unwrap();
    let once = adaptive_smooth(&field, &uniform(d, 3.0), 12).unwrap();
    // Interior: far enough that neither path touches the border.
    let margin = 6 + 7;
    let mut worst = 0.0f64;
    for y in margin..d.h - margin {
        for x in margin..d.w - margin {
            worst = worst.max((twice.at(0, 0, y, x) - once.at(0, 0, y, x)).abs());
        }
    }
    assert!(worst < 1e-3, "L-inf {worst}");
}

#[test]
fn smoothing_backward_matches_finite_differences() {
    let mut r = rng(23);
    let d = Dims::new(1, 2, 8, 8);
    let field = random_tensor::<f64>(&mut r, d, -1.0, 1.0);
    // Sigmas kept clear of the radius switch points where 3*sigma is an integer.
    let sig = Tensor::from_fn(Dims::new(1, 1, 8, 8), |_, _, y, x| {
        0.45 + 0.1 * ((y * 8 + x) % 7) as f64 + if (y + x) % 3 == 0 { 0.6 } else { 0.0 }
    });
    let sigmas = SigmaMap::new(sig.clone()).unwrap();
    let gout = random_tensor::<f64>(&mut r, d, -1.0, 1.0);
    let (gf, gs) = adaptive_smooth_backward(&gout, &field, &sigmas, 12).unwrap();

    let mut v = to_f64(&field);
    let num = numeric_grad(&mut v, 1e-6, |p| {
        let f = Tensor::from_vec(d, p.to_vec()).unwrap();
        dot(&adaptive_smooth(&f, &sigmas, 12).unwrap(), &gout)
    });
    assert!(rel_error(&to_f64(&gf), &num, 1e-12) < 1e-5);

    let mut v = to_f64(&sig);
    let num = numeric_grad(&mut v, 1e-6, |p| {
        let s = SigmaMap::new(Tensor::from_vec(sig.dims(), p.to_vec()).unwrap()).unwrap();
        dot(&adaptive_smooth(&field, &s, 12).unwrap(), &gout)
    });
    assert!(rel_error(&to_f64(&gs), &num, 1e-12) < 1e-5);
}

#[test]
fn constant_field_has_zero_interior_sigma_gradient() {
    let mut r = rng(24);
    let field = Tensor::<f64>::filled(Dims::new(1, 2, 12, 12), 0.8);
    let sig = random_tensor::<f64>(&mut r, Dims::new(1, 1, 12, 12), 0.4, 1.2);
    let gout = random_tensor::<f64>(&mut r, field.dims(), -1.0, 1.0);
    let (_, gs) = adaptive_smooth_backward(&gout, &field, &SigmaMap::new(sig).unwrap(), 12).unwrap();
    for y in 4..8 {
        for x in 4..8 {
            assert!(gs.at(0, 0, y, x).abs() < 1e-12);
        }
    }
}

#[test]
fn blur_reduces_local_total_variation() {
    let mut r = rng(25);
    let field = random_tensor::<f64>(&mut r, Dims::new(1, 1, 48, 48), 0.0, 1.0);
    let tv = |t: &Tensor<f64>| {
        let mut s = 0.0;
        for y in 20..28 {
            for x in 20..28 {
                s += (t.at(0, 0, y, x + 1) - t.at(0, 0, y, x)).abs();
                s += (t.at(0, 0, y + 1, x) - t.at(0, 0, y, x)).abs();
            }
        }
        s
    };
    let mut last = tv(&field);
    for sigma in [0.5, 1.0, 2.0, 4.0] {
        let s = adaptive_smooth(&field, &uniform(field.dims(), sigma), 12).unwrap();
        let now = tv(&s);
        assert!(now <= last, "sigma {sigma}: {now} > {last}");
        last = now;
    }
}

#[test]
fn softplus_link_is_overflow_safe() {
    let raw = Tensor::from_vec(Dims::new(1, 1, 1, 3), vec![0.0, 30.0, -800.0]).unwrap();
    let s = sigma_link(&raw).unwrap();
    let v = s.values();
    assert!((v.at(0, 0, 0, 0) - (SIGMA_MIN + 2f64.ln())).abs() < 1e-15);
    // ln(1 + e^30) = 30 + ln(1 + e^-30)
    let want = SIGMA_MIN + 30.0 + (-30f64).exp().ln_1p();
    assert!((v.at(0, 0, 0, 1) - want).abs() < 1e-12);
    assert_eq!(v.at(0, 0, 0, 2), SIGMA_MIN);
}

proptest! {
    #[test]
    fn kernels_are_normalized_and_symmetric(sigma in 0.05f64..8.0, radius in 0usize..14) {
        let k = gaussian_kernel(sigma, radius).unwrap();
        prop_assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let r = radius as isize;
        for u in -r..=r {
            for v in -r..=r {
                prop_assert_eq!(k.tap(u, v), k.tap(-u, v));
                prop_assert_eq!(k.tap(u, v), k.tap(u, -v));
            }
        }
        let d = kernel_dsigma(sigma, radius).unwrap();
        prop_assert!(d.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn smoothing_preserves_constants(c in -2.0f64..2.0, sigma in 0.3f64..6.0) {
        let field = Tensor::filled(Dims::new(1, 2, 9, 7), c);
        let out = adaptive_smooth(&field, &uniform(field.dims(), sigma), 12).unwrap();
        prop_assert!(out.max_abs_diff(&field) < 1e-12);
    }
}
