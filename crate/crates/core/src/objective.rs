//! Unsupervised inference objective and the supervised losses.
//!
//! Entropy is measured in nats. The thresholded loss keeps only the pixels whose
//! entropy is strictly above the image mean; when no pixel qualifies (a perfectly
//! flat entropy map) every pixel is kept instead. The mask is recomputed on every
//! call and held constant while differentiating.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// Lower clamp inside the log, realizing `0 * ln 0 = 0`.
const LOG_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-5;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

fn check_probs<T: Real>(op: &'static str, probs: &Tensor<T>) -> Result<()> {
    let d = probs.dims();
    let p = d.plane();
    for n in 0..d.n {
        for i in 0..p {
            let mut total = 0.0;
            for c in 0..d.c {
                let v = probs.data()[(n * d.c + c) * p + i].as_f64();
                if !(v >= 0.0) {
                    return Err(Error::invalid(op, format!("negative or NaN probability {v}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(
                    op,
                    format!("probabilities at pixel {i} sum to {total}"),
                ));
            }
        }
    }
    Ok(())
}

/// Pixel-wise Shannon entropy `H = -sum_c p_c ln p_c`, shape `(n, 1, h, w)`.
pub fn entropy_map<T: Real>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    check_probs("entropy_map", probs)?;
    let d = probs.dims();
    let p = d.plane();
    let mut out = Tensor::zeros(Dims::new(d.n, 1, d.h, d.w));
    for n in 0..d.n {
        for i in 0..p {
            let mut h = 0.0;
            for c in 0..d.c {
                let v = probs.data()[(n * d.c + c) * p + i].as_f64();
                if v > 0.0 {
                    h -= v * clamped_ln(v);
                }
            }
            out.data_mut()[n * p + i] = T::lit(h);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EntropyState<T> {
    pub entropy: Tensor<T>,
    pub mean: f64,
    /// Active pixels, flat over `(n, h, w)`.
    pub mask: Vec<bool>,
    pub loss: f64,
    /// True when no pixel exceeded the mean and all pixels were kept.
    pub fallback: bool,
}

impl<T: Real> EntropyState<T> {
    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sum of entropies over pixels above the mean entropy.
pub fn thresholded_entropy_loss<T: Real>(probs: &Tensor<T>) -> Result<EntropyState<T>> {
    let entropy = entropy_map(probs)?;
    Ok(threshold_entropy(entropy))
}

/// Thresholding step on an already computed entropy map.
pub fn threshold_entropy<T: Real>(entropy: Tensor<T>) -> EntropyState<T> {
    let count = entropy.len().max(1) as f64;
    let mean = entropy.data().iter().map(|h| h.as_f64()).sum::<f64>() / count;
    let mut mask: Vec<bool> = entropy.data().iter().map(|h| h.as_f64() > mean).collect();
    let fallback = !mask.iter().any(|&m| m);
    if fallback {
        mask.iter_mut().for_each(|m| *m = true);
    }
    let loss = entropy
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(h, _)| h.as_f64())
        .sum();
    EntropyState {
        entropy,
        mean,
        mask,
        loss,
        fallback,
    }
}

/// Gradient of the thresholded loss with respect to the pre-softmax logits,
/// with the mask frozen. At an active pixel `dL/dz_k = -p_k (ln p_k + H)`.
pub fn thresholded_entropy_backward<T: Real>(
    probs: &Tensor<T>,
    state: &EntropyState<T>,
) -> Result<Tensor<T>> {
    let d = probs.dims();
    let ed = state.entropy.dims();
    if ed != Dims::new(d.n, 1, d.h, d.w) || state.mask.len() != ed.len() {
        return Err(Error::shape("thresholded_entropy_backward", d, ed));
    }
    let p = d.plane();
    let mut grad = Tensor::zeros(d);
    for n in 0..d.n {
        for i in 0..p {
            if !state.mask[n * p + i] {
                continue;
            }
            let h = state.entropy.data()[n * p + i].as_f64();
            for c in 0..d.c {
                let idx = (n * d.c + c) * p + i;
                let pc = probs.data()[idx].as_f64();
                grad.data_mut()[idx] = T::lit(-pc * (clamped_ln(pc) + h));
            }
        }
    }
    Ok(grad)
}

/// Mean over non-ignored pixels of `-ln p_label`, with its logit gradient
/// `(p - onehot) / count`.
pub fn cross_entropy_loss<T: Real>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    ignore_label: u8,
) -> Result<(f64, Tensor<T>)> {
    let d = probs.dims();
    if d.n != 1 || labels.height() != d.h || labels.width() != d.w {
        return Err(Error::shape(
            "cross_entropy_loss",
            d,
            Dims::new(1, 1, labels.height(), labels.width()),
        ));
    }
    let p = d.plane();
    let mut count = 0usize;
    for &l in labels.data() {
        if l == ignore_label {
            continue;
        }
        if l as usize >= d.c {
            return Err(Error::invalid(
                "cross_entropy_loss",
                format!("label {l} out of range for {} classes", d.c),
            ));
        }
        count += 1;
    }
    let mut grad = Tensor::zeros(d);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == ignore_label {
            continue;
        }
        for c in 0..d.c {
            let pc = probs.data()[c * p + i].as_f64();
            let target = if c == l as usize { 1.0 } else { 0.0 };
            if c == l as usize {
                loss -= clamped_ln(pc);
            }
            grad.data_mut()[c * p + i] = T::lit((pc - target) * inv);
        }
    }
    Ok((loss * inv, grad))
}
