#![allow(dead_code)]

use dynscale::{Dims, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, dims: Dims, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_, _, _, _| T::lit(rng.gen_range(lo..hi)))
}

/// `||a - b|| / max(||b||, floor)` over flattened vectors.
pub fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x);
        x[i] = orig - step;
        let minus = f(x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

pub fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

use dynscale::model::{forward_head, head_backward, HeadParams, Model};
use dynscale::objective::{entropy_map, thresholded_entropy_backward, thresholded_entropy_loss};

/// Relative errors of the analytic score and scale filter gradients of the
/// thresholded entropy loss against central differences, with the active
/// mask frozen at the evaluation point. The head runs on a `size`×`size`
/// feature map of a random image and randomized head parameters.
pub fn head_gradient_errors(seed: u64, size: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let mut model = Model::<f64>::init(seed, 1, 4);
    for p in model.head.score.params_mut() {
        for v in p.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    for v in model.head.scale.weight.data_mut() {
        *v += r.gen_range(-0.3..0.3);
    }
    model.head.scale.bias.data_mut()[0] = r.gen_range(-1.0..1.5);
    let side = size * dynscale::model::DOWNSAMPLE;
    let image = random_tensor::<f64>(&mut r, Dims::new(1, 1, side, side), 0.0, 1.0);

    let cache = model.forward_full(&image).unwrap();
    let state = thresholded_entropy_loss(&cache.probs).unwrap();
    let grad_logits = thresholded_entropy_backward(&cache.probs, &state).unwrap();
    let grads = head_backward(&cache, &grad_logits, &model.head, model.radius_cap).unwrap();
    let mask = state.mask.clone();
    let features = cache.features.clone();
    let cap = model.radius_cap;

    let loss_of = |head: &HeadParams<f64>| -> f64 {
        let c = forward_head(features.clone(), head, cap).unwrap();
        let h = entropy_map(&c.probs).unwrap();
        h.data().iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum()
    };

    let mut errors = [0.0; 2];
    for (group, err) in errors.iter_mut().enumerate() {
        let g = if group == 0 { &grads.score } else { &grads.scale };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (pi, gt) in g.params().iter().enumerate() {
            analytic.extend(to_f64(gt));
            let mut probe = model.head.clone();
            let mut x = to_f64(param_mut(&mut probe, group, pi));
            numeric.extend(numeric_grad(&mut x, 1e-6, |v| {
                param_mut(&mut probe, group, pi).data_mut().copy_from_slice(v);
                loss_of(&probe)
            }));
        }
        *err = rel_error(&analytic, &numeric, 1e-12);
    }
    (errors[0], errors[1])
}

fn param_mut(head: &mut HeadParams<f64>, group: usize, index: usize) -> &mut Tensor<f64> {
    let conv = if group == 0 { &mut head.score } else { &mut head.scale };
    let [w, b] = conv.params_mut();
    if index == 0 {
        w
    } else {
        b
    }
}
