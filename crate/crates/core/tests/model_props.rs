mod common;

use std::time::Instant;

use common::{head_gradient_errors, random_tensor, rng};
use dynscale::model::{checkpoint_precision, forward_head, Model};
use dynscale::{Dims, Precision};

#[test]
fn head_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (score, scale) = head_gradient_errors(seed, 8);
        assert!(score < 1e-4, "seed {seed}: score {score}");
        assert!(scale < 1e-4, "seed {seed}: scale {scale}");
    }
}

#[test]
fn initial_sigma_stays_near_one() {
    let mut inside = 0usize;
    let mut total = 0usize;
    for seed in 0..100 {
        let model = Model::<f32>::init(seed, 1, 4);
        let image = random_tensor::<f32>(&mut rng(1000 + seed), Dims::new(1, 1, 64, 64), 0.0, 1.0);
        let cache = model.forward_full(&image).unwrap();
        for &s in cache.sigmas.values().data() {
            total += 1;
            if (0.5..=2.0).contains(&s) {
                inside += 1;
            }
        }
    }
    let frac = inside as f64 / total as f64;
    assert!(frac >= 0.99, "only {frac} of pixels in [0.5, 2]");
}

#[test]
fn forward_is_deterministic() {
    let model = Model::<f32>::init(5, 1, 4);
    let image = random_tensor::<f32>(&mut rng(6), Dims::new(1, 1, 32, 32), 0.0, 1.0);
    let a = model.forward_full(&image).unwrap();
    let b = model.forward_full(&image).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.sigmas.values(), b.sigmas.values());
}

#[test]
fn score_dims_follow_class_count() {
    let m = Model::<f64>::init(0, 1, 4);
    assert_eq!(m.head.score.weight.dims(), Dims::new(4, 64, 1, 1));
}

#[test]
fn head_pass_costs_at_most_half_a_full_pass() {
    let model = Model::<f32>::init(3, 1, 4);
    let image = random_tensor::<f32>(&mut rng(4), Dims::new(1, 1, 64, 64), 0.0, 1.0);
    let features = model.features(&image).unwrap();
    let best = |f: &mut dyn FnMut()| {
        (0..15)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    // Warm up caches and allocator.
    for _ in 0..3 {
        model.forward_full(&image).unwrap();
    }
    let full = best(&mut || {
        model.forward_full(&image).unwrap();
    });
    let head = best(&mut || {
        forward_head(features.clone(), &model.head, model.radius_cap).unwrap();
    });
    assert!(head <= 0.5 * full, "head {head:.5}s vs full {full:.5}s");
}

#[test]
fn checkpoints_round_trip_and_report_precision() {
    let m = Model::<f64>::init(9, 1, 4);
    let bytes = m.to_checkpoint_bytes();
    assert_eq!(checkpoint_precision(&bytes).unwrap(), Precision::Double);
    let back = Model::<f64>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), bytes);
    assert_eq!(back.fingerprint(), m.fingerprint());
    let single = m.cast::<f32>().to_checkpoint_bytes();
    assert_eq!(checkpoint_precision(&single).unwrap(), Precision::Single);
    assert!(Model::<f64>::from_checkpoint_bytes(&single).is_err());
    assert!(checkpoint_precision(b"nope").is_err());
}
