//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dynscale::adapt::{adapt_episode, sweep, AdaptConfig, MetricsRow, Mode, SweepPlan, Variables};
use dynscale::data::{gen_dataset, GeneratorSpec, NUM_CLASSES};
use dynscale::model::Model;
use dynscale::objective::{
    entropy_map, threshold_entropy, thresholded_entropy_backward, thresholded_entropy_loss,
};
use dynscale::scalespace::{adaptive_smooth, gaussian_kernel, kernel_dsigma, SigmaMap};
use dynscale::tensor::softmax_channels;
use dynscale::train::{train_model, Augment, TrainConfig};
use dynscale::{Dims, Tensor};

/// Evaluation seeds, disjoint from every seed used while choosing the recipe.
const EVAL_SEEDS: [u64; 10] = [101, 102, 103, 104, 105, 106, 107, 108, 109, 110];
const IMAGES_PER_SEED: usize = 6;
const SIZE: (usize, usize) = (64, 64);
const TRAIN_SCENES: usize = 400;
const TRAIN_BASE_SEED: u64 = 1000;

/// Shapes span a wide radius range so that the scale regressor sees real
/// size variation during training.
fn generator() -> GeneratorSpec {
    GeneratorSpec { radius_min: 3.0, radius_max: 20.0, ..GeneratorSpec::default() }
}

fn train_config(augment: Augment) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 2,
        base_lr: 0.02,
        momentum: 0.9,
        weight_decay: 1e-4,
        poly_power: 0.9,
        augment,
        seed: 1,
    }
}

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, detail: String) -> Verdict {
    println!("criterion {id:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

fn points(rows: &[MetricsRow], scale: f64, mode: Mode, vars: Variables, steps: usize) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.scale == scale && r.mode == mode && r.steps == steps)
        .filter(|r| mode == Mode::Baseline || r.variables == vars)
        .map(|r| r.miou)
        .collect();
    assert_eq!(picked.len(), EVAL_SEEDS.len(), "{mode} {vars} {steps} at {scale}");
    100.0 * picked.iter().sum::<f64>() / picked.len() as f64
}

fn plan(scales: &[f64], configs: Vec<AdaptConfig>) -> SweepPlan {
    SweepPlan {
        scales: scales.to_vec(),
        seeds: EVAL_SEEDS.to_vec(),
        images_per_seed: IMAGES_PER_SEED,
        size: SIZE,
        generator: generator(),
        configs,
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (score, scale) = common::head_gradient_errors(500 + seed, 8);
        worst = (worst.0.max(score), worst.1.max(scale));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        worst.0 < 1e-4 && worst.1 < 1e-4 && secs < 60.0,
        format!("max rel err score {:.2e}, scale {:.2e} over 20 instances in {secs:.1}s", worst.0, worst.1),
    )
}

fn criterion_2() -> Verdict {
    let mut norm_err = 0.0f64;
    let mut dsum_err = 0.0f64;
    for &sigma in &[0.3, 0.5, 1.0, 1.5, 2.7, 4.0] {
        for radius in [0usize, 1, 3, 6, 12] {
            let k = gaussian_kernel(sigma, radius).unwrap();
            norm_err = norm_err.max((k.taps.iter().sum::<f64>() - 1.0).abs());
            dsum_err = dsum_err.max(kernel_dsigma(sigma, radius).unwrap().iter().sum::<f64>().abs());
        }
    }
    let delta = gaussian_kernel(1e-3, 2).unwrap();
    let off_center: f64 = delta.taps.iter().enumerate().filter(|(i, _)| *i != 12).map(|(_, v)| v).sum();
    let delta_ok = (delta.tap(0, 0) - 1.0).abs() < 1e-12 && off_center < 1e-12;

    let mut rng = common::rng(2);
    let field = common::random_tensor::<f64>(&mut rng, Dims::new(1, 1, 64, 64), 0.0, 1.0);
    let u = |s: f64| SigmaMap::uniform(Dims::new(1, 1, 64, 64), s).unwrap();
    let two = adaptive_smooth(&adaptive_smooth(&field, &u(2.0), 12).unwrap(), &u(5f64.sqrt()), 12).unwrap();
    let one = adaptive_smooth(&field, &u(3.0), 12).unwrap();
    let m = 13;
    let mut linf = 0.0f64;
    for y in m..64 - m {
        for x in m..64 - m {
            linf = linf.max((two.at(0, 0, y, x) - one.at(0, 0, y, x)).abs());
        }
    }
    report(
        2,
        norm_err <= 1e-9 && dsum_err <= 1e-9 && delta_ok && linf < 1e-3,
        format!("normalization {norm_err:.1e}, derivative sum {dsum_err:.1e}, delta limit {delta_ok}, semigroup L-inf {linf:.2e}"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = common::rng(3);
    let logits = common::random_tensor::<f64>(&mut rng, Dims::new(1, 5, 16, 16), -6.0, 6.0);
    let h = entropy_map(&softmax_channels(&logits)).unwrap();
    let bounds = h.data().iter().all(|&v| v >= 0.0 && v <= 5f64.ln() + 1e-9);

    let worked = threshold_entropy(Tensor::from_vec(Dims::new(1, 1, 2, 2), vec![0.2, 0.8, 0.5, 0.9]).unwrap());
    let worked_ok = (worked.mean - 0.6).abs() < 1e-12
        && (worked.loss - 1.7).abs() < 1e-12
        && worked.mask == vec![false, true, false, true];

    let uniform = entropy_map(&Tensor::<f64>::filled(Dims::new(1, 4, 3, 3), 0.25)).unwrap();
    let uniform_ok = uniform.data().iter().all(|&v| (v - 4f64.ln()).abs() < 1e-12);
    let onehot = Tensor::<f64>::from_fn(Dims::new(1, 4, 3, 3), |_, c, _, _| if c == 2 { 1.0 } else { 0.0 });
    let onehot_ok = entropy_map(&onehot).unwrap().data().iter().all(|&v| v == 0.0);

    let probs = softmax_channels(&logits);
    let state = thresholded_entropy_loss(&probs).unwrap();
    let g = thresholded_entropy_backward(&probs, &state).unwrap();
    let plane = 16 * 16;
    let support_ok = state
        .mask
        .iter()
        .enumerate()
        .filter(|(_, m)| !**m)
        .all(|(i, _)| (0..5).all(|c| g.data()[c * plane + i] == 0.0));
    report(
        3,
        bounds && worked_ok && uniform_ok && onehot_ok && support_ok,
        format!("bounds {bounds}, worked example {worked_ok}, uniform {uniform_ok}, one-hot {onehot_ok}, zero outside mask {support_ok}"),
    )
}

fn train(augment: Augment) -> (Model<f32>, f64) {
    let spec = generator();
    let data = gen_dataset(TRAIN_BASE_SEED, TRAIN_SCENES, SIZE, 1.0, &spec).unwrap();
    let t = Instant::now();
    let out = train_model::<f32>(&data, &train_config(augment), &spec, NUM_CLASSES).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let last = out.log.last().unwrap();
    println!(
        "  trained ({augment}) in {secs:.0}s: final loss {:.4}, train mIoU {:.4}",
        last.loss, last.train_miou
    );
    (out.model, secs)
}

fn entropy_descent(model: &Model<f32>) -> (usize, usize) {
    let p = plan(&[3.0], Vec::new());
    let cfg = AdaptConfig::new(Mode::Entropy, Variables::Both, 32);
    let mut lower = 0;
    let mut total = 0;
    for &seed in &EVAL_SEEDS {
        for scene in dynscale::adapt::sweep_scenes(&p, seed, 3.0).unwrap() {
            let t = adapt_episode(&scene.image, model, None, &cfg).unwrap();
            total += 1;
            if t.records[32].mean_entropy < t.records[0].mean_entropy {
                lower += 1;
            }
        }
    }
    (lower, total)
}

fn criterion_9(model: &Model<f32>) -> Verdict {
    // Episodic isolation.
    let before = model.fingerprint();
    let p = plan(&[3.0], Vec::new());
    for (i, scene) in dynscale::adapt::sweep_scenes(&p, 101, 3.0).unwrap().iter().take(3).enumerate() {
        let mode = [Mode::Entropy, Mode::Oracle, Mode::Adversary][i];
        adapt_episode(&scene.image, model, Some(&scene.labels), &AdaptConfig::new(mode, Variables::Both, 8)).unwrap();
    }
    let isolated = model.fingerprint() == before;

    // Checkpoint round trip.
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.bin");
    model.save(&ck).unwrap();
    let back = Model::<f32>::load(&ck).unwrap();
    let round_trip = back.to_checkpoint_bytes() == model.to_checkpoint_bytes() && back.fingerprint() == before;

    // Every subcommand run twice with fixed seeds.
    let bin = env!("CARGO_BIN_EXE_dynscale");
    let mut reproducible = true;
    let steps: [&[&str]; 5] = [
        &["gen", "--out", "train", "--count", "8", "--size", "32x32", "--seed", "3"],
        &["train", "--data", "train", "--out", "m.bin", "--epochs", "2", "--batch-size", "4", "--seed", "3"],
        &["adapt", "--ckpt", "m.bin", "--data", "train", "--steps", "4", "--out", "a.csv", "--dump-maps", "maps"],
        &["sweep", "--ckpt", "m.bin", "--scales", "1,2", "--seeds", "1,2", "--images", "2", "--size", "32x32", "--steps", "4", "--out", "s.csv"],
        &["report", "s.csv", "a.csv", "--out", "r.txt"],
    ];
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for args in steps {
        for run in &runs {
            let out = Command::new(bin).args(args).current_dir(run.path()).output().unwrap();
            reproducible &= out.status.success();
        }
    }
    reproducible &= snapshot(runs[0].path()) == snapshot(runs[1].path());
    report(
        9,
        isolated && round_trip && reproducible,
        format!("parameter hash unchanged {isolated}, checkpoint bitwise {round_trip}, CLI reruns identical {reproducible}"),
    )
}

/// Every file under `dir` with its bytes, in path order.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3()];

    let c4_start = Instant::now();
    let (plain, _) = train(Augment::None);
    let baseline = AdaptConfig::new(Mode::Baseline, Variables::Both, 0);
    let ent = |vars, steps| AdaptConfig::new(Mode::Entropy, vars, steps);
    let core = sweep(&plain, &plan(&[1.0, 3.0], vec![baseline.clone(), ent(Variables::Both, 32)])).unwrap();
    let c4_secs = c4_start.elapsed().as_secs_f64();
    let b1 = points(&core, 1.0, Mode::Baseline, Variables::Both, 0);
    let e1 = points(&core, 1.0, Mode::Entropy, Variables::Both, 32);
    let b3 = points(&core, 3.0, Mode::Baseline, Variables::Both, 0);
    let e3 = points(&core, 3.0, Mode::Entropy, Variables::Both, 32);
    verdicts.push(report(
        4,
        e3 - b3 >= 1.0 && e1 >= b1 - 0.2 && c4_secs < 600.0,
        format!("3x: baseline {b3:.2}, entropy {e3:.2} ({:+.2}); 1x: baseline {b1:.2}, entropy {e1:.2} ({:+.2}); {c4_secs:.0}s", e3 - b3, e1 - b1),
    ));

    let extra = sweep(
        &plain,
        &plan(
            &[3.0],
            vec![
                ent(Variables::Both, 128),
                ent(Variables::Score, 32),
                ent(Variables::Scale, 32),
                AdaptConfig::new(Mode::Oracle, Variables::Both, 32),
                AdaptConfig::new(Mode::Adversary, Variables::Both, 32),
            ],
        ),
    )
    .unwrap();
    let oracle = points(&extra, 3.0, Mode::Oracle, Variables::Both, 32);
    let adversary = points(&extra, 3.0, Mode::Adversary, Variables::Both, 32);
    verdicts.push(report(
        5,
        oracle >= e3 && e3 >= b3 && b3 >= adversary && oracle - adversary >= 5.0,
        format!("oracle {oracle:.2} >= entropy {e3:.2} >= baseline {b3:.2} >= adversary {adversary:.2}; gap {:.2}", oracle - adversary),
    ));

    let e128 = points(&extra, 3.0, Mode::Entropy, Variables::Both, 128);
    verdicts.push(report(
        6,
        e3 - b3 > 0.0 && (e128 - e3).abs() <= 1.0,
        format!("0->32 gain {:+.2}; 32 steps {e3:.2}, 128 steps {e128:.2} (diff {:+.2})", e3 - b3, e128 - e3),
    ));

    let score = points(&extra, 3.0, Mode::Entropy, Variables::Score, 32);
    let scale = points(&extra, 3.0, Mode::Entropy, Variables::Scale, 32);
    verdicts.push(report(
        7,
        score > b3 && scale > b3 && e3 > b3 && e3 >= score - 0.5 && e3 >= scale - 0.5,
        format!("baseline {b3:.2}; score {score:.2}, scale {scale:.2}, both {e3:.2}"),
    ));

    let (lower, total) = entropy_descent(&plain);
    let frac = lower as f64 / total as f64;
    verdicts.push(report(8, frac >= 0.9, format!("entropy lower at step 32 on {lower}/{total} images ({:.0}%)", 100.0 * frac)));

    verdicts.push(criterion_9(&plain));

    let (augmented, _) = train(Augment::ScaleFlip);
    let aug = sweep(&augmented, &plan(&[3.0], vec![baseline, ent(Variables::Both, 32)])).unwrap();
    let ab3 = points(&aug, 3.0, Mode::Baseline, Variables::Both, 0);
    let ae3 = points(&aug, 3.0, Mode::Entropy, Variables::Both, 32);
    verdicts.push(report(
        10,
        ab3 > b3 && ae3 > ab3,
        format!("3x baseline: augmented {ab3:.2} vs plain {b3:.2}; augmented + entropy {ae3:.2} ({:+.2})", ae3 - ab3),
    ));

    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.pass).collect();
    println!("{} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        for v in failed {
            eprintln!("criterion {} failed: {}", v.id, v.detail);
        }
        std::process::exit(1);
    }
}
