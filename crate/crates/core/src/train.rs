//! Supervised training: SGD with momentum and weight decay under a poly
//! learning-rate schedule, optionally with scale and flip augmentation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_scene, GeneratorSpec, IouAccumulator, LabelMap, Scene, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{ConvParams, Model, ModelGrads};
use crate::objective::cross_entropy_loss;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Analytic rescaling in `[0.5, 2]` and horizontal flips.
    ScaleFlip,
}

impl Augment {
    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::ScaleFlip => "scale_flip",
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Augment::None),
            "scale_flip" => Ok(Augment::ScaleFlip),
            _ => Err(format!("unknown augmentation `{s}`")),
        }
    }
}

pub const AUGMENT_SCALE_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            poly_power: 0.9,
            augment: Augment::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.base_lr > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.poly_power > 0.0;
        if !ok {
            return Err(Error::invalid("train", format!("invalid config {self:?}")));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iter} outside [0, {max_iter}]"),
        ));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("sgd_step", "parameter, gradient and velocity counts differ"));
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.dims() != g.dims() || p.dims() != v.dims() {
            return Err(Error::shape("sgd_step", p.dims(), g.dims()));
        }
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_miou: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,train_miou";

pub fn write_train_log(out: &mut impl Write, rows: &[EpochLog]) -> std::io::Result<()> {
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{:.4}", r.epoch, r.lr, r.loss, r.train_miou)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    /// Batch loss of every iteration.
    pub iteration_losses: Vec<f64>,
}

fn flatten_grads<T: Real>(g: &ModelGrads<T>) -> Vec<&Tensor<T>> {
    [&g.conv1, &g.conv2, &g.conv3, &g.scale, &g.free, &g.score]
        .into_iter()
        .flat_map(|p: &Option<ConvParams<T>>| {
            let p = p.as_ref().expect("full gradient");
            [&p.weight, &p.bias]
        })
        .collect()
}

fn augment_scene(
    scene: &Scene,
    augment: Augment,
    generator: &GeneratorSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    match augment {
        Augment::None => Ok(scene.clone()),
        Augment::ScaleFlip => {
            let (lo, hi) = AUGMENT_SCALE_RANGE;
            let scale = lo + (hi - lo) * rng.gen::<f64>();
            let flip = rng.gen::<bool>();
            let size = (scene.height(), scene.width());
            let s = gen_scene(scene.seed, size, scale, generator)?;
            Ok(if flip { s.flip_horizontal() } else { s })
        }
    }
}

/// Train a freshly initialized model on scale-1 scenes. Deterministic for a
/// fixed seed.
pub fn train_model<T: Real>(
    dataset: &[Scene],
    cfg: &TrainConfig,
    generator: &GeneratorSpec,
    num_classes: usize,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut model = Model::<T>::init(cfg.seed, dataset[0].image.dims().c, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_A5A5);
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches_per_epoch;
    let mut velocity: Vec<Tensor<T>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.dims()))
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iteration_losses = Vec::with_capacity(max_iter);
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = IouAccumulator::new(num_classes, IGNORE_LABEL);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor<T>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let scene = augment_scene(&dataset[i], cfg.augment, generator, &mut rng)?;
                let image = scene.image.cast::<T>();
                let (bb, cache) = model.forward_train(&image)?;
                let (loss, grad) = cross_entropy_loss(&cache.probs, &scene.labels, IGNORE_LABEL)?;
                acc.add(&LabelMap::argmax(&cache.logits), &scene.labels)?;
                batch_loss += loss;
                let grads = model.backward_full(&bb, &cache, &grad)?;
                let flat = flatten_grads(&grads);
                match sum.as_mut() {
                    None => sum = Some(flat.into_iter().cloned().collect()),
                    Some(s) => {
                        for (a, g) in s.iter_mut().zip(flat) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut mean = sum.expect("non-empty batch");
            let inv = T::lit(1.0 / batch.len() as f64);
            mean.iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!("non-finite loss at iteration {iter}"),
                ));
            }
            lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power)?;
            let grefs: Vec<&Tensor<T>> = mean.iter().collect();
            sgd_step(
                &mut model.params_mut(),
                &grefs,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            iteration_losses.push(batch_loss);
            epoch_loss += batch_loss * batch.len() as f64;
            iter += 1;
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss: epoch_loss / dataset.len() as f64,
            train_miou: acc.report().miou,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        iteration_losses,
    })
}

/// Dataset-level mIoU of plain feedforward predictions.
pub fn evaluate_miou<T: Real>(model: &Model<T>, scenes: &[Scene]) -> Result<f64> {
    let mut acc = IouAccumulator::new(model.num_classes(), IGNORE_LABEL);
    for s in scenes {
        acc.add(&model.predict(&s.image.cast())?, &s.labels)?;
    }
    Ok(acc.report().miou)
}
