//! Inference-time optimization of the score and scale filters.
//!
//! An episode starts from the unaltered forward pass, then repeats
//! `loss -> head backward -> Adam update -> partial forward` for a fixed number
//! of steps. Each episode works on a private copy of the head, so the trained
//! model is never modified.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{gen_scene, derive_seed, GeneratorSpec, IouAccumulator, LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{
    forward_head, head_backward_with, ForwardCache, GradRequest, HeadParams, Model,
};
use crate::objective::{cross_entropy_loss, thresholded_entropy_backward, thresholded_entropy_loss};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Feedforward prediction, no updates.
    Baseline,
    /// Minimize the thresholded output entropy.
    Entropy,
    /// Minimize cross-entropy against the truth.
    Oracle,
    /// Maximize cross-entropy against the truth.
    Adversary,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Entropy, Mode::Oracle, Mode::Adversary];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Entropy => "entropy",
            Mode::Oracle => "oracle",
            Mode::Adversary => "adversary",
        }
    }

    pub fn needs_truth(self) -> bool {
        matches!(self, Mode::Oracle | Mode::Adversary)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// Which parameters an episode may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variables {
    Score,
    Scale,
    Both,
    /// Every parameter, backbone included. Opt-in only; re-runs the full
    /// network each step.
    All,
}

impl Variables {
    pub fn name(self) -> &'static str {
        match self {
            Variables::Score => "score",
            Variables::Scale => "scale",
            Variables::Both => "both",
            Variables::All => "all",
        }
    }

    fn request(self) -> GradRequest {
        GradRequest {
            score: matches!(self, Variables::Score | Variables::Both | Variables::All),
            scale: matches!(self, Variables::Scale | Variables::Both | Variables::All),
            free: self == Variables::All,
            backbone: self == Variables::All,
        }
    }
}

impl fmt::Display for Variables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variables {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [Variables::Score, Variables::Scale, Variables::Both, Variables::All]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variables `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub mode: Mode,
    pub variables: Variables,
    pub adam: AdamParams,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 32,
            learning_rate: 0.001,
            mode: Mode::Entropy,
            variables: Variables::Both,
            adam: AdamParams::default(),
        }
    }
}

impl AdaptConfig {
    pub fn new(mode: Mode, variables: Variables, steps: usize) -> Self {
        AdaptConfig {
            mode,
            variables,
            steps,
            ..AdaptConfig::default()
        }
    }

    /// Baseline never takes a step.
    pub fn effective_steps(&self) -> usize {
        if self.mode == Mode::Baseline {
            0
        } else {
            self.steps
        }
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&mut Tensor<T>]) -> Self {
        Self::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update. Returns the L2 norm of the applied update
/// for each parameter.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    hp: AdamParams,
) -> Result<Vec<f64>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dims() != g.dims() || p.len() != m.len() {
            return Err(Error::shape("adam_step", p.dims(), g.dims()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let bc1 = T::lit(1.0 - hp.beta1.powi(t));
    let bc2 = T::lit(1.0 - hp.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(hp.eps);
    let mut norms = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut sq = 0.0;
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            *w -= delta;
            sq += delta.as_f64() * delta.as_f64();
        }
        norms.push(sq.sqrt());
    }
    Ok(norms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Objective of the configured mode at this step's prediction (thresholded
    /// entropy for baseline).
    pub loss: f64,
    pub mean_entropy: f64,
    pub score_update_norm: f64,
    pub scale_update_norm: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptTrajectory<T> {
    pub records: Vec<StepRecord>,
    pub final_cache: ForwardCache<T>,
    /// Set when the episode stopped early on a non-finite loss.
    pub diagnostic: Option<String>,
}

impl<T: Real> AdaptTrajectory<T> {
    pub fn prediction(&self) -> LabelMap {
        LabelMap::argmax(&self.final_cache.logits)
    }

    pub fn initial(&self) -> &StepRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trajectory is never empty")
    }
}

/// Read-only view of each step handed to episode observers.
pub struct StepView<'a, T> {
    pub step: usize,
    pub cache: &'a ForwardCache<T>,
    pub entropy: &'a Tensor<T>,
    pub record: &'a StepRecord,
}

fn miou_of(pred: &LabelMap, truth: Option<&LabelMap>, classes: usize) -> Result<Option<f64>> {
    match truth {
        Some(t) => {
            let mut acc = IouAccumulator::new(classes, IGNORE_LABEL);
            acc.add(pred, t)?;
            Ok(Some(acc.report().miou))
        }
        None => Ok(None),
    }
}

struct Evaluated<T> {
    loss: f64,
    grad: Option<Tensor<T>>,
    entropy: Tensor<T>,
    mean_entropy: f64,
}

fn evaluate<T: Real>(
    cache: &ForwardCache<T>,
    mode: Mode,
    truth: Option<&LabelMap>,
    need_grad: bool,
) -> Result<Evaluated<T>> {
    let state = thresholded_entropy_loss(&cache.probs)?;
    let mean_entropy = state.mean;
    let (loss, grad) = match mode {
        Mode::Baseline => (state.loss, None),
        Mode::Entropy => {
            let g = need_grad
                .then(|| thresholded_entropy_backward(&cache.probs, &state))
                .transpose()?;
            (state.loss, g)
        }
        Mode::Oracle | Mode::Adversary => {
            let truth = truth.ok_or(Error::MissingTruth(mode.name()))?;
            let (ce, g) = cross_entropy_loss(&cache.probs, truth, IGNORE_LABEL)?;
            if mode == Mode::Oracle {
                (ce, need_grad.then_some(g))
            } else {
                (-ce, need_grad.then(|| g.map(|v| -v)))
            }
        }
    };
    Ok(Evaluated {
        loss,
        grad,
        entropy: state.entropy,
        mean_entropy,
    })
}

/// Run one episode. `truth` is only read for the update in oracle and
/// adversary modes; otherwise it only feeds the reported mIoU.
pub fn adapt_episode<T: Real>(
    image: &Tensor<T>,
    model: &Model<T>,
    truth: Option<&LabelMap>,
    cfg: &AdaptConfig,
) -> Result<AdaptTrajectory<T>> {
    adapt_episode_observed(image, model, truth, cfg, |_| Ok(()))
}

pub fn adapt_episode_observed<T: Real>(
    image: &Tensor<T>,
    model: &Model<T>,
    truth: Option<&LabelMap>,
    cfg: &AdaptConfig,
    mut observe: impl FnMut(&StepView<'_, T>) -> Result<()>,
) -> Result<AdaptTrajectory<T>> {
    if cfg.mode.needs_truth() && truth.is_none() {
        return Err(Error::MissingTruth(cfg.mode.name()));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("adapt_episode", "learning rate must be non-negative"));
    }
    let steps = cfg.effective_steps();
    let classes = model.num_classes();
    let req = cfg.variables.request();

    // Private copy; the caller's model is never touched.
    let mut local = model.clone();
    let mut cache = local.forward_full(image)?;
    let mut eval = evaluate(&cache, cfg.mode, truth, steps > 0)?;
    if !eval.loss.is_finite() {
        return Err(Error::invalid("adapt_episode", "initial loss is not finite"));
    }
    let first = StepRecord {
        step: 0,
        loss: eval.loss,
        mean_entropy: eval.mean_entropy,
        score_update_norm: 0.0,
        scale_update_norm: 0.0,
        miou: miou_of(&LabelMap::argmax(&cache.logits), truth, classes)?,
    };
    observe(&StepView {
        step: 0,
        cache: &cache,
        entropy: &eval.entropy,
        record: &first,
    })?;
    let mut records = vec![first];
    let mut adam: Option<AdamState<T>> = None;
    let mut diagnostic = None;

    for step in 1..=steps {
        let grad_logits = eval.grad.take().expect("gradient computed for active steps");
        let (score_norm, scale_norm, next) = if cfg.variables == Variables::All {
            let (bb, c) = local.forward_train(image)?;
            let grads = local.backward_full(&bb, &c, &grad_logits)?;
            let norms = apply_all(&mut local, &grads, &mut adam, cfg)?;
            let next = local.forward_full(image)?;
            (norms.0, norms.1, next)
        } else {
            let (grads, _) =
                head_backward_with(&cache, &grad_logits, &local.head, local.radius_cap, req)?;
            let norms = apply_head(&mut local.head, &grads, &mut adam, cfg)?;
            let next = forward_head(cache.features.clone(), &local.head, local.radius_cap)?;
            (norms.0, norms.1, next)
        };
        let next_eval = if next.probs.validate_finite().is_ok() {
            Some(evaluate(&next, cfg.mode, truth, step < steps)?)
        } else {
            None
        };
        let Some(next_eval) = next_eval.filter(|e| e.loss.is_finite()) else {
            diagnostic = Some(format!(
                "non-finite loss at step {step}; keeping step {} state",
                step - 1
            ));
            break;
        };
        cache = next;
        eval = next_eval;
        let record = StepRecord {
            step,
            loss: eval.loss,
            mean_entropy: eval.mean_entropy,
            score_update_norm: score_norm,
            scale_update_norm: scale_norm,
            miou: miou_of(&LabelMap::argmax(&cache.logits), truth, classes)?,
        };
        observe(&StepView {
            step,
            cache: &cache,
            entropy: &eval.entropy,
            record: &record,
        })?;
        records.push(record);
    }
    Ok(AdaptTrajectory {
        records,
        final_cache: cache,
        diagnostic,
    })
}

fn norm_pair(norms: &[f64]) -> f64 {
    norms.iter().map(|n| n * n).sum::<f64>().sqrt()
}

fn apply_head<T: Real>(
    head: &mut HeadParams<T>,
    grads: &crate::model::ModelGrads<T>,
    adam: &mut Option<AdamState<T>>,
    cfg: &AdaptConfig,
) -> Result<(f64, f64)> {
    let HeadParams { scale, score, .. } = head;
    let mut params: Vec<&mut Tensor<T>> = Vec::new();
    let mut gs: Vec<&Tensor<T>> = Vec::new();
    let mut groups = Vec::new();
    if let Some(g) = grads.score.as_ref() {
        params.extend(score.params_mut());
        gs.extend(g.params());
        groups.push(0);
    }
    if let Some(g) = grads.scale.as_ref() {
        params.extend(scale.params_mut());
        gs.extend(g.params());
        groups.push(1);
    }
    let state = adam.get_or_insert_with(|| AdamState::for_params(&params));
    let norms = adam_step(&mut params, &gs, state, cfg.learning_rate, cfg.adam)?;
    let mut out = (0.0, 0.0);
    for (gi, tag) in groups.iter().enumerate() {
        let n = norm_pair(&norms[2 * gi..2 * gi + 2]);
        if *tag == 0 {
            out.0 = n;
        } else {
            out.1 = n;
        }
    }
    Ok(out)
}

fn apply_all<T: Real>(
    model: &mut Model<T>,
    grads: &crate::model::ModelGrads<T>,
    adam: &mut Option<AdamState<T>>,
    cfg: &AdaptConfig,
) -> Result<(f64, f64)> {
    let order = [
        &grads.conv1,
        &grads.conv2,
        &grads.conv3,
        &grads.scale,
        &grads.free,
        &grads.score,
    ];
    let gs: Vec<&Tensor<T>> = order
        .iter()
        .flat_map(|g| {
            let g = g.as_ref().expect("full gradient");
            [&g.weight, &g.bias]
        })
        .collect();
    let mut params = model.params_mut();
    let state = adam.get_or_insert_with(|| AdamState::for_params(&params));
    let norms = adam_step(&mut params, &gs, state, cfg.learning_rate, cfg.adam)?;
    // params_mut order: conv1..conv3, scale, free, score
    Ok((norm_pair(&norms[10..12]), norm_pair(&norms[6..8])))
}

/// Header of the metrics CSV written by sweeps and the `adapt` command.
pub const METRICS_HEADER: &str =
    "scale,mode,variables,steps,seed,miou,mean_entropy_initial,mean_entropy_final";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scale: f64,
    pub mode: Mode,
    pub variables: Variables,
    pub steps: usize,
    pub seed: u64,
    pub miou: f64,
    pub mean_entropy_initial: f64,
    pub mean_entropy_final: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{:.4},{},{},{},{},{:.4},{:.4},{:.4}",
            self.scale,
            self.mode,
            self.variables,
            self.steps,
            self.seed,
            self.miou,
            self.mean_entropy_initial,
            self.mean_entropy_final
        )
    }

    pub fn parse_csv(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 8 {
            return Err(format!("expected 8 columns, got {}", cols.len()));
        }
        let f = |i: usize| -> std::result::Result<f64, String> {
            cols[i]
                .parse::<f64>()
                .map_err(|e| format!("column {i}: {e}"))
        };
        Ok(MetricsRow {
            scale: f(0)?,
            mode: cols[1].parse()?,
            variables: cols[2].parse()?,
            steps: cols[3].parse().map_err(|e| format!("steps: {e}"))?,
            seed: cols[4].parse().map_err(|e| format!("seed: {e}"))?,
            miou: f(5)?,
            mean_entropy_initial: f(6)?,
            mean_entropy_final: f(7)?,
        })
    }
}

pub fn write_metrics_csv(out: &mut impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Grid of scales, seeds and configurations to evaluate.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
    pub images_per_seed: usize,
    pub size: (usize, usize),
    pub generator: GeneratorSpec,
    pub configs: Vec<AdaptConfig>,
}

/// Test scenes for one `(seed, scale)` cell.
pub fn sweep_scenes(plan: &SweepPlan, seed: u64, scale: f64) -> Result<Vec<crate::data::Scene>> {
    (0..plan.images_per_seed)
        .map(|i| gen_scene(derive_seed(seed, i as u64), plan.size, scale, &plan.generator))
        .collect()
}

/// Evaluate every configuration of the plan. Configurations that differ only
/// in step count share one episode, snapshotted at each requested step; Adam
/// trajectories are prefix-consistent, so this equals running them separately.
pub fn sweep<T: Real>(model: &Model<T>, plan: &SweepPlan) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut groups: Vec<(AdaptConfig, Vec<usize>)> = Vec::new();
    for cfg in &plan.configs {
        let key = AdaptConfig {
            steps: 0,
            ..cfg.clone()
        };
        let steps = cfg.effective_steps();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, s)) => {
                if !s.contains(&steps) {
                    s.push(steps);
                }
            }
            None => groups.push((key, vec![steps])),
        }
    }
    let mut scales = plan.scales.clone();
    scales.sort_by(|a, b| a.total_cmp(b));
    for &scale in &scales {
        for (key, steps_list) in &groups {
            let per_seed: Vec<Result<Vec<MetricsRow>>> = plan
                .seeds
                .par_iter()
                .map(|&seed| sweep_cell(model, plan, key, steps_list, seed, scale))
                .collect();
            for r in per_seed {
                rows.extend(r?);
            }
        }
    }
    Ok(rows)
}

/// One seed of one configuration group at one scale.
fn sweep_cell<T: Real>(
    model: &Model<T>,
    plan: &SweepPlan,
    key: &AdaptConfig,
    steps_list: &[usize],
    seed: u64,
    scale: f64,
) -> Result<Vec<MetricsRow>> {
    let cfg = AdaptConfig {
        steps: *steps_list.iter().max().expect("non-empty group"),
        ..key.clone()
    };
    let scenes = sweep_scenes(plan, seed, scale)?;
    let mut accs: Vec<IouAccumulator> = steps_list
        .iter()
        .map(|_| IouAccumulator::new(model.num_classes(), IGNORE_LABEL))
        .collect();
    let mut ent_initial = 0.0;
    let mut ent_at = vec![0.0; steps_list.len()];
    for scene in &scenes {
        let image = scene.image.cast::<T>();
        let mut preds: Vec<Option<LabelMap>> = vec![None; steps_list.len()];
        let mut ents = vec![f64::NAN; steps_list.len()];
        let traj = adapt_episode_observed(&image, model, Some(&scene.labels), &cfg, |view| {
            for (k, &s) in steps_list.iter().enumerate() {
                if s == view.step {
                    preds[k] = Some(LabelMap::argmax(&view.cache.logits));
                    ents[k] = view.record.mean_entropy;
                }
            }
            Ok(())
        })?;
        ent_initial += traj.initial().mean_entropy;
        for k in 0..steps_list.len() {
            // Aborted episodes report their last finite state.
            let pred = preds[k].take().unwrap_or_else(|| traj.prediction());
            let ent = if ents[k].is_nan() {
                traj.last().mean_entropy
            } else {
                ents[k]
            };
            accs[k].add(&pred, &scene.labels)?;
            ent_at[k] += ent;
        }
    }
    let count = scenes.len().max(1) as f64;
    Ok(steps_list
        .iter()
        .zip(&accs)
        .zip(&ent_at)
        .map(|((&steps, acc), ent)| MetricsRow {
            scale,
            mode: key.mode,
            variables: key.variables,
            steps,
            seed,
            miou: acc.report().miou,
            mean_entropy_initial: ent_initial / count,
            mean_entropy_final: ent / count,
        })
        .collect())
}
