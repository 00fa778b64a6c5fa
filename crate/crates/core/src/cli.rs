//! Command-line front end: `gen`, `train`, `adapt`, `sweep`, `report`.
//!
//! Every artifact-producing command writes its resolved settings as flat
//! `key=value` lines. Keys are the long flag names, so a record can be fed
//! back with `--config FILE`; flags given explicitly still take precedence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynscale::adapt::{
    adapt_episode_observed, sweep, write_metrics_csv, AdaptConfig, MetricsRow, Mode, SweepPlan,
    Variables,
};
use dynscale::data::{
    gen_dataset, read_dataset, read_stored, write_dataset, GeneratorSpec, LabelMap, NUM_CLASSES,
};
use dynscale::model::{checkpoint_precision, Model};
use dynscale::train::{train_model, write_train_log, Augment, TrainConfig};
use dynscale::{Precision, Real, Tensor};

const RUN_CONFIG: &str = "run.config";

#[derive(Parser, Debug)]
#[command(name = "dynscale", version, about = "Dynamic-scale segmentation with inference-time entropy minimization")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Adapt to every image of a dataset and write per-image metrics.
    Adapt(AdaptArgs),
    /// Evaluate a grid of methods, scales and seeds.
    Sweep(SweepArgs),
    /// Aggregate metrics CSVs into a method-by-scale table.
    Report(ReportArgs),
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {s}"))
    }
}

fn non_negative_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {s}"))
    }
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("must be a positive integer, got {s}")),
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = positive_usize(h)?;
    let w = positive_usize(w)?;
    Ok((h, w))
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        _ => Err(format!("expected `single` or `double`, got `{s}`")),
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Single => "single",
        Precision::Double => "double",
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Args, Debug, Clone)]
struct GeneratorArgs {
    #[arg(long, default_value_t = 4.0, value_parser = positive_f64)]
    radius_min: f64,
    #[arg(long, default_value_t = 10.0, value_parser = positive_f64)]
    radius_max: f64,
    #[arg(long, default_value_t = 0.05, value_parser = non_negative_f64)]
    noise: f64,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    min_shapes: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    max_shapes: usize,
}

impl GeneratorArgs {
    fn spec(&self) -> Result<GeneratorSpec> {
        if self.radius_min > self.radius_max {
            bail!("--radius-min exceeds --radius-max");
        }
        if self.min_shapes > self.max_shapes {
            bail!("--min-shapes exceeds --max-shapes");
        }
        Ok(GeneratorSpec {
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            noise_sigma: self.noise,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            ..GeneratorSpec::default()
        })
    }

    fn record(&self, rec: &mut Record) {
        rec.set("radius-min", self.radius_min);
        rec.set("radius-max", self.radius_max);
        rec.set("noise", self.noise);
        rec.set("min-shapes", self.min_shapes);
        rec.set("max-shapes", self.max_shapes);
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    count: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    scale: f64,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Key=value record whose entries act as defaults for unspecified flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60, value_parser = positive_usize)]
    epochs: usize,
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
    lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = non_negative_f64)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4, value_parser = non_negative_f64)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9, value_parser = positive_f64)]
    power: f64,
    #[arg(long, default_value = "none")]
    augment: Augment,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single", value_parser = parse_precision)]
    precision: Precision,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "entropy")]
    mode: Mode,
    #[arg(long, default_value = "both")]
    variables: Variables,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0.001, value_parser = non_negative_f64)]
    lr: f64,
    /// Metrics CSV destination.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Directory for per-step prediction, entropy and scale maps.
    #[arg(long)]
    dump_maps: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "1,1.5,2,2.5,3", value_delimiter = ',', value_parser = positive_f64)]
    scales: Vec<f64>,
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 6, value_parser = positive_usize)]
    images: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value = "baseline,entropy,oracle", value_delimiter = ',')]
    modes: Vec<Mode>,
    #[arg(long, default_value = "both", value_delimiter = ',')]
    variables: Vec<Variables>,
    #[arg(long, default_value = "32", value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 0.001, value_parser = non_negative_f64)]
    lr: f64,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metrics CSVs produced by `adapt` or `sweep`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report.txt")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Ordered `key=value` record of a run.
struct Record(BTreeMap<&'static str, String>);

impl Record {
    fn new(command: &str) -> Self {
        let mut r = Record(BTreeMap::new());
        r.set("command", command);
        r
    }

    fn set(&mut self, key: &'static str, value: impl ToString) {
        self.0.insert(key, value.to_string());
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.0 {
            writeln!(text, "{k}={v}").expect("writing to a string");
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_record(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splice the entries of any `--config FILE` in front of the explicit flags.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => match args.get(pos + 1) {
            Some(p) => p.clone(),
            None => return Ok(args),
        },
    };
    let mut injected = Vec::new();
    let mut positional = Vec::new();
    for (k, v) in read_record(Path::new(&path))? {
        match k.as_str() {
            "command" => {}
            "inputs" => positional.extend(v.split(',').map(str::to_string)),
            _ => injected.push(format!("--{k}={v}")),
        }
    }
    // Program name and subcommand first, then recorded defaults, then the
    // explicit flags, which override earlier occurrences.
    let split = args.len().min(2);
    let mut out: Vec<String> = args[..split].to_vec();
    out.extend(injected);
    out.extend(args[split..].iter().cloned());
    out.extend(positional);
    Ok(out)
}

pub fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Adapt(a) => run_adapt(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run_gen(a: GenArgs) -> Result<()> {
    let spec = a.generator.spec()?;
    let scenes = gen_dataset(a.seed, a.count, a.size, a.scale, &spec)?;
    write_dataset(&a.out, &scenes).with_context(|| format!("writing {}", a.out.display()))?;
    let mut rec = Record::new("gen");
    rec.set("out", a.out.display());
    rec.set("count", a.count);
    rec.set("scale", a.scale);
    rec.set("size", format!("{}x{}", a.size.0, a.size.1));
    rec.set("seed", a.seed);
    a.generator.record(&mut rec);
    rec.write(&a.out.join(RUN_CONFIG))?;
    println!("generated {} scenes at scale {}", a.count, a.scale);
    Ok(())
}

/// Generator settings stored next to a dataset by `gen`, if any.
fn dataset_generator(dir: &Path) -> Result<GeneratorSpec> {
    let path = dir.join(RUN_CONFIG);
    let mut spec = GeneratorSpec::default();
    if !path.exists() {
        return Ok(spec);
    }
    for (k, v) in read_record(&path)? {
        let bad = || format!("{}: bad value for {k}", path.display());
        match k.as_str() {
            "radius-min" => spec.radius_min = v.parse().with_context(bad)?,
            "radius-max" => spec.radius_max = v.parse().with_context(bad)?,
            "noise" => spec.noise_sigma = v.parse().with_context(bad)?,
            "min-shapes" => spec.min_shapes = v.parse().with_context(bad)?,
            "max-shapes" => spec.max_shapes = v.parse().with_context(bad)?,
            _ => {}
        }
    }
    Ok(spec)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let scenes =
        read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let generator = dataset_generator(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        poly_power: a.power,
        augment: a.augment,
        seed: a.seed,
    };
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.csv"));
    let log = match a.precision {
        Precision::Single => train_and_save::<f32>(&scenes, &cfg, &generator, &a.out)?,
        Precision::Double => train_and_save::<f64>(&scenes, &cfg, &generator, &a.out)?,
    };
    let mut buf = Vec::new();
    write_train_log(&mut buf, &log)?;
    fs::write(&log_path, buf).with_context(|| format!("writing {}", log_path.display()))?;

    let mut rec = Record::new("train");
    rec.set("data", a.data.display());
    rec.set("out", a.out.display());
    rec.set("log", log_path.display());
    rec.set("epochs", a.epochs);
    rec.set("batch-size", a.batch_size);
    rec.set("lr", a.lr);
    rec.set("momentum", a.momentum);
    rec.set("weight-decay", a.weight_decay);
    rec.set("power", a.power);
    rec.set("augment", a.augment);
    rec.set("seed", a.seed);
    rec.set("precision", precision_name(a.precision));
    rec.write(&sibling(&a.out, ".config"))?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs: loss {:.4}, train mIoU {:.4}",
            log.len(),
            last.loss,
            last.train_miou
        );
    }
    Ok(())
}

fn train_and_save<T: Real>(
    scenes: &[dynscale::data::Scene],
    cfg: &TrainConfig,
    generator: &GeneratorSpec,
    out: &Path,
) -> Result<Vec<dynscale::train::EpochLog>> {
    let outcome = train_model::<T>(scenes, cfg, generator, NUM_CLASSES)?;
    outcome
        .model
        .save(out)
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    Ok(outcome.log)
}

fn read_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(checkpoint_precision(&bytes)?)
}

fn run_adapt(a: AdaptArgs) -> Result<()> {
    let scenes =
        read_stored(&a.data, false).with_context(|| format!("reading {}", a.data.display()))?;
    if a.mode.needs_truth() && scenes.iter().any(|s| s.labels.is_none()) {
        bail!("mode {} needs label files, which are missing in {}", a.mode, a.data.display());
    }
    let cfg = AdaptConfig {
        steps: a.steps,
        learning_rate: a.lr,
        mode: a.mode,
        variables: a.variables,
        ..AdaptConfig::default()
    };
    if let Some(dir) = &a.dump_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let rows = match read_precision(&a.ckpt)? {
        Precision::Single => adapt_all(&Model::<f32>::load(&a.ckpt)?, &scenes, &cfg, &a)?,
        Precision::Double => adapt_all(&Model::<f64>::load(&a.ckpt)?, &scenes, &cfg, &a)?,
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    fs::write(&a.out, buf).with_context(|| format!("writing {}", a.out.display()))?;

    let mut rec = Record::new("adapt");
    rec.set("ckpt", a.ckpt.display());
    rec.set("data", a.data.display());
    rec.set("mode", a.mode);
    rec.set("variables", a.variables);
    rec.set("steps", a.steps);
    rec.set("lr", a.lr);
    rec.set("out", a.out.display());
    if let Some(d) = &a.dump_maps {
        rec.set("dump-maps", d.display());
    }
    rec.write(&sibling(&a.out, ".config"))?;
    println!("adapted {} images ({} mode, {} steps)", rows.len(), a.mode, cfg.effective_steps());
    Ok(())
}

fn adapt_all<T: Real>(
    model: &Model<T>,
    scenes: &[dynscale::data::StoredScene],
    cfg: &AdaptConfig,
    a: &AdaptArgs,
) -> Result<Vec<MetricsRow>> {
    let classes = model.num_classes();
    let mut rows = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let image = scene.image.cast::<T>();
        let traj = adapt_episode_observed(&image, model, scene.labels.as_ref(), cfg, |view| {
            if let Some(dir) = &a.dump_maps {
                dump_maps(dir, scene.id, view.step, view.cache, view.entropy, classes, model.radius_cap)?;
            }
            Ok(())
        })?;
        if let Some(msg) = &traj.diagnostic {
            eprintln!("image {}: {msg}", scene.id);
        }
        rows.push(MetricsRow {
            scale: scene.scale,
            mode: cfg.mode,
            variables: cfg.variables,
            steps: cfg.effective_steps(),
            seed: scene.seed,
            miou: traj.last().miou.unwrap_or(f64::NAN),
            mean_entropy_initial: traj.initial().mean_entropy,
            mean_entropy_final: traj.last().mean_entropy,
        });
    }
    Ok(rows)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn dump_maps<T: Real>(
    dir: &Path,
    id: usize,
    step: usize,
    cache: &dynscale::model::ForwardCache<T>,
    entropy: &Tensor<T>,
    classes: usize,
    radius_cap: usize,
) -> dynscale::Result<()> {
    use dynscale::data::encode_pgm8;
    let pred = LabelMap::argmax(&cache.logits);
    let span = (classes.max(2) - 1) as f64;
    let pred_px: Vec<u8> = pred.data().iter().map(|&c| to_byte(c as f64 / span)).collect();
    fs::write(
        dir.join(format!("pred_{id:05}_{step:03}.pgm")),
        encode_pgm8(pred.width(), pred.height(), &pred_px),
    )?;
    let ln_c = (classes as f64).ln();
    let ed = entropy.dims();
    let ent_px: Vec<u8> = entropy.data().iter().map(|h| to_byte(h.as_f64() / ln_c)).collect();
    fs::write(
        dir.join(format!("entropy_{id:05}_{step:03}.pgm")),
        encode_pgm8(ed.w, ed.h, &ent_px),
    )?;
    let sv = cache.sigmas.values();
    let sd = sv.dims();
    let sig_px: Vec<u8> =
        sv.data().iter().map(|s| to_byte(s.as_f64() / radius_cap as f64)).collect();
    fs::write(
        dir.join(format!("sigma_{id:05}_{step:03}.pgm")),
        encode_pgm8(sd.w, sd.h, &sig_px),
    )?;
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let generator = a.generator.spec()?;
    let mut configs = Vec::new();
    for &mode in &a.modes {
        if mode == Mode::Baseline {
            configs.push(AdaptConfig::new(Mode::Baseline, Variables::Both, 0));
            continue;
        }
        for &vars in &a.variables {
            for &steps in &a.steps {
                let mut cfg = AdaptConfig::new(mode, vars, steps);
                cfg.learning_rate = a.lr;
                configs.push(cfg);
            }
        }
    }
    let plan = SweepPlan {
        scales: a.scales.clone(),
        seeds: a.seeds.clone(),
        images_per_seed: a.images,
        size: a.size,
        generator,
        configs,
    };
    let rows = match read_precision(&a.ckpt)? {
        Precision::Single => sweep(&Model::<f32>::load(&a.ckpt)?, &plan)?,
        Precision::Double => sweep(&Model::<f64>::load(&a.ckpt)?, &plan)?,
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    fs::write(&a.out, buf).with_context(|| format!("writing {}", a.out.display()))?;

    let mut rec = Record::new("sweep");
    rec.set("ckpt", a.ckpt.display());
    rec.set("scales", join(&a.scales));
    rec.set("seeds", join(&a.seeds));
    rec.set("images", a.images);
    rec.set("size", format!("{}x{}", a.size.0, a.size.1));
    rec.set("modes", join(&a.modes));
    rec.set("variables", join(&a.variables));
    rec.set("steps", join(&a.steps));
    rec.set("lr", a.lr);
    rec.set("out", a.out.display());
    a.generator.record(&mut rec);
    rec.write(&sibling(&a.out, ".config"))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row = MetricsRow::parse_csv(line)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Method rows by scale columns; each cell is the mean mIoU (in points) over
/// the seeds of that method and scale.
pub fn report_table(rows: &[MetricsRow]) -> String {
    type Method = (Mode, Variables, usize);
    let mut scales: Vec<f64> = Vec::new();
    let mut cells: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if !scales.iter().any(|s| *s == r.scale) {
            scales.push(r.scale);
        }
        cells.entry((r.mode, r.variables, r.steps)).or_default().push((r.scale, r.miou));
    }
    scales.sort_by(|a, b| a.total_cmp(b));
    let label = |(m, v, s): &Method| match m {
        Mode::Baseline => "baseline".to_string(),
        _ => format!("{m} {v} {s}"),
    };
    let labels: Vec<String> = cells.keys().map(label).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max("method".len());
    let mut out = format!("{:<width$}", "method");
    for s in &scales {
        write!(out, " {:>8}", format!("{s}x")).unwrap();
    }
    out.push('\n');
    for ((_, values), name) in cells.iter().zip(&labels) {
        write!(out, "{name:<width$}").unwrap();
        for s in &scales {
            let picked: Vec<f64> = values
                .iter()
                .filter(|(sc, m)| sc == s && m.is_finite())
                .map(|(_, m)| *m)
                .collect();
            if picked.is_empty() {
                write!(out, " {:>8}", "-").unwrap();
            } else {
                let mean = picked.iter().sum::<f64>() / picked.len() as f64;
                write!(out, " {:>8.2}", 100.0 * mean).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn run_report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_metrics(p)?);
    }
    if rows.is_empty() {
        bail!("no metric rows in the input CSVs");
    }
    let table = report_table(&rows);
    fs::write(&a.out, &table).with_context(|| format!("writing {}", a.out.display()))?;
    let mut rec = Record::new("report");
    let names: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    rec.set("inputs", names.join(","));
    rec.set("out", a.out.display());
    rec.write(&sibling(&a.out, ".config"))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: Mode, steps: usize, scale: f64, seed: u64, miou: f64) -> MetricsRow {
        MetricsRow {
            scale,
            mode,
            variables: Variables::Both,
            steps,
            seed,
            miou,
            mean_entropy_initial: 0.1,
            mean_entropy_final: 0.05,
        }
    }

    #[test]
    fn table_shape_and_column_order() {
        let mut rows = Vec::new();
        for &scale in &[3.0, 1.5, 2.5, 2.0] {
            for seed in 0..2 {
                rows.push(row(Mode::Baseline, 0, scale, seed, 0.5));
                rows.push(row(Mode::Entropy, 32, scale, seed, 0.6));
                rows.push(row(Mode::Oracle, 32, scale, seed, 0.7));
            }
        }
        let t = report_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(header, ["method", "1.5x", "2x", "2.5x", "3x"]);
        assert!(lines[1].starts_with("baseline"));
        assert_eq!(lines[2].split_whitespace().count(), 3 + 4);
    }

    #[test]
    fn cells_average_over_seeds() {
        let rows = vec![
            row(Mode::Entropy, 32, 1.0, 1, 0.40),
            row(Mode::Entropy, 32, 1.0, 2, 0.50),
        ];
        let t = report_table(&rows);
        assert!(t.lines().nth(1).unwrap().ends_with("45.00"));
    }

    #[test]
    fn size_and_number_parsers() {
        assert_eq!(parse_size("64x32"), Ok((64, 32)));
        assert!(parse_size("64").is_err());
        assert!(positive_f64("0").is_err());
    }

    #[test]
    fn config_expansion_puts_recorded_values_first() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("r.config");
        fs::write(&cfg, "command=gen\ncount=7\nout=x\nscale=2\n").unwrap();
        let args: Vec<String> = ["dynscale", "gen", "--config", cfg.to_str().unwrap(), "--count", "3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = expand_config(args).unwrap();
        assert_eq!(&out[..5], ["dynscale", "gen", "--count=7", "--out=x", "--scale=2"]);
        let cli = Cli::try_parse_from(out).unwrap();
        match cli.command {
            Command::Gen(g) => {
                assert_eq!(g.count, 3);
                assert_eq!(g.scale, 2.0);
            }
            _ => panic!("wrong subcommand"),
        }
    }
}
