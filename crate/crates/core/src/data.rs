//! Synthetic shape scenes, segmentation metrics and on-disk dataset format.
//!
//! A scene's layout (shape classes, centers, radii, rotations, intensities) is
//! drawn once at scale 1. Rendering at scale `s` applies a similarity transform
//! about the first shape's center, so every scale of a seed shows the same
//! objects, non-overlapping, with radii multiplied by `s`. Labels are exact:
//! a pixel belongs to a shape when its center lies inside the analytic shape.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const IGNORE_LABEL: u8 = 255;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "disk", "square", "triangle"];

/// Dense per-pixel class map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(
                "label_map",
                format!("{} labels for a {h}x{w} map", data.len()),
            ));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![label; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Per-pixel argmax over the channel axis of a `(1, c, h, w)` tensor.
    pub fn argmax<T: crate::Real>(scores: &Tensor<T>) -> Self {
        let d = scores.dims();
        let p = d.plane();
        let data = (0..p)
            .map(|i| {
                let mut best = 0;
                let mut best_v = scores.data()[i];
                for c in 1..d.c {
                    let v = scores.data()[c * p + i];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            h: d.h,
            w: d.w,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            data.extend(self.data[y * self.w..(y + 1) * self.w].iter().rev());
        }
        LabelMap {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self
            .data
            .iter()
            .filter(|&&l| l != 0 && l != IGNORE_LABEL)
            .count();
        fg as f64 / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Disk = 1,
    Square = 2,
    Triangle = 3,
}

impl ShapeClass {
    fn from_index(i: usize) -> Self {
        match i {
            0 => ShapeClass::Disk,
            1 => ShapeClass::Square,
            _ => ShapeClass::Triangle,
        }
    }

    pub fn label(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeMeta {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub radius: f64,
    pub rotation: f64,
    pub intensity: f32,
}

impl ShapeMeta {
    /// Center-of-pixel membership test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        if dx * dx + dy * dy > self.radius * self.radius {
            return false;
        }
        match self.class {
            ShapeClass::Disk => true,
            ShapeClass::Square => {
                let (s, c) = self.rotation.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let half = self.radius / std::f64::consts::SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            ShapeClass::Triangle => {
                let verts: [(f64, f64); 3] = std::array::from_fn(|k| {
                    let a = self.rotation + 2.0 * PI * k as f64 / 3.0;
                    (self.radius * a.cos(), self.radius * a.sin())
                });
                // Counter-clockwise vertices: inside means left of every edge.
                (0..3).all(|k| {
                    let (ax, ay) = verts[k];
                    let (bx, by) = verts[(k + 1) % 3];
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
                })
            }
        }
    }

    fn scaled_about(&self, fx: f64, fy: f64, scale: f64) -> Self {
        ShapeMeta {
            cx: fx + scale * (self.cx - fx),
            cy: fy + scale * (self.cy - fy),
            radius: self.radius * scale,
            ..*self
        }
    }
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub noise_sigma: f64,
    pub max_attempts: usize,
    pub background_band: (f64, f64),
    /// Intensity bands for disk, square, triangle.
    pub class_bands: [(f64, f64); 3],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            min_shapes: 1,
            max_shapes: 4,
            radius_min: 4.0,
            radius_max: 10.0,
            noise_sigma: 0.05,
            max_attempts: 100,
            background_band: (0.0, 0.25),
            class_bands: [(0.35, 0.75), (0.45, 0.85), (0.55, 0.95)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 1, h, w)` grayscale in `[0, 1]`, quantized to 16 bits.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub scale: f64,
    pub seed: u64,
    /// Layout at this scene's scale. Empty for scenes read from disk.
    pub shapes: Vec<ShapeMeta>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn flip_horizontal(&self) -> Self {
        let d = self.image.dims();
        let image = Tensor::from_fn(d, |n, c, y, x| self.image.at(n, c, y, d.w - 1 - x));
        let w = d.w as f64;
        Scene {
            image,
            labels: self.labels.flip_horizontal(),
            scale: self.scale,
            seed: self.seed,
            shapes: self
                .shapes
                .iter()
                .map(|s| ShapeMeta {
                    cx: w - s.cx,
                    rotation: PI - s.rotation,
                    ..*s
                })
                .collect(),
        }
    }
}

fn quantize16(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    dequantize16(q)
}

#[inline]
fn dequantize16(q: u16) -> f32 {
    q as f32 / 65535.0
}

fn uniform(rng: &mut ChaCha8Rng, band: (f64, f64)) -> f64 {
    band.0 + (band.1 - band.0) * rng.gen::<f64>()
}

/// Layout at scale 1.
fn draw_layout(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    spec: &GeneratorSpec,
) -> (f32, Vec<ShapeMeta>) {
    let background = quantize16(uniform(rng, spec.background_band));
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes.max(spec.min_shapes));
    let mut shapes: Vec<ShapeMeta> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = ShapeClass::from_index(rng.gen_range(0..3));
        let radius = uniform(rng, (spec.radius_min, spec.radius_max))
            .min(0.5 * h.min(w) as f64 - 0.5)
            .max(0.5);
        let rotation = rng.gen::<f64>() * 2.0 * PI;
        let intensity = quantize16(uniform(rng, spec.class_bands[class as usize - 1]));
        for _ in 0..spec.max_attempts {
            let cx = radius + (w as f64 - 2.0 * radius) * rng.gen::<f64>();
            let cy = radius + (h as f64 - 2.0 * radius) * rng.gen::<f64>();
            let clear = shapes.iter().all(|s| {
                let d = ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt();
                d >= s.radius + radius + 1.0
            });
            if clear {
                shapes.push(ShapeMeta {
                    class,
                    cx,
                    cy,
                    radius,
                    rotation,
                    intensity,
                });
                break;
            }
        }
    }
    (background, shapes)
}

/// Render scene `seed` at `scale`. The same `(seed, size, spec)` gives the same
/// objects at every scale.
pub fn gen_scene(
    seed: u64,
    size: (usize, usize),
    scale: f64,
    spec: &GeneratorSpec,
) -> Result<Scene> {
    let (h, w) = size;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("gen_scene", format!("scale must be positive, got {scale}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("gen_scene", "empty image size"));
    }
    if spec.min_shapes == 0 || spec.radius_min <= 0.0 || spec.radius_max < spec.radius_min {
        return Err(Error::invalid("gen_scene", "invalid generator spec"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (background, base) = draw_layout(&mut rng, h, w, spec);
    let (fx, fy) = (base[0].cx, base[0].cy);
    let shapes: Vec<ShapeMeta> = base.iter().map(|s| s.scaled_about(fx, fy, scale)).collect();

    let mut labels = vec![0u8; h * w];
    let mut clean = vec![background; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(s) = shapes.iter().find(|s| s.contains(px, py)) {
                labels[y * w + x] = s.class.label();
                clean[y * w + x] = s.intensity;
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite noise sigma");
    let pixels: Vec<f32> = clean
        .iter()
        .map(|&v| {
            if spec.noise_sigma > 0.0 {
                quantize16(v as f64 + noise.sample(&mut rng))
            } else {
                v
            }
        })
        .collect();
    Ok(Scene {
        image: Tensor::from_vec(Dims::new(1, 1, h, w), pixels)?,
        labels: LabelMap::from_vec(h, w, labels)?,
        scale,
        seed,
        shapes,
    })
}

/// Decorrelated per-item seed from a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes whose seeds derive from `base_seed`.
pub fn gen_dataset(
    base_seed: u64,
    count: usize,
    size: (usize, usize),
    scale: f64,
    spec: &GeneratorSpec,
) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| gen_scene(derive_seed(base_seed, i as u64), size, scale, spec))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; NaN when no class is present.
    pub miou: f64,
}

/// Accumulates intersections and unions over many label maps, giving
/// dataset-level IoU.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    num_classes: usize,
    ignore_label: u8,
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize, ignore_label: u8) -> Self {
        IouAccumulator {
            num_classes,
            ignore_label,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(Error::shape(
                "iou",
                Dims::new(1, 1, pred.h, pred.w),
                Dims::new(1, 1, truth.h, truth.w),
            ));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == self.ignore_label {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= self.num_classes || p >= self.num_classes {
                return Err(Error::invalid(
                    "iou",
                    format!("label out of range for {} classes", self.num_classes),
                ));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, miou }
    }
}

/// Per-class IoU of one prediction against its truth.
pub fn iou(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: usize,
    ignore_label: u8,
) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(num_classes, ignore_label);
    acc.add(pred, truth)?;
    Ok(acc.report())
}

/// Decoded binary PGM payload.
#[derive(Clone, Debug, PartialEq)]
pub enum PgmPixels {
    Gray8(Vec<u8>),
    Gray16(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: PgmPixels,
}

pub fn encode_pgm8(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// 16-bit samples are stored big-endian, as netpbm requires.
pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8], file: &Path) -> Result<Pgm> {
    let err = |offset: usize, msg: &str| Error::Parse {
        file: file.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    let count = width * height;
    let sample = if maxval < 256 { 1 } else { 2 };
    let need = count * sample;
    if bytes.len() - pos < need {
        return Err(err(
            bytes.len(),
            &format!("truncated payload: expected {need} bytes after offset {pos}"),
        ));
    }
    let payload = &bytes[pos..pos + need];
    let pixels = if sample == 1 {
        PgmPixels::Gray8(payload.to_vec())
    } else {
        PgmPixels::Gray16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect(),
        )
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes, path)
}

fn image_file(id: usize) -> String {
    format!("image_{id:05}.pgm")
}

fn label_file(id: usize) -> String {
    format!("label_{id:05}.pgm")
}

pub const INDEX_FILE: &str = "index.txt";

/// Write scenes as 16-bit image PGMs, 8-bit label PGMs and an index with one
/// `id seed scale h w` row per scene.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (id, scene) in scenes.iter().enumerate() {
        let (h, w) = (scene.height(), scene.width());
        let q: Vec<u16> = scene
            .image
            .data()
            .iter()
            .map(|&v| (v as f64 * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        fs::write(dir.join(image_file(id)), encode_pgm16(w, h, &q))?;
        fs::write(
            dir.join(label_file(id)),
            encode_pgm8(w, h, scene.labels.data()),
        )?;
        index.push_str(&format!("{id} {} {} {h} {w}\n", scene.seed, scene.scale));
    }
    let mut f = fs::File::create(dir.join(INDEX_FILE))?;
    f.write_all(index.as_bytes())?;
    Ok(())
}

/// One stored scene whose label file may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    pub id: usize,
    pub seed: u64,
    pub scale: f64,
    pub image: Tensor<f32>,
    pub labels: Option<LabelMap>,
}

/// Read a dataset written by [`write_dataset`]; every label file must exist.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    read_stored(dir, true)?
        .into_iter()
        .map(|s| {
            Ok(Scene {
                image: s.image,
                labels: s.labels.expect("labels required"),
                scale: s.scale,
                seed: s.seed,
                shapes: Vec::new(),
            })
        })
        .collect()
}

/// Read a dataset, tolerating missing label files.
pub fn read_stored(dir: &Path, require_labels: bool) -> Result<Vec<StoredScene>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)?;
    let mut scenes = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let row = line.trim();
        let line_offset = offset;
        offset += line.len();
        if row.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            file: index_path.clone(),
            offset: line_offset,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = row.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(bad("expected `id seed scale h w`"));
        }
        let id: usize = cols[0].parse().map_err(|_| bad("bad id"))?;
        let seed: u64 = cols[1].parse().map_err(|_| bad("bad seed"))?;
        let scale: f64 = cols[2].parse().map_err(|_| bad("bad scale"))?;
        let h: usize = cols[3].parse().map_err(|_| bad("bad height"))?;
        let w: usize = cols[4].parse().map_err(|_| bad("bad width"))?;

        let ipath = dir.join(image_file(id));
        let img = read_pgm(&ipath)?;
        let pixels = match img.pixels {
            PgmPixels::Gray16(p) if img.maxval == 65535 => p,
            _ => {
                return Err(Error::Parse {
                    file: ipath,
                    offset: 0,
                    msg: "image must be 16-bit with maxval 65535".into(),
                })
            }
        };
        if img.width != w || img.height != h {
            return Err(bad("index dims disagree with the image header"));
        }
        let lpath = dir.join(label_file(id));
        let labels = if lpath.exists() || require_labels {
            let lab = read_pgm(&lpath)?;
            let data = match lab.pixels {
                PgmPixels::Gray8(p) => p,
                _ => {
                    return Err(Error::Parse {
                        file: lpath,
                        offset: 0,
                        msg: "labels must be 8-bit".into(),
                    })
                }
            };
            if lab.width != w || lab.height != h {
                return Err(bad("index dims disagree with the label header"));
            }
            Some(LabelMap::from_vec(h, w, data)?)
        } else {
            None
        };
        scenes.push(StoredScene {
            id,
            seed,
            scale,
            image: Tensor::from_vec(
                Dims::new(1, 1, h, w),
                pixels.into_iter().map(dequantize16).collect(),
            )?,
            labels,
        });
    }
    Ok(scenes)
}

pub fn dataset_files(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("image_") && name.ends_with(".pgm") {
            images.push(path);
        } else if name.starts_with("label_") && name.ends_with(".pgm") {
            labels.push(path);
        }
    }
    images.sort();
    labels.sort();
    Ok((images, labels))
}
