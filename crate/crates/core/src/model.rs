//! Toy fully convolutional segmenter with a dynamic Gaussian receptive-field head.
//!
//! ```text
//! image ─ conv3x3(in→16) ─ relu ─ pool ─ conv3x3(16→32) ─ relu ─ conv3x3(32→64) ─ relu ─ pool ─► F
//! F ─ scale 1x1(64→1) ─ softplus link ─► Σ
//! F, Σ ─ adaptive smooth ─ free 3x3(64→64) ─ relu ─ score 1x1(64→C) ─ bilinear x4 ─ softmax ─► Ŷ
//! ```
//!
//! Features `F` sit at 1/4 resolution; the head upsamples class logits back to
//! the input resolution. During adaptation only the scale and score filters
//! move, and the head can be re-run on cached features.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalespace::{
    adaptive_smooth, adaptive_smooth_backward_with, sigma_link, sigma_link_backward,
    sigma_link_inverse, SigmaMap, DEFAULT_RADIUS_CAP,
};
use crate::tensor::{
    avgpool2, avgpool2_backward, conv2d, conv2d_backward_input, conv2d_backward_params, relu,
    relu_backward, softmax_channels, upsample_bilinear, upsample_bilinear_backward, Dims,
    Precision, Real, Tensor,
};

pub const FEATURE_CHANNELS: usize = 64;
pub const DOWNSAMPLE: usize = 4;
const WIDTHS: [usize; 3] = [16, 32, FEATURE_CHANNELS];
/// Initial sigma of the scale regressor, in feature pixels.
pub const INITIAL_SIGMA: f64 = 1.0;
/// Gain on the scale regressor's random weights so the initial sigma map
/// stays close to `INITIAL_SIGMA`.
const SCALE_INIT_GAIN: f64 = 0.1;

/// A convolution filter bank: weights `(out, in, k, k)` and bias `(1, out, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Dims::new(c_out, c_in, k, k)),
            bias: Tensor::zeros(Dims::new(1, c_out, 1, 1)),
        }
    }

    fn he(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, gain: f64) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).unwrap();
        let dims = Dims::new(c_out, c_in, k, k);
        let data = (0..dims.len())
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        ConvParams {
            weight: Tensor::from_vec(dims, data).unwrap(),
            bias: Tensor::zeros(Dims::new(1, c_out, 1, 1)),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let pad = self.weight.dims().h / 2;
        conv2d(input, &self.weight, self.bias.data(), pad)
    }

    pub fn padding(&self) -> usize {
        self.weight.dims().h / 2
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub conv3: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// Scale regression filter; its output feeds the sigma link.
    pub scale: ConvParams<T>,
    /// Free-form filter applied to the smoothed features. Frozen at test time.
    pub free: ConvParams<T>,
    /// Classification filter producing class logits.
    pub score: ConvParams<T>,
}

/// Parameter group names in checkpoint order.
pub const PARAM_NAMES: [&str; 12] = [
    "backbone.conv1.weight",
    "backbone.conv1.bias",
    "backbone.conv2.weight",
    "backbone.conv2.bias",
    "backbone.conv3.weight",
    "backbone.conv3.bias",
    "head.scale.weight",
    "head.scale.bias",
    "head.free.weight",
    "head.free.bias",
    "head.score.weight",
    "head.score.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
    pub radius_cap: usize,
}

/// Activations of the backbone, kept for training backward passes.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    pub input: Tensor<T>,
    pub pre1: Tensor<T>,
    pub pool1: Tensor<T>,
    pub pre2: Tensor<T>,
    pub act2: Tensor<T>,
    pub pre3: Tensor<T>,
    pub act3: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub features: Tensor<T>,
    pub raw_scale: Tensor<T>,
    pub sigmas: SigmaMap<T>,
    pub smoothed: Tensor<T>,
    pub free_pre: Tensor<T>,
    pub free_act: Tensor<T>,
    pub logits_low: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Gradients for every parameter group; groups not requested stay `None`.
#[derive(Clone, Debug, Default)]
pub struct ModelGrads<T> {
    pub conv1: Option<ConvParams<T>>,
    pub conv2: Option<ConvParams<T>>,
    pub conv3: Option<ConvParams<T>>,
    pub scale: Option<ConvParams<T>>,
    pub free: Option<ConvParams<T>>,
    pub score: Option<ConvParams<T>>,
}

/// Score and scale filter gradients.
#[derive(Clone, Debug)]
pub struct HeadGrads<T> {
    pub score: ConvParams<T>,
    pub scale: ConvParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub score: bool,
    pub scale: bool,
    pub free: bool,
    pub backbone: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        score: true,
        scale: true,
        free: true,
        backbone: true,
    };
}

fn conv_grads<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<ConvParams<T>> {
    let (gw, gb) = conv2d_backward_params(grad_out, input, &params.weight, params.padding())?;
    Ok(ConvParams {
        weight: gw,
        bias: Tensor::from_vec(params.bias.dims(), gb)?,
    })
}

fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += *b;
    }
}

impl<T: Real> Model<T> {
    /// He-initialized weights, zero biases, and a scale bias giving sigma ≈ 1.
    pub fn init(seed: u64, c_in: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = ConvParams::he(&mut rng, WIDTHS[0], c_in, 3, 1.0);
        let conv2 = ConvParams::he(&mut rng, WIDTHS[1], WIDTHS[0], 3, 1.0);
        let conv3 = ConvParams::he(&mut rng, WIDTHS[2], WIDTHS[1], 3, 1.0);
        let mut scale = ConvParams::he(&mut rng, 1, FEATURE_CHANNELS, 1, SCALE_INIT_GAIN);
        scale.bias.data_mut()[0] = T::lit(sigma_link_inverse(INITIAL_SIGMA));
        let free = ConvParams::he(&mut rng, FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 1.0);
        let score = ConvParams::he(&mut rng, num_classes, FEATURE_CHANNELS, 1, 1.0);
        Model {
            backbone: BackboneParams {
                conv1,
                conv2,
                conv3,
            },
            head: HeadParams { scale, free, score },
            radius_cap: DEFAULT_RADIUS_CAP,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.score.weight.dims().n
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.conv1.weight.dims().c
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |p: &ConvParams<T>| ConvParams {
            weight: p.weight.cast(),
            bias: p.bias.cast(),
        };
        Model {
            backbone: BackboneParams {
                conv1: c(&self.backbone.conv1),
                conv2: c(&self.backbone.conv2),
                conv3: c(&self.backbone.conv3),
            },
            head: HeadParams {
                scale: c(&self.head.scale),
                free: c(&self.head.free),
                score: c(&self.head.score),
            },
            radius_cap: self.radius_cap,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let b = &self.backbone;
        let h = &self.head;
        [&b.conv1, &b.conv2, &b.conv3, &h.scale, &h.free, &h.score]
            .into_iter()
            .flat_map(|p| p.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let b = &mut self.backbone;
        let h = &mut self.head;
        [
            &mut b.conv1,
            &mut b.conv2,
            &mut b.conv3,
            &mut h.scale,
            &mut h.free,
            &mut h.score,
        ]
        .into_iter()
        .flat_map(|p| p.params_mut())
        .collect()
    }

    /// Hash of the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for t in self.params() {
            for d in t.dims().as_array() {
                hasher.write_usize(d);
            }
            for v in t.data() {
                hasher.write_u64(v.as_f64().to_bits());
            }
        }
        hasher.finish()
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let d = image.dims();
        if d.n != 1 || d.c != self.in_channels() {
            return Err(Error::shape(
                "forward",
                d,
                Dims::new(1, self.in_channels(), d.h, d.w),
            ));
        }
        if d.h == 0 || d.w == 0 || d.h % DOWNSAMPLE != 0 || d.w % DOWNSAMPLE != 0 {
            return Err(Error::invalid(
                "forward",
                format!("spatial dims of {d} must be positive multiples of {DOWNSAMPLE}"),
            ));
        }
        Ok(())
    }

    pub fn forward_backbone(&self, image: &Tensor<T>) -> Result<BackboneCache<T>> {
        self.check_image(image)?;
        let b = &self.backbone;
        let pre1 = b.conv1.forward(image)?;
        let pool1 = avgpool2(&relu(&pre1))?;
        let pre2 = b.conv2.forward(&pool1)?;
        let act2 = relu(&pre2);
        let pre3 = b.conv3.forward(&act2)?;
        let act3 = relu(&pre3);
        Ok(BackboneCache {
            input: image.clone(),
            pre1,
            pool1,
            pre2,
            act2,
            pre3,
            act3,
        })
    }

    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(avgpool2(&self.forward_backbone(image)?.act3)?)
    }

    /// Unaltered forward pass from the image.
    pub fn forward_full(&self, image: &Tensor<T>) -> Result<ForwardCache<T>> {
        let features = self.features(image)?;
        forward_head(features, &self.head, self.radius_cap)
    }

    /// Full forward pass keeping backbone activations for training.
    pub fn forward_train(&self, image: &Tensor<T>) -> Result<(BackboneCache<T>, ForwardCache<T>)> {
        let bb = self.forward_backbone(image)?;
        let features = avgpool2(&bb.act3)?;
        let head = forward_head(features, &self.head, self.radius_cap)?;
        Ok((bb, head))
    }

    /// Gradients of every parameter given `dL/dlogits` for a training forward pass.
    pub fn backward_full(
        &self,
        bb: &BackboneCache<T>,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<ModelGrads<T>> {
        let (mut grads, gfeat) =
            head_backward_with(cache, grad_logits, &self.head, self.radius_cap, GradRequest::ALL)?;
        let gfeat = gfeat.expect("feature gradient requested");
        let b = &self.backbone;
        let g_act3 = avgpool2_backward(&gfeat, bb.act3.dims())?;
        let g_pre3 = relu_backward(&g_act3, &bb.pre3)?;
        grads.conv3 = Some(conv_grads(&g_pre3, &bb.act2, &b.conv3)?);
        let g_act2 = conv2d_backward_input(&g_pre3, bb.act2.dims(), &b.conv3.weight, 1)?;
        let g_pre2 = relu_backward(&g_act2, &bb.pre2)?;
        grads.conv2 = Some(conv_grads(&g_pre2, &bb.pool1, &b.conv2)?);
        let g_pool1 = conv2d_backward_input(&g_pre2, bb.pool1.dims(), &b.conv2.weight, 1)?;
        let g_act1 = avgpool2_backward(&g_pool1, bb.pre1.dims())?;
        let g_pre1 = relu_backward(&g_act1, &bb.pre1)?;
        grads.conv1 = Some(conv_grads(&g_pre1, &bb.input, &b.conv1)?);
        Ok(grads)
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<crate::data::LabelMap> {
        Ok(crate::data::LabelMap::argmax(&self.forward_full(image)?.logits))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::PRECISION.tag().to_le_bytes());
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32 + 1).to_le_bytes());
        for (name, t) in PARAM_NAMES.iter().zip(params) {
            write_named(&mut out, name, t.dims(), t.data());
        }
        write_named::<T>(
            &mut out,
            RADIUS_CAP_NAME,
            Dims::new(1, 1, 1, 1),
            &[T::lit(self.radius_cap as f64)],
        );
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.u32()?;
        match Precision::from_tag(tag) {
            Some(p) if p == T::PRECISION => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint precision {p:?} does not match requested {:?}",
                    T::PRECISION
                )))
            }
            None => return Err(Error::Checkpoint(format!("unknown precision tag {tag}"))),
        }
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dims = Dims::new(
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            );
            let raw = r.take(dims.len() * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::from_vec(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(tensors.swap_remove(i).1)
        };
        let mut conv = |w: &str, b: &str| -> Result<ConvParams<T>> {
            Ok(ConvParams {
                weight: take(w)?,
                bias: take(b)?,
            })
        };
        let conv1 = conv(PARAM_NAMES[0], PARAM_NAMES[1])?;
        let conv2 = conv(PARAM_NAMES[2], PARAM_NAMES[3])?;
        let conv3 = conv(PARAM_NAMES[4], PARAM_NAMES[5])?;
        let scale = conv(PARAM_NAMES[6], PARAM_NAMES[7])?;
        let free = conv(PARAM_NAMES[8], PARAM_NAMES[9])?;
        let score = conv(PARAM_NAMES[10], PARAM_NAMES[11])?;
        let radius_cap = take(RADIUS_CAP_NAME)?.data()[0].as_f64() as usize;
        let model = Model {
            backbone: BackboneParams {
                conv1,
                conv2,
                conv3,
            },
            head: HeadParams { scale, free, score },
            radius_cap,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let expect = |p: &ConvParams<T>, c_out: usize, c_in: usize, k: usize| -> Result<()> {
            let wd = Dims::new(c_out, c_in, k, k);
            if p.weight.dims() != wd {
                return Err(Error::shape("checkpoint", p.weight.dims(), wd));
            }
            let bd = Dims::new(1, c_out, 1, 1);
            if p.bias.dims() != bd {
                return Err(Error::shape("checkpoint", p.bias.dims(), bd));
            }
            Ok(())
        };
        let c_in = self.in_channels();
        let classes = self.num_classes();
        expect(&self.backbone.conv1, WIDTHS[0], c_in, 3)?;
        expect(&self.backbone.conv2, WIDTHS[1], WIDTHS[0], 3)?;
        expect(&self.backbone.conv3, WIDTHS[2], WIDTHS[1], 3)?;
        expect(&self.head.scale, 1, FEATURE_CHANNELS, 1)?;
        expect(&self.head.free, FEATURE_CHANNELS, FEATURE_CHANNELS, 3)?;
        expect(&self.head.score, classes, FEATURE_CHANNELS, 1)?;
        if self.radius_cap == 0 {
            return Err(Error::Checkpoint("radius cap must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SADP";
pub const CHECKPOINT_VERSION: u32 = 1;
const RADIUS_CAP_NAME: &str = "head.radius_cap";

/// Element precision recorded in a checkpoint header.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let tag = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    Precision::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))
}

fn write_named<T: Real>(out: &mut Vec<u8>, name: &str, dims: Dims, data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in dims.as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Partial forward pass: re-infer scales and predictions from cached features.
pub fn forward_head<T: Real>(
    features: Tensor<T>,
    head: &HeadParams<T>,
    radius_cap: usize,
) -> Result<ForwardCache<T>> {
    let fd = features.dims();
    if fd.n != 1 || fd.c != head.scale.weight.dims().c || fd.c != head.free.weight.dims().c {
        return Err(Error::shape("forward_head", fd, head.scale.weight.dims()));
    }
    let raw_scale = head.scale.forward(&features)?;
    let sigmas = sigma_link(&raw_scale)?;
    let smoothed = adaptive_smooth(&features, &sigmas, radius_cap)?;
    let free_pre = head.free.forward(&smoothed)?;
    let free_act = relu(&free_pre);
    let logits_low = head.score.forward(&free_act)?;
    let logits = upsample_bilinear(&logits_low, DOWNSAMPLE)?;
    let probs = softmax_channels(&logits);
    Ok(ForwardCache {
        features,
        raw_scale,
        sigmas,
        smoothed,
        free_pre,
        free_act,
        logits_low,
        logits,
        probs,
    })
}

/// Gradients of the score and scale filters given `dL/dlogits`.
pub fn head_backward<T: Real>(
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
    head: &HeadParams<T>,
    radius_cap: usize,
) -> Result<HeadGrads<T>> {
    let req = GradRequest {
        score: true,
        scale: true,
        free: false,
        backbone: false,
    };
    let (g, _) = head_backward_with(cache, grad_logits, head, radius_cap, req)?;
    Ok(HeadGrads {
        score: g.score.expect("score requested"),
        scale: g.scale.expect("scale requested"),
    })
}

/// Backward through the head computing only what `req` asks for. The second
/// value is the gradient with respect to the features when `req.backbone` is set.
pub fn head_backward_with<T: Real>(
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
    head: &HeadParams<T>,
    radius_cap: usize,
    req: GradRequest,
) -> Result<(ModelGrads<T>, Option<Tensor<T>>)> {
    if grad_logits.dims() != cache.logits.dims() {
        return Err(Error::shape(
            "head_backward",
            grad_logits.dims(),
            cache.logits.dims(),
        ));
    }
    let mut grads = ModelGrads::default();
    let g_low = upsample_bilinear_backward(grad_logits, DOWNSAMPLE)?;
    if req.score {
        grads.score = Some(conv_grads(&g_low, &cache.free_act, &head.score)?);
    }
    if !(req.scale || req.free || req.backbone) {
        return Ok((grads, None));
    }
    let g_act = conv2d_backward_input(&g_low, cache.free_act.dims(), &head.score.weight, 0)?;
    let g_pre = relu_backward(&g_act, &cache.free_pre)?;
    if req.free {
        grads.free = Some(conv_grads(&g_pre, &cache.smoothed, &head.free)?);
    }
    if !(req.scale || req.backbone) {
        return Ok((grads, None));
    }
    let g_smooth = conv2d_backward_input(&g_pre, cache.smoothed.dims(), &head.free.weight, 1)?;
    let sg = adaptive_smooth_backward_with(
        &g_smooth,
        &cache.features,
        &cache.sigmas,
        radius_cap,
        req.backbone,
    )?;
    let g_raw = sigma_link_backward(&sg.sigmas, &cache.raw_scale)?;
    if req.scale {
        grads.scale = Some(conv_grads(&g_raw, &cache.features, &head.scale)?);
    }
    let g_features = match sg.field {
        Some(mut gf) => {
            let via_scale =
                conv2d_backward_input(&g_raw, cache.features.dims(), &head.scale.weight, 0)?;
            add_into(&mut gf, &via_scale);
            Some(gf)
        }
        None => None,
    };
    Ok((grads, g_features))
}
