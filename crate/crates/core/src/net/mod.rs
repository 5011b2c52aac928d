//! U-net style encoder-decoder with a sigmoid segmentation head and a 1x1
//! projection head for dense embeddings. Single-sample CHW tensors in f32;
//! normalization is per sample so outputs never depend on batch composition.

mod checkpoint;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SemImage;
use crate::rng::derive;
use layers::{concat, maxpool2, maxpool2_backward, split, upsample2, upsample2_backward, Conv, ConvCache, GroupNormRelu, NormCache};
pub use params::{Adam, AdamConfig, Grads, ParamStore};

/// Dense CHW tensor for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Stack same-shaped images as input channels.
    pub fn from_images(images: &[&SemImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::shape("no input channels"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.shape() != (h, w) {
                return Err(Error::shape(format!("channel shape {:?} differs from {:?}", img.shape(), (h, w))));
            }
            data.extend(img.pixels.iter().map(|v| *v as f32));
        }
        Ok(Self {
            channels: images.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    /// 1 for the defect image alone, 2 when a registered reference is stacked.
    #[serde(default = "one")]
    pub in_channels: usize,
    /// Attach the projection head to the bottleneck instead of the full-resolution features.
    #[serde(default)]
    pub embed_on_low: bool,
}

fn one() -> usize {
    1
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            embed_dim: 64,
            in_channels: 1,
            embed_on_low: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 8 {
            return Err(Error::config(format!("depth must be <= 8, got {}", self.depth)));
        }
        if self.base_channels < 8 {
            return Err(Error::config(format!("base_channels must be >= 8, got {}", self.base_channels)));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::config(format!("in_channels must be 1 or 2, got {}", self.in_channels)));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn low_channels(&self) -> usize {
        self.channels_at(self.depth - 1)
    }

    pub fn embed_source_channels(&self) -> usize {
        if self.embed_on_low {
            self.low_channels()
        } else {
            self.base_channels
        }
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if channels != self.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channel(s), got {channels}",
                self.in_channels
            )));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "input {height}x{width} must have height and width divisible by 2^(depth-1) = {d} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    norm1: GroupNormRelu,
    conv2: Conv,
    norm2: GroupNormRelu,
}

struct BlockCache {
    c1: ConvCache,
    n1: NormCache,
    c2: ConvCache,
    n2: NormCache,
}

impl Block {
    fn register(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv::register(store, &format!("{name}.conv1"), cin, cout, 3),
            norm1: GroupNormRelu::register(store, &format!("{name}.norm1"), cout),
            conv2: Conv::register(store, &format!("{name}.conv2"), cout, cout, 3),
            norm2: GroupNormRelu::register(store, &format!("{name}.norm2"), cout),
        }
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, BlockCache) {
        let (y, c1) = self.conv1.forward(p, x);
        let (y, n1) = self.norm1.forward(p, y);
        let (y, c2) = self.conv2.forward(p, &y);
        let (y, n2) = self.norm2.forward(p, y);
        (y, BlockCache { c1, n1, c2, n2 })
    }

    fn backward(&self, p: &ParamStore, cache: &BlockCache, dy: Tensor, g: &mut Grads) -> Tensor {
        let d = self.norm2.backward(p, &cache.n2, dy, g);
        let d = self.conv2.backward(p, &cache.c2, &d, g);
        let d = self.norm1.backward(p, &cache.n1, d, g);
        self.conv1.backward(p, &cache.c1, &d, g)
    }
}

/// Per-sample network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Bottleneck features, spatially `H / 2^(depth-1)`.
    pub low_feats: Tensor,
    /// Full-resolution decoder features.
    pub high_feats: Tensor,
    /// Defect probability per pixel, row-major `H x W`, strictly inside (0, 1).
    pub prob_map: Vec<f64>,
}

impl ForwardOutput {
    pub fn shape(&self) -> (usize, usize) {
        (self.high_feats.height, self.high_feats.width)
    }

    /// Features the projection head is configured to read.
    pub fn embed_source(&self, cfg: &NetConfig) -> &Tensor {
        if cfg.embed_on_low {
            &self.low_feats
        } else {
            &self.high_feats
        }
    }
}

/// Activations kept from [`UNet::forward_train`] for the backward pass.
pub struct Tape {
    enc: Vec<BlockCache>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    dec: Vec<BlockCache>,
    head: ConvCache,
}

/// Cached input of a projection call.
pub struct ProjectCache(ConvCache);

/// Upstream gradients with respect to the network outputs.
#[derive(Default)]
pub struct OutputGrads<'a> {
    pub prob: Option<&'a [f64]>,
    pub high: Option<&'a Tensor>,
    pub low: Option<&'a Tensor>,
}

/// Logits beyond this magnitude are clamped so the probability stays strictly inside (0, 1) in f64.
const LOGIT_CLAMP: f64 = 30.0;

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: NetConfig,
    pub params: ParamStore,
    enc: Vec<Block>,
    dec: Vec<Block>,
    seg_head: Conv,
    proj: Conv,
}

impl UNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(seed);
        let mut enc = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for l in 0..config.depth {
            enc.push(Block::register(&mut p, &format!("enc{l}"), cin, config.channels_at(l)));
            cin = config.channels_at(l);
        }
        let mut dec = Vec::with_capacity(config.depth - 1);
        for l in 0..config.depth - 1 {
            let c = config.channels_at(l);
            dec.push(Block::register(&mut p, &format!("dec{l}"), c + config.channels_at(l + 1), c));
        }
        let seg_head = Conv::register(&mut p, "seg_head", config.base_channels, 1, 1);
        let proj = Conv::register(&mut p, "proj", config.embed_source_channels(), config.embed_dim, 1);
        Ok(Self {
            config,
            params: p,
            enc,
            dec,
            seg_head,
            proj,
        })
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(ForwardOutput, Tape)> {
        self.config.check_input(x.channels, x.height, x.width)?;
        if let Some(v) = x.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("input values must lie in [0, 1], found {v}")));
        }
        let p = &self.params;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth - 1);
        let (mut cur, cache) = self.enc[0].forward(p, x);
        enc_caches.push(cache);
        for l in 1..depth {
            let (pooled, arg) = maxpool2(&cur);
            pools.push((arg, cur.height, cur.width));
            skips.push(cur);
            let (y, cache) = self.enc[l].forward(p, &pooled);
            enc_caches.push(cache);
            cur = y;
        }
        let low = cur.clone();
        let mut dec_caches: Vec<Option<BlockCache>> = (0..depth - 1).map(|_| None).collect();
        for l in (0..depth - 1).rev() {
            let up = upsample2(&cur);
            let joined = concat(&skips[l], &up);
            let (y, cache) = self.dec[l].forward(p, &joined);
            dec_caches[l] = Some(cache);
            cur = y;
        }
        let (logits, head) = self.seg_head.forward(p, &cur);
        let prob_map = logits.data.iter().map(|z| sigmoid(*z as f64)).collect();
        Ok((
            ForwardOutput {
                low_feats: low,
                high_feats: cur,
                prob_map,
            },
            Tape {
                enc: enc_caches,
                pools,
                dec: dec_caches.into_iter().map(|c| c.expect("every decoder level ran")).collect(),
                head,
            },
        ))
    }

    /// Inference on one sample.
    pub fn forward_one(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_train(x).map(|(o, _)| o)
    }

    /// Inference on a batch; each sample is processed independently.
    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<ForwardOutput>> {
        batch.iter().map(|x| self.forward_one(x)).collect()
    }

    /// 1x1 projection of features to `embed_dim` channels.
    pub fn project(&self, feats: &Tensor) -> Result<(Tensor, ProjectCache)> {
        if feats.channels != self.proj.in_channels {
            return Err(Error::shape(format!(
                "projection expects {} channels, got {}",
                self.proj.in_channels, feats.channels
            )));
        }
        let (y, c) = self.proj.forward(&self.params, feats);
        Ok((y, ProjectCache(c)))
    }

    /// Accumulates projection parameter gradients and returns the gradient
    /// with respect to the projected features.
    pub fn project_backward(&self, cache: &ProjectCache, d_embed: &Tensor, grads: &mut Grads) -> Tensor {
        self.proj.backward(&self.params, &cache.0, d_embed, grads)
    }

    /// Accumulates parameter gradients for one sample.
    pub fn backward(&self, tape: &Tape, out: &ForwardOutput, g: OutputGrads<'_>, grads: &mut Grads) {
        let p = &self.params;
        let (h, w) = out.shape();
        let mut d_high = Tensor::zeros(self.config.base_channels, h, w);
        if let Some(dp) = g.prob {
            let d_logit = Tensor {
                channels: 1,
                height: h,
                width: w,
                data: dp
                    .iter()
                    .zip(&out.prob_map)
                    .map(|(d, p)| (d * p * (1.0 - p)) as f32)
                    .collect(),
            };
            d_high = self.seg_head.backward(p, &tape.head, &d_logit, grads);
        }
        if let Some(dh) = g.high {
            add_into(&mut d_high, dh);
        }
        let depth = self.config.depth;
        let mut d_skips: Vec<Tensor> = Vec::with_capacity(depth - 1);
        let mut d = d_high;
        for l in 0..depth - 1 {
            let dj = self.dec[l].backward(p, &tape.dec[l], d, grads);
            let (d_skip, d_up) = split(dj, self.config.channels_at(l));
            d_skips.push(d_skip);
            d = upsample2_backward(&d_up);
        }
        if let Some(dl) = g.low {
            add_into(&mut d, dl);
        }
        for l in (0..depth).rev() {
            let dx = self.enc[l].backward(p, &tape.enc[l], d, grads);
            if l == 0 {
                break;
            }
            let (arg, ih, iw) = &tape.pools[l - 1];
            let mut dprev = maxpool2_backward(&dx, arg, *ih, *iw);
            add_into(&mut dprev, &d_skips[l - 1]);
            d = dprev;
        }
    }
}

/// Student and teacher networks with separate parameter storage.
#[derive(Debug, Clone)]
pub struct TeacherStudentState {
    pub student: UNet,
    pub teacher: UNet,
}

impl TeacherStudentState {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            student: UNet::new(config, derive(seed, 0))?,
            teacher: UNet::new(config, derive(seed, 1))?,
        })
    }
}

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
