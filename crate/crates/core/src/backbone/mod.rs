//! Residual instance-norm U-Net encoder shared by N upsampling decoders.
//!
//! Each encoder stage is two convolution groups (3x3 conv, stride 1, size
//! preserving -> instance norm -> ReLU) wrapped in a residual connection;
//! stages are separated by 2x2 max pooling. Each decoder stage upsamples by
//! factor-2 bilinear interpolation, concatenates the matching encoder skip
//! feature and applies two convolution groups; a final 1x1 convolution maps
//! to class logits followed by a per-pixel softmax.

pub mod checkpoint;
mod layers;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use layers::*;

pub use layers::ParamSpec;
pub use layers::{softmax_backward, softmax_forward};

/// Class channel treated as foreground when collapsing probability maps.
pub const FOREGROUND_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of each resolution stage, shallowest first.
    pub stage_channels: Vec<usize>,
    /// Number of decoder branches, one per annotation.
    pub n_decoders: usize,
    /// Number of output classes per pixel.
    pub n_classes: usize,
    pub in_channels: usize,
    pub norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![16, 32, 48, 64, 64],
            n_decoders: 3,
            n_classes: 2,
            in_channels: 1,
            norm_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "stage_channels needs at least 2 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::InvalidConfig(
                "stage_channels entries must be positive".into(),
            ));
        }
        if self.n_decoders < 1 {
            return Err(Error::InvalidConfig("n_decoders must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be >= 2".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::InvalidConfig("in_channels must be >= 1".into()));
        }
        if !self.norm_epsilon.is_finite() || self.norm_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Number of 2x downsampling steps between the first and last stage.
    pub fn downsample_steps(&self) -> usize {
        self.stage_channels.len() - 1
    }

    /// Input heights and widths must be multiples of this.
    pub fn grid_multiple(&self) -> usize {
        1 << self.downsample_steps()
    }
}

/// Multi-scale encoder features; level `s` has `stage_channels[s]` channels
/// at spatial resolution `(H/2^s, W/2^s)`.
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
}

/// Per-branch class probability maps plus their mean foreground map.
#[derive(Debug, Clone)]
pub struct BranchPredictions {
    /// One `(K, H, W)` probability map per decoder branch.
    pub probs: Vec<Array3<f64>>,
    /// Arithmetic mean over branches of the foreground-class channel.
    pub mean_foreground: Array2<f64>,
}

impl BranchPredictions {
    fn from_probs(probs: Vec<Array3<f64>>) -> Self {
        let (_, h, w) = probs[0].dim();
        let mut mean = Array2::<f64>::zeros((h, w));
        for p in &probs {
            mean += &p.index_axis(ndarray::Axis(0), FOREGROUND_CLASS);
        }
        mean /= probs.len() as f64;
        BranchPredictions {
            probs,
            mean_foreground: mean,
        }
    }
}

/// conv -> instance norm -> ReLU
#[derive(Debug, Clone)]
struct ConvGroup {
    conv: Conv2d,
    norm: InstanceNorm,
}

struct ConvGroupCache {
    conv: ConvCache,
    norm: NormCache,
    out: Array3<f64>, // post-ReLU, for the ReLU mask
}

impl ConvGroup {
    fn new<R: rand::Rng>(
        b: &mut NetBuilder<R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        eps: f64,
    ) -> Self {
        ConvGroup {
            conv: Conv2d::new(b, &format!("{name}.conv"), in_ch, out_ch, 3),
            norm: InstanceNorm::new(b, &format!("{name}.norm"), out_ch, eps),
        }
    }

    fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, ConvGroupCache) {
        let (c, conv_cache) = self.conv.forward(p, x);
        let (n, norm_cache) = self.norm.forward(p, &c);
        let out = relu_forward(&n);
        (
            out.clone(),
            ConvGroupCache {
                conv: conv_cache,
                norm: norm_cache,
                out,
            },
        )
    }

    fn backward(
        &self,
        p: &[f64],
        cache: &ConvGroupCache,
        grad_out: &Array3<f64>,
        g: &mut [f64],
    ) -> Array3<f64> {
        let d = relu_backward(&cache.out, grad_out);
        let d = self.norm.backward(p, &cache.norm, &d, g);
        self.conv.backward(p, &cache.conv, &d, g)
    }
}

/// Two convolution groups with the block input added back via element-wise
/// summation; a 1x1 projection aligns channels when they differ.
#[derive(Debug, Clone)]
struct ResidualBlock {
    group1: ConvGroup,
    group2: ConvGroup,
    projection: Option<Conv2d>,
}

struct ResidualCache {
    group1: ConvGroupCache,
    group2: ConvGroupCache,
    projection: Option<ConvCache>,
}

impl ResidualBlock {
    fn new<R: rand::Rng>(
        b: &mut NetBuilder<R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        eps: f64,
    ) -> Self {
        let group1 = ConvGroup::new(b, &format!("{name}.group1"), in_ch, out_ch, eps);
        let group2 = ConvGroup::new(b, &format!("{name}.group2"), out_ch, out_ch, eps);
        let projection = (in_ch != out_ch)
            .then(|| Conv2d::new(b, &format!("{name}.projection"), in_ch, out_ch, 1));
        ResidualBlock {
            group1,
            group2,
            projection,
        }
    }

    fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, ResidualCache) {
        let (h1, c1) = self.group1.forward(p, x);
        let (h2, c2) = self.group2.forward(p, &h1);
        let (skip, proj_cache) = match &self.projection {
            Some(proj) => {
                let (s, c) = proj.forward(p, x);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        (
            &h2 + &skip,
            ResidualCache {
                group1: c1,
                group2: c2,
                projection: proj_cache,
            },
        )
    }

    fn backward(
        &self,
        p: &[f64],
        cache: &ResidualCache,
        grad_out: &Array3<f64>,
        g: &mut [f64],
    ) -> Array3<f64> {
        let d1 = self.group2.backward(p, &cache.group2, grad_out, g);
        let mut dx = self.group1.backward(p, &cache.group1, &d1, g);
        match (&self.projection, &cache.projection) {
            (Some(proj), Some(pc)) => {
                dx += &proj.backward(p, pc, grad_out, g);
            }
            _ => dx += grad_out,
        }
        dx
    }
}

struct DecoderStage {
    group1: ConvGroup,
    group2: ConvGroup,
}

struct DecoderStageCache {
    in_h: usize,
    in_w: usize,
    skip_ch: usize,
    group1: ConvGroupCache,
    group2: ConvGroupCache,
}

struct Decoder {
    stages: Vec<DecoderStage>, // deepest target level first
    head: Conv2d,
}

struct DecoderCache {
    stages: Vec<DecoderStageCache>,
    head: ConvCache,
    probs: Array3<f64>,
}

impl Decoder {
    fn new<R: rand::Rng>(b: &mut NetBuilder<R>, name: &str, cfg: &ModelConfig) -> Self {
        let ch = &cfg.stage_channels;
        let n = ch.len();
        let mut stages = Vec::with_capacity(n - 1);
        for s in (0..n - 1).rev() {
            // upsampled carry (ch[s+1]) concatenated with the skip (ch[s])
            stages.push(DecoderStage {
                group1: ConvGroup::new(
                    b,
                    &format!("{name}.up{s}.group1"),
                    ch[s + 1] + ch[s],
                    ch[s],
                    cfg.norm_epsilon,
                ),
                group2: ConvGroup::new(
                    b,
                    &format!("{name}.up{s}.group2"),
                    ch[s],
                    ch[s],
                    cfg.norm_epsilon,
                ),
            });
        }
        let head = Conv2d::new(b, &format!("{name}.head"), ch[0], cfg.n_classes, 1);
        Decoder { stages, head }
    }

    fn forward(&self, p: &[f64], pyramid: &FeaturePyramid) -> (Array3<f64>, DecoderCache) {
        let n = pyramid.levels.len();
        let mut y = pyramid.levels[n - 1].clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let level = n - 2 - i;
            let (_, in_h, in_w) = y.dim();
            let up = upsample2_forward(&y);
            let skip = &pyramid.levels[level];
            let cat = concat_channels(&up, skip);
            let (h1, c1) = stage.group1.forward(p, &cat);
            let (h2, c2) = stage.group2.forward(p, &h1);
            caches.push(DecoderStageCache {
                in_h,
                in_w,
                skip_ch: skip.dim().0,
                group1: c1,
                group2: c2,
            });
            y = h2;
        }
        let (logits, head_cache) = self.head.forward(p, &y);
        let probs = softmax_forward(&logits);
        (
            probs.clone(),
            DecoderCache {
                stages: caches,
                head: head_cache,
                probs,
            },
        )
    }

    /// Propagates dL/dprobs back to the head, the stages and the encoder
    /// skips. Returns per-level gradients on the feature pyramid.
    fn backward(
        &self,
        p: &[f64],
        cache: &DecoderCache,
        grad_probs: &Array3<f64>,
        g: &mut [f64],
    ) -> Vec<Array3<f64>> {
        let n_levels = self.stages.len() + 1;
        let mut level_grads: Vec<Option<Array3<f64>>> = (0..n_levels).map(|_| None).collect();
        let dlogits = softmax_backward(&cache.probs, grad_probs);
        let mut d = self.head.backward(p, &cache.head, &dlogits, g);
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[i];
            let level = n_levels - 2 - i;
            let d2 = stage.group2.backward(p, &sc.group2, &d, g);
            let dcat = stage.group1.backward(p, &sc.group1, &d2, g);
            let up_ch = dcat.dim().0 - sc.skip_ch;
            let (dup, dskip) = split_channels(&dcat, up_ch);
            level_grads[level] = Some(dskip);
            d = upsample2_backward(&dup, sc.in_h, sc.in_w);
        }
        level_grads[n_levels - 1] = Some(d);
        level_grads.into_iter().map(|x| x.unwrap()).collect()
    }
}

struct EncoderCache {
    blocks: Vec<ResidualCache>,
    pools: Vec<PoolCache>,
}

/// Forward-pass state needed to run a backward pass.
pub struct ForwardTrace {
    encoder: EncoderCache,
    decoders: Vec<DecoderCache>,
}

/// One shared residual encoder and `n_decoders` upsampling branches.
pub struct MultiDecoderNet {
    config: ModelConfig,
    params: Vec<f64>,
    specs: Vec<ParamSpec>,
    encoder_blocks: Vec<ResidualBlock>,
    decoders: Vec<Decoder>,
}

impl MultiDecoderNet {
    /// Builds the network with deterministic seeded initialization.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = NetBuilder::new(ChaCha8Rng::seed_from_u64(seed));
        let ch = &config.stage_channels;
        let mut encoder_blocks = Vec::with_capacity(ch.len());
        let mut prev = config.in_channels;
        for (s, &c) in ch.iter().enumerate() {
            encoder_blocks.push(ResidualBlock::new(
                &mut b,
                &format!("encoder.stage{s}"),
                prev,
                c,
                config.norm_epsilon,
            ));
            prev = c;
        }
        let decoders = (0..config.n_decoders)
            .map(|i| Decoder::new(&mut b, &format!("decoders.{i}"), config))
            .collect();
        Ok(MultiDecoderNet {
            config: config.clone(),
            params: b.params,
            specs: b.specs,
            encoder_blocks,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Exact count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Replaces the full parameter vector, e.g. when restoring a checkpoint.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} parameters", self.params.len()),
                format!("{}", params.len()),
            ));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        let mult = self.config.grid_multiple();
        if c != self.config.in_channels || h % mult != 0 || w % mult != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!(
                    "({}, H, W) with H and W nonzero multiples of {}",
                    self.config.in_channels, mult
                ),
                format!("({c}, {h}, {w})"),
            ));
        }
        Ok(())
    }

    /// Runs the shared encoder, returning all resolution levels.
    pub fn encode(&self, image: &Array3<f64>) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        Ok(self.encode_traced(image).0)
    }

    fn encode_traced(&self, image: &Array3<f64>) -> (FeaturePyramid, EncoderCache) {
        let mut levels = Vec::with_capacity(self.encoder_blocks.len());
        let mut blocks = Vec::with_capacity(self.encoder_blocks.len());
        let mut pools = Vec::with_capacity(self.encoder_blocks.len() - 1);
        let mut x = image.clone();
        for (s, block) in self.encoder_blocks.iter().enumerate() {
            if s > 0 {
                let (pooled, pc) = maxpool2_forward(&x);
                pools.push(pc);
                x = pooled;
            }
            let (out, bc) = block.forward(&self.params, &x);
            blocks.push(bc);
            levels.push(out.clone());
            x = out;
        }
        (FeaturePyramid { levels }, EncoderCache { blocks, pools })
    }

    /// Encodes once and runs every decoder branch on the shared features.
    pub fn forward_all(&self, image: &Array3<f64>) -> Result<BranchPredictions> {
        Ok(self.forward_all_traced(image)?.0)
    }

    /// Like [`forward_all`](Self::forward_all) but keeps the activations
    /// needed for a subsequent [`backward`](Self::backward) call.
    pub fn forward_all_traced(
        &self,
        image: &Array3<f64>,
    ) -> Result<(BranchPredictions, ForwardTrace)> {
        self.check_input(image)?;
        let (pyramid, enc_cache) = self.encode_traced(image);
        let mut probs = Vec::with_capacity(self.decoders.len());
        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let (u, c) = dec.forward(&self.params, &pyramid);
            probs.push(u);
            dec_caches.push(c);
        }
        Ok((
            BranchPredictions::from_probs(probs),
            ForwardTrace {
                encoder: enc_cache,
                decoders: dec_caches,
            },
        ))
    }

    /// Accumulates dL/dparams into `grads` given per-branch dL/dprobs.
    /// Branches whose gradient entry is `None` are skipped entirely, so
    /// their decoder parameters receive exactly zero gradient.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_probs: &[Option<Array3<f64>>],
        grads: &mut [f64],
    ) -> Result<()> {
        if grad_probs.len() != self.decoders.len() {
            return Err(Error::shape(
                format!("{} branch gradients", self.decoders.len()),
                format!("{}", grad_probs.len()),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} gradient slots", self.params.len()),
                format!("{}", grads.len()),
            ));
        }
        let n_levels = self.encoder_blocks.len();
        let mut level_grads: Vec<Option<Array3<f64>>> = (0..n_levels).map(|_| None).collect();
        for (i, dec) in self.decoders.iter().enumerate() {
            let Some(gp) = &grad_probs[i] else { continue };
            let per_level = dec.backward(&self.params, &trace.decoders[i], gp, grads);
            for (lvl, dg) in per_level.into_iter().enumerate() {
                match &mut level_grads[lvl] {
                    Some(acc) => *acc += &dg,
                    slot => *slot = Some(dg),
                }
            }
        }
        // encoder backward, deepest stage first
        let mut carry: Option<Array3<f64>> = None;
        for s in (0..n_levels).rev() {
            let mut d = match (level_grads[s].take(), carry.take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            d = self.encoder_blocks[s].backward(&self.params, &trace.encoder.blocks[s], &d, grads);
            if s > 0 {
                carry = Some(maxpool2_backward(&trace.encoder.pools[s - 1], &d));
            }
        }
        Ok(())
    }
}
