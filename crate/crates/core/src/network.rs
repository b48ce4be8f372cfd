//! MHA-UNet: five-level encoder/decoder with MHAblocks at levels 3–5, a
//! ConvMixer bottleneck and channel+spatial attention on every skip.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::explain::{ExplainabilityBundle, Heatmap};
use crate::highorder::DEFAULT_ALPHA;
use crate::mha::{normalize_orders, BranchActivations, MhaBlock, ALL_ORDERS};
use crate::nn::{
    bilinear_resize, dropout, gelu, sigmoid, BatchNorm2d, Conv2d, DepthwiseConv2d, ParamBuilder,
    ParamStore,
};

pub const LEVELS: usize = 5;
/// First level (1-based) that carries an MHAblock.
pub const FIRST_MHA_LEVEL: usize = 3;
/// Order used where a single-order ablation replaces an MHAblock.
pub const DEFAULT_SINGLE_ORDER: usize = 5;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const META_CONFIG: &str = "__meta__.config";
const META_VERSION: &str = "__meta__.format_version";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub channels: [usize; LEVELS],
    /// `(height, width)` of network inputs.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub dropout_rate: f64,
    /// Orders fused by every full MHAblock.
    pub mha_orders: Vec<usize>,
    /// Replace encoder MHAblocks by a single-order block.
    pub encoder_single_order: Option<usize>,
    /// Replace decoder MHAblocks by a single-order block.
    pub decoder_single_order: Option<usize>,
    pub alpha: f64,
    pub bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128, 256],
            input_size: (256, 256),
            input_channels: 3,
            dropout_rate: 0.1,
            mha_orders: ALL_ORDERS.to_vec(),
            encoder_single_order: None,
            decoder_single_order: None,
            alpha: DEFAULT_ALPHA,
            bias: true,
        }
    }
}

impl NetworkConfig {
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    /// Table-5 style ablation: single-order blocks in the encoder, decoder or both.
    pub fn single_order_ablation(mut self, encoder: bool, decoder: bool) -> Self {
        self.encoder_single_order = encoder.then_some(DEFAULT_SINGLE_ORDER);
        self.decoder_single_order = decoder.then_some(DEFAULT_SINGLE_ORDER);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for l in 1..LEVELS {
            if self.channels[l] != 2 * self.channels[l - 1] {
                return Err(Error::Config(format!(
                    "channels must double per level, got {:?}",
                    self.channels
                )));
            }
        }
        if self.channels[0] < 4 {
            return Err(Error::Config("first level needs at least 4 channels".into()));
        }
        let (h, w) = self.input_size;
        // four poolings, plus one more inside squeeze attention at the deepest level
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a non-zero multiple of 32"
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        normalize_orders(&self.mha_orders)?;
        for o in [self.encoder_single_order, self.decoder_single_order].into_iter().flatten() {
            normalize_orders(&[o])?;
        }
        for level in FIRST_MHA_LEVEL..=LEVELS {
            let c = self.channels[level - 1];
            for &o in self.mha_orders.iter().chain(&self.encoder_single_order).chain(&self.decoder_single_order) {
                crate::highorder::channel_schedule(o, c)?;
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Spatial size at 1-based `level`.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let f = 1 << (level - 1);
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    fn orders_for(&self, single: Option<usize>) -> Vec<usize> {
        match single {
            Some(o) => vec![o],
            None => self.mha_orders.clone(),
        }
    }
}

/// Forward-pass mode; training mode owns the dropout RNG.
pub struct Ctx<'a> {
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Cuts the autograd history in eval mode so finished stages free their
    /// intermediates.
    fn keep(&self, t: Tensor) -> Tensor {
        if self.train {
            t
        } else {
            t.detach()
        }
    }

    fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match (self.train, self.rng.as_deref_mut()) {
            (true, Some(rng)) => dropout(x, rate, rng),
            _ => Ok(x.clone()),
        }
    }
}

/// 3×3 convolution → batch norm → GELU.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvUnit {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), cin, cout, 3)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        gelu(&self.bn.forward(&self.conv.forward(x)?, train)?)
    }
}

/// ConvMixer block: residual depthwise 7×7 mixing followed by pointwise mixing.
#[derive(Debug, Clone)]
pub struct ConvMixer {
    depthwise: DepthwiseConv2d,
    bn1: BatchNorm2d,
    pointwise: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvMixer {
    pub const KERNEL: usize = 7;

    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv2d::new(&pb.pp("depthwise"), channels, Self::KERNEL)?,
            bn1: BatchNorm2d::new(&pb.pp("bn1"), channels)?,
            pointwise: Conv2d::new(&pb.pp("pointwise"), channels, channels, 1)?,
            bn2: BatchNorm2d::new(&pb.pp("bn2"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mixed = self.bn1.forward(&gelu(&self.depthwise.forward(x)?)?, train)?;
        let h = (x + mixed)?;
        self.bn2.forward(&gelu(&self.pointwise.forward(&h)?)?, train)
    }
}

/// Channel attention: global average pool → bottleneck MLP (reduction 4) →
/// sigmoid channel gate.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 4;

    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let hidden = (channels / Self::REDUCTION).max(1);
        Ok(Self {
            squeeze: Conv2d::new(&pb.pp("squeeze"), channels, hidden, 1)?,
            excite: Conv2d::new(&pb.pp("excite"), hidden, channels, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let gate = sigmoid(&self.excite.forward(&self.squeeze.forward(&pooled)?.relu()?)?)?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Spatial attention: channel mean and max → 7×7 convolution → sigmoid gate.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), 2, 1, 7)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let desc = Tensor::cat(&[&x.mean_keepdim(1)?, &x.max_keepdim(1)?], 1)?;
        let gate = sigmoid(&self.conv.forward(&desc)?)?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

#[derive(Debug, Clone)]
struct SkipFusion {
    cab: ChannelAttention,
    sab: SpatialAttention,
}

impl SkipFusion {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.sab.forward(&self.cab.forward(x)?)
    }
}

/// Bilinear 2× upsampling followed by a 1×1 channel reduction.
#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&bilinear_resize(x, 2 * h, 2 * w, false)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    unit: ConvUnit,
    mixer: Option<MhaBlock>,
    dropout: bool,
}

impl Stage {
    fn forward(
        &self,
        x: &Tensor,
        ctx: &mut Ctx,
        rate: f64,
    ) -> Result<(Tensor, Option<BranchActivations>)> {
        let mut h = self.unit.forward(x, ctx.is_train())?;
        let mut acts = None;
        if let Some(block) = &self.mixer {
            let (out, a) = block.forward(&h, ctx.is_train())?;
            h = out;
            acts = Some(a);
        }
        if self.dropout {
            h = ctx.dropout(&h, rate)?;
        }
        Ok((h, acts))
    }
}

/// Raw network output: logits plus the activations of the last decoder MHAblock.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub logits: Tensor,
    pub explain: Option<BranchActivations>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, 1, H, W)` sigmoid probabilities.
    pub probs: Tensor,
    /// `(B, 1, H, W)` binary mask, `probs ≥ 0.5`.
    pub mask: Tensor,
    /// One bundle per batch item (empty if no decoder block is present).
    pub explain: Vec<ExplainabilityBundle>,
}

#[derive(Debug, Clone)]
pub struct MhaUnet {
    config: NetworkConfig,
    params: ParamStore,
    encoder: Vec<Stage>,
    bottleneck: ConvMixer,
    skips: Vec<SkipFusion>,
    ups: Vec<Upsample>,
    decoder: Vec<Stage>,
    head: Conv2d,
}

impl MhaUnet {
    pub fn new(config: NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let pb = ParamBuilder::new(seed, dtype, device);
        let pb = if config.bias { pb } else { pb.without_bias() };
        Self::build(config, &pb)
    }

    pub fn build(config: NetworkConfig, pb: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut decoder = Vec::with_capacity(LEVELS);
        let mut skips = Vec::with_capacity(LEVELS);
        let mut ups = Vec::with_capacity(LEVELS - 1);
        let enc_orders = config.orders_for(config.encoder_single_order);
        let dec_orders = config.orders_for(config.decoder_single_order);
        for level in 1..=LEVELS {
            let c = ch[level - 1];
            let cin = if level == 1 { config.input_channels } else { ch[level - 2] };
            let spatial = config.level_size(level);
            let epb = pb.pp(format!("encoder{level}"));
            let dpb = pb.pp(format!("decoder{level}"));
            let (enc_mixer, dec_mixer) = if level >= FIRST_MHA_LEVEL {
                (
                    Some(MhaBlock::new(&epb.pp("mha"), c, &enc_orders, spatial, config.alpha)?),
                    Some(MhaBlock::new(&dpb.pp("mha"), c, &dec_orders, spatial, config.alpha)?),
                )
            } else {
                (None, None)
            };
            encoder.push(Stage {
                unit: ConvUnit::new(&epb, cin, c)?,
                mixer: enc_mixer,
                dropout: level >= 2,
            });
            decoder.push(Stage {
                unit: ConvUnit::new(&dpb, 2 * c, c)?,
                mixer: dec_mixer,
                dropout: level >= 2,
            });
            let spb = pb.pp(format!("skip{level}"));
            skips.push(SkipFusion {
                cab: ChannelAttention::new(&spb.pp("cab"), c)?,
                sab: SpatialAttention::new(&spb.pp("sab"))?,
            });
            if level < LEVELS {
                ups.push(Upsample {
                    conv: Conv2d::new(&pb.pp(format!("up{level}")), ch[level], c, 1)?,
                });
            }
        }
        let bottleneck = ConvMixer::new(&pb.pp("bottleneck"), ch[LEVELS - 1])?;
        let head = Conv2d::new(&pb.pp("head"), ch[0], 1, 1)?;
        Ok(Self {
            config,
            params: pb.finish(),
            encoder,
            bottleneck,
            skips,
            ups,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// The decoder MHAblock closest to the output (level 3).
    pub fn final_decoder_block(&self) -> Option<&MhaBlock> {
        self.decoder[FIRST_MHA_LEVEL - 1].mixer.as_ref()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels || (h, w) != self.config.input_size {
            return Err(Error::Shape(format!(
                "network expects (B, {}, {}, {}), got {:?}",
                self.config.input_channels,
                self.config.input_size.0,
                self.config.input_size.1,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Feature maps of levels 1–5.
    pub fn encode(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut feats: Vec<Tensor> = Vec::with_capacity(LEVELS);
        for (i, stage) in self.encoder.iter().enumerate() {
            let input = match feats.last() {
                Some(prev) => prev.max_pool2d(2)?,
                None => x.clone(),
            };
            let (h, _) = stage.forward(&input, ctx, self.config.dropout_rate)?;
            let h = ctx.keep(h);
            debug_assert_eq!(h.dim(1)?, self.config.channels[i]);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn bottleneck(&self, deepest: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(ctx.keep(self.bottleneck.forward(deepest, ctx.is_train())?))
    }

    /// Logits `(B, 1, H, W)` from encoder features and the bottleneck output.
    pub fn decode(&self, feats: &[Tensor], bottleneck: &Tensor, ctx: &mut Ctx) -> Result<NetworkOutput> {
        if feats.len() != LEVELS {
            return Err(Error::Shape(format!("decoder needs {LEVELS} feature levels, got {}", feats.len())));
        }
        let mut h = bottleneck.clone();
        let mut explain = None;
        for level in (1..=LEVELS).rev() {
            let idx = level - 1;
            if level < LEVELS {
                h = self.ups[idx].forward(&h)?;
            }
            let skip = self.skips[idx].forward(&feats[idx])?;
            let (out, acts) = self.decoder[idx].forward(&Tensor::cat(&[&h, &skip], 1)?, ctx, self.config.dropout_rate)?;
            h = ctx.keep(out);
            if let Some(mut acts) = acts {
                acts.per_order = acts.per_order.into_iter().map(|t| ctx.keep(t)).collect();
                acts.gate = ctx.keep(acts.gate);
                explain = Some(acts);
            }
        }
        Ok(NetworkOutput {
            logits: self.head.forward(&h)?,
            explain,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<NetworkOutput> {
        let feats = self.encode(x, ctx)?;
        let deepest = self.bottleneck(&feats[LEVELS - 1], ctx)?;
        self.decode(&feats, &deepest, ctx)
    }

    /// Eval-mode inference with explainability maps.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let out = self.forward(x, &mut Ctx::eval())?;
        let probs = sigmoid(&out.logits)?;
        let mask = probs.ge(0.5)?.to_dtype(probs.dtype())?;
        let explain = match &out.explain {
            Some(acts) => bundles(acts, &probs)?,
            None => Vec::new(),
        };
        Ok(Prediction { probs, mask, explain })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self.params.tensors();
        let dev = Device::Cpu;
        let text = crate::config::network_to_text(&self.config).into_bytes();
        let len = text.len();
        tensors.insert(META_CONFIG.into(), Tensor::from_vec(text, (len,), &dev)?);
        tensors.insert(
            META_VERSION.into(),
            Tensor::from_vec(vec![CHECKPOINT_FORMAT_VERSION], (1,), &dev)?,
        );
        candle_core::safetensors::save(&tensors, path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Loads a checkpoint. When `expected` is given, the embedded configuration
    /// must match it.
    pub fn load(path: &Path, expected: Option<&NetworkConfig>, dtype: DType, device: &Device) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if !path.exists() {
            return Err(fail("file not found".into()));
        }
        let tensors = candle_core::safetensors::load(path, device).map_err(|e| fail(e.to_string()))?;
        let version = tensors
            .get(META_VERSION)
            .ok_or_else(|| fail("missing format version".into()))?
            .to_vec1::<u32>()?;
        if version != [CHECKPOINT_FORMAT_VERSION] {
            return Err(fail(format!(
                "format version {version:?}, this build reads {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let bytes = tensors
            .get(META_CONFIG)
            .ok_or_else(|| fail("missing embedded configuration".into()))?
            .to_vec1::<u8>()?;
        let text = String::from_utf8(bytes).map_err(|e| fail(e.to_string()))?;
        let config = crate::config::network_from_text(&text).map_err(|e| fail(e.to_string()))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(fail(format!(
                    "configuration mismatch: checkpoint has {config:?}, expected {exp:?}"
                )));
            }
        }
        let model = Self::new(config, 0, dtype, device)?;
        model.params.assign(&tensors).map_err(|e| fail(e.to_string()))?;
        Ok(model)
    }
}

/// Channel-averaged, per-map min-max normalised order maps for every batch item.
pub fn bundles(acts: &BranchActivations, probs: &Tensor) -> Result<Vec<ExplainabilityBundle>> {
    let (b, _, ph, pw) = probs.dims4()?;
    let probs = probs.to_dtype(DType::F64)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut order_maps = BTreeMap::new();
        for (&order, map) in acts.orders.iter().zip(&acts.per_order) {
            let (_, _, h, w) = map.dims4()?;
            let mean = map.get(i)?.mean(0)?.to_dtype(DType::F64)?;
            let data = mean.flatten_all()?.to_vec1::<f64>()?;
            order_maps.insert(order, Heatmap::new(h, w, data)?.min_max_normalized());
        }
        let p = probs.get(i)?.flatten_all()?.to_vec1::<f64>()?;
        out.push(ExplainabilityBundle {
            order_maps,
            probability: Heatmap::new(ph, pw, p)?,
        });
    }
    Ok(out)
}
