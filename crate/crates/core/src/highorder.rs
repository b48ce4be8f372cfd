//! High-order attention interaction (HA).
//!
//! An input map with `C` channels is projected to `2C` channels and split into
//! a gating seed `X_0` plus one branch input `Y_k` per order. Each order step
//! multiplies the running state with the global-local filtered branch,
//! projects it to the next order's width and divides by the stabilisation
//! factor `alpha`. From the second step on, the running state first passes
//! through squeeze attention.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{expect_channels, gelu, sigmoid, ChannelNorm, Conv2d, ParamBuilder};
use crate::spectral::{one_sided_width, resample_filter, SpectralBasis};

pub const DEFAULT_ALPHA: f64 = 3.0;

/// Per-order channel widths `C_k = C / 2^(n-k-1)` for `k = 0..n`.
pub fn channel_schedule(order: usize, channels: usize) -> Result<Vec<usize>> {
    if order == 0 {
        return Err(Error::Config("interaction order must be at least 1".into()));
    }
    if order > 31 {
        return Err(Error::Config(format!("interaction order {order} is too large")));
    }
    let divisor = 1usize << (order - 1);
    if channels == 0 || !channels.is_multiple_of(divisor) {
        return Err(Error::Config(format!(
            "order n={order} with C={channels}: C/2^(n-1) = {channels}/{divisor} is not an integer width"
        )));
    }
    Ok((0..order).map(|k| channels >> (order - k - 1)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionConfig {
    pub order: usize,
    pub channels: usize,
    pub alpha: f64,
    /// Nominal `(height, width)` the frequency filters are stored at.
    pub spatial: (usize, usize),
}

impl InteractionConfig {
    pub fn new(order: usize, channels: usize, spatial: (usize, usize)) -> Result<Self> {
        let cfg = Self {
            order,
            channels,
            alpha: DEFAULT_ALPHA,
            spatial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        channel_schedule(self.order, self.channels)?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "stabilisation factor must be positive, got {}",
                self.alpha
            )));
        }
        if self.spatial.0 == 0 || self.spatial.1 == 0 {
            return Err(Error::Config("spatial size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<usize> {
        channel_schedule(self.order, self.channels).expect("validated at construction")
    }
}

/// Global-local filter: the first half of the channels goes through a 3×3
/// convolution, the rest through a learnable frequency-domain mask; the two
/// halves are concatenated and mixed by a 1×1 convolution.
///
/// For odd widths the local half is the smaller one (a single channel is
/// filtered globally only).
#[derive(Debug, Clone)]
pub struct GlobalLocalFilter {
    channels: usize,
    local_channels: usize,
    local: Option<Conv2d>,
    filter_re: Var,
    filter_im: Var,
    nominal: (usize, usize),
    mix: Conv2d,
}

impl GlobalLocalFilter {
    pub fn new(pb: &ParamBuilder, channels: usize, nominal: (usize, usize)) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("global-local filter needs at least one channel".into()));
        }
        let local_channels = channels / 2;
        let global_channels = channels - local_channels;
        let local = if local_channels > 0 {
            Some(Conv2d::new(&pb.pp("local"), local_channels, local_channels, 3)?)
        } else {
            None
        };
        let shape = [global_channels, nominal.0, one_sided_width(nominal.1)];
        Ok(Self {
            channels,
            local_channels,
            local,
            filter_re: pb.normal("filter_re", &shape, 0.02)?,
            filter_im: pb.normal("filter_im", &shape, 0.02)?,
            nominal,
            mix: Conv2d::new(&pb.pp("mix"), channels, channels, 1)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn local_channels(&self) -> usize {
        self.local_channels
    }

    pub fn global_channels(&self) -> usize {
        self.channels - self.local_channels
    }

    pub fn local_conv(&self) -> Option<&Conv2d> {
        self.local.as_ref()
    }

    pub fn filter_re(&self) -> &Var {
        &self.filter_re
    }

    pub fn filter_im(&self) -> &Var {
        &self.filter_im
    }

    pub fn mix(&self) -> &Conv2d {
        &self.mix
    }

    /// Frequency filter weights on an `(h, w)` grid; resampled if the grid
    /// differs from the nominal one.
    pub fn filter_for(&self, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        if (h, w) == self.nominal {
            return Ok((self.filter_re.as_tensor().clone(), self.filter_im.as_tensor().clone()));
        }
        let wf = one_sided_width(w);
        Ok((
            resample_filter(self.filter_re.as_tensor(), h, wf)?,
            resample_filter(self.filter_im.as_tensor(), h, wf)?,
        ))
    }

    /// Frequency-domain branch alone, on the global channel slice.
    pub fn global_branch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = expect_channels(x, self.global_channels(), "global branch")?;
        let basis = SpectralBasis::new(h, w, x.dtype(), x.device())?;
        let (re, im) = self.filter_for(h, w)?;
        basis.filter(x, &re, &im)
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        expect_channels(y, self.channels, "global-local filter")?;
        let global_in = y.narrow(1, self.local_channels, self.global_channels())?;
        let global = self.global_branch(&global_in)?;
        let joined = match &self.local {
            Some(conv) => {
                let local = conv.forward(&y.narrow(1, 0, self.local_channels)?)?;
                Tensor::cat(&[&local, &global], 1)?
            }
            None => global,
        };
        self.mix.forward(&joined)
    }
}

/// Squeeze attention: `O = O_att ⊙ X_res + O_att`, where `X_res` is a two-layer
/// convolutional main path (3×3 by default) and `O_att` is a sigmoid gate computed at half
/// resolution (2× average pool → conv → nearest 2× upsample).
#[derive(Debug, Clone)]
pub struct SqueezeAttention {
    channels: usize,
    main1: Conv2d,
    main2: Conv2d,
    attention: Conv2d,
}

impl SqueezeAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Self::with_kernel(pb, channels, 3)
    }

    /// Same structure with `kernel`×`kernel` convolutions on both paths.
    pub fn with_kernel(pb: &ParamBuilder, channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        Ok(Self {
            channels,
            main1: Conv2d::new(&pb.pp("main1"), channels, channels, kernel)?,
            main2: Conv2d::new(&pb.pp("main2"), channels, channels, kernel)?,
            attention: Conv2d::new(&pb.pp("attention"), channels, channels, kernel)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn main_convs(&self) -> (&Conv2d, &Conv2d) {
        (&self.main1, &self.main2)
    }

    pub fn attention_conv(&self) -> &Conv2d {
        &self.attention
    }

    pub fn main_path(&self, x: &Tensor) -> Result<Tensor> {
        gelu(&self.main2.forward(&gelu(&self.main1.forward(x)?)?)?)
    }

    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = expect_channels(x, self.channels, "squeeze attention")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "squeeze attention pools by 2; {h}x{w} is not divisible"
            )));
        }
        let pooled = x.avg_pool2d(2)?;
        let att = self.attention.forward(&pooled)?.upsample_nearest2d(h, w)?;
        sigmoid(&att)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gate = self.attention_map(x)?;
        let residual = self.main_path(x)?;
        Ok(((&gate * residual)? + &gate)?)
    }
}

/// How many multiplicative gating steps and squeeze-attention calls one
/// forward pass performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InteractionTrace {
    pub gating_steps: usize,
    pub attention_calls: usize,
}

/// The HA layer of one fixed order.
#[derive(Debug, Clone)]
pub struct HighOrderInteraction {
    config: InteractionConfig,
    schedule: Vec<usize>,
    proj_in: Conv2d,
    filters: Vec<GlobalLocalFilter>,
    attentions: Vec<SqueezeAttention>,
    projections: Vec<Conv2d>,
    proj_out: Conv2d,
}

impl HighOrderInteraction {
    pub fn new(pb: &ParamBuilder, config: InteractionConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule();
        let c = config.channels;
        let n = config.order;
        let proj_in = Conv2d::new(&pb.pp("proj_in"), c, 2 * c, 1)?;
        let mut filters = Vec::with_capacity(n);
        let mut attentions = Vec::with_capacity(n.saturating_sub(1));
        let mut projections = Vec::with_capacity(n);
        for (k, &width) in schedule.iter().enumerate() {
            filters.push(GlobalLocalFilter::new(&pb.pp(format!("glf{k}")), width, config.spatial)?);
            if k > 0 {
                attentions.push(SqueezeAttention::new(&pb.pp(format!("sa{k}")), width)?);
            }
            let next = schedule.get(k + 1).copied().unwrap_or(c);
            projections.push(Conv2d::new(&pb.pp(format!("pro{k}")), width, next, 1)?);
        }
        let proj_out = Conv2d::new(&pb.pp("proj_out"), c, c, 1)?;
        Ok(Self {
            config,
            schedule,
            proj_in,
            filters,
            attentions,
            projections,
            proj_out,
        })
    }

    pub fn config(&self) -> &InteractionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn proj_in(&self) -> &Conv2d {
        &self.proj_in
    }

    pub fn proj_out(&self) -> &Conv2d {
        &self.proj_out
    }

    pub fn filters(&self) -> &[GlobalLocalFilter] {
        &self.filters
    }

    pub fn attentions(&self) -> &[SqueezeAttention] {
        &self.attentions
    }

    pub fn projections(&self) -> &[Conv2d] {
        &self.projections
    }

    /// Splits `Pro_in(x)` (width `2C`) into `X_0` and `[Y_0, …, Y_{n-1}]`.
    pub fn input_projection(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        expect_channels(x, self.config.channels, "input projection")?;
        let fused = self.proj_in.forward(x)?;
        let x0 = fused.narrow(1, 0, self.schedule[0])?;
        let mut offset = self.schedule[0];
        let mut ys = Vec::with_capacity(self.schedule.len());
        for &width in &self.schedule {
            ys.push(fused.narrow(1, offset, width)?);
            offset += width;
        }
        debug_assert_eq!(offset, 2 * self.config.channels);
        Ok((x0, ys))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, InteractionTrace)> {
        let (x0, ys) = self.input_projection(x)?;
        let mut trace = InteractionTrace::default();
        let mut state = x0;
        for (k, y) in ys.iter().enumerate() {
            // no squeeze attention before the first gating step
            let gate_src = if k == 0 {
                state
            } else {
                trace.attention_calls += 1;
                self.attentions[k - 1].forward(&state)?
            };
            let filtered = self.filters[k].forward(y)?;
            let gated = (gate_src * filtered)?;
            trace.gating_steps += 1;
            state = (self.projections[k].forward(&gated)? / self.config.alpha)?;
        }
        Ok((self.proj_out.forward(&state)?, trace))
    }
}

/// Transformer-style block with the HA layer in place of self-attention:
/// `x + HA(norm(x))` followed by `x + FFN(norm(x))`.
#[derive(Debug, Clone)]
pub struct HaBlock {
    norm1: ChannelNorm,
    ha: HighOrderInteraction,
    norm2: ChannelNorm,
    ffn_in: Conv2d,
    ffn_out: Conv2d,
}

impl HaBlock {
    pub const FFN_EXPANSION: usize = 4;

    pub fn new(pb: &ParamBuilder, config: InteractionConfig) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            norm1: ChannelNorm::new(&pb.pp("norm1"), c)?,
            ha: HighOrderInteraction::new(&pb.pp("ha"), config)?,
            norm2: ChannelNorm::new(&pb.pp("norm2"), c)?,
            ffn_in: Conv2d::new(&pb.pp("ffn_in"), c, c * Self::FFN_EXPANSION, 1)?,
            ffn_out: Conv2d::new(&pb.pp("ffn_out"), c * Self::FFN_EXPANSION, c, 1)?,
        })
    }

    pub fn interaction(&self) -> &HighOrderInteraction {
        &self.ha
    }

    pub fn ffn_out(&self) -> &Conv2d {
        &self.ffn_out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.ha.forward(&self.norm1.forward(x)?)?)?;
        let h = gelu(&self.ffn_in.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.ffn_out.forward(&h)?)?)
    }
}
