//! Multiple high-order attention interaction block (MHAblock).

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::highorder::{HighOrderInteraction, InteractionConfig, SqueezeAttention};
use crate::nn::{
    expect_channels, gelu, matmul_last, sigmoid, softmax, BatchNorm2d, Conv2d, DepthwiseConv2d,
    ParamBuilder,
};

pub const MAX_ORDER: usize = 5;
pub const ALL_ORDERS: [usize; 5] = [1, 2, 3, 4, 5];

/// Inverted external attention block.
///
/// Pointwise expansion and a depthwise 3×3 convolution produce per-pixel
/// tokens; two memory units shared across the batch turn them into an
/// attention readout (softmax over pixels, then L1 normalisation over memory
/// slots) that gates the tokens before pointwise compression and the residual.
#[derive(Debug, Clone)]
pub struct Ieab {
    channels: usize,
    hidden: usize,
    expand: Conv2d,
    depthwise: DepthwiseConv2d,
    memory_key: Var,
    memory_value: Var,
    compress: Conv2d,
}

impl Ieab {
    pub const EXPANSION: usize = 4;
    pub const MEMORY_SLOTS: usize = 64;

    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let hidden = channels * Self::EXPANSION;
        let slots = Self::MEMORY_SLOTS;
        Ok(Self {
            channels,
            hidden,
            expand: Conv2d::new(&pb.pp("expand"), channels, hidden, 1)?,
            depthwise: DepthwiseConv2d::new(&pb.pp("depthwise"), hidden, 3)?,
            memory_key: pb.uniform("memory_key", &[hidden, slots], 1.0 / (hidden as f64).sqrt())?,
            memory_value: pb.uniform("memory_value", &[slots, hidden], 1.0 / (slots as f64).sqrt())?,
            compress: Conv2d::new(&pb.pp("compress"), hidden, channels, 1)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn compress(&self) -> &Conv2d {
        &self.compress
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w) = expect_channels(x, self.channels, "IEAB")?;
        let tokens = gelu(&self.depthwise.forward(&gelu(&self.expand.forward(x)?)?)?)?;
        // (B, hidden, N) -> (B, N, hidden)
        let seq = tokens.reshape((b, self.hidden, h * w))?.transpose(1, 2)?;
        let attn = softmax(&matmul_last(&seq, self.memory_key.as_tensor())?, 1)?;
        let attn = attn.broadcast_div(&(attn.sum_keepdim(2)? + 1e-9)?)?;
        let readout = matmul_last(&attn, self.memory_value.as_tensor())?;
        let readout = readout.transpose(1, 2)?.reshape((b, self.hidden, h, w))?;
        let gated = (tokens * readout)?;
        Ok((x + self.compress.forward(&gated)?)?)
    }
}

/// Vote block: squeeze attention over the concatenated branch outputs, then a
/// 1×1 convolution back to `C` channels, batch norm and a sigmoid gate.
///
/// The squeeze attention here runs on `branches × C` channels, so its
/// convolutions are pointwise; 3×3 kernels at that width would dominate the
/// cost of the whole network.
#[derive(Debug, Clone)]
pub struct VoteBlock {
    channels: usize,
    branches: usize,
    attention: SqueezeAttention,
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl VoteBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, branches: usize) -> Result<Self> {
        if branches == 0 {
            return Err(Error::Config("vote block needs at least one branch".into()));
        }
        let width = channels * branches;
        Ok(Self {
            channels,
            branches,
            attention: SqueezeAttention::with_kernel(&pb.pp("sa"), width, 1)?,
            conv: Conv2d::new(&pb.pp("conv"), width, channels, 1)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), channels)?,
        })
    }

    pub fn attention(&self) -> &SqueezeAttention {
        &self.attention
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn bn(&self) -> &BatchNorm2d {
        &self.bn
    }

    pub fn forward(&self, concat_out: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = concat_out.dims4()?;
        if c != self.channels * self.branches {
            return Err(Error::Shape(format!(
                "vote block expects {} x {} = {} channels, got {c}",
                self.branches,
                self.channels,
                self.channels * self.branches
            )));
        }
        let attended = self.attention.forward(concat_out)?;
        sigmoid(&self.bn.forward(&self.conv.forward(&attended)?, train)?)
    }
}

/// Everything one MHAblock pass exposes for explainability.
#[derive(Debug, Clone)]
pub struct BranchActivations {
    pub orders: Vec<usize>,
    /// One `(B, C, H, W)` map per entry of `orders`.
    pub per_order: Vec<Tensor>,
    /// Vote gate, strictly inside (0, 1).
    pub gate: Tensor,
}

impl BranchActivations {
    pub fn get(&self, order: usize) -> Option<&Tensor> {
        self.orders
            .iter()
            .position(|&o| o == order)
            .map(|i| &self.per_order[i])
    }
}

/// Validates and normalises an order subset (sorted, unique, within 1..=5).
pub fn normalize_orders(orders: &[usize]) -> Result<Vec<usize>> {
    if orders.is_empty() {
        return Err(Error::Config("at least one interaction order is required".into()));
    }
    let mut v = orders.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.len() != orders.len() {
        return Err(Error::Config(format!("duplicate orders in {orders:?}")));
    }
    if let Some(bad) = v.iter().find(|&&o| o == 0 || o > MAX_ORDER) {
        return Err(Error::Config(format!(
            "order {bad} outside 1..={MAX_ORDER}"
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct MhaBlock {
    channels: usize,
    ieab: Ieab,
    orders: Vec<usize>,
    branches: Vec<HighOrderInteraction>,
    vote: VoteBlock,
}

impl MhaBlock {
    /// Builds a block with one HA branch per entry of `orders` (all five for
    /// the full block, a subset for ablations).
    pub fn new(
        pb: &ParamBuilder,
        channels: usize,
        orders: &[usize],
        spatial: (usize, usize),
        alpha: f64,
    ) -> Result<Self> {
        let orders = normalize_orders(orders)?;
        let mut branches = Vec::with_capacity(orders.len());
        for &order in &orders {
            let cfg = InteractionConfig::new(order, channels, spatial)?.with_alpha(alpha)?;
            branches.push(HighOrderInteraction::new(&pb.pp(format!("ha{order}")), cfg)?);
        }
        Ok(Self {
            channels,
            ieab: Ieab::new(&pb.pp("ieab"), channels)?,
            vote: VoteBlock::new(&pb.pp("vote"), channels, orders.len())?,
            orders,
            branches,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn ieab(&self) -> &Ieab {
        &self.ieab
    }

    pub fn branches(&self) -> &[HighOrderInteraction] {
        &self.branches
    }

    pub fn vote(&self) -> &VoteBlock {
        &self.vote
    }

    /// `out = x ⊙ gate + x`.
    pub fn fuse(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
        Ok(((x * gate)? + x)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, BranchActivations)> {
        expect_channels(x, self.channels, "MHA block")?;
        let shared = self.ieab.forward(x)?;
        let per_order = self
            .branches
            .iter()
            .map(|ha| ha.forward(&shared))
            .collect::<Result<Vec<_>>>()?;
        let concat_out = Tensor::cat(&per_order, 1)?;
        let gate = self.vote.forward(&concat_out, train)?;
        let out = Self::fuse(x, &gate)?;
        Ok((
            out,
            BranchActivations {
                orders: self.orders.clone(),
                per_order,
                gate,
            },
        ))
    }
}
