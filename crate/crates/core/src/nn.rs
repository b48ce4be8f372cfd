//! Parameter bookkeeping and the handful of layers the blocks are built from.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

struct BuilderState {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    bias: bool,
}

/// Hands out named, seeded parameters while a model is being constructed.
///
/// Child builders created with [`ParamBuilder::pp`] share the same store and
/// RNG, so construction order fully determines the initial values.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
                bias: true,
            })),
            prefix: String::new(),
        }
    }

    /// Builder whose layers are created without additive bias terms.
    pub fn without_bias(self) -> Self {
        self.state.borrow_mut().bias = false;
        self
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn bias_enabled(&self) -> bool {
        self.state.borrow().bias
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&self, name: &str, values: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Var> {
        let full = self.full_name(name);
        let mut state = self.state.borrow_mut();
        if state.params.contains_key(&full) || state.buffers.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter name {full}")));
        }
        let tensor = Tensor::from_vec(values, shape, &state.device)?.to_dtype(state.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        if buffer {
            state.buffers.insert(full, var.clone());
        } else {
            state.params.insert(full, var.clone());
        }
        Ok(var)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = {
            let mut state = self.state.borrow_mut();
            (0..n)
                .map(|_| state.rng.random_range(-bound..=bound))
                .collect()
        };
        self.register(name, values, shape, false)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = {
            let mut state = self.state.borrow_mut();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut state.rng);
                    z * std
                })
                .collect()
        };
        self.register(name, values, shape, false)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape, false)
    }

    /// Non-trainable state (e.g. running statistics) that is still checkpointed.
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape, true)
    }

    pub fn finish(&self) -> ParamStore {
        let state = self.state.borrow();
        ParamStore {
            params: state.params.clone(),
            buffers: state.buffers.clone(),
        }
    }
}

/// Every trainable tensor and buffer of a model, addressable by dotted name.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar trainable parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Order-sensitive digest of every trainable value's bit pattern.
    pub fn checksum(&self) -> Result<u64> {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for (name, var) in &self.params {
            for b in name.bytes() {
                hash = (hash ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            let values = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in values {
                hash = (hash ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        Ok(hash)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every named value from `tensors`; names and shapes must match exactly.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

pub(crate) fn expect_channels(x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != channels {
        return Err(Error::Shape(format!(
            "{what} expects {channels} channels, got {c}"
        )));
    }
    Ok((b, h, w))
}

/// Standard 2-D convolution, stride 1, "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if pb.bias_enabled() {
            Some(pb.uniform("bias", &[out_channels], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = expect_channels(x, self.in_channels, "conv")?;
        // Small maps and pointwise kernels go through a single GEMM, whose
        // backward pass is far cheaper than the transposed convolution.
        let y = if self.kernel == 1 || h * w <= GEMM_CONV_MAX_PIXELS {
            self.gemm_forward(x)?
        } else {
            x.conv2d(self.weight.as_tensor(), self.kernel / 2, 1, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

const GEMM_CONV_MAX_PIXELS: usize = 32 * 32;

impl Conv2d {
    fn gemm_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let k = self.kernel;
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let p = k / 2;
            let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    taps.push(padded.narrow(2, i, h)?.narrow(3, j, w)?);
                }
            }
            Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))?
        };
        let ck = c * k * k;
        let cols = cols.transpose(0, 1)?.contiguous()?.reshape((ck, b * h * w))?;
        let y = self.weight.reshape((self.out_channels, ck))?.matmul(&cols)?;
        Ok(y
            .reshape((self.out_channels, b, h, w))?
            .transpose(0, 1)?
            .contiguous()?)
    }
}

/// Per-channel k×k convolution written as a sum of shifted slices, which keeps
/// the backward pass on plain elementwise ops.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    weight: Var,
    bias: Option<Var>,
    channels: usize,
    kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new(pb: &ParamBuilder, channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / (kernel as f64);
        let weight = pb.uniform("weight", &[channels, kernel * kernel], bound)?;
        let bias = if pb.bias_enabled() {
            Some(pb.uniform("bias", &[channels], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            channels,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = expect_channels(x, self.channels, "depthwise conv")?;
        let pad = self.kernel / 2;
        let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.kernel {
            for j in 0..self.kernel {
                let tap = self
                    .weight
                    .narrow(1, i * self.kernel + j, 1)?
                    .reshape((1, self.channels, 1, 1))?;
                let term = padded
                    .narrow(2, i, h)?
                    .narrow(3, j, w)?
                    .broadcast_mul(&tap)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        let y = acc.expect("kernel is at least 1x1");
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over (N, H, W) with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn beta(&self) -> &Var {
        &self.beta
    }

    pub fn running_mean(&self) -> &Var {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Var {
        &self.running_var
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, h, w) = expect_channels(x, self.channels, "batch norm")?;
        let shape = (1, self.channels, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.reshape(shape)?,
                self.running_var.reshape(shape)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Layer normalisation across channels at every pixel (channels-last layer norm
/// expressed on an NCHW tensor).
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    gamma: Var,
    beta: Var,
    channels: usize,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            channels,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.channels, "channel norm")?;
        let shape = (1, self.channels, 1, 1);
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Inverted dropout with an explicit RNG so that training runs are reproducible.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// `x @ m` over the last axis: `x` is `(..., n)`, `m` is `(n, k)`.
pub(crate) fn matmul_last(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = *dims.last().expect("rank >= 1");
    let k = m.dim(1)?;
    let rows = x.elem_count() / n.max(1);
    let y = x.contiguous()?.reshape((rows, n))?.matmul(m)?;
    let mut out = dims;
    *out.last_mut().expect("rank >= 1") = k;
    Ok(y.reshape(out)?)
}

/// Applies `m` of shape `(k, n)` along the second-to-last axis of `x`
/// (`(..., n, w)` → `(..., k, w)`).
pub(crate) fn matmul_rows(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let rank = x.rank();
    let xt = x.transpose(rank - 2, rank - 1)?;
    let y = matmul_last(&xt, &m.t()?.contiguous()?)?;
    Ok(y.transpose(rank - 2, rank - 1)?.contiguous()?)
}

/// Row-major `(out, inp)` linear interpolation weights.
///
/// With `align_corners` the end points of both grids coincide; otherwise
/// pixel centres are aligned (half-pixel offsets, clamped at the border).
pub fn interpolation_matrix(out: usize, inp: usize, align_corners: bool) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let src = if align_corners {
            if out == 1 {
                0.0
            } else {
                o as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
            }
        } else {
            ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0)
        };
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[o * inp + lo] += 1.0 - frac;
        m[o * inp + hi] += frac;
    }
    m
}

/// Separable bilinear resize of the two trailing axes.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mh = Tensor::from_vec(interpolation_matrix(out_h, h, align_corners), (out_h, h), dev)?
        .to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(interpolation_matrix(out_w, w, align_corners), (out_w, w), dev)?
        .to_dtype(x.dtype())?;
    let y = matmul_rows(x, &mh)?;
    matmul_last(&y, &mw.t()?.contiguous()?)
}

/// Sum of absolute values, used for dead-branch checks.
pub fn abs_sum(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?)
}

pub(crate) fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_reproducible_and_rejects_duplicates() {
        let a = ParamBuilder::new(7, DType::F64, &Device::Cpu);
        let b = ParamBuilder::new(7, DType::F64, &Device::Cpu);
        let va = a.pp("x").uniform("w", &[3, 4], 1.0).unwrap();
        let vb = b.pp("x").uniform("w", &[3, 4], 1.0).unwrap();
        assert_eq!(
            va.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert!(a.pp("x").uniform("w", &[1], 1.0).is_err());
        assert_eq!(a.finish().checksum().unwrap(), b.finish().checksum().unwrap());
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for &(o, i, ac) in &[(8, 4, false), (4, 8, false), (5, 3, true), (1, 4, true)] {
            let m = interpolation_matrix(o, i, ac);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // identity when sizes agree
        let m = interpolation_matrix(5, 5, true);
        for r in 0..5 {
            assert_eq!(m[r * 5 + r], 1.0);
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let pb = ParamBuilder::new(3, DType::F64, &Device::Cpu);
        let dw = DepthwiseConv2d::new(&pb, 4, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 6), &Device::Cpu).unwrap();
        let y = dw.forward(&x).unwrap();
        let k = dw.weight.reshape((4, 1, 3, 3)).unwrap();
        let reference = x
            .conv2d(&k, 1, 1, 1, 4)
            .unwrap()
            .broadcast_add(&dw.bias.as_ref().unwrap().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let diff = (y - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn gemm_conv_matches_direct_conv() {
        for k in [1, 3, 7] {
            let pb = ParamBuilder::new(5, DType::F64, &Device::Cpu).without_bias();
            let conv = Conv2d::new(&pb, 3, 5, k).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 7), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let reference = x.conv2d(conv.weight(), k / 2, 1, 1, 1).unwrap();
            let diff = (y - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&pb, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (3, 2, 4, 4), &Device::Cpu).unwrap();
        let y = bn.forward(&x, false).unwrap();
        let expected = (&x / (1.0f64 + 1e-5).sqrt()).unwrap();
        let diff = (y - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        bn.forward(&x, true).unwrap();
        let rm = bn.running_mean.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(rm.iter().any(|v| *v != 0.0));
    }
}
